use std::collections::HashMap;

use super::{matmul_raw, transpose_raw, ParamId, ParamStore, Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn node_id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    SubCol(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    ClampMin(Var, f64),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        input: Var,
        start: usize,
    },
    SliceCols {
        input: Var,
        start: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Pick {
        input: Var,
        idx: Vec<usize>,
    },
    L2Normalize {
        input: Var,
        norms: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run record of tensor operations.
///
/// Nodes are appended in evaluation order, so a reverse sweep visits every
/// node after all of its consumers. Parameters from the bound
/// [`ParamStore`] are copied in lazily, once per tape.
pub struct Tape<'a> {
    store: Option<&'a ParamStore>,
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::without_params()
    }
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    /// A tape with no parameter store; only leaves and constants.
    pub fn without_params() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a parameter from the store (once per tape).
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let store = self
            .store
            .expect("Tape::param called on a tape without a parameter store");
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.bound.insert(id, v);
        v
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound.iter().map(|(&p, &v)| (p, v))
    }

    /// Value-identical copy cut out of the gradient graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let data = matmul_raw(av.data(), bv.data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(TensorError::Dimension {
                op: "transpose",
                msg: format!("expected a matrix, got shape {:?}", av.shape()),
            });
        }
        let (r, c) = (av.shape()[0], av.shape()[1]);
        let data = transpose_raw(av.data(), r, c);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![c, r], data)?, Op::Transpose(a), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        let (_, n) = av.dims2();
        if rv.numel() != n || av.rank() == 0 {
            return Err(TensorError::Shape {
                op: "add_row",
                left: av.shape().to_vec(),
                right: rv.shape().to_vec(),
            });
        }
        let data = av
            .data()
            .chunks(n)
            .flat_map(|r| r.iter().zip(rv.data()).map(|(x, b)| x + b))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    /// Subtracts `col[i]` from every entry of row `i`.
    pub fn sub_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(col));
        let (m, n) = av.dims2();
        if cv.numel() != m || av.rank() != 2 {
            return Err(TensorError::Shape {
                op: "sub_col",
                left: av.shape().to_vec(),
                right: cv.shape().to_vec(),
            });
        }
        let mut data = av.data().to_vec();
        for (i, r) in data.chunks_mut(n).enumerate() {
            let c = cv.data()[i];
            r.iter_mut().for_each(|x| *x -= c);
        }
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, col]);
        Ok(self.push(value, Op::SubCol(a, col), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if let Some(bad) = av.data().iter().find(|&&x| x.is_nan() || x <= 0.0) {
            return Err(TensorError::Numeric {
                op: "log",
                msg: format!("non-positive input {bad}"),
            });
        }
        let value = av.map(f64::ln);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Log(a), rg))
    }

    /// `max(x, min)` elementwise; no gradient where the floor is active.
    pub fn clamp_min(&mut self, a: Var, min: f64) -> Var {
        let value = self.value(a).map(|x| x.max(min));
        let rg = self.rg(&[a]);
        self.push(value, Op::ClampMin(a, min), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + gelu_inner(x).tanh()));
        let rg = self.rg(&[a]);
        self.push(value, Op::Gelu(a), rg)
    }

    fn check_finite_rows(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        let av = self.value(a);
        if av.rank() == 0 {
            return Err(TensorError::Dimension {
                op,
                msg: "expected at least a vector".into(),
            });
        }
        if av.has_nan() {
            return Err(TensorError::Numeric {
                op,
                msg: "NaN input".into(),
            });
        }
        Ok(av.dims2())
    }

    /// Row-wise softmax with max subtraction. Entries may be `-inf` (masked)
    /// as long as every row keeps one finite entry.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (_, n) = self.check_finite_rows("softmax_rows", a)?;
        let av = self.value(a);
        let mut data = Vec::with_capacity(av.numel());
        for row in av.data().chunks(n) {
            let lse = row_logsumexp("softmax_rows", row)?;
            data.extend(row.iter().map(|&x| (x - lse).exp()));
        }
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (_, n) = self.check_finite_rows("log_softmax_rows", a)?;
        let av = self.value(a);
        let mut data = Vec::with_capacity(av.numel());
        for row in av.data().chunks(n) {
            let lse = row_logsumexp("log_softmax_rows", row)?;
            data.extend(row.iter().map(|&x| x - lse));
        }
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::LogSoftmax(a), rg))
    }

    /// `log Σ_j exp(x_ij)` per row, returning a vector of length `m`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.check_finite_rows("logsumexp_rows", a)?;
        let av = self.value(a);
        let data = av
            .data()
            .chunks(n)
            .map(|row| row_logsumexp("logsumexp_rows", row))
            .collect::<Result<Vec<_>>>()?;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::vector(data), Op::LogSumExp(a), rg)).inspect(|&v| {
            debug_assert_eq!(self.value(v).numel(), m);
        })
    }

    /// Column-wise maximum over rows, skipping rows where `keep[i]` is false.
    /// Ties route the gradient to the lowest-index row.
    pub fn max_pool_rows(&mut self, a: Var, keep: Option<&[bool]>) -> Result<Var> {
        let av = self.value(a);
        let (s, d) = av.dims2();
        if av.rank() != 2 || s == 0 {
            return Err(TensorError::Dimension {
                op: "max_pool_rows",
                msg: format!("need at least one row, got shape {:?}", av.shape()),
            });
        }
        if let Some(k) = keep {
            if k.len() != s {
                return Err(TensorError::Shape {
                    op: "max_pool_rows",
                    left: av.shape().to_vec(),
                    right: vec![k.len()],
                });
            }
            if !k.iter().any(|&x| x) {
                return Err(TensorError::Dimension {
                    op: "max_pool_rows",
                    msg: "every row is masked".into(),
                });
            }
        }
        let mut out = vec![f64::NEG_INFINITY; d];
        let mut argmax = vec![usize::MAX; d];
        for i in 0..s {
            if keep.is_some_and(|k| !k[i]) {
                continue;
            }
            for (j, &x) in av.row(i).iter().enumerate() {
                if argmax[j] == usize::MAX || x > out[j] {
                    out[j] = x;
                    argmax[j] = i;
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::vector(out), Op::MaxPool { input: a, argmax }, rg))
    }

    /// Row-wise layer normalization with learned gain and shift.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims2();
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(TensorError::Shape {
                op: "layer_norm",
                left: xv.shape().to_vec(),
                right: self.value(gain).shape().to_vec(),
            });
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = Vec::with_capacity(m * n);
        let mut rstd = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for row in xv.data().chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Gathers rows of a `V×d` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(TensorError::Dimension {
                op: "embedding",
                msg: format!("table must be a matrix, got {:?}", tv.shape()),
            });
        }
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::Index {
                    op: "embedding",
                    index: id,
                    size: vocab,
                });
            }
            data.extend_from_slice(tv.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Stacks matrices (or vectors, as single rows) vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::Dimension {
            op: "concat_rows",
            msg: "nothing to concatenate".into(),
        })?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != cols || pv.rank() == 0 || pv.rank() > 2 {
                return Err(TensorError::Shape {
                    op: "concat_rows",
                    left: self.value(*first).shape().to_vec(),
                    right: pv.shape().to_vec(),
                });
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::Dimension {
            op: "concat_cols",
            msg: "nothing to concatenate".into(),
        })?;
        let rows = self.value(*first).rows();
        let mut total = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != rows || pv.rank() != 2 {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    left: self.value(*first).shape().to_vec(),
                    right: pv.shape().to_vec(),
                });
            }
            total += pv.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = av.dims2();
        if av.rank() != 2 || start + len > m || len == 0 {
            return Err(TensorError::Index {
                op: "slice_rows",
                index: start + len,
                size: m,
            });
        }
        let data = av.data()[start * n..(start + len) * n].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(vec![len, n], data)?,
            Op::SliceRows { input: a, start },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = av.dims2();
        if av.rank() != 2 || start + len > n || len == 0 {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: start + len,
                size: n,
            });
        }
        let data = av
            .data()
            .chunks(n)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(vec![m, len], data)?,
            Op::SliceCols { input: a, start },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.data().iter().sum::<f64>() / av.numel() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Selects `a[i, idx[i]]` for every row `i`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = av.dims2();
        if idx.len() != m || av.rank() != 2 {
            return Err(TensorError::Shape {
                op: "pick",
                left: av.shape().to_vec(),
                right: vec![idx.len()],
            });
        }
        let mut data = Vec::with_capacity(m);
        for (i, &j) in idx.iter().enumerate() {
            if j >= n {
                return Err(TensorError::Index {
                    op: "pick",
                    index: j,
                    size: n,
                });
            }
            data.push(av.at(i, j));
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::vector(data),
            Op::Pick {
                input: a,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (_, n) = av.dims2();
        if av.rank() != 2 {
            return Err(TensorError::Dimension {
                op: "l2_normalize_rows",
                msg: format!("expected a matrix, got {:?}", av.shape()),
            });
        }
        let mut norms = Vec::with_capacity(av.rows());
        let mut data = Vec::with_capacity(av.numel());
        for row in av.data().chunks(n) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            norms.push(norm);
            data.extend(row.iter().map(|x| x / norm));
        }
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::L2Normalize { input: a, norms }, rg))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.map(|d| Tensor::new(node.value.shape().to_vec(), d).expect("grad shape"))
            })
            .collect();
        Ok(Gradients {
            grads,
            params: self.bound.clone(),
        })
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.requires_grad(*a) {
                    let bt = transpose_raw(bv.data(), k, n);
                    let ga = matmul_raw(g, &bt, m, n, k);
                    self.acc(grads, *a, |buf| add_into(buf, &ga));
                }
                if self.requires_grad(*b) {
                    let at = transpose_raw(av.data(), m, k);
                    let gb = matmul_raw(&at, g, k, m, n);
                    self.acc(grads, *b, |buf| add_into(buf, &gb));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let ga = transpose_raw(g, r, c);
                self.acc(grads, *a, |buf| add_into(buf, &ga));
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |buf| add_into(buf, g));
                self.acc(grads, *b, |buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |buf| add_into(buf, g));
                self.acc(grads, *b, |buf| {
                    buf.iter_mut().zip(g).for_each(|(x, y)| *x -= y)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |buf| {
                    for ((x, gi), bi) in buf.iter_mut().zip(g).zip(bv) {
                        *x += gi * bi;
                    }
                });
                self.acc(grads, *b, |buf| {
                    for ((x, gi), ai) in buf.iter_mut().zip(g).zip(av) {
                        *x += gi * ai;
                    }
                });
            }
            Op::AddRow(a, row) => {
                let n = out.cols();
                self.acc(grads, *a, |buf| add_into(buf, g));
                self.acc(grads, *row, |buf| {
                    for r in g.chunks(n) {
                        add_into(buf, r);
                    }
                });
            }
            Op::SubCol(a, col) => {
                let n = out.cols();
                self.acc(grads, *a, |buf| add_into(buf, g));
                self.acc(grads, *col, |buf| {
                    for (x, r) in buf.iter_mut().zip(g.chunks(n)) {
                        *x -= r.iter().sum::<f64>();
                    }
                });
            }
            Op::Scale(a, c) => {
                self.acc(grads, *a, |buf| {
                    buf.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)
                });
            }
            Op::Exp(a) => {
                self.acc(grads, *a, |buf| {
                    for ((x, gi), yi) in buf.iter_mut().zip(g).zip(out.data()) {
                        *x += gi * yi;
                    }
                });
            }
            Op::Log(a) => {
                let av = self.value(*a).data();
                self.acc(grads, *a, |buf| {
                    for ((x, gi), ai) in buf.iter_mut().zip(g).zip(av) {
                        *x += gi / ai;
                    }
                });
            }
            Op::ClampMin(a, min) => {
                let av = self.value(*a).data();
                self.acc(grads, *a, |buf| {
                    for ((x, gi), ai) in buf.iter_mut().zip(g).zip(av) {
                        if *ai >= *min {
                            *x += gi;
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                self.acc(grads, *a, |buf| {
                    for ((x, gi), &xi) in buf.iter_mut().zip(g).zip(av) {
                        *x += gi * gelu_grad(xi);
                    }
                });
            }
            Op::Softmax(a) => {
                let n = out.cols();
                self.acc(grads, *a, |buf| {
                    for ((b, gr), yr) in
                        buf.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for ((x, gi), yi) in b.iter_mut().zip(gr).zip(yr) {
                            *x += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let n = out.cols();
                self.acc(grads, *a, |buf| {
                    for ((b, gr), yr) in
                        buf.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n))
                    {
                        let total: f64 = gr.iter().sum();
                        for ((x, gi), yi) in b.iter_mut().zip(gr).zip(yr) {
                            *x += gi - yi.exp() * total;
                        }
                    }
                });
            }
            Op::LogSumExp(a) => {
                let av = self.value(*a);
                let n = av.cols();
                self.acc(grads, *a, |buf| {
                    for (r, (b, xr)) in buf.chunks_mut(n).zip(av.data().chunks(n)).enumerate() {
                        let lse = out.data()[r];
                        for (x, xi) in b.iter_mut().zip(xr) {
                            *x += g[r] * (xi - lse).exp();
                        }
                    }
                });
            }
            Op::MaxPool { input, argmax } => {
                let d = argmax.len();
                self.acc(grads, *input, |buf| {
                    for (j, &row) in argmax.iter().enumerate() {
                        buf[row * d + j] += g[j];
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = out.cols();
                let gv = self.value(*gain).data();
                self.acc(grads, *gain, |buf| {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for ((b, gi), hi) in buf.iter_mut().zip(gr).zip(hr) {
                            *b += gi * hi;
                        }
                    }
                });
                self.acc(grads, *bias, |buf| {
                    for gr in g.chunks(n) {
                        add_into(buf, gr);
                    }
                });
                self.acc(grads, *x, |buf| {
                    let nf = n as f64;
                    for (r, (b, (gr, hr))) in buf
                        .chunks_mut(n)
                        .zip(g.chunks(n).zip(xhat.chunks(n)))
                        .enumerate()
                    {
                        let gh: Vec<f64> = gr.iter().zip(gv).map(|(a, w)| a * w).collect();
                        let sum_gh: f64 = gh.iter().sum();
                        let sum_ghh: f64 = gh.iter().zip(hr).map(|(a, h)| a * h).sum();
                        for ((bx, ghi), hi) in b.iter_mut().zip(&gh).zip(hr) {
                            *bx += rstd[r] / nf * (nf * ghi - sum_gh - hi * sum_ghh);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = out.cols();
                self.acc(grads, *table, |buf| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut buf[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    self.acc(grads, p, |buf| add_into(buf, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    self.acc(grads, p, |buf| {
                        for (b, gr) in buf.chunks_mut(c).zip(g.chunks(total)) {
                            add_into(b, &gr[offset..offset + c]);
                        }
                    });
                    offset += c;
                }
            }
            Op::SliceRows { input, start } => {
                let n = out.cols();
                self.acc(grads, *input, |buf| {
                    add_into(&mut buf[start * n..start * n + g.len()], g)
                });
            }
            Op::SliceCols { input, start } => {
                let len = out.cols();
                let n = self.value(*input).cols();
                self.acc(grads, *input, |buf| {
                    for (b, gr) in buf.chunks_mut(n).zip(g.chunks(len)) {
                        add_into(&mut b[*start..start + len], gr);
                    }
                });
            }
            Op::Reshape(a) => self.acc(grads, *a, |buf| add_into(buf, g)),
            Op::Sum(a) => self.acc(grads, *a, |buf| buf.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                self.acc(grads, *a, |buf| buf.iter_mut().for_each(|x| *x += g[0] / n))
            }
            Op::Pick { input, idx } => {
                let n = self.value(*input).cols();
                self.acc(grads, *input, |buf| {
                    for (i, &j) in idx.iter().enumerate() {
                        buf[i * n + j] += g[i];
                    }
                });
            }
            Op::L2Normalize { input, norms } => {
                let n = out.cols();
                self.acc(grads, *input, |buf| {
                    for (r, (b, (gr, yr))) in buf
                        .chunks_mut(n)
                        .zip(g.chunks(n).zip(out.data().chunks(n)))
                        .enumerate()
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, y)| a * y).sum();
                        for ((bx, gi), yi) in b.iter_mut().zip(gr).zip(yr) {
                            *bx += (gi - yi * dot) / norms[r];
                        }
                    }
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(buf);
    }
}

/// Result of [`Tape::backward`]: accumulated gradients per node.
///
/// Nodes that do not require gradients (constants, detached copies) and
/// nodes the loss does not depend on have no entry.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient, or zeros of the node's shape when none reached it.
    pub fn wrt_or_zeros(&self, tape: &Tape<'_>, v: Var) -> Tensor {
        self.wrt(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|v| self.wrt(*v))
    }

    /// Moves parameter gradients out, indexed by `ParamId`.
    pub fn into_param_grads(mut self, num_params: usize) -> Vec<Option<Tensor>> {
        let mut out = vec![None; num_params];
        for (id, v) in &self.params {
            if id.0 < num_params {
                out[id.0] = self.grads[v.0].take();
            }
        }
        out
    }
}

fn add_into(buf: &mut [f64], g: &[f64]) {
    for (x, y) in buf.iter_mut().zip(g) {
        *x += y;
    }
}

fn row_logsumexp(op: &'static str, row: &[f64]) -> Result<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(TensorError::Numeric {
            op,
            msg: "row has no finite entries".into(),
        });
    }
    if !max.is_finite() {
        return Err(TensorError::Numeric {
            op,
            msg: format!("non-finite entry {max}"),
        });
    }
    Ok(max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_inner(x: f64) -> f64 {
    GELU_C * (x + 0.044715 * x * x * x)
}

fn gelu_grad(x: f64) -> f64 {
    let t = gelu_inner(x).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
