//! Central finite-difference checks of tape gradients.
//!
//! The numerical side only ever evaluates forward values, so it shares no
//! code with the backward rules it validates.

use rand::seq::index::sample;
use rand::Rng;

use super::{ParamId, ParamStore, Tape, Tensor, TensorError, Var};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_REL_TOL: f64 = 1e-4;
/// Denominator floor for the relative error, per unit of loss magnitude.
/// Rounding in the difference quotient grows like `eps * |loss| / step`,
/// so the effective floor is `floor * max(1, |loss|)`.
pub const DEFAULT_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub rel_tol: f64,
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            rel_tol: DEFAULT_REL_TOL,
            floor: DEFAULT_FLOOR,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct CheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Description of the worst coordinate.
    pub worst: String,
}

impl CheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err <= tol
    }

    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64, floor: f64) {
        let err = relative_error(analytic, numeric, floor);
        self.checked += 1;
        if err > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = self.max_rel_err.max(err);
            if err >= self.max_rel_err {
                self.worst = format!("{} analytic={analytic:e} numeric={numeric:e}", label());
            }
        }
    }

    pub fn merge(&mut self, other: CheckReport) {
        self.checked += other.checked;
        if other.max_rel_err >= self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn coords<R: Rng + ?Sized>(numel: usize, max: usize, rng: &mut R) -> Vec<usize> {
    if numel <= max {
        (0..numel).collect()
    } else {
        sample(rng, numel, max).into_vec()
    }
}

impl GradCheck {
    /// Compares parameter gradients of `loss` against central differences
    /// on up to `per_param` coordinates of every listed parameter.
    pub fn params<R, F, E>(
        &self,
        store: &ParamStore,
        ids: &[ParamId],
        per_param: usize,
        rng: &mut R,
        loss: F,
    ) -> std::result::Result<CheckReport, E>
    where
        R: Rng + ?Sized,
        F: Fn(&mut Tape<'_>) -> std::result::Result<Var, E>,
        E: From<TensorError>,
    {
        let grads = {
            let mut tape = Tape::new(store);
            let l = loss(&mut tape)?;
            let base = tape.value(l).item()?;
            (tape.backward(l)?.into_param_grads(store.len()), base)
        };
        let (grads, base) = grads;
        let floor = self.floor * base.abs().max(1.0);
        let mut scratch = store.clone();
        let mut report = CheckReport::default();
        for &id in ids {
            let numel = store.get(id).numel();
            for k in coords(numel, per_param, rng) {
                let orig = store.get(id).data()[k];
                scratch.get_mut(id).data_mut()[k] = orig + self.step;
                let up = eval(&scratch, &loss)?;
                scratch.get_mut(id).data_mut()[k] = orig - self.step;
                let down = eval(&scratch, &loss)?;
                scratch.get_mut(id).data_mut()[k] = orig;
                let numeric = (up - down) / (2.0 * self.step);
                let analytic = grads[id.index()].as_ref().map_or(0.0, |g| g.data()[k]);
                report.record(
                    || format!("{}[{k}]", store.name(id)),
                    analytic,
                    numeric,
                    floor,
                );
            }
        }
        Ok(report)
    }

    /// Same check for free inputs. The closure receives one leaf per input
    /// tensor, in order.
    pub fn inputs<R, F, E>(
        &self,
        inputs: &[Tensor],
        per_input: usize,
        rng: &mut R,
        loss: F,
    ) -> std::result::Result<CheckReport, E>
    where
        R: Rng + ?Sized,
        F: Fn(&mut Tape<'_>, &[Var]) -> std::result::Result<Var, E>,
        E: From<TensorError>,
    {
        let run = |vals: &[Tensor]| -> std::result::Result<f64, E> {
            let mut tape = Tape::without_params();
            let vars: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone())).collect();
            let l = loss(&mut tape, &vars)?;
            Ok(tape.value(l).item()?)
        };
        let (grads, base): (Vec<Tensor>, f64) = {
            let mut tape = Tape::without_params();
            let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
            let l = loss(&mut tape, &vars)?;
            let base = tape.value(l).item()?;
            let g = tape.backward(l)?;
            (
                vars.iter().map(|&v| g.wrt_or_zeros(&tape, v)).collect(),
                base,
            )
        };
        let floor = self.floor * base.abs().max(1.0);
        let mut scratch = inputs.to_vec();
        let mut report = CheckReport::default();
        for (i, input) in inputs.iter().enumerate() {
            for k in coords(input.numel(), per_input, rng) {
                let orig = input.data()[k];
                scratch[i].data_mut()[k] = orig + self.step;
                let up = run(&scratch)?;
                scratch[i].data_mut()[k] = orig - self.step;
                let down = run(&scratch)?;
                scratch[i].data_mut()[k] = orig;
                let numeric = (up - down) / (2.0 * self.step);
                report.record(
                    || format!("input{i}[{k}]"),
                    grads[i].data()[k],
                    numeric,
                    floor,
                );
            }
        }
        Ok(report)
    }
}

fn eval<F, E>(store: &ParamStore, loss: &F) -> std::result::Result<f64, E>
where
    F: Fn(&mut Tape<'_>) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    let mut tape = Tape::new(store);
    let l = loss(&mut tape)?;
    Ok(tape.value(l).item()?)
}

/// Uniform tensor in `[lo, hi)`.
pub fn random_tensor<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}
