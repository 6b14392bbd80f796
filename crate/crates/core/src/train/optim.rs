//! AdamW with decoupled weight decay and global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("non-finite gradient for {param}; step aborted")]
pub struct NonFiniteGradient {
    pub param: String,
}

/// Moment accumulators shaped like the parameters they track.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: AdamWConfig) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, _, t)| Tensor::zeros(t.shape()))
                .collect()
        };
        Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn moments(&self, index: usize) -> (&Tensor, &Tensor) {
        (&self.m[index], &self.v[index])
    }

    /// Overwrites the moments of one parameter, for resuming from a known state.
    pub fn set_moments(&mut self, index: usize, m: Tensor, v: Tensor) {
        assert_eq!(m.shape(), self.m[index].shape());
        assert_eq!(v.shape(), self.v[index].shape());
        self.m[index] = m;
        self.v[index] = v;
    }

    /// One update. Parameters without a gradient are left untouched and
    /// their moments do not advance. Nothing is modified when any gradient
    /// is non-finite.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Tensor>],
        lr: f64,
    ) -> Result<(), NonFiniteGradient> {
        assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
        for (id, name, _) in store.iter() {
            if let Some(g) = &grads[id.index()] {
                assert_eq!(
                    g.shape(),
                    store.get(id).shape(),
                    "gradient shape for {name}"
                );
                if g.data().iter().any(|x| !x.is_finite()) {
                    log::error!("non-finite gradient in {name}");
                    return Err(NonFiniteGradient {
                        param: name.to_string(),
                    });
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = &grads[id.index()] else {
                continue;
            };
            let m = self.m[id.index()].data_mut();
            let v = self.v[id.index()].data_mut();
            let theta = store.get_mut(id).data_mut();
            for k in 0..theta.len() {
                let gk = g.data()[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                theta[k] *= 1.0 - lr * weight_decay;
                theta[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scales gradients in place so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}
