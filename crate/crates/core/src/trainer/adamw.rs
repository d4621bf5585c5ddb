use vitp_autodiff::{Element, Tensor};

use crate::error::{Result, VitpError};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn bitwise_eq(&self, o: &OptimizerState<T>) -> bool {
        self.step == o.step
            && self.m.len() == o.m.len()
            && self.m.iter().zip(&o.m).all(|(a, b)| a.bitwise_eq(b))
            && self.v.iter().zip(&o.v).all(|(a, b)| a.bitwise_eq(b))
    }
}

/// Weight decay applies to matrices only; vectors (biases, norms) are exempt.
pub fn decays(shape: &[usize]) -> bool {
    shape.len() >= 2
}

/// One AdamW update: decoupled decay `p -= lr * wd * p`, then the
/// bias-corrected moment step.
pub fn adamw_step<T: Element>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    adamw_step_with(params, grads, state, |_| lr, cfg)
}

/// Like [`adamw_step`] with a learning rate per parameter index.
pub fn adamw_step_with<T: Element>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    lr_of: impl Fn(usize) -> f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(VitpError::Config("gradient count does not match parameters".into()));
    }
    for (i, g) in grads.iter().enumerate() {
        let id = crate::params::ParamId(i);
        if g.shape() != params.get(id).shape() || state.m[i].shape() != g.shape() {
            return Err(VitpError::Config(format!("gradient shape mismatch for {}", params.name(id))));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let c = |x: f64| T::from_f64_lossy(x);
    let (b1, b2, eps) = (c(cfg.beta1), c(cfg.beta2), c(cfg.eps));
    let one = T::one();
    let (bc1, bc2) = (c(bc1), c(bc2));
    for (i, g) in grads.iter().enumerate() {
        let id = crate::params::ParamId(i);
        let lr = lr_of(i);
        let lr_t = c(lr);
        let decay = if decays(g.shape()) { c(lr * cfg.weight_decay) } else { T::zero() };
        let p = params.get_mut(id).data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for k in 0..p.len() {
            let gk = g.data()[k];
            p[k] = p[k] - decay * p[k];
            m[k] = b1 * m[k] + (one - b1) * gk;
            v[k] = b2 * v[k] + (one - b2) * gk * gk;
            let mh = m[k] / bc1;
            let vh = v[k] / bc2;
            p[k] = p[k] - lr_t * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales gradients so their global L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm<T: Element>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::from_f64_lossy(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v = *v * s;
            }
        }
    }
    norm
}
