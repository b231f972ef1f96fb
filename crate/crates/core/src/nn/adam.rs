use super::graph::Gradients;
use super::layers::ParamSet;
use super::tensor::Tensor;
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for one [`ParamSet`].
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.rows(), t.cols()))
                .collect()
        };
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut ParamSet, grads: &Gradients, cfg: &AdamConfig, state: &mut AdamState) -> Result<(), NnError> {
    if grads.tensors.len() != params.len() || state.m.len() != params.len() {
        return Err(NnError::Shape(format!(
            "{} gradients for {} parameters",
            grads.tensors.len(),
            params.len()
        )));
    }
    for (i, (p, g)) in params.tensors().iter().zip(&grads.tensors).enumerate() {
        if !p.same_shape(g) || !p.same_shape(&state.m[i]) {
            return Err(NnError::Shape(format!(
                "gradient {i}: {:?} vs parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let g = grads.tensors[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *x -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
