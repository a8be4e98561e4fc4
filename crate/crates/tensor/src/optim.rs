//! Adam and decoupled-weight-decay AdamW.

use crate::{ParamStore, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Decoupled (AdamW) decay when positive.
    pub weight_decay: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Optimizer state: moment buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first_moment: Vec<Vec<f32>>,
    second_moment: Vec<Vec<f32>>,
    param_steps: Vec<u64>,
    step_count: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(TensorError::InvalidArgument(format!("learning rate {} must be > 0", config.lr)));
        }
        let zeros: Vec<Vec<f32>> = store.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Ok(Self {
            config,
            first_moment: zeros.clone(),
            second_moment: zeros,
            param_steps: vec![0; store.len()],
            step_count: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.config.lr = lr;
    }

    /// Applies one bias-corrected update. Parameters whose gradient is absent or
    /// identically zero are left untouched, moments included.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != store.len() || self.first_moment.len() != store.len() {
            return Err(TensorError::InvalidArgument(format!(
                "{} gradients for {} parameters (state sized for {})",
                grads.len(),
                store.len(),
                self.first_moment.len()
            )));
        }
        for (i, (param, grad)) in store.tensors().iter().zip(grads).enumerate() {
            if let Some(gr) = grad {
                if gr.shape() != param.shape() || self.first_moment[i].len() != param.numel() {
                    return Err(TensorError::ShapeMismatch {
                        op: "adam_step",
                        lhs: param.shape().to_vec(),
                        rhs: gr.shape().to_vec(),
                    });
                }
            }
        }
        self.step_count += 1;
        let c = self.config;
        for (i, (param, grad)) in store.tensors_mut().iter_mut().zip(grads).enumerate() {
            let Some(grad) = grad else { continue };
            if grad.data().iter().all(|&v| v == 0.0) {
                continue;
            }
            self.param_steps[i] += 1;
            let t = self.param_steps[i] as i32;
            let bc1 = 1.0 - (c.beta1 as f64).powi(t);
            let bc2 = 1.0 - (c.beta2 as f64).powi(t);
            let (m, v) = (&mut self.first_moment[i], &mut self.second_moment[i]);
            for (((p, &gv), mi), vi) in
                param.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut())
            {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gv;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gv * gv;
                let m_hat = *mi as f64 / bc1;
                let v_hat = *vi as f64 / bc2;
                if c.weight_decay > 0.0 {
                    *p -= c.lr * c.weight_decay * *p;
                }
                *p -= (c.lr as f64 * m_hat / (v_hat.sqrt() + c.eps as f64)) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: Vec<f32>) -> ParamStore {
        let mut s = ParamStore::new();
        let n = values.len();
        s.add("p", Tensor::new([n], values).unwrap());
        s
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut store = store_with(vec![1.0, -2.0, 3.0]);
        let mut state = AdamState::new(&store, AdamConfig::default()).unwrap();
        // build up non-trivial moments first
        state.step(&mut store, &[Some(Tensor::new([3], vec![0.3, -0.1, 0.2]).unwrap())]).unwrap();
        let before = store.tensors()[0].clone();
        state.step(&mut store, &[Some(Tensor::zeros([3]))]).unwrap();
        state.step(&mut store, &[None]).unwrap();
        assert_eq!(store.tensors()[0], before);
        assert_eq!(state.step_count(), 3);
    }

    #[test]
    fn first_step_with_beta1_zero_is_sign_step() {
        let cfg = AdamConfig { lr: 0.0002, beta1: 0.0, beta2: 0.99, eps: 1e-8, weight_decay: 0.0 };
        let mut store = store_with(vec![0.5, 0.5, 0.5]);
        let mut state = AdamState::new(&store, cfg).unwrap();
        let g = Tensor::new([3], vec![3.0, -0.02, 1e-3]).unwrap();
        state.step(&mut store, &[Some(g.clone())]).unwrap();
        for (p, gv) in store.tensors()[0].data().iter().zip(g.data()) {
            let expect = 0.5 - 0.0002 * gv.signum();
            assert!((p - expect).abs() < 1e-6, "{p} vs {expect}");
        }
    }

    #[test]
    fn decoupled_weight_decay_shrinks_params() {
        let cfg = AdamConfig { weight_decay: 0.1, lr: 0.01, ..AdamConfig::default() };
        let mut store = store_with(vec![2.0]);
        let mut state = AdamState::new(&store, cfg).unwrap();
        state.step(&mut store, &[Some(Tensor::new([1], vec![1.0]).unwrap())]).unwrap();
        // decay 2.0 * 0.1 * 0.01 = 0.002, plus a unit Adam step of 0.01
        let p = store.tensors()[0].data()[0];
        assert!((p - (2.0 - 0.002 - 0.01)).abs() < 1e-5, "{p}");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut store = store_with(vec![1.0, 2.0]);
        let mut state = AdamState::new(&store, AdamConfig::default()).unwrap();
        assert!(state.step(&mut store, &[Some(Tensor::zeros([3]))]).is_err());
        assert!(AdamState::new(&store, AdamConfig { lr: 0.0, ..AdamConfig::default() }).is_err());
    }
}
