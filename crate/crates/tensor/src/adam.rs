use crate::{Result, Scalar, Tensor, TensorError};

/// Adam hyperparameters. Defaults follow the training configuration the
/// counting networks use: lr 1e-5, betas 0.9/0.999, eps 1e-8, weight
/// decay 1e-4 applied as a classic L2 term added to the gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

struct Slot<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// Bias-corrected Adam over a fixed parameter set.
///
/// Per-parameter first/second moments start at zero; the step counter
/// increments once per [`Adam::step`]. Gradients are read from each
/// parameter's buffer and must be zeroed by the caller afterwards
/// ([`Adam::zero_grads`]).
pub struct Adam<T: Scalar> {
    config: AdamConfig,
    params: Vec<Tensor<T>>,
    slots: Vec<Slot<T>>,
    step_count: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: Vec<Tensor<T>>, config: AdamConfig) -> Self {
        let slots = params
            .iter()
            .map(|p| Slot {
                m: vec![T::zero(); p.len()],
                v: vec![T::zero(); p.len()],
            })
            .collect();
        Adam {
            config,
            params,
            slots,
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    /// One update over every parameter; every parameter must carry a
    /// gradient buffer.
    pub fn step(&mut self) -> Result<()> {
        for (index, p) in self.params.iter().enumerate() {
            if !p.requires_grad() || p.grad().is_none() {
                return Err(TensorError::MissingGradient { index });
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let b1 = T::from_f64(self.config.beta1);
        let b2 = T::from_f64(self.config.beta2);
        let lr = T::from_f64(self.config.lr);
        let eps = T::from_f64(self.config.eps);
        let wd = T::from_f64(self.config.weight_decay);
        let one = T::one();
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);

        for (p, slot) in self.params.iter().zip(self.slots.iter_mut()) {
            let grad = p.grad().expect("checked above");
            let mut inner = p.borrow_mut();
            for i in 0..grad.len() {
                let g = grad[i] + wd * inner.data[i];
                slot.m[i] = b1 * slot.m[i] + (one - b1) * g;
                slot.v[i] = b2 * slot.v[i] + (one - b2) * g * g;
                let mhat = slot.m[i] / bc1;
                let vhat = slot.v[i] / bc2;
                inner.data[i] = inner.data[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }
}
