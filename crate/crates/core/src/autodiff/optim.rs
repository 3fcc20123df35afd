//! Adam with bias correction. Moments live beside the store, indexed by
//! parameter position, and are only touched for trainable parameters.

use super::tensor::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
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

#[derive(Clone, Debug, Default, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Zeroes every moment and the step counter. A parameter whose gradient
    /// stays exactly zero after a reset never moves.
    pub fn reset(&mut self) {
        self.step = 0;
        for mo in &mut self.moments {
            mo.m.iter_mut().for_each(|x| *x = 0.0);
            mo.v.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// True when every stored moment is exactly zero.
    pub fn is_clear(&self) -> bool {
        self.moments
            .iter()
            .all(|mo| mo.m.iter().chain(&mo.v).all(|&x| x == 0.0))
    }

    /// One update over all trainable parameters. A missing gradient counts as zero.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        if self.moments.len() < store.len() {
            self.moments.resize_with(store.len(), Moments::default);
        }
        for (id, p) in store.iter_mut() {
            let t = &mut p.tensor;
            if !t.requires_grad() {
                continue;
            }
            let mo = &mut self.moments[id.0];
            if mo.m.len() != t.numel() {
                mo.m = vec![0.0; t.numel()];
                mo.v = vec![0.0; t.numel()];
            }
            let grad = t.grad().map(<[f64]>::to_vec);
            let data = t.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                mo.m[i] = beta1 * mo.m[i] + (1.0 - beta1) * g;
                mo.v[i] = beta2 * mo.v[i] + (1.0 - beta2) * g * g;
                let mhat = mo.m[i] / bc1;
                let vhat = mo.v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn scalar_store(value: f64, grad: f64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut t = Tensor::scalar(value);
        t.set_requires_grad(true);
        t.accumulate_grad(&[grad]);
        store.add("w", t).unwrap();
        store
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = scalar_store(1.0, 1.0);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        adam.step(&mut store);
        // m_hat = 1, v_hat = 1, step = 0.1 / (1 + 1e-8)
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert_eq!(store.tensor(crate::autodiff::ParamId(0)).data()[0], expected);
        assert!((1.0 - expected - 0.1).abs() < 1e-8);
    }

    #[test]
    fn zero_grad_zero_moments_is_bit_unchanged() {
        let mut store = scalar_store(0.123456789, 0.0);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        for _ in 0..5 {
            adam.step(&mut store);
        }
        assert_eq!(
            store.tensor(crate::autodiff::ParamId(0)).data()[0].to_bits(),
            0.123456789f64.to_bits()
        );
    }

    #[test]
    fn second_step_smaller_than_raw_lr_times_grad() {
        // g = 2 on both steps: m_hat = 2, v_hat = 4, so each step is lr*2/(2+eps) ~ lr,
        // half of the raw lr*g = 0.2.
        let mut store = scalar_store(0.0, 2.0);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        adam.step(&mut store);
        let after1 = store.tensor(crate::autodiff::ParamId(0)).data()[0];
        adam.step(&mut store);
        let after2 = store.tensor(crate::autodiff::ParamId(0)).data()[0];
        let step2 = (after2 - after1).abs();
        let m = 0.9 * 0.2 + 0.1 * 2.0;
        let v = 0.999 * 0.004 + 0.001 * 4.0;
        let hand = 0.1 * (m / (1.0 - 0.81)) / ((v / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        assert!((step2 - hand).abs() < 1e-15);
        assert!(step2 < 0.1 * 2.0);
    }

    #[test]
    fn reset_is_idempotent() {
        let mut store = scalar_store(1.0, 1.0);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        adam.step(&mut store);
        assert!(!adam.is_clear());
        adam.reset();
        let once = adam.clone();
        adam.reset();
        assert_eq!(once, adam);
        assert!(adam.is_clear());
        assert_eq!(adam.steps_taken(), 0);
    }
}
