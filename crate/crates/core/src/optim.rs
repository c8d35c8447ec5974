//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment state for one flat parameter buffer.
#[derive(Debug, Clone)]
pub struct Adam<T: Real> {
    config: AdamConfig,
    m: Vec<T>,
    v: Vec<T>,
    step: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            config,
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let lr_t = c.learning_rate * (1.0 - c.beta2.powi(self.step)).sqrt() / (1.0 - c.beta1.powi(self.step));
        let corr2 = T::lit((1.0 - c.beta2.powi(self.step)).sqrt());
        let lr_t = T::lit(lr_t);
        let eps = T::lit(c.epsilon);
        let one = T::one();
        for ((p, &g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            // Equivalent to lr·m̂/(√v̂ + ε) with ε applied to the corrected v̂.
            *p -= lr_t * *m / (v.sqrt() + eps * corr2);
        }
    }
}

/// One [`Adam`] per parameter tensor, stepped together.
#[derive(Debug, Clone)]
pub struct AdamGroup<T: Real> {
    slots: Vec<Adam<T>>,
}

impl<T: Real> AdamGroup<T> {
    pub fn new(lens: &[usize], config: AdamConfig) -> Self {
        Self {
            slots: lens.iter().map(|&n| Adam::new(n, config)).collect(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.slots.first().map_or(0, Adam::steps_taken)
    }

    pub fn step(&mut self, params: Vec<&mut [T]>, grads: Vec<&[T]>) {
        assert_eq!(params.len(), self.slots.len());
        assert_eq!(grads.len(), self.slots.len());
        for ((slot, p), g) in self.slots.iter_mut().zip(params).zip(grads) {
            slot.step(p, g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut adam = Adam::<f64>::new(2, AdamConfig { learning_rate: 0.1, ..Default::default() });
        let mut p = vec![1.0, -1.0];
        adam.step(&mut p, &[3.0, -0.5]);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn matches_textbook_update() {
        let cfg = AdamConfig { learning_rate: 0.01, ..Default::default() };
        let mut adam = Adam::<f64>::new(1, cfg);
        let mut p = vec![0.5];
        let (mut m, mut v, mut q) = (0.0, 0.0, 0.5f64);
        for t in 1..=50 {
            let g = 2.0 * q - 0.3 * (t as f64).sin();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            q -= 0.01 * mh / (vh.sqrt() + 1e-8);
            let gp = 2.0 * p[0] - 0.3 * (t as f64).sin();
            adam.step(&mut p, &[gp]);
        }
        assert!((p[0] - q).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut adam = Adam::<f32>::new(3, AdamConfig::default());
        let mut p = vec![1.0, 2.0, 3.0];
        for _ in 0..10 {
            adam.step(&mut p, &[0.0; 3]);
        }
        assert_eq!(p, vec![1.0, 2.0, 3.0]);
    }
}
