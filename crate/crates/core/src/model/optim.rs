//! Bias-corrected adaptive-moment optimizer and global-norm clipping.

use serde::{Deserialize, Serialize};

use super::{Gradients, Parameters, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    /// One update of `params` in place, given the step number `t >= 1`.
    pub fn update_slice<F: Real>(&self, t: u64, params: &mut [F], grads: &[F], m: &mut [F], v: &mut [F]) {
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let (one_b1, one_b2) = (F::of(1.0 - self.beta1), F::of(1.0 - self.beta2));
        let (inv_bc1, inv_bc2) = (F::of(1.0 / bc1), F::of(1.0 / bc2));
        let (lr, eps) = (F::of(self.lr), F::of(self.eps));
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let m_hat = *m * inv_bc1;
            let v_hat = *v * inv_bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Moment estimates congruent to the parameters, plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState<F> {
    pub config: AdamConfig,
    pub m: Parameters<F>,
    pub v: Parameters<F>,
    pub t: u64,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(config: AdamConfig, like: &Parameters<F>) -> Self {
        Self {
            config,
            m: like.zeros_like(),
            v: like.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut Parameters<F>, grads: &Gradients<F>) {
        self.t += 1;
        let t = self.t;
        let config = self.config;
        for (((p, g), m), v) in params
            .arrays_mut()
            .into_iter()
            .zip(grads.arrays())
            .zip(self.m.arrays_mut())
            .zip(self.v.arrays_mut())
        {
            config.update_slice(t, &mut p.data, &g.data, &mut m.data, &mut v.data);
        }
    }
}

pub fn adam_step<F: Real>(params: &mut Parameters<F>, grads: &Gradients<F>, state: &mut OptimizerState<F>) {
    state.step(params, grads);
}

/// L2 norm over every gradient entry, accumulated in `f64`.
pub fn global_norm<F: Real>(g: &Gradients<F>) -> f64 {
    g.arrays()
        .iter()
        .flat_map(|a| a.data.iter())
        .map(|&x| {
            let x = x.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales all arrays so the global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm<F: Real>(g: &mut Gradients<F>, max_norm: f64) -> f64 {
    let norm = global_norm(g);
    if norm > max_norm && norm > 0.0 {
        let scale = F::of(max_norm / norm);
        for a in g.arrays_mut() {
            for x in &mut a.data {
                *x *= scale;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use proptest::prelude::*;

    #[test]
    fn first_step_is_signed_learning_rate() {
        let cfg = AdamConfig::with_lr(0.01);
        let mut p = [1.0f64, 1.0, 1.0];
        let g = [0.5, -2.0, 1e-3];
        let (mut m, mut v) = ([0.0; 3], [0.0; 3]);
        cfg.update_slice(1, &mut p, &g, &mut m, &mut v);
        for (pi, gi) in p.iter().zip(g) {
            let expected = 1.0 - 0.01 * gi / (gi.abs() + 1e-8);
            assert!((pi - expected).abs() < 1e-12);
            assert!((pi - (1.0 - 0.01 * gi.signum())).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mc = ModelConfig::new(6, 2, 3, 1);
        let mut p = init_params::<f64>(&mc).unwrap();
        let before = p.clone();
        let g = p.zeros_like();
        let mut state = OptimizerState::new(AdamConfig::default(), &p);
        adam_step(&mut p, &g, &mut state);
        assert_eq!(p, before);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        let cfg = AdamConfig::with_lr(0.1);
        let (mut theta, mut m, mut v) = ([1.0f64], [0.0], [0.0]);
        for t in 1..=200 {
            let g = [2.0 * theta[0]];
            cfg.update_slice(t, &mut theta, &g, &mut m, &mut v);
        }
        assert!(theta[0].abs() < 0.05, "theta = {}", theta[0]);
    }

    #[test]
    fn clipping_halves_or_keeps() {
        let mc = ModelConfig::new(6, 2, 3, 1);
        let mut g = init_params::<f64>(&mc).unwrap().zeros_like();
        g.out_b.data[0] = 6.0;
        g.enc_b.data[1] = 8.0;
        assert_eq!(clip_global_norm(&mut g, 5.0), 10.0);
        assert!((g.out_b.data[0] - 3.0).abs() < 1e-12 && (g.enc_b.data[1] - 4.0).abs() < 1e-12);
        let mut h = g.zeros_like();
        h.out_b.data[0] = 3.0;
        let before = h.clone();
        assert_eq!(clip_global_norm(&mut h, 5.0), 3.0);
        assert_eq!(h, before);
    }

    proptest! {
        #[test]
        fn clipped_norm_never_exceeds_bound(seed in any::<u64>(), scale in 0.01f64..100.0, max in 0.1f64..10.0) {
            let mut mc = ModelConfig::new(6, 2, 3, seed);
            mc.init_scale = scale;
            let mut g = init_params::<f64>(&mc).unwrap();
            clip_global_norm(&mut g, max);
            prop_assert!(global_norm(&g) <= max + 1e-9);
        }
    }
}
