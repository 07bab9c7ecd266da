//! Adam with bias correction.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state: step count and first/second moments per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    /// Steps taken so far; the next step uses `t + 1`.
    pub t: u64,
    pub m: BTreeMap<String, Tensor<f32>>,
    pub v: BTreeMap<String, Tensor<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter in `params` from `grads`.
    ///
    /// All gradients are checked before anything is mutated, so a
    /// non-finite gradient leaves parameters and moments untouched.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor<f32>>,
        grads: &BTreeMap<String, Tensor<f32>>,
        lr: f64,
    ) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Config(format!("no gradient for parameter `{name}`")))?;
            p.expect_same_shape(g, "adam step")?;
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.t as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (beta1 as f32, beta2 as f32);
        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = b1 * md[i] + (1.0 - b1) * gi;
                vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
                let m_hat = f64::from(md[i]) / bc1;
                let v_hat = f64::from(vd[i]) / bc2;
                pd[i] -= (lr * m_hat / (v_hat.sqrt() + eps)) as f32;
            }
        }
        Ok(())
    }
}

/// Rescales all gradients together so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor<f32>>, max_norm: f64) -> f64 {
    let norm = grads.values().map(Tensor::energy).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            *g = g.scale(s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f32) -> BTreeMap<String, Tensor<f32>> {
        BTreeMap::from([("w".to_string(), Tensor::new([1], vec![v]).unwrap())])
    }

    #[test]
    fn zero_gradient_on_fresh_state_changes_nothing() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut p = single(1.5);
        adam.step(&mut p, &single(0.0), 1e-3).unwrap();
        assert_eq!(p["w"].data(), &[1.5]);
        assert_eq!(adam.m["w"].data(), &[0.0]);
    }

    #[test]
    fn moments_decay_under_zero_gradient() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut p = single(1.0);
        adam.step(&mut p, &single(2.0), 1e-3).unwrap();
        let (m1, v1) = (adam.m["w"].data()[0], adam.v["w"].data()[0]);
        adam.step(&mut p, &single(0.0), 1e-3).unwrap();
        assert!((adam.m["w"].data()[0] - 0.9 * m1).abs() < 1e-7);
        assert!((adam.v["w"].data()[0] - 0.999 * v1).abs() < 1e-7);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        for g in [1e-4f32, 0.3, -7.0, 250.0] {
            let mut adam = Adam::new(AdamConfig::default());
            let mut p = single(0.0);
            adam.step(&mut p, &single(g), 0.01).unwrap();
            let moved = -p["w"].data()[0];
            let expect = 0.01 * g.signum();
            assert!(
                (moved - expect).abs() <= 0.01 * expect.abs(),
                "g={g}: {moved}"
            );
        }
    }

    #[test]
    fn lr_zero_leaves_parameters() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut p = single(0.7);
        adam.step(&mut p, &single(3.0), 0.0).unwrap();
        assert_eq!(p["w"].data(), &[0.7]);
    }

    /// Scalar Adam in f64, straight from the update equations.
    fn scalar_adam(w0: f64, lr: f64, steps: usize) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
        for t in 1..=steps as i32 {
            let g = 2.0 * w;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            w -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        w
    }

    #[test]
    fn minimizes_scalar_quadratic_like_the_recurrence() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut p = single(1.0);
        for _ in 0..200 {
            let g = single(2.0 * p["w"].data()[0]);
            adam.step(&mut p, &g, 0.1).unwrap();
        }
        let w = f64::from(p["w"].data()[0]);
        let oracle = scalar_adam(1.0, 0.1, 200);
        assert!(
            oracle.abs() < 0.01 && w.abs() < 0.01,
            "w={w} oracle={oracle}"
        );
        assert!((w - oracle).abs() < 1e-4);
    }

    #[test]
    fn non_finite_gradient_aborts_before_mutation() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut params = single(1.0);
        params.insert("a".into(), Tensor::new([1], vec![2.0]).unwrap());
        let mut grads = single(f32::NAN);
        grads.insert("a".into(), Tensor::new([1], vec![1.0]).unwrap());
        let err = adam.step(&mut params, &grads, 0.1).unwrap_err();
        assert!(matches!(&err, Error::NonFiniteGradient(n) if n == "w"));
        assert_eq!(params["a"].data(), &[2.0]);
        assert_eq!(adam.t, 0);
        assert!(adam.m.is_empty());
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let mut g = single(3.0);
        g.insert("b".into(), Tensor::new([1], vec![4.0]).unwrap());
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        let after = g.values().map(Tensor::energy).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-6);
        assert_eq!(clip_grad_norm(&mut g, 10.0), after);
    }
}
