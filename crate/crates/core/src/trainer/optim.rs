use serde::{Deserialize, Serialize};

use crate::diffcore::Array;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// Moments for exactly the registered parameter set, in registration order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Array>,
    pub v: Vec<Array>,
}

impl AdamWState {
    pub fn new(config: AdamWConfig, shapes: &[&Array]) -> Self {
        Self {
            config,
            step: 0,
            m: shapes.iter().map(|p| Array::zeros(p.shape())).collect(),
            v: shapes.iter().map(|p| Array::zeros(p.shape())).collect(),
        }
    }

    pub fn num_registered(&self) -> usize {
        self.m.len()
    }

    /// `theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)`
    pub fn step(&mut self, params: &mut [&mut Array], grads: &[Array]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Arity {
                op: "adamw_step",
                expected: self.m.len(),
                got: params.len().min(grads.len()),
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adamw_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, (theta, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *theta -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * *theta);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Array], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Array::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(cfg: AdamWConfig, p: &mut Array, g: &Array, steps: usize) {
        let mut st = AdamWState::new(cfg, &[&*p]);
        for _ in 0..steps {
            st.step(&mut [&mut *p], std::slice::from_ref(g)).unwrap();
        }
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut p = Array::vector(vec![1.0, -2.0, 3.5]);
        let before = p.clone();
        run(AdamWConfig::new(0.01, 0.0), &mut p, &Array::zeros(&[3]), 5);
        assert_eq!(p, before);
    }

    #[test]
    fn zero_grad_pure_decay() {
        let mut p = Array::vector(vec![1.0, -2.0, 3.5]);
        let before = p.clone();
        run(AdamWConfig::new(0.01, 0.1), &mut p, &Array::zeros(&[3]), 1);
        for (a, b) in p.data().iter().zip(before.data()) {
            assert!((a - b * (1.0 - 0.001)).abs() < 1e-15);
        }
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        // m_hat = g, v_hat = g^2 after bias correction
        let g = Array::vector(vec![0.3, -4.0, 1e-3]);
        let mut p = Array::zeros(&[3]);
        run(AdamWConfig::new(0.01, 0.0), &mut p, &g, 1);
        for (x, gi) in p.data().iter().zip(g.data()) {
            let want = -0.01 * gi / (gi.abs() + 1e-8);
            assert!((x - want).abs() < 1e-12);
            assert!((x + 0.01 * gi.signum()).abs() < 1e-7);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = Array::zeros(&[3]);
        let mut st = AdamWState::new(AdamWConfig::new(0.1, 0.0), &[&p]);
        assert!(st.step(&mut [&mut p], &[Array::zeros(&[2])]).is_err());
        assert!(st.step(&mut [], &[]).is_err());
        assert_eq!(st.step, 0);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Array::vector(vec![3.0]), Array::vector(vec![4.0])];
        assert_eq!(clip_global_norm(&mut g, 10.0), 5.0);
        assert_eq!(g[0].data(), &[3.0]);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15 && (g[1].data()[0] - 0.8).abs() < 1e-15);
    }
}
