use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rectified Adam.
///
/// While the variance estimate is unreliable (`ρ_t ≤ 4`) the update falls
/// back to bias-corrected momentum; afterwards the adaptive step is scaled
/// by the rectification term `r_t`.
#[derive(Clone, Debug)]
pub struct RAdam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl RAdam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    fn rho_inf(&self) -> f64 {
        2.0 / (1.0 - self.beta2) - 1.0
    }

    /// Length of the approximated simple moving average at step `t`.
    pub fn rho(&self, t: u64) -> f64 {
        let b2t = self.beta2.powi(t as i32);
        self.rho_inf() - 2.0 * t as f64 * b2t / (1.0 - b2t)
    }

    /// One update of `params` from `grads` (same order and lengths on every
    /// call).
    pub fn step_slices(&mut self, params: &mut [&mut [f32]], grads: &[&[f32]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::DimensionMismatch { op: "radam_step", lhs: vec![p.len()], rhs: vec![g.len()] });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient for parameter {i}")));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
            return Err(Error::Shape("parameter layout changed between optimizer steps".into()));
        }
        self.t += 1;
        let t = self.t;
        let (b1, b2) = (self.beta1, self.beta2);
        let bias1 = 1.0 - b1.powi(t as i32);
        let bias2 = 1.0 - b2.powi(t as i32);
        let rho_t = self.rho(t);
        let rho_inf = self.rho_inf();
        let rectified = rho_t > 4.0;
        let r_t = if rectified {
            (((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt()
        } else {
            0.0
        };
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for k in 0..p.len() {
                let gk = g[k] as f64;
                let mk = b1 * m[k] as f64 + (1.0 - b1) * gk;
                let vk = b2 * v[k] as f64 + (1.0 - b2) * gk * gk;
                m[k] = mk as f32;
                v[k] = vk as f32;
                let m_hat = mk / bias1;
                let delta = if rectified {
                    let v_hat = (vk / bias2).sqrt();
                    self.lr * r_t * m_hat / (v_hat + self.eps)
                } else {
                    self.lr * m_hat
                };
                p[k] = (p[k] as f64 - delta) as f32;
            }
        }
        Ok(())
    }

    /// Updates tensors from their stored gradients; a missing gradient
    /// counts as zero.
    pub fn step(&mut self, params: Vec<&mut Tensor>) -> Result<()> {
        let grads: Vec<Vec<f32>> =
            params.iter().map(|p| p.grad().map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; p.numel()])).collect();
        let grad_refs: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
        let mut slices: Vec<&mut [f32]> = params.into_iter().map(Tensor::data_mut).collect();
        self.step_slices(&mut slices, &grad_refs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_momentum_only() {
        let mut opt = RAdam::new(0.1);
        assert!((opt.rho(1) - 1.0).abs() < 1e-9);
        let mut theta = [1.0f32];
        opt.step_slices(&mut [&mut theta], &[&[1.0]]).unwrap();
        assert!((theta[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut opt = RAdam::new(0.1);
        let mut theta = [0.3f32, -2.0];
        for _ in 0..50 {
            opt.step_slices(&mut [&mut theta], &[&[0.0, 0.0]]).unwrap();
        }
        assert_eq!(theta, [0.3, -2.0]);
    }

    #[test]
    fn nan_gradient_is_rejected_without_update() {
        let mut opt = RAdam::new(0.1);
        let mut theta = [1.0f32];
        assert!(matches!(opt.step_slices(&mut [&mut theta], &[&[f32::NAN]]), Err(Error::Numeric(_))));
        assert_eq!(theta, [1.0]);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn rectification_starts_at_step_five() {
        let opt = RAdam::new(1.0);
        let first = (1..100).find(|&t| opt.rho(t) > 4.0).unwrap();
        assert_eq!(first, 5);
    }
}
