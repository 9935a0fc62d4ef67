//! Reference optimiser recurrences in `f64`.

/// Rectified Adam on a flat parameter vector, with `grad(θ)` evaluated
/// before every step. Returns the trajectory of parameter vectors, one
/// entry per completed step.
pub fn radam64(theta: &[f64], lr: f64, steps: usize, grad: &dyn Fn(&[f64]) -> Vec<f64>) -> Vec<Vec<f64>> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    let rho_inf = 2.0 / (1.0 - b2) - 1.0;
    let mut th = theta.to_vec();
    let mut m = vec![0.0; th.len()];
    let mut v = vec![0.0; th.len()];
    let mut out = Vec::with_capacity(steps);
    for t in 1..=steps {
        let g = grad(&th);
        let tf = t as f64;
        let b1t = b1.powf(tf);
        let b2t = b2.powf(tf);
        let rho = rho_inf - 2.0 * tf * b2t / (1.0 - b2t);
        for i in 0..th.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / (1.0 - b1t);
            if rho > 4.0 {
                let r = ((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt();
                let v_hat = (v[i] / (1.0 - b2t)).sqrt();
                th[i] -= lr * r * m_hat / (v_hat + eps);
            } else {
                th[i] -= lr * m_hat;
            }
        }
        out.push(th.clone());
    }
    out
}
