//! Independent reference implementations for the test and acceptance
//! suites. Everything here is written directly from the mathematical
//! definitions in `f64`, without reusing library kernels.

pub mod dec_ref;
pub mod gradcheck;
pub mod metrics_ref;
pub mod optim;
pub mod vit_ref;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi) as f32).collect()
}

/// Relative error with a floor on the denominator so that entries whose
/// gradient is numerically zero compare on an absolute scale.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central finite differences of a scalar `f64` function.
pub fn central_diff(x: &[f64], step: f64, f: &dyn Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + step;
            let hi = f(&x);
            x[i] = orig - step;
            let lo = f(&x);
            x[i] = orig;
            (hi - lo) / (2.0 * step)
        })
        .collect()
}

pub fn erf64(x: f64) -> f64 {
    // Abramowitz-Stegun style series/continued fraction is not precise
    // enough here; integrate the Gaussian density with composite Simpson.
    let sign = x.signum();
    let x = x.abs();
    let n = 2000;
    let h = x / n as f64;
    let f = |t: f64| (-t * t).exp();
    let mut s = f(0.0) + f(x);
    for i in 1..n {
        let t = i as f64 * h;
        s += if i % 2 == 1 { 4.0 * f(t) } else { 2.0 * f(t) };
    }
    sign * s * h / 3.0 * 2.0 / std::f64::consts::PI.sqrt()
}

pub fn gelu64(x: f64) -> f64 {
    0.5 * x * (1.0 + erf64(x / std::f64::consts::SQRT_2))
}

pub fn softmax64(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn layer_norm64(x: &[f64], cols: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
        for c in 0..cols {
            out.push((row[c] - mean) / (var + eps).sqrt() * gamma[c] + beta[c]);
        }
    }
    out
}

pub fn matmul64(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

/// Naive per-head attention: explicit `QKᵀ`, row softmax, `AV`.
/// Returns the concatenated output and the per-head probabilities.
pub fn attention64(qkv: &[f64], tokens: usize, hidden: usize, heads: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let dh = hidden / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; tokens * hidden];
    let mut maps = Vec::new();
    for h in 0..heads {
        let q = |t: usize, d: usize| qkv[t * 3 * hidden + h * dh + d];
        let k = |t: usize, d: usize| qkv[t * 3 * hidden + hidden + h * dh + d];
        let v = |t: usize, d: usize| qkv[t * 3 * hidden + 2 * hidden + h * dh + d];
        let mut map = vec![0.0; tokens * tokens];
        for i in 0..tokens {
            let scores: Vec<f64> = (0..tokens)
                .map(|j| (0..dh).map(|d| q(i, d) * k(j, d)).sum::<f64>() * scale)
                .collect();
            let p = softmax64(&scores);
            for j in 0..tokens {
                map[i * tokens + j] = p[j];
            }
            for d in 0..dh {
                out[i * hidden + h * dh + d] = (0..tokens).map(|j| p[j] * v(j, d)).sum();
            }
        }
        maps.push(map);
    }
    (out, maps)
}

pub fn to64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

/// Bilinear resampling of the `bw × bh` window at `(bx, by)` of a row-major
/// image onto a `target × target` grid, pixel centres aligned and source
/// coordinates clamped to the window.
pub fn bilinear64(img: &[f64], width: usize, window: (usize, usize, usize, usize), target: usize) -> Vec<f64> {
    let (bx, by, bw, bh) = window;
    let at = |x: usize, y: usize| img[y * width + x];
    let mut out = vec![0.0; target * target];
    for ty in 0..target {
        for tx in 0..target {
            let sx = ((tx as f64 + 0.5) * bw as f64 / target as f64 - 0.5).clamp(0.0, (bw - 1) as f64);
            let sy = ((ty as f64 + 0.5) * bh as f64 / target as f64 - 0.5).clamp(0.0, (bh - 1) as f64);
            let (ix, iy) = (sx.floor() as usize, sy.floor() as usize);
            let (jx, jy) = ((ix + 1).min(bw - 1), (iy + 1).min(bh - 1));
            let (fx, fy) = (sx - ix as f64, sy - iy as f64);
            let v = at(bx + ix, by + iy) * (1.0 - fx) * (1.0 - fy)
                + at(bx + jx, by + iy) * fx * (1.0 - fy)
                + at(bx + ix, by + jy) * (1.0 - fx) * fy
                + at(bx + jx, by + jy) * fx * fy;
            out[ty * target + tx] = v;
        }
    }
    out
}
