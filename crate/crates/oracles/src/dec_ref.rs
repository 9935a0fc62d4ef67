//! Elementwise reference for the clustering layer and a labelled blob
//! generator with known means.

use fracvit::io::Matrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// `q_ij` with α = 1, computed entry by entry.
pub fn soft_assign_ref(z: &[Vec<f64>], mu: &[Vec<f64>]) -> Vec<Vec<f64>> {
    z.iter()
        .map(|zi| {
            let kern: Vec<f64> = mu
                .iter()
                .map(|m| 1.0 / (1.0 + zi.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()))
                .collect();
            let s: f64 = kern.iter().sum();
            kern.iter().map(|v| v / s).collect()
        })
        .collect()
}

pub fn target_ref(q: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = q[0].len();
    let mut f = vec![0.0; k];
    for row in q {
        for j in 0..k {
            f[j] += row[j];
        }
    }
    q.iter()
        .map(|row| {
            let mut w = vec![0.0; k];
            let mut s = 0.0;
            for j in 0..k {
                w[j] = row[j] * row[j] / f[j];
                s += w[j];
            }
            w.iter().map(|v| v / s).collect()
        })
        .collect()
}

pub struct Blobs {
    pub points: Matrix,
    pub labels: Vec<usize>,
    pub means: Vec<Vec<f32>>,
}

/// `k` isotropic unit-variance Gaussian blobs in `dim` dimensions whose
/// means are at least `separation` apart.
pub fn blobs(k: usize, per_blob: usize, dim: usize, separation: f32, seed: u64) -> Blobs {
    let mut rng = crate::rng(seed);
    let mut means: Vec<Vec<f32>> = Vec::new();
    while means.len() < k {
        let m: Vec<f32> = (0..dim).map(|_| rng.random_range(-2.0 * separation..2.0 * separation)).collect();
        let far = means.iter().all(|o| o.iter().zip(&m).map(|(a, b)| (a - b) * (a - b)).sum::<f32>().sqrt() >= separation);
        if far {
            means.push(m);
        }
    }
    let noise = Normal::new(0.0f32, 1.0).unwrap();
    let mut rows = Vec::with_capacity(k * per_blob);
    let mut labels = Vec::with_capacity(k * per_blob);
    for _ in 0..per_blob {
        for (c, m) in means.iter().enumerate() {
            rows.push(m.iter().map(|v| v + noise.sample(&mut rng)).collect::<Vec<f32>>());
            labels.push(c);
        }
    }
    Blobs { points: Matrix::from_rows(&rows).unwrap(), labels, means }
}
