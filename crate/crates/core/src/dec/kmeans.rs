use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::Matrix;
use crate::tensor::kernels::sq_dist;

pub const MAX_LLOYD_ITERATIONS: usize = 300;
pub const SHIFT_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centroids: Matrix,
    pub labels: Vec<usize>,
    /// Sum of squared distances to the assigned centroid.
    pub inertia: f64,
    pub iterations: usize,
}

fn nearest(point: &[f32], centroids: &Matrix) -> (usize, f32) {
    (0..centroids.rows)
        .map(|j| (j, sq_dist(point, centroids.row(j))))
        .fold((0, f32::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

fn distinct_rows(points: &Matrix) -> usize {
    let mut rows: Vec<Vec<u32>> = (0..points.rows).map(|i| points.row(i).iter().map(|v| v.to_bits()).collect()).collect();
    rows.sort_unstable();
    rows.dedup();
    rows.len()
}

/// D² seeding: the first centre uniformly, each further centre with
/// probability proportional to its squared distance from the chosen ones.
fn seed_centres(points: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut chosen = vec![rng.random_range(0..points.rows)];
    let mut d2: Vec<f64> = (0..points.rows).map(|i| sq_dist(points.row(i), points.row(chosen[0])) as f64).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut pick = d2.iter().rposition(|&d| d > 0.0).expect("positive total");
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            rng.random_range(0..points.rows)
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(next)) as f64);
        }
    }
    let rows: Vec<Vec<f32>> = chosen.iter().map(|&i| points.row(i).to_vec()).collect();
    Matrix::from_rows(&rows).expect("uniform width")
}

fn lloyd(points: &Matrix, mut centroids: Matrix) -> KMeans {
    let (k, dim) = (centroids.rows, centroids.cols);
    let mut labels = vec![0usize; points.rows];
    let mut iterations = 0;
    loop {
        iterations += 1;
        let mut dists = vec![0f32; points.rows];
        for i in 0..points.rows {
            (labels[i], dists[i]) = nearest(points.row(i), &centroids);
        }
        let mut sums = vec![0f64; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..points.rows {
            counts[labels[i]] += 1;
            for (s, &v) in sums[labels[i] * dim..(labels[i] + 1) * dim].iter_mut().zip(points.row(i)) {
                *s += v as f64;
            }
        }
        let mut next = centroids.clone();
        for j in 0..k {
            let row = &mut next.data[j * dim..(j + 1) * dim];
            if counts[j] == 0 {
                let far = (0..points.rows).max_by(|&a, &b| dists[a].total_cmp(&dists[b])).expect("points exist");
                row.copy_from_slice(points.row(far));
                dists[far] = 0.0;
                log::debug!("kmeans: reseeded empty cluster {j} from point {far}");
            } else {
                for (c, s) in row.iter_mut().zip(&sums[j * dim..(j + 1) * dim]) {
                    *c = (s / counts[j] as f64) as f32;
                }
            }
        }
        let shift = (0..k).map(|j| sq_dist(next.row(j), centroids.row(j)) as f64).fold(0.0, f64::max).sqrt();
        centroids = next;
        if shift < SHIFT_TOLERANCE || iterations >= MAX_LLOYD_ITERATIONS {
            break;
        }
    }
    let mut inertia = 0.0;
    for i in 0..points.rows {
        let (j, d) = nearest(points.row(i), &centroids);
        labels[i] = j;
        inertia += d as f64;
    }
    KMeans { centroids, labels, inertia, iterations }
}

/// kmeans++ seeding followed by Lloyd iterations, keeping the lowest-inertia
/// result of `restarts` seedings.
pub fn kmeans_pp(points: &Matrix, k: usize, restarts: usize, seed: u64) -> Result<KMeans> {
    if k == 0 || restarts == 0 {
        return Err(Error::Config("kmeans needs k > 0 and at least one restart".into()));
    }
    let distinct = distinct_rows(points);
    if k > distinct {
        return Err(Error::Config(format!("cannot place {k} centroids on {distinct} distinct points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeans> = None;
    for _ in 0..restarts {
        let run = lloyd(points, seed_centres(points, k, &mut rng));
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}
