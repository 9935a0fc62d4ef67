use std::path::Path;

use serde::{Deserialize, Serialize};

use super::autoencoder::Autoencoder;
use crate::error::{Error, Result};
use crate::io::Matrix;
use crate::metrics::{ari, clustering_accuracy, nmi};
use crate::tensor::{kernels, kl_sum, Tape, Tensor};
use crate::train::RAdam;

/// Degrees of freedom of the Student's-t kernel.
pub const ALPHA: f64 = 1.0;

/// Student's-t soft assignment of each row of `z` to the centroids.
pub fn soft_assign(z: &Matrix, centroids: &Matrix) -> Result<Matrix> {
    if z.cols != centroids.cols {
        return Err(Error::DimensionMismatch {
            op: "soft_assign",
            lhs: vec![z.rows, z.cols],
            rhs: vec![centroids.rows, centroids.cols],
        });
    }
    let k = centroids.rows;
    let expo = (ALPHA + 1.0) / 2.0;
    let mut q = Vec::with_capacity(z.rows * k);
    for i in 0..z.rows {
        let kern: Vec<f64> = (0..k)
            .map(|j| {
                let d: f64 = z.row(i).iter().zip(centroids.row(j)).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
                (1.0 + d / ALPHA).powf(-expo)
            })
            .collect();
        let s: f64 = kern.iter().sum();
        q.extend(kern.iter().map(|v| (v / s) as f32));
    }
    Matrix::new(z.rows, k, q)
}

/// Sharpened target `p_ij ∝ q_ij² / f_j` with cluster frequencies
/// `f_j = Σ_i q_ij`, rows normalised.
pub fn target_distribution(q: &Matrix) -> Matrix {
    let k = q.cols;
    let f: Vec<f64> = (0..k).map(|j| (0..q.rows).map(|i| q.row(i)[j] as f64).sum()).collect();
    let mut p = Vec::with_capacity(q.data.len());
    for i in 0..q.rows {
        let w: Vec<f64> =
            q.row(i).iter().zip(&f).map(|(&v, &fj)| if fj > 0.0 { (v as f64).powi(2) / fj } else { 0.0 }).collect();
        let s: f64 = w.iter().sum();
        p.extend(w.iter().map(|v| (v / s) as f32));
    }
    Matrix::new(q.rows, k, p).expect("same shape as q")
}

pub fn hard_assignments(q: &Matrix) -> Vec<usize> {
    (0..q.rows).map(|i| kernels::argmax(q.row(i))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecConfig {
    pub clusters: usize,
    /// Gradient steps between target-distribution updates.
    pub update_interval: usize,
    /// Stop once fewer than this fraction of samples change cluster.
    pub tol: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub max_iterations: usize,
    pub kmeans_restarts: usize,
    pub seed: u64,
}

impl Default for DecConfig {
    fn default() -> Self {
        Self {
            clusters: 7,
            update_interval: 140,
            tol: 0.001,
            batch_size: 256,
            lr: 1e-3,
            max_iterations: 20_000,
            kmeans_restarts: 10,
            seed: 0,
        }
    }
}

/// State at one target update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecRecord {
    pub iteration: usize,
    /// `KL(p‖q)` averaged over samples.
    pub loss: f64,
    /// Fraction of samples whose cluster changed since the previous update.
    pub delta_label: f64,
    pub accuracy: Option<f64>,
    pub nmi: Option<f64>,
    pub ari: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct DecOutcome {
    pub centroids: Matrix,
    pub q: Matrix,
    pub assignments: Vec<usize>,
    /// First entry describes the kmeans++ initialisation.
    pub history: Vec<DecRecord>,
    pub converged: bool,
    pub reseeds: usize,
}

fn record(iteration: usize, q: &Matrix, p: &Matrix, assign: &[usize], prev: &[usize], labels: Option<&[usize]>) -> Result<DecRecord> {
    let changed = assign.iter().zip(prev).filter(|(a, b)| a != b).count();
    let (accuracy, nmi_v, ari_v) = match labels {
        Some(y) => (Some(clustering_accuracy(y, assign)?), Some(nmi(y, assign)?), Some(ari(y, assign)?)),
        None => (None, None, None),
    };
    Ok(DecRecord {
        iteration,
        loss: kl_sum(&p.data, &q.data) / q.rows as f64,
        delta_label: changed as f64 / assign.len() as f64,
        accuracy,
        nmi: nmi_v,
        ari: ari_v,
    })
}

/// Moves centroids that own no sample onto the point farthest from its
/// nearest centroid. Returns the number of centroids moved.
fn reseed_empty(z: &Matrix, centroids: &mut Matrix, assign: &[usize]) -> usize {
    let mut moved = 0;
    for j in 0..centroids.rows {
        if assign.contains(&j) {
            continue;
        }
        let far = (0..z.rows)
            .max_by(|&a, &b| {
                let da = (0..centroids.rows).map(|c| kernels::sq_dist(z.row(a), centroids.row(c))).fold(f32::INFINITY, f32::min);
                let db = (0..centroids.rows).map(|c| kernels::sq_dist(z.row(b), centroids.row(c))).fold(f32::INFINITY, f32::min);
                da.total_cmp(&db)
            })
            .expect("non-empty data");
        log::warn!("cluster {j} lost all members; reseeding it at sample {far}");
        let cols = centroids.cols;
        centroids.data[j * cols..(j + 1) * cols].copy_from_slice(z.row(far));
        moved += 1;
    }
    moved
}

/// Refines `encoder` and `centroids` by minimising `KL(p‖q)` against a
/// periodically recomputed target. `labels`, when given, add accuracy, NMI
/// and ARI to each history record.
pub fn dec_train(
    encoder: &mut Autoencoder,
    centroids: Matrix,
    x: &Matrix,
    labels: Option<&[usize]>,
    config: &DecConfig,
) -> Result<DecOutcome> {
    if centroids.cols != encoder.latent_width() {
        return Err(Error::DimensionMismatch {
            op: "dec_train",
            lhs: vec![centroids.rows, centroids.cols],
            rhs: vec![encoder.latent_width()],
        });
    }
    if x.rows == 0 || config.update_interval == 0 || config.batch_size == 0 {
        return Err(Error::Config("DEC needs data, a positive update interval and a positive batch size".into()));
    }
    if let Some(y) = labels {
        if y.len() != x.rows {
            return Err(Error::Shape(format!("{} labels for {} samples", y.len(), x.rows)));
        }
    }
    let k = centroids.rows;
    let mut centroids = Tensor::new(vec![k, centroids.cols], centroids.data)?.with_requires_grad(true);
    let mut opt = RAdam::new(config.lr);
    let mut history = Vec::new();
    let mut reseeds = 0;
    let mut converged = false;

    let as_matrix = |t: &Tensor| Matrix::new(t.shape()[0], t.shape()[1], t.data().to_vec()).expect("2-d tensor");
    let z = encoder.encode(x)?;
    let q = soft_assign(&z, &as_matrix(&centroids))?;
    let mut prev = hard_assignments(&q);
    let mut p = target_distribution(&q);
    history.push(record(0, &q, &p, &prev, &prev, labels)?);

    let mut cursor = 0usize;
    for ite in 0..config.max_iterations {
        if ite > 0 && ite % config.update_interval == 0 {
            let z = encoder.encode(x)?;
            let mut mu = as_matrix(&centroids);
            let mut q = soft_assign(&z, &mu)?;
            let mut assign = hard_assignments(&q);
            let moved = reseed_empty(&z, &mut mu, &assign);
            if moved > 0 {
                reseeds += moved;
                centroids.data_mut().copy_from_slice(&mu.data);
                q = soft_assign(&z, &mu)?;
                assign = hard_assignments(&q);
            }
            p = target_distribution(&q);
            let rec = record(ite, &q, &p, &assign, &prev, labels)?;
            let delta = rec.delta_label;
            history.push(rec);
            prev = assign;
            if delta < config.tol {
                converged = true;
                break;
            }
        }

        let rows: Vec<usize> = (0..config.batch_size.min(x.rows)).map(|o| (cursor + o) % x.rows).collect();
        cursor = (cursor + rows.len()) % x.rows;
        let xb: Vec<f32> = rows.iter().flat_map(|&i| x.row(i).iter().copied()).collect();
        let pb: Vec<f32> = rows.iter().flat_map(|&i| p.row(i).iter().copied()).collect();
        let grads = {
            let mut tape = Tape::new();
            let enc = Autoencoder::register(&mut tape, &encoder.encoder);
            let mu = tape.leaf(&centroids);
            let input = tape.input(vec![rows.len(), x.cols], xb)?;
            let zb = encoder.forward_vars(&mut tape, &enc, input)?;
            let qb = tape.student_t(zb, mu, ALPHA as f32)?;
            let target = tape.input(vec![rows.len(), k], pb)?;
            let loss = tape.kl_divergence(target, qb)?;
            if !tape.value(loss)[0].is_finite() {
                return Err(Error::Numeric(format!("DEC loss became non-finite at iteration {ite}")));
            }
            tape.backward(loss)?;
            let mut g = Autoencoder::layer_grads(&tape, &enc);
            g.push(tape.grad(mu).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; centroids.numel()]));
            g
        };
        let grad_refs: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
        let mut params = encoder.encoder_slices();
        params.push(centroids.data_mut());
        opt.step_slices(&mut params, &grad_refs)?;
        if centroids.has_non_finite() {
            return Err(Error::Numeric(format!("non-finite centroid at iteration {ite}")));
        }
    }

    let mu = as_matrix(&centroids);
    let q = soft_assign(&encoder.encode(x)?, &mu)?;
    let assignments = hard_assignments(&q);
    Ok(DecOutcome { centroids: mu, q, assignments, history, converged, reseeds })
}

/// CSV with columns `sample_id, cluster, q_0 .. q_{k-1}`.
pub fn write_assignments(path: &Path, ids: &[String], q: &Matrix) -> Result<()> {
    if ids.len() != q.rows {
        return Err(Error::Shape(format!("{} ids for {} assignment rows", ids.len(), q.rows)));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    let mut header = vec!["sample_id".to_string(), "cluster".to_string()];
    header.extend((0..q.cols).map(|j| format!("q_{j}")));
    w.write_record(&header).map_err(|e| Error::Io(e.into()))?;
    for (i, id) in ids.iter().enumerate() {
        let mut row = vec![id.clone(), kernels::argmax(q.row(i)).to_string()];
        row.extend(q.row(i).iter().map(|v| format!("{v:.6}")));
        w.write_record(&row).map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}
