use std::collections::BTreeMap;

use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;

use crate::error::{Error, Result};

/// Contingency table between two labellings after mapping each distinct
/// label to a dense index.
struct Contingency {
    table: Vec<Vec<u64>>,
    rows: Vec<u64>,
    cols: Vec<u64>,
    n: u64,
}

fn dense(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut ids = BTreeMap::new();
    for &l in labels {
        let next = ids.len();
        ids.entry(l).or_insert(next);
    }
    (labels.iter().map(|l| ids[l]).collect(), ids.len())
}

fn contingency(a: &[usize], b: &[usize]) -> Result<Contingency> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("labellings of length {} and {}", a.len(), b.len())));
    }
    let (a, ka) = dense(a);
    let (b, kb) = dense(b);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&i, &j) in a.iter().zip(&b) {
        table[i][j] += 1;
    }
    let rows = table.iter().map(|r| r.iter().sum()).collect();
    let cols = (0..kb).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    Ok(Contingency { table, rows, cols, n: a.len() as u64 })
}

fn entropy(counts: &[u64], n: f64) -> f64 {
    counts.iter().filter(|&&c| c > 0).map(|&c| {
        let p = c as f64 / n;
        -p * p.ln()
    }).sum()
}

/// Mutual information normalised by the arithmetic mean of the two
/// entropies. Two constant labellings score 1.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() < 2 {
        return Err(Error::Contract("NMI needs at least two samples".into()));
    }
    let c = contingency(a, b)?;
    let n = c.n as f64;
    let (ha, hb) = (entropy(&c.rows, n), entropy(&c.cols, n));
    if ha == 0.0 && hb == 0.0 {
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for (i, row) in c.table.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij > 0 {
                let nij = nij as f64;
                mi += nij / n * (n * nij / (c.rows[i] as f64 * c.cols[j] as f64)).ln();
            }
        }
    }
    Ok((mi / ((ha + hb) / 2.0)).clamp(0.0, 1.0))
}

fn pairs(k: u64) -> f64 {
    (k * k.saturating_sub(1)) as f64 / 2.0
}

/// Adjusted Rand index. Returns 1 when the chance-adjusted denominator
/// vanishes (both labellings trivial in the same way).
pub fn ari(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() < 2 {
        return Err(Error::Contract("ARI needs at least two samples".into()));
    }
    let c = contingency(a, b)?;
    let index: f64 = c.table.iter().flatten().map(|&x| pairs(x)).sum();
    let sa: f64 = c.rows.iter().map(|&x| pairs(x)).sum();
    let sb: f64 = c.cols.iter().map(|&x| pairs(x)).sum();
    let expected = sa * sb / pairs(c.n);
    let max = (sa + sb) / 2.0;
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Best accuracy over one-to-one cluster→class assignments (Hungarian
/// algorithm on the padded contingency table).
pub fn clustering_accuracy(truth: &[usize], clusters: &[usize]) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::Contract("clustering accuracy needs at least one sample".into()));
    }
    let c = contingency(clusters, truth)?;
    let size = c.rows.len().max(c.cols.len());
    let weights = Matrix::from_fn(size, size, |(i, j)| {
        c.table.get(i).and_then(|r| r.get(j)).map_or(0i64, |&v| v as i64)
    });
    let (matched, _) = kuhn_munkres(&weights);
    Ok(matched as f64 / c.n as f64)
}
