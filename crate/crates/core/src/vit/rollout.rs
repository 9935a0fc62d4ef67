use serde::{Deserialize, Serialize};

use super::model::AttentionTrace;
use crate::error::{Error, Result};
use crate::tensor::kernels::gemm;

/// Patch-level relevance map derived from attention rollout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub grid: usize,
    /// Row-major `grid × grid` values.
    pub values: Vec<f32>,
}

impl Heatmap {
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.grid + col]
    }

    /// Values scaled so the largest is 1. An all-zero map is returned unchanged.
    pub fn normalized(&self) -> Heatmap {
        let max = self.values.iter().cloned().fold(0.0f32, f32::max);
        let values = if max > 0.0 {
            self.values.iter().map(|v| v / max).collect()
        } else {
            self.values.clone()
        };
        Heatmap { grid: self.grid, values }
    }

    /// Index of the most relevant patch.
    pub fn argmax(&self) -> usize {
        crate::tensor::kernels::argmax(&self.values)
    }
}

/// Full rollout output: the cumulative product after each layer and the
/// class-token heatmap of the final product.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub tokens: usize,
    /// `tokens × tokens` cumulative products, one per layer.
    pub products: Vec<Vec<f32>>,
    pub heatmap: Heatmap,
}

/// Head-averaged attention plus identity, row-normalised.
pub fn layer_transition(trace: &AttentionTrace, layer: usize) -> Vec<f32> {
    let t = trace.tokens;
    let mut a = vec![0.0f32; t * t];
    for h in 0..trace.heads {
        for (dst, src) in a.iter_mut().zip(trace.head(layer, h)) {
            *dst += src;
        }
    }
    let inv = 1.0 / trace.heads as f32;
    for (i, row) in a.chunks_mut(t).enumerate() {
        row.iter_mut().for_each(|v| *v *= inv);
        row[i] += 1.0;
        let s: f32 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    a
}

pub fn attention_rollout(trace: &AttentionTrace) -> Result<Rollout> {
    let t = trace.tokens;
    if trace.layers.is_empty() {
        return Err(Error::Contract("attention rollout needs at least one layer".into()));
    }
    let grid = ((t - 1) as f64).sqrt().round() as usize;
    if grid * grid + 1 != t {
        return Err(Error::Shape(format!("{t} tokens do not form a class token plus a square patch grid")));
    }
    let mut result: Vec<f32> = (0..t * t).map(|i| if i / t == i % t { 1.0 } else { 0.0 }).collect();
    let mut products = Vec::with_capacity(trace.layers.len());
    for layer in 0..trace.layers.len() {
        let a = layer_transition(trace, layer);
        result = gemm(&a, &result, t, t, t);
        products.push(result.clone());
    }
    let values = result[1..t].to_vec();
    Ok(Rollout { tokens: t, products, heatmap: Heatmap { grid, values } })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_trace(tokens: usize, layers: usize) -> AttentionTrace {
        let v = 1.0 / tokens as f32;
        AttentionTrace { heads: 2, tokens, layers: vec![vec![v; 2 * tokens * tokens]; layers] }
    }

    #[test]
    fn uniform_attention_gives_flat_heatmap() {
        let r = attention_rollout(&uniform_trace(5, 3)).unwrap();
        assert_eq!(r.heatmap.grid, 2);
        let first = r.heatmap.values[0];
        assert!(r.heatmap.values.iter().all(|v| (v - first).abs() < 1e-6));
        let n = r.heatmap.normalized();
        assert!(n.values.iter().all(|v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn products_stay_row_stochastic() {
        let r = attention_rollout(&uniform_trace(10, 4)).unwrap();
        for p in &r.products {
            for row in p.chunks(10) {
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn non_square_grid_is_rejected() {
        assert!(attention_rollout(&uniform_trace(6, 1)).is_err());
    }

    #[test]
    fn zero_map_normalizes_to_itself() {
        let h = Heatmap { grid: 2, values: vec![0.0; 4] };
        assert_eq!(h.normalized(), h);
    }
}
