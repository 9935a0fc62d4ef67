//! Straight-line `f64` transformer classifier used as a finite-difference
//! reference. Parameters are passed in the model's enumeration order.

use crate::{attention64, layer_norm64, matmul64};
use fracvit::vit::ViTConfig;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn affine(x: &[f64], w: &[f64], b: &[f64], rows: usize, k: usize, n: usize) -> Vec<f64> {
    let mut y = matmul64(x, w, rows, k, n);
    for row in y.chunks_mut(n) {
        for (v, bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
    y
}

/// Logits `[batch, classes]` in train mode (batch statistics in the head
/// normalisation) with the given dropout mask.
pub fn logits64(cfg: &ViTConfig, p: &[Vec<f64>], images: &[Vec<f64>], mask: &[f64]) -> Vec<f64> {
    let (s, ps, h) = (cfg.image_size, cfg.patch_size, cfg.hidden_size);
    let g = s / ps;
    let t = g * g + 1;
    let pd = ps * ps;
    let mut it = p.iter();
    let mut next = || it.next().expect("parameter list too short").as_slice();
    let (pe_w, pe_b, cls, pos) = (next(), next(), next(), next());

    let batch = images.len();
    let mut xs: Vec<Vec<f64>> = Vec::new();
    for img in images {
        let mut x = vec![0.0; t * h];
        for c in 0..h {
            x[c] = cls[c] + pos[c];
        }
        for gy in 0..g {
            for gx in 0..g {
                let k = gy * g + gx;
                let mut patch = Vec::with_capacity(pd);
                for py in 0..ps {
                    for px in 0..ps {
                        patch.push(img[(gy * ps + py) * s + gx * ps + px]);
                    }
                }
                let e = affine(&patch, pe_w, pe_b, 1, pd, h);
                for c in 0..h {
                    x[(k + 1) * h + c] = e[c] + pos[(k + 1) * h + c];
                }
            }
        }
        xs.push(x);
    }

    for _ in 0..cfg.num_layers {
        let (g1, b1, wq, bq, wp, bp, g2, b2, w1, bb1, w2, bb2) = (
            next(),
            next(),
            next(),
            next(),
            next(),
            next(),
            next(),
            next(),
            next(),
            next(),
            next(),
            next(),
        );
        for x in xs.iter_mut() {
            let hn = layer_norm64(x, h, g1, b1, 1e-6);
            let qkv = affine(&hn, wq, bq, t, h, 3 * h);
            let (att, _) = attention64(&qkv, t, h, cfg.num_heads);
            let a = affine(&att, wp, bp, t, h, h);
            x.iter_mut().zip(&a).for_each(|(v, d)| *v += d);
            let hn = layer_norm64(x, h, g2, b2, 1e-6);
            let m: Vec<f64> = affine(&hn, w1, bb1, t, h, cfg.mlp_units).into_iter().map(gelu).collect();
            let m = affine(&m, w2, bb2, t, cfg.mlp_units, h);
            x.iter_mut().zip(&m).for_each(|(v, d)| *v += d);
        }
    }

    let (ng, nb) = (next(), next());
    let (dw, db, bg, bb, ow, ob) = (next(), next(), next(), next(), next(), next());
    let u = cfg.head_units;
    let mut hidden = Vec::with_capacity(batch * u);
    for x in &xs {
        let f = layer_norm64(&x[..h], h, ng, nb, 1e-6);
        hidden.extend(affine(&f, dw, db, 1, h, u).into_iter().map(gelu));
    }
    for c in 0..u {
        let mean = (0..batch).map(|r| hidden[r * u + c]).sum::<f64>() / batch as f64;
        let var = (0..batch).map(|r| (hidden[r * u + c] - mean).powi(2)).sum::<f64>() / batch as f64;
        for r in 0..batch {
            let v = &mut hidden[r * u + c];
            *v = ((*v - mean) / (var + 1e-5).sqrt() * bg[c] + bb[c]) * mask[r * u + c];
        }
    }
    affine(&hidden, ow, ob, batch, u, cfg.num_classes)
}

pub fn loss64(cfg: &ViTConfig, p: &[Vec<f64>], images: &[Vec<f64>], targets: &[usize], mask: &[f64]) -> f64 {
    let logits = logits64(cfg, p, images, mask);
    let k = cfg.num_classes;
    let mut total = 0.0;
    for (row, &t) in logits.chunks(k).zip(targets) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[t];
    }
    total / targets.len() as f64
}
