//! Central finite-difference checks of tape operations and of the full
//! classifier loss.
//!
//! Each op is paired with an `f64` reference written from its definition.
//! The scalar objective is `Σ wᵢ·yᵢ` with fixed random weights; central
//! differences (step 1e-3) of the reference objective are compared with the
//! tape's analytic gradients.

use crate::*;
use fracvit::tensor::{dropout_mask, Mode, RunningStats, Tape, Tensor, Var};
use fracvit::vit::{ModelVars, ViTConfig, ViTModel};
use rand::Rng;

pub const STEP: f64 = 1e-3;
pub const TOL: f64 = 1e-4;

type Build = Box<dyn Fn(&mut Tape<'_>, &[Var]) -> Var>;
type Reference = Box<dyn Fn(&[Vec<f64>]) -> Vec<f64>>;

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<(Vec<usize>, Vec<f32>)>,
    /// Indices of inputs whose gradient is checked.
    pub check: Vec<usize>,
    pub build: Build,
    pub reference: Reference,
}

/// Largest relative error between the tape gradient and central finite
/// differences of the reference over the checked inputs.
pub fn run(case: &Case) -> f64 {
    let tensors: Vec<Tensor> = case
        .inputs
        .iter()
        .map(|(s, d)| Tensor::new(s.clone(), d.clone()).unwrap().with_requires_grad(true))
        .collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t)).collect();
    let y = (case.build)(&mut tape, &vars);
    let out_len = tape.value(y).len();
    let mut r = rng(99);
    let weights = random_vec(&mut r, out_len, -1.0, 1.0);
    let inputs64: Vec<Vec<f64>> = case.inputs.iter().map(|(_, d)| to64(d)).collect();

    let reference_out = (case.reference)(&inputs64);
    for (a, b) in tape.value(y).iter().zip(&reference_out) {
        assert!(
            (*a as f64 - b).abs() <= 1e-5 * b.abs().max(1.0),
            "{}: forward mismatch {a} vs {b}",
            case.name
        );
    }

    let wv = tape.input(tape.shape(y).to_vec(), weights.clone()).unwrap();
    let prod = tape.mul(y, wv).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss).unwrap();

    let w64 = to64(&weights);
    let mut worst = 0.0f64;
    for &idx in &case.check {
        let objective = |x: &[f64]| {
            let mut all = inputs64.clone();
            all[idx] = x.to_vec();
            (case.reference)(&all).iter().zip(&w64).map(|(a, b)| a * b).sum::<f64>()
        };
        let numeric = central_diff(&inputs64[idx], STEP, &objective);
        let analytic = tape.grad(vars[idx]).expect("gradient populated");
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, n) in analytic.iter().zip(&numeric) {
            worst = worst.max(rel_err(*a as f64, *n, 1e-2 * scale.max(1e-3)));
        }
    }
    worst
}

/// One case per differentiable tape operation.
pub fn cases() -> Vec<Case> {
    let mut r = rng(7);
    let mut v = |n: usize| random_vec(&mut r, n, -1.5, 1.5);
    let mut out = Vec::new();

    out.push(Case {
        name: "matmul",
        inputs: vec![(vec![3, 4], v(12)), (vec![4, 2], v(8))],
        check: vec![0, 1],
        build: Box::new(|t, x| t.matmul(x[0], x[1]).unwrap()),
        reference: Box::new(|x| matmul64(&x[0], &x[1], 3, 4, 2)),
    });
    out.push(Case {
        name: "add",
        inputs: vec![(vec![2, 3], v(6)), (vec![2, 3], v(6))],
        check: vec![0, 1],
        build: Box::new(|t, x| t.add(x[0], x[1]).unwrap()),
        reference: Box::new(|x| x[0].iter().zip(&x[1]).map(|(a, b)| a + b).collect()),
    });
    out.push(Case {
        name: "sub",
        inputs: vec![(vec![2, 3], v(6)), (vec![2, 3], v(6))],
        check: vec![0, 1],
        build: Box::new(|t, x| t.sub(x[0], x[1]).unwrap()),
        reference: Box::new(|x| x[0].iter().zip(&x[1]).map(|(a, b)| a - b).collect()),
    });
    out.push(Case {
        name: "mul",
        inputs: vec![(vec![2, 3], v(6)), (vec![2, 3], v(6))],
        check: vec![0, 1],
        build: Box::new(|t, x| t.mul(x[0], x[1]).unwrap()),
        reference: Box::new(|x| x[0].iter().zip(&x[1]).map(|(a, b)| a * b).collect()),
    });
    out.push(Case {
        name: "add_broadcast",
        inputs: vec![(vec![6, 3], v(18)), (vec![2, 3], v(6))],
        check: vec![0, 1],
        build: Box::new(|t, x| t.add_broadcast(x[0], x[1]).unwrap()),
        reference: Box::new(|x| {
            (0..18).map(|i| x[0][i] + x[1][((i / 3) % 2) * 3 + i % 3]).collect()
        }),
    });
    out.push(Case {
        name: "scale",
        inputs: vec![(vec![5], v(5))],
        check: vec![0],
        build: Box::new(|t, x| t.scale(x[0], -2.5)),
        reference: Box::new(|x| x[0].iter().map(|a| -2.5 * a).collect()),
    });
    out.push(Case {
        name: "sum",
        inputs: vec![(vec![2, 2], v(4))],
        check: vec![0],
        build: Box::new(|t, x| t.sum(x[0])),
        reference: Box::new(|x| vec![x[0].iter().sum()]),
    });
    out.push(Case {
        name: "mean",
        inputs: vec![(vec![2, 3], v(6))],
        check: vec![0],
        build: Box::new(|t, x| t.mean(x[0])),
        reference: Box::new(|x| vec![x[0].iter().sum::<f64>() / 6.0]),
    });
    out.push(Case {
        name: "gelu",
        inputs: vec![(vec![3, 4], v(12))],
        check: vec![0],
        build: Box::new(|t, x| t.gelu(x[0])),
        reference: Box::new(|x| x[0].iter().map(|&a| gelu64(a)).collect()),
    });
    // Keep relu inputs away from the kink.
    let relu_in: Vec<f32> = v(10).iter().map(|a| if a.abs() < 0.1 { a + 0.3 } else { *a }).collect();
    out.push(Case {
        name: "relu",
        inputs: vec![(vec![10], relu_in)],
        check: vec![0],
        build: Box::new(|t, x| t.relu(x[0])),
        reference: Box::new(|x| x[0].iter().map(|&a| a.max(0.0)).collect()),
    });
    out.push(Case {
        name: "softmax_last_axis",
        inputs: vec![(vec![3, 4], v(12))],
        check: vec![0],
        build: Box::new(|t, x| t.softmax(x[0], 1).unwrap()),
        reference: Box::new(|x| x[0].chunks(4).flat_map(softmax64).collect()),
    });
    out.push(Case {
        name: "softmax_first_axis",
        inputs: vec![(vec![3, 4], v(12))],
        check: vec![0],
        build: Box::new(|t, x| t.softmax(x[0], 0).unwrap()),
        reference: Box::new(|x| {
            let mut out = vec![0.0; 12];
            for c in 0..4 {
                let col: Vec<f64> = (0..3).map(|r| x[0][r * 4 + c]).collect();
                for (r, p) in softmax64(&col).into_iter().enumerate() {
                    out[r * 4 + c] = p;
                }
            }
            out
        }),
    });
    out.push(Case {
        name: "layer_norm",
        inputs: vec![(vec![3, 5], v(15)), (vec![5], v(5)), (vec![5], v(5))],
        check: vec![0, 1, 2],
        build: Box::new(|t, x| t.layer_norm(x[0], x[1], x[2]).unwrap()),
        reference: Box::new(|x| layer_norm64(&x[0], 5, &x[1], &x[2], 1e-6)),
    });
    out.push(Case {
        name: "batch_norm_train",
        inputs: vec![(vec![4, 3], v(12)), (vec![3], v(3)), (vec![3], v(3))],
        check: vec![0, 1, 2],
        build: Box::new(|t, x| {
            t.batch_norm(x[0], x[1], x[2], &RunningStats::new(3), Mode::Train).unwrap().out
        }),
        reference: Box::new(|x| {
            let mut out = vec![0.0; 12];
            for c in 0..3 {
                let col: Vec<f64> = (0..4).map(|r| x[0][r * 3 + c]).collect();
                let mean = col.iter().sum::<f64>() / 4.0;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
                for r in 0..4 {
                    out[r * 3 + c] = (col[r] - mean) / (var + 1e-5).sqrt() * x[1][c] + x[2][c];
                }
            }
            out
        }),
    });
    let stats = RunningStats {
        mean: vec![0.1, -0.2, 0.3],
        var: vec![0.5, 1.5, 2.0],
        momentum: 0.9,
        eps: 1e-5,
    };
    let stats_ref = stats.clone();
    out.push(Case {
        name: "batch_norm_infer",
        inputs: vec![(vec![2, 3], v(6)), (vec![3], v(3)), (vec![3], v(3))],
        check: vec![0, 1, 2],
        build: Box::new(move |t, x| t.batch_norm(x[0], x[1], x[2], &stats, Mode::Infer).unwrap().out),
        reference: Box::new(move |x| {
            (0..6)
                .map(|i| {
                    let c = i % 3;
                    (x[0][i] - stats_ref.mean[c] as f64) / (stats_ref.var[c] as f64 + 1e-5).sqrt() * x[1][c]
                        + x[2][c]
                })
                .collect()
        }),
    });
    let mask = dropout_mask(8, 0.5, Mode::Train, 11).unwrap();
    out.push(Case {
        name: "dropout",
        inputs: vec![(vec![8], v(8))],
        check: vec![0],
        build: Box::new(|t, x| t.dropout(x[0], 0.5, Mode::Train, 11).unwrap()),
        reference: Box::new(move |x| x[0].iter().zip(&mask).map(|(a, m)| a * *m as f64).collect()),
    });
    let targets = [2usize, 0, 3];
    let weights = [0.5f32, 2.0, 1.0];
    out.push(Case {
        name: "cross_entropy",
        inputs: vec![(vec![3, 4], v(12))],
        check: vec![0],
        build: Box::new(move |t, x| t.cross_entropy(x[0], &targets, Some(&weights)).unwrap()),
        reference: Box::new(move |x| {
            let loss: f64 = x[0]
                .chunks(4)
                .enumerate()
                .map(|(i, row)| -(weights[i] as f64) * softmax64(row)[targets[i]].ln())
                .sum();
            vec![loss / 3.0]
        }),
    });
    let mut r2 = rng(21);
    let dist = |r: &mut rand_chacha::ChaCha8Rng| {
        let raw = random_vec(r, 12, 0.5, 1.0);
        raw.chunks(3)
            .flat_map(|c| {
                let s: f32 = c.iter().sum();
                c.iter().map(move |v| v / s).collect::<Vec<_>>()
            })
            .collect::<Vec<f32>>()
    };
    out.push(Case {
        name: "kl_divergence",
        inputs: vec![(vec![4, 3], dist(&mut r2)), (vec![4, 3], dist(&mut r2))],
        check: vec![0, 1],
        build: Box::new(|t, x| t.kl_divergence(x[0], x[1]).unwrap()),
        reference: Box::new(|x| {
            let s: f64 = x[0].iter().zip(&x[1]).map(|(p, q)| p * (p / q).ln()).sum();
            vec![s / 4.0]
        }),
    });
    out.push(Case {
        name: "mse",
        inputs: vec![(vec![2, 3], v(6)), (vec![2, 3], v(6))],
        check: vec![0, 1],
        build: Box::new(|t, x| t.mse(x[0], x[1]).unwrap()),
        reference: Box::new(|x| {
            vec![x[0].iter().zip(&x[1]).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 6.0]
        }),
    });
    // two images of 3 tokens, hidden 4, 2 heads
    out.push(Case {
        name: "attention",
        inputs: vec![(vec![6, 12], v(72))],
        check: vec![0],
        build: Box::new(|t, x| t.attention(x[0], 2, 3, 2).unwrap().0),
        reference: Box::new(|x| {
            let mut out = attention64(&x[0][..36], 3, 4, 2).0;
            out.extend(attention64(&x[0][36..], 3, 4, 2).0);
            out
        }),
    });
    out.push(Case {
        name: "prepend_token",
        inputs: vec![(vec![4, 3], v(12)), (vec![1, 3], v(3))],
        check: vec![0, 1],
        build: Box::new(|t, x| t.prepend_token(x[0], x[1], 2).unwrap()),
        reference: Box::new(|x| {
            let mut out = Vec::new();
            for b in 0..2 {
                out.extend(&x[1]);
                out.extend(&x[0][b * 6..(b + 1) * 6]);
            }
            out
        }),
    });
    out.push(Case {
        name: "gather_rows",
        inputs: vec![(vec![4, 2], v(8))],
        check: vec![0],
        build: Box::new(|t, x| t.gather_rows(x[0], &[3, 0, 3]).unwrap()),
        reference: Box::new(|x| [3usize, 0, 3].iter().flat_map(|&r| x[0][r * 2..r * 2 + 2].to_vec()).collect()),
    });
    out.push(Case {
        name: "student_t",
        inputs: vec![(vec![4, 3], v(12)), (vec![2, 3], v(6))],
        check: vec![0, 1],
        build: Box::new(|t, x| t.student_t(x[0], x[1], 1.0).unwrap()),
        reference: Box::new(|x| {
            let mut out = Vec::new();
            for i in 0..4 {
                let k: Vec<f64> = (0..2)
                    .map(|j| {
                        let d: f64 = (0..3).map(|c| (x[0][i * 3 + c] - x[1][j * 3 + c]).powi(2)).sum();
                        1.0 / (1.0 + d)
                    })
                    .collect();
                let s: f64 = k.iter().sum();
                out.extend(k.iter().map(|v| v / s));
            }
            out
        }),
    });
    out
}


/// Outcome of the classifier-loss check for one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub worst: f64,
}

/// A classifier configuration with fewer than 5k parameters, small enough
/// for a full finite-difference sweep.
pub fn small_vit_config() -> ViTConfig {
    ViTConfig {
        image_size: 8,
        patch_size: 4,
        channels: 1,
        hidden_size: 8,
        num_heads: 2,
        num_layers: 2,
        mlp_units: 16,
        head_units: 8,
        num_classes: 3,
        dropout_keep: 0.5,
    }
}

/// Builds a model whose parameters are spread well away from their
/// initial values so that every path carries gradient.
pub fn perturbed_model(config: ViTConfig, seed: u64) -> ViTModel {
    let mut model = ViTModel::new(config, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    for p in model.parameters_mut() {
        for v in p.data_mut() {
            *v += r.random_range(-0.3f32..0.3);
        }
    }
    model
}

/// Compares tape gradients of the mean cross-entropy of a train-mode batch
/// with central differences of [`vit_ref::loss64`]. `per_tensor` limits the
/// number of randomly chosen coordinates per parameter tensor.
pub fn vit_loss_check(model: &ViTModel, batch: usize, seed: u64, per_tensor: Option<usize>) -> Vec<ParamCheck> {
    let cfg = model.config().clone();
    let side = cfg.image_size;
    let mut r = rng(seed);
    let images: Vec<Tensor> = (0..batch)
        .map(|_| Tensor::new(vec![1, side, side], random_vec(&mut r, side * side, 0.0, 1.0)).unwrap())
        .collect();
    let targets: Vec<usize> = (0..batch).map(|i| i % cfg.num_classes).collect();
    let dropout_seed = seed.wrapping_add(1);

    let mut tape = Tape::new();
    let vars = ModelVars::register(&mut tape, model, true);
    let refs: Vec<&Tensor> = images.iter().collect();
    let fwd = model.forward_batch(&mut tape, &vars, &refs, Mode::Train, dropout_seed, false).unwrap();
    let loss = tape.cross_entropy(fwd.logits, &targets, None).unwrap();
    tape.backward(loss).unwrap();
    let grads = ViTModel::grads_from_tape(&tape, &vars);

    let mask = to64(&dropout_mask(batch * cfg.head_units, cfg.dropout_keep, Mode::Train, dropout_seed).unwrap());
    let images64: Vec<Vec<f64>> = images.iter().map(|t| to64(t.data())).collect();
    let mut params: Vec<Vec<f64>> = model.named_parameters().iter().map(|(_, t)| to64(t.data())).collect();
    let reference = vit_ref::loss64(&cfg, &params, &images64, &targets, &mask);
    assert!(
        (reference - tape.value(loss)[0] as f64).abs() < 1e-4 * reference.abs().max(1.0),
        "reference loss {reference} disagrees with tape loss {}",
        tape.value(loss)[0]
    );

    let names: Vec<String> = model.named_parameters().into_iter().map(|(n, _)| n).collect();
    let mut out = Vec::with_capacity(names.len());
    for (pi, name) in names.into_iter().enumerate() {
        let n = params[pi].len();
        let coords: Vec<usize> = match per_tensor {
            Some(k) if k < n => (0..k).map(|_| r.random_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        let analytic = &grads[pi];
        let mut numeric = Vec::with_capacity(coords.len());
        for &c in &coords {
            let orig = params[pi][c];
            params[pi][c] = orig + STEP;
            let hi = vit_ref::loss64(&cfg, &params, &images64, &targets, &mask);
            params[pi][c] = orig - STEP;
            let lo = vit_ref::loss64(&cfg, &params, &images64, &targets, &mask);
            params[pi][c] = orig;
            numeric.push((hi - lo) / (2.0 * STEP));
        }
        let scale = analytic
            .iter()
            .map(|v| v.abs() as f64)
            .chain(numeric.iter().map(|v| v.abs()))
            .fold(0.0f64, f64::max);
        let worst = coords
            .iter()
            .zip(&numeric)
            .map(|(&c, &num)| rel_err(analytic[c] as f64, num, 1e-2 * scale.max(1e-6)))
            .fold(0.0f64, f64::max);
        out.push(ParamCheck { name, checked: coords.len(), worst });
    }
    out
}
