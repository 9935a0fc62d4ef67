use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Matrix;
use crate::tensor::{kernels, Tape, Tensor, Var};
use crate::train::RAdam;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `[in, out]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    fn glorot(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f32).sqrt();
        Self {
            weight: Tensor::uniform(&[fan_in, fan_out], -limit, limit, rng).with_requires_grad(true),
            bias: Tensor::zeros(&[fan_out]).with_requires_grad(true),
        }
    }

    fn apply(&self, x: &[f32], rows: usize) -> Vec<f32> {
        let (i, o) = (self.weight.shape()[0], self.weight.shape()[1]);
        let mut y = kernels::gemm(x, self.weight.data(), rows, i, o);
        for row in y.chunks_mut(o) {
            row.iter_mut().zip(self.bias.data()).for_each(|(v, b)| *v += b);
        }
        y
    }
}

/// Fully connected autoencoder. `widths` lists the encoder layer widths from
/// input to latent; the decoder mirrors them. A single width means an
/// identity encoder with no parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub encoder: Vec<Dense>,
    pub decoder: Vec<Dense>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 200, batch_size: 256, lr: 1e-3, seed: 0 }
    }
}

pub(crate) struct LayerVars {
    weight: Var,
    bias: Var,
}

impl Autoencoder {
    pub fn new(widths: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) {
            return Err(Error::Config(format!("autoencoder widths must be non-empty and positive, got {widths:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = widths.windows(2).map(|w| Dense::glorot(w[0], w[1], &mut rng)).collect();
        let decoder = widths.windows(2).rev().map(|w| Dense::glorot(w[1], w[0], &mut rng)).collect();
        Ok(Self { widths: widths.to_vec(), activation, encoder, decoder })
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn latent_width(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }

    fn activate(&self, x: &mut [f32]) {
        if self.activation == Activation::Relu {
            x.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }

    fn check_width(&self, x: &Matrix) -> Result<()> {
        if x.cols != self.input_width() {
            return Err(Error::DimensionMismatch {
                op: "autoencoder",
                lhs: vec![x.rows, x.cols],
                rhs: vec![self.input_width()],
            });
        }
        Ok(())
    }

    fn run(&self, layers: &[Dense], x: &Matrix) -> Matrix {
        let mut h = x.data.clone();
        for (l, layer) in layers.iter().enumerate() {
            h = layer.apply(&h, x.rows);
            if l + 1 < layers.len() {
                self.activate(&mut h);
            }
        }
        let cols = layers.last().map_or(x.cols, |l| l.weight.shape()[1]);
        Matrix::new(x.rows, cols, h).expect("layer widths chain")
    }

    /// Latent codes, one row per input row.
    pub fn encode(&self, x: &Matrix) -> Result<Matrix> {
        self.check_width(x)?;
        Ok(self.run(&self.encoder, x))
    }

    pub fn reconstruct(&self, x: &Matrix) -> Result<Matrix> {
        let z = self.encode(x)?;
        Ok(self.run(&self.decoder, &z))
    }

    pub fn reconstruction_error(&self, x: &Matrix) -> Result<f64> {
        let r = self.reconstruct(x)?;
        Ok(r.data.iter().zip(&x.data).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / x.data.len() as f64)
    }

    pub(crate) fn register<'p>(tape: &mut Tape<'p>, layers: &'p [Dense]) -> Vec<LayerVars> {
        layers.iter().map(|l| LayerVars { weight: tape.leaf(&l.weight), bias: tape.leaf(&l.bias) }).collect()
    }

    pub(crate) fn forward_vars(&self, tape: &mut Tape<'_>, vars: &[LayerVars], mut x: Var) -> Result<Var> {
        for (l, v) in vars.iter().enumerate() {
            x = tape.linear(x, v.weight, v.bias)?;
            if l + 1 < vars.len() && self.activation == Activation::Relu {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }

    pub(crate) fn layer_grads(tape: &Tape<'_>, vars: &[LayerVars]) -> Vec<Vec<f32>> {
        vars.iter()
            .flat_map(|v| [v.weight, v.bias])
            .map(|v| tape.grad(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).len()]))
            .collect()
    }

    pub(crate) fn encoder_slices(&mut self) -> Vec<&mut [f32]> {
        self.encoder.iter_mut().flat_map(|l| [l.weight.data_mut(), l.bias.data_mut()]).collect()
    }

    /// Minimises mean squared reconstruction error with mini-batch RAdam.
    /// Returns the per-epoch mean training loss.
    pub fn pretrain(&mut self, x: &Matrix, config: &PretrainConfig) -> Result<Vec<f64>> {
        self.check_width(x)?;
        if x.rows == 0 || config.batch_size == 0 {
            return Err(Error::Config("pretraining needs data and a positive batch size".into()));
        }
        if self.encoder.is_empty() {
            return Ok(vec![0.0; config.epochs]);
        }
        let mut opt = RAdam::new(config.lr);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut order: Vec<usize> = (0..x.rows).collect();
        let mut history = Vec::with_capacity(config.epochs);
        for epoch in 1..=config.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for batch in order.chunks(config.batch_size) {
                let rows: Vec<f32> = batch.iter().flat_map(|&i| x.row(i).iter().copied()).collect();
                let (loss, grads) = {
                    let mut tape = Tape::new();
                    let enc = Self::register(&mut tape, &self.encoder);
                    let dec = Self::register(&mut tape, &self.decoder);
                    let input = tape.input(vec![batch.len(), x.cols], rows)?;
                    let z = self.forward_vars(&mut tape, &enc, input)?;
                    let out = self.forward_vars(&mut tape, &dec, z)?;
                    let loss = tape.mse(out, input)?;
                    let value = tape.value(loss)[0] as f64;
                    if !value.is_finite() {
                        log::error!("autoencoder pretraining diverged in epoch {epoch}");
                        return Err(Error::Numeric(format!("reconstruction loss became {value} in epoch {epoch}")));
                    }
                    tape.backward(loss)?;
                    let mut g = Self::layer_grads(&tape, &enc);
                    g.extend(Self::layer_grads(&tape, &dec));
                    (value, g)
                };
                let grad_refs: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
                let mut params: Vec<&mut [f32]> = self
                    .encoder
                    .iter_mut()
                    .chain(self.decoder.iter_mut())
                    .flat_map(|l| [l.weight.data_mut(), l.bias.data_mut()])
                    .collect();
                opt.step_slices(&mut params, &grad_refs)?;
                total += loss * batch.len() as f64;
            }
            history.push(total / x.rows as f64);
        }
        Ok(history)
    }
}
