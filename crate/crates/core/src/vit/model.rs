use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ViTConfig;
use super::patch::patchify;
use crate::error::{Error, Result};
use crate::tensor::{kernels, Mode, RunningStats, Tape, Tensor, Var};

const INIT_STD: f32 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock {
    pub norm1: Norm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Dense + GELU + batch norm + dropout + linear classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub dense: Linear,
    pub bn: Norm,
    pub bn_stats: RunningStats,
    pub out: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViTModel {
    config: ViTConfig,
    pub patch_embed: Linear,
    /// `[1, hidden]`
    pub class_token: Tensor,
    /// `[tokens, hidden]`
    pub pos_embed: Tensor,
    pub blocks: Vec<EncoderBlock>,
    pub norm: Norm,
    pub head: ClassifierHead,
}

/// Per-layer attention probabilities recorded during one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub heads: usize,
    pub tokens: usize,
    /// One `[heads, tokens, tokens]` buffer per encoder layer.
    pub layers: Vec<Vec<f32>>,
}

impl AttentionTrace {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Attention matrix of one head in one layer, row-major.
    pub fn head(&self, layer: usize, head: usize) -> &[f32] {
        let tt = self.tokens * self.tokens;
        &self.layers[layer][head * tt..(head + 1) * tt]
    }

    /// Largest deviation of any attention row sum from 1.
    pub fn max_row_sum_error(&self) -> f32 {
        let mut worst = 0.0f32;
        for layer in &self.layers {
            for row in layer.chunks(self.tokens) {
                let s: f32 = row.iter().sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
        worst
    }
}

enum Init<'a> {
    Random(&'a mut ChaCha8Rng),
    Zeros,
}

impl Init<'_> {
    fn weight(&mut self, shape: &[usize]) -> Tensor {
        match self {
            Init::Random(rng) => Tensor::trunc_normal(shape, INIT_STD, *rng),
            Init::Zeros => Tensor::zeros(shape),
        }
        .with_requires_grad(true)
    }
}

fn zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape).with_requires_grad(true)
}

fn linear(init: &mut Init, fan_in: usize, fan_out: usize) -> Linear {
    Linear {
        weight: init.weight(&[fan_in, fan_out]),
        bias: zeros(&[fan_out]),
    }
}

fn norm(width: usize) -> Norm {
    Norm {
        gamma: Tensor::ones(&[width]).with_requires_grad(true),
        beta: zeros(&[width]),
    }
}

/// Tape handles for one linear layer.
#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct NormVars {
    pub gamma: Var,
    pub beta: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub norm1: NormVars,
    pub qkv: LinearVars,
    pub proj: LinearVars,
    pub norm2: NormVars,
    pub fc1: LinearVars,
    pub fc2: LinearVars,
}

/// The model's parameters registered on a tape, in [`ViTModel::named_parameters`] order.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub patch_embed: LinearVars,
    pub class_token: Var,
    pub pos_embed: Var,
    pub blocks: Vec<BlockVars>,
    pub norm: NormVars,
    pub dense: LinearVars,
    pub bn: NormVars,
    pub out: LinearVars,
    pub all: Vec<Var>,
}

impl ModelVars {
    /// Registers every parameter as a borrowed leaf. Gradients are tracked
    /// only when `track` is set.
    pub fn register<'p>(tape: &mut Tape<'p>, model: &'p ViTModel, track: bool) -> Self {
        let mut all = Vec::new();
        let mut leaf = |t: &'p Tensor| {
            let v = if track { tape.leaf(t) } else { tape.leaf_frozen(t) };
            all.push(v);
            v
        };
        let lin = |l: &'p Linear, leaf: &mut dyn FnMut(&'p Tensor) -> Var| LinearVars {
            weight: leaf(&l.weight),
            bias: leaf(&l.bias),
        };
        let patch_embed = lin(&model.patch_embed, &mut leaf);
        let class_token = leaf(&model.class_token);
        let pos_embed = leaf(&model.pos_embed);
        let mut blocks = Vec::with_capacity(model.blocks.len());
        for b in &model.blocks {
            let norm1 = NormVars { gamma: leaf(&b.norm1.gamma), beta: leaf(&b.norm1.beta) };
            let qkv = lin(&b.qkv, &mut leaf);
            let proj = lin(&b.proj, &mut leaf);
            let norm2 = NormVars { gamma: leaf(&b.norm2.gamma), beta: leaf(&b.norm2.beta) };
            let fc1 = lin(&b.fc1, &mut leaf);
            let fc2 = lin(&b.fc2, &mut leaf);
            blocks.push(BlockVars { norm1, qkv, proj, norm2, fc1, fc2 });
        }
        let norm = NormVars { gamma: leaf(&model.norm.gamma), beta: leaf(&model.norm.beta) };
        let dense = lin(&model.head.dense, &mut leaf);
        let bn = NormVars { gamma: leaf(&model.head.bn.gamma), beta: leaf(&model.head.bn.beta) };
        let out = lin(&model.head.out, &mut leaf);
        Self { patch_embed, class_token, pos_embed, blocks, norm, dense, bn, out, all }
    }
}

/// Result of a batched forward pass recorded on a tape.
pub struct BatchForward {
    /// `[batch, num_classes]`
    pub logits: Var,
    /// Class-token encoder output `[batch, hidden]`.
    pub features: Var,
    /// One trace per image when capture was requested.
    pub traces: Vec<AttentionTrace>,
    /// Running statistics after this batch (train mode).
    pub bn_update: Option<RunningStats>,
}

/// Multi-head self-attention sublayer: packed QKV projection, scaled
/// dot-product attention per head, output projection.
pub fn mhsa(
    tape: &mut Tape<'_>,
    x: Var,
    qkv: LinearVars,
    proj: LinearVars,
    batch: usize,
    tokens: usize,
    heads: usize,
) -> Result<(Var, Vec<f32>)> {
    let packed = tape.linear(x, qkv.weight, qkv.bias)?;
    let (attended, probs) = tape.attention(packed, batch, tokens, heads)?;
    Ok((tape.linear(attended, proj.weight, proj.bias)?, probs))
}

impl ViTModel {
    pub fn new(config: ViTConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(config, Init::Random(&mut rng))
    }

    /// Zero-initialised model, used as the skeleton for checkpoint loading.
    pub fn zeroed(config: ViTConfig) -> Result<Self> {
        Self::build(config, Init::Zeros)
    }

    fn build(config: ViTConfig, mut init: Init) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_size;
        let patch_embed = linear(&mut init, config.patch_dim(), h);
        let class_token = zeros(&[1, h]);
        let pos_embed = zeros(&[config.tokens(), h]);
        let blocks = (0..config.num_layers)
            .map(|_| EncoderBlock {
                norm1: norm(h),
                qkv: linear(&mut init, h, 3 * h),
                proj: linear(&mut init, h, h),
                norm2: norm(h),
                fc1: linear(&mut init, h, config.mlp_units),
                fc2: linear(&mut init, config.mlp_units, h),
            })
            .collect();
        let head = ClassifierHead {
            dense: linear(&mut init, h, config.head_units),
            bn: norm(config.head_units),
            bn_stats: RunningStats::new(config.head_units),
            out: linear(&mut init, config.head_units, config.num_classes),
        };
        Ok(Self {
            patch_embed,
            class_token,
            pos_embed,
            blocks,
            norm: norm(h),
            head,
            config,
        })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("patch_embed.weight".into(), &self.patch_embed.weight),
            ("patch_embed.bias".into(), &self.patch_embed.bias),
            ("class_token".into(), &self.class_token),
            ("pos_embed".into(), &self.pos_embed),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            out.extend([
                (format!("{p}.norm1.gamma"), &b.norm1.gamma),
                (format!("{p}.norm1.beta"), &b.norm1.beta),
                (format!("{p}.qkv.weight"), &b.qkv.weight),
                (format!("{p}.qkv.bias"), &b.qkv.bias),
                (format!("{p}.proj.weight"), &b.proj.weight),
                (format!("{p}.proj.bias"), &b.proj.bias),
                (format!("{p}.norm2.gamma"), &b.norm2.gamma),
                (format!("{p}.norm2.beta"), &b.norm2.beta),
                (format!("{p}.fc1.weight"), &b.fc1.weight),
                (format!("{p}.fc1.bias"), &b.fc1.bias),
                (format!("{p}.fc2.weight"), &b.fc2.weight),
                (format!("{p}.fc2.bias"), &b.fc2.bias),
            ]);
        }
        out.extend([
            ("norm.gamma".into(), &self.norm.gamma),
            ("norm.beta".into(), &self.norm.beta),
            ("head.dense.weight".into(), &self.head.dense.weight),
            ("head.dense.bias".into(), &self.head.dense.bias),
            ("head.bn.gamma".into(), &self.head.bn.gamma),
            ("head.bn.beta".into(), &self.head.bn.beta),
            ("head.out.weight".into(), &self.head.out.weight),
            ("head.out.bias".into(), &self.head.out.bias),
        ]);
        out
    }

    /// Mutable parameters in [`Self::named_parameters`] order.
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.patch_embed.weight,
            &mut self.patch_embed.bias,
            &mut self.class_token,
            &mut self.pos_embed,
        ];
        for b in &mut self.blocks {
            out.extend([
                &mut b.norm1.gamma,
                &mut b.norm1.beta,
                &mut b.qkv.weight,
                &mut b.qkv.bias,
                &mut b.proj.weight,
                &mut b.proj.bias,
                &mut b.norm2.gamma,
                &mut b.norm2.beta,
                &mut b.fc1.weight,
                &mut b.fc1.bias,
                &mut b.fc2.weight,
                &mut b.fc2.bias,
            ]);
        }
        out.extend([
            &mut self.norm.gamma,
            &mut self.norm.beta,
            &mut self.head.dense.weight,
            &mut self.head.dense.bias,
            &mut self.head.bn.gamma,
            &mut self.head.bn.beta,
            &mut self.head.out.weight,
            &mut self.head.out.bias,
        ]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Copies gradients of the registered parameters from a finished tape
    /// into each parameter's gradient buffer.
    pub fn grads_from_tape(tape: &Tape<'_>, vars: &ModelVars) -> Vec<Vec<f32>> {
        vars.all
            .iter()
            .map(|&v| tape.grad(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).len()]))
            .collect()
    }

    pub fn set_grads(&mut self, grads: Vec<Vec<f32>>) -> Result<()> {
        for (p, g) in self.parameters_mut().into_iter().zip(grads) {
            p.zero_grad();
            p.accumulate_grad(&g)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.parameters_mut().into_iter().for_each(Tensor::zero_grad);
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let c = &self.config;
        if image.shape() != [c.channels, c.image_size, c.image_size] {
            return Err(Error::Shape(format!(
                "model expects images of shape [{}, {}, {}], got {:?}",
                c.channels,
                c.image_size,
                c.image_size,
                image.shape()
            )));
        }
        Ok(())
    }

    /// Patch projection, class token and positional embedding for a batch.
    /// Returns `[batch·tokens, hidden]`.
    pub fn embed(&self, tape: &mut Tape<'_>, vars: &ModelVars, images: &[&Tensor]) -> Result<Var> {
        let c = &self.config;
        let mut patches = Vec::with_capacity(images.len() * c.num_patches() * c.patch_dim());
        for img in images {
            self.check_image(img)?;
            patches.extend_from_slice(patchify(img, c.patch_size)?.data());
        }
        let patches = tape.input(vec![images.len() * c.num_patches(), c.patch_dim()], patches)?;
        let x = tape.linear(patches, vars.patch_embed.weight, vars.patch_embed.bias)?;
        let x = tape.prepend_token(x, vars.class_token, images.len())?;
        tape.add_broadcast(x, vars.pos_embed)
    }

    /// Runs the encoder and returns the normalised class-token output
    /// `[batch, hidden]` with optional attention traces.
    pub fn encode(
        &self,
        tape: &mut Tape<'_>,
        vars: &ModelVars,
        images: &[&Tensor],
        capture: bool,
    ) -> Result<(Var, Vec<AttentionTrace>)> {
        if images.is_empty() {
            return Err(Error::Contract("forward needs at least one image".into()));
        }
        let c = &self.config;
        let (batch, tokens, heads) = (images.len(), c.tokens(), c.num_heads);
        let mut x = self.embed(tape, vars, images)?;
        let mut traces: Vec<AttentionTrace> = if capture {
            (0..batch)
                .map(|_| AttentionTrace { heads, tokens, layers: Vec::with_capacity(c.num_layers) })
                .collect()
        } else {
            Vec::new()
        };
        for (layer, bv) in vars.blocks.iter().enumerate() {
            let h = tape.layer_norm(x, bv.norm1.gamma, bv.norm1.beta)?;
            let (a, probs) = mhsa(tape, h, bv.qkv, bv.proj, batch, tokens, heads)?;
            x = tape.add(x, a)?;
            let h = tape.layer_norm(x, bv.norm2.gamma, bv.norm2.beta)?;
            let h = tape.linear(h, bv.fc1.weight, bv.fc1.bias)?;
            let h = tape.gelu(h);
            let h = tape.linear(h, bv.fc2.weight, bv.fc2.bias)?;
            x = tape.add(x, h)?;
            if tape.value(x).iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite activation in encoder layer {layer}")));
            }
            let per = heads * tokens * tokens;
            for (b, trace) in traces.iter_mut().enumerate() {
                trace.layers.push(probs[b * per..(b + 1) * per].to_vec());
            }
        }
        let cls_rows: Vec<usize> = (0..batch).map(|b| b * tokens).collect();
        let cls = tape.gather_rows(x, &cls_rows)?;
        let features = tape.layer_norm(cls, vars.norm.gamma, vars.norm.beta)?;
        Ok((features, traces))
    }

    /// Full classifier forward for a batch of images.
    pub fn forward_batch(
        &self,
        tape: &mut Tape<'_>,
        vars: &ModelVars,
        images: &[&Tensor],
        mode: Mode,
        dropout_seed: u64,
        capture: bool,
    ) -> Result<BatchForward> {
        let (features, traces) = self.encode(tape, vars, images, capture)?;
        let h = tape.linear(features, vars.dense.weight, vars.dense.bias)?;
        let h = tape.gelu(h);
        let bn = tape.batch_norm(h, vars.bn.gamma, vars.bn.beta, &self.head.bn_stats, mode)?;
        let h = tape.dropout(bn.out, self.config.dropout_keep, mode, dropout_seed)?;
        let logits = tape.linear(h, vars.out.weight, vars.out.bias)?;
        if tape.value(logits).iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite logits in classification head".into()));
        }
        Ok(BatchForward { logits, features, traces, bn_update: bn.updated })
    }

    /// Single-image forward returning logits `[num_classes]` and the
    /// attention trace.
    pub fn forward(&self, image: &Tensor, mode: Mode) -> Result<(Tensor, AttentionTrace)> {
        let mut tape = Tape::new();
        let vars = ModelVars::register(&mut tape, self, false);
        let out = self.forward_batch(&mut tape, &vars, &[image], mode, 0, true)?;
        let logits = Tensor::new(vec![self.config.num_classes], tape.value(out.logits).to_vec())?;
        let trace = out.traces.into_iter().next().expect("one trace per image");
        Ok((logits, trace))
    }

    /// Class probabilities for each image (inference mode).
    pub fn predict_proba(&self, images: &[&Tensor]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let mut tape = Tape::new();
            let vars = ModelVars::register(&mut tape, self, false);
            let fwd = self.forward_batch(&mut tape, &vars, chunk, Mode::Infer, 0, false)?;
            let mut logits = tape.value(fwd.logits).to_vec();
            kernels::softmax_rows(&mut logits, self.config.num_classes);
            out.extend(logits.chunks(self.config.num_classes).map(<[f32]>::to_vec));
        }
        Ok(out)
    }

    /// Encoder class-token output before the added head.
    pub fn extract_features(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = ModelVars::register(&mut tape, self, false);
        let (features, _) = self.encode(&mut tape, &vars, &[image], false)?;
        Tensor::new(vec![self.config.hidden_size], tape.value(features).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn image(seed: u64, side: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(&[1, side, side], 0.0, 1.0, &mut rng)
    }

    #[test]
    fn parameter_enumeration_is_consistent() {
        let mut m = ViTModel::new(ViTConfig::tiny(), 0).unwrap();
        let shapes: Vec<Vec<usize>> = m.named_parameters().iter().map(|(_, t)| t.shape().to_vec()).collect();
        let mut_shapes: Vec<Vec<usize>> = m.parameters_mut().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, mut_shapes);
        assert_eq!(m.parameter_count(), 147_143);
        assert_eq!(m.parameter_count(), m.config().parameter_count());
    }

    #[test]
    fn tiny_forward_shapes() {
        let m = ViTModel::new(ViTConfig::tiny(), 1).unwrap();
        let (logits, trace) = m.forward(&image(2, 64), Mode::Infer).unwrap();
        assert_eq!(logits.shape(), &[7]);
        assert_eq!(trace.num_layers(), 4);
        assert!(trace.layers.iter().all(|l| l.len() == 4 * 65 * 65));
        let p = logits.softmax(0).unwrap();
        assert!((p.data().iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn inference_is_deterministic() {
        let m = ViTModel::new(ViTConfig::tiny(), 1).unwrap();
        let img = image(3, 64);
        let (a, ta) = m.forward(&img, Mode::Infer).unwrap();
        let (b, tb) = m.forward(&img, Mode::Infer).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
    }

    #[test]
    fn single_image_train_mode_is_rejected_by_batch_norm() {
        let m = ViTModel::new(ViTConfig::tiny(), 1).unwrap();
        assert!(matches!(m.forward(&image(3, 64), Mode::Train), Err(Error::Config(_))));
    }

    #[test]
    fn wrong_image_size_is_a_shape_error() {
        let m = ViTModel::new(ViTConfig::tiny(), 1).unwrap();
        assert!(matches!(m.forward(&image(3, 32), Mode::Infer), Err(Error::Shape(_))));
    }

    #[test]
    fn features_have_hidden_width() {
        let m = ViTModel::new(ViTConfig::tiny(), 1).unwrap();
        let img = image(4, 64);
        let f = m.extract_features(&img).unwrap();
        assert_eq!(f.shape(), &[64]);
        assert_eq!(f, m.extract_features(&img).unwrap());
    }

    #[test]
    fn embed_tiny_shape_and_zero_projection() {
        let mut m = ViTModel::new(ViTConfig::tiny(), 1).unwrap();
        m.patch_embed.weight = Tensor::zeros(&[64, 64]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        m.pos_embed = Tensor::uniform(&[65, 64], -1.0, 1.0, &mut rng);
        m.class_token = Tensor::uniform(&[1, 64], -1.0, 1.0, &mut rng);
        let img = Tensor::zeros(&[1, 64, 64]);
        let mut tape = Tape::new();
        let vars = ModelVars::register(&mut tape, &m, false);
        let x = m.embed(&mut tape, &vars, &[&img]).unwrap();
        assert_eq!(tape.shape(x), &[65, 64]);
        let out = tape.value(x);
        for c in 0..64 {
            assert_eq!(out[c], m.class_token.data()[c] + m.pos_embed.data()[c]);
        }
        assert_eq!(&out[64..], &m.pos_embed.data()[64..]);
    }
}
