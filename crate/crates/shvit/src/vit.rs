//! Vision transformer backbone: patch extraction, linear embedding with class
//! token and learned positional embedding, pre-norm multi-head self-attention
//! encoder blocks, and the identity classification head.
//!
//! The final encoder layer runs through a [`FinalLayerHook`]: the hook decides
//! which sequences the (shared-weight) last block sees and returns a clean and
//! a perturbed output sequence. The class-token outputs of the two branches
//! are concatenated into the fused feature; retrieval uses its L2-normalized
//! form while the classifier consumes the raw fused feature by default
//! (switchable via `classifier_on_normalized`).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::ConfigError;
use crate::params::{trunc_normal, LeasedParams, ParamSet};
use crate::rng::{derive_rng, stream};
use crate::tape::{Tape, TensorId};
use crate::tensor::{Tensor, TensorError, TensorResult};

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
    pub dropout_rate: f64,
    /// When set, the classifier consumes the L2-normalized fused feature
    /// instead of the raw one.
    pub classifier_on_normalized: bool,
}

impl ModelConfig {
    /// Desk-scale preset used by the test suite and the synthetic pipeline.
    pub fn vit_tiny(num_classes: usize) -> Self {
        Self {
            image_height: 16,
            image_width: 16,
            patch_size: 4,
            embed_dim: 32,
            num_heads: 4,
            num_layers: 2,
            mlp_ratio: 2.0,
            num_classes,
            dropout_rate: 0.0,
            classifier_on_normalized: false,
        }
    }

    /// Full-scale preset (constructible, not exercised by the tests).
    pub fn vit_base(num_classes: usize) -> Self {
        Self {
            image_height: 256,
            image_width: 128,
            patch_size: 16,
            embed_dim: 768,
            num_heads: 12,
            num_layers: 12,
            mlp_ratio: 4.0,
            num_classes,
            dropout_rate: 0.0,
            classifier_on_normalized: false,
        }
    }

    pub fn preset(name: &str, num_classes: usize) -> Option<Self> {
        match name {
            "vit-tiny" => Some(Self::vit_tiny(num_classes)),
            "vit-base" => Some(Self::vit_base(num_classes)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |reason: String| Err(ConfigError::Invalid { reason });
        if self.patch_size == 0 || self.embed_dim == 0 || self.num_heads == 0
            || self.num_layers == 0 || self.num_classes == 0
            || self.image_height == 0 || self.image_width == 0
        {
            return fail("model dimensions must be positive".into());
        }
        if self.image_height % self.patch_size != 0 || self.image_width % self.patch_size != 0 {
            return fail(format!(
                "image {}x{} is not divisible by patch size {}",
                self.image_height, self.image_width, self.patch_size
            ));
        }
        if self.embed_dim % self.num_heads != 0 {
            return fail(format!(
                "embed dim {} is not divisible by {} heads",
                self.embed_dim, self.num_heads
            ));
        }
        if !(self.mlp_ratio > 0.0) {
            return fail(format!("mlp ratio {} must be positive", self.mlp_ratio));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout rate {} must be in [0, 1)", self.dropout_rate));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_dim(&self) -> usize {
        ((self.embed_dim as f64 * self.mlp_ratio).round() as usize).max(1)
    }
}

/// Ordered embedding vectors: special tokens first (class token at index 0,
/// distillation token at 1 when present), patch tokens after in row-major
/// patch order.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    tokens: Tensor,
    num_special: usize,
}

impl TokenSequence {
    pub fn new(tokens: Tensor, num_special: usize) -> TensorResult<Self> {
        if tokens.shape().len() != 2 || tokens.shape()[0] <= num_special {
            return Err(TensorError::ShapeMismatch {
                op: "TokenSequence::new",
                left: tokens.shape().to_vec(),
                right: vec![num_special],
            });
        }
        Ok(Self { tokens, num_special })
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn into_tokens(self) -> Tensor {
        self.tokens
    }

    pub fn num_special(&self) -> usize {
        self.num_special
    }

    pub fn num_patches(&self) -> usize {
        self.tokens.shape()[0] - self.num_special
    }

    pub fn seq_len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn embed_dim(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// Splits a `[C x H x W]` image into non-overlapping `p x p` patches in
/// row-major patch order, each flattened channel-major. Lossless:
/// [`unpatchify`] reconstructs the image exactly.
pub fn patchify(image: &Tensor, patch_size: usize) -> TensorResult<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(TensorError::ShapeMismatch {
            op: "patchify",
            left: shape.to_vec(),
            right: vec![3, 0, 0],
        });
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(TensorError::ShapeMismatch {
            op: "patchify",
            left: shape.to_vec(),
            right: vec![patch_size],
        });
    }
    let p = patch_size;
    let (gh, gw) = (h / p, w / p);
    let mut data = Vec::with_capacity(c * h * w);
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        data.push(image.data()[ch * h * w + (py * p + dy) * w + (px * p + dx)]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, c * p * p], data)
}

/// Inverse of [`patchify`].
pub fn unpatchify(
    patches: &Tensor,
    channels: usize,
    height: usize,
    width: usize,
    patch_size: usize,
) -> TensorResult<Tensor> {
    let p = patch_size;
    let (gh, gw) = (height / p, width / p);
    if patches.shape() != [gh * gw, channels * p * p] {
        return Err(TensorError::ShapeMismatch {
            op: "unpatchify",
            left: patches.shape().to_vec(),
            right: vec![gh * gw, channels * p * p],
        });
    }
    let mut data = vec![0.0; channels * height * width];
    for py in 0..gh {
        for px in 0..gw {
            let row = patches.row(py * gw + px);
            let mut i = 0;
            for ch in 0..channels {
                for dy in 0..p {
                    for dx in 0..p {
                        data[ch * height * width + (py * p + dy) * width + (px * p + dx)] = row[i];
                        i += 1;
                    }
                }
            }
        }
    }
    Tensor::new(vec![channels, height, width], data)
}

/// Decides what the final encoder block sees. `run_block` executes the last
/// block plus the final layer norm with shared weights; the hook returns the
/// clean and perturbed output sequences (the same id when nothing perturbs).
pub trait FinalLayerHook {
    fn final_layer(
        &mut self,
        tape: &mut Tape,
        seq: TensorId,
        num_special: usize,
        mode: Mode,
        run_block: &mut dyn FnMut(&mut Tape, TensorId) -> TensorResult<TensorId>,
    ) -> TensorResult<(TensorId, TensorId)>;
}

/// Hook that leaves the final layer untouched: both branches are the clean
/// pass and the fused feature doubles the class token.
pub struct IdentityHook;

impl FinalLayerHook for IdentityHook {
    fn final_layer(
        &mut self,
        tape: &mut Tape,
        seq: TensorId,
        _num_special: usize,
        _mode: Mode,
        run_block: &mut dyn FnMut(&mut Tape, TensorId) -> TensorResult<TensorId>,
    ) -> TensorResult<(TensorId, TensorId)> {
        let out = run_block(tape, seq)?;
        Ok((out, out))
    }
}

pub struct ForwardOutput {
    /// L2-normalized fused feature, `[1 x 2d]`.
    pub descriptor: TensorId,
    /// Identity logits, `[1 x num_classes]`.
    pub logits: TensorId,
    /// Distillation-head logits when the distillation token is attached.
    pub distill_logits: Option<TensorId>,
    /// Clean-branch class feature, `[1 x d]`.
    pub clean_feature: TensorId,
    /// Perturbed-branch class feature, `[1 x d]`.
    pub perturbed_feature: TensorId,
    /// Concatenated features before normalization, `[1 x 2d]`.
    pub fused: TensorId,
}

pub struct VitModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub has_distill_token: bool,
}

impl VitModel {
    /// Builds a model with truncated-normal (std 0.02) projection weights,
    /// zero biases, and unit layer-norm scales, deterministically from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ConfigError> {
        config.validate()?;
        let mut rng = derive_rng(seed, &[stream::INIT]);
        let d = config.embed_dim;
        let m = config.mlp_dim();
        let n = config.num_patches();
        let c = config.num_classes;
        let mut params = ParamSet::new();
        let mut tn = |shape: Vec<usize>, rng: &mut ChaCha8Rng| {
            trunc_normal(shape, 0.02, rng).expect("init is finite")
        };

        params.insert("patch_embed.weight", tn(vec![config.patch_dim(), d], &mut rng));
        params.insert("patch_embed.bias", Tensor::zeros(vec![d]));
        params.insert("cls_token", tn(vec![1, d], &mut rng));
        params.insert("pos_embed", tn(vec![n + 1, d], &mut rng));
        for i in 0..config.num_layers {
            let p = format!("blocks.{i}");
            params.insert(&format!("{p}.ln1.gamma"), Tensor::filled(vec![d], 1.0));
            params.insert(&format!("{p}.ln1.beta"), Tensor::zeros(vec![d]));
            for proj in ["q", "k", "v"] {
                params.insert(&format!("{p}.attn.{proj}.weight"), tn(vec![d, d], &mut rng));
                params.insert(&format!("{p}.attn.{proj}.bias"), Tensor::zeros(vec![d]));
            }
            params.insert(&format!("{p}.attn.proj.weight"), tn(vec![d, d], &mut rng));
            params.insert(&format!("{p}.attn.proj.bias"), Tensor::zeros(vec![d]));
            params.insert(&format!("{p}.ln2.gamma"), Tensor::filled(vec![d], 1.0));
            params.insert(&format!("{p}.ln2.beta"), Tensor::zeros(vec![d]));
            params.insert(&format!("{p}.mlp.fc1.weight"), tn(vec![d, m], &mut rng));
            params.insert(&format!("{p}.mlp.fc1.bias"), Tensor::zeros(vec![m]));
            params.insert(&format!("{p}.mlp.fc2.weight"), tn(vec![m, d], &mut rng));
            params.insert(&format!("{p}.mlp.fc2.bias"), Tensor::zeros(vec![d]));
        }
        params.insert("final_norm.gamma", Tensor::filled(vec![d], 1.0));
        params.insert("final_norm.beta", Tensor::zeros(vec![d]));
        params.insert("head.weight", tn(vec![2 * d, c], &mut rng));
        params.insert("head.bias", Tensor::zeros(vec![c]));

        Ok(Self {
            config,
            params,
            has_distill_token: false,
        })
    }

    pub fn num_special(&self) -> usize {
        if self.has_distill_token {
            2
        } else {
            1
        }
    }

    pub fn seq_len(&self) -> usize {
        self.config.num_patches() + self.num_special()
    }

    pub fn lease(&self, tape: &mut Tape) -> LeasedParams {
        self.params.lease(tape)
    }

    fn linear(
        &self,
        tape: &mut Tape,
        leased: &LeasedParams,
        x: TensorId,
        prefix: &str,
    ) -> TensorResult<TensorId> {
        let y = tape.matmul(x, leased.id(&format!("{prefix}.weight")))?;
        tape.add_bias(y, leased.id(&format!("{prefix}.bias")))
    }

    fn norm(
        &self,
        tape: &mut Tape,
        leased: &LeasedParams,
        x: TensorId,
        prefix: &str,
    ) -> TensorResult<TensorId> {
        tape.layer_norm(
            x,
            leased.id(&format!("{prefix}.gamma")),
            leased.id(&format!("{prefix}.beta")),
            LAYER_NORM_EPS,
        )
    }

    fn dropout(
        &self,
        tape: &mut Tape,
        x: TensorId,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> TensorResult<TensorId> {
        let p = self.config.dropout_rate;
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - p;
        let t = tape.value(x);
        let mask: Vec<f64> = (0..t.numel())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = tape.constant(Tensor::new(t.shape().to_vec(), mask)?);
        tape.mul(x, m)
    }

    /// Linear patch projection, class (and distillation) token prepended,
    /// positional embedding added.
    pub fn embed(
        &self,
        tape: &mut Tape,
        leased: &LeasedParams,
        patches: TensorId,
    ) -> TensorResult<TensorId> {
        let projected = self.linear(tape, leased, patches, "patch_embed")?;
        let mut parts = vec![leased.id("cls_token")];
        if self.has_distill_token {
            parts.push(leased.id("distill_token"));
        }
        parts.push(projected);
        let tokens = tape.concat_rows(&parts)?;
        tape.add(tokens, leased.id("pos_embed"))
    }

    /// Pre-norm encoder block: `seq + MHSA(LN(seq))` then `x + MLP(LN(x))`.
    /// Per-head attention weights are `softmax(Q K^T / sqrt(d/h))` with rows
    /// over keys; their tape ids are appended to `attn_sink`.
    pub fn encoder_block(
        &self,
        tape: &mut Tape,
        leased: &LeasedParams,
        layer: usize,
        seq: TensorId,
        mode: Mode,
        rng: &mut ChaCha8Rng,
        attn_sink: &mut Vec<TensorId>,
    ) -> TensorResult<TensorId> {
        let p = format!("blocks.{layer}");
        let ln1 = self.norm(tape, leased, seq, &format!("{p}.ln1"))?;
        let q = self.linear(tape, leased, ln1, &format!("{p}.attn.q"))?;
        let k = self.linear(tape, leased, ln1, &format!("{p}.attn.k"))?;
        let v = self.linear(tape, leased, ln1, &format!("{p}.attn.v"))?;

        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.config.num_heads);
        for h in 0..self.config.num_heads {
            let (s, e) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(q, s, e)?;
            let kh = tape.slice_cols(k, s, e)?;
            let vh = tape.slice_cols(v, s, e)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scaled = tape.scale(scores, scale)?;
            let attn = tape.softmax(scaled, 1)?;
            attn_sink.push(attn);
            head_outs.push(tape.matmul(attn, vh)?);
        }
        let merged = tape.concat_cols(&head_outs)?;
        let proj = self.linear(tape, leased, merged, &format!("{p}.attn.proj"))?;
        let proj = self.dropout(tape, proj, mode, rng)?;
        let x = tape.add(seq, proj)?;

        let ln2 = self.norm(tape, leased, x, &format!("{p}.ln2"))?;
        let h1 = self.linear(tape, leased, ln2, &format!("{p}.mlp.fc1"))?;
        let act = tape.gelu(h1)?;
        let h2 = self.linear(tape, leased, act, &format!("{p}.mlp.fc2"))?;
        let h2 = self.dropout(tape, h2, mode, rng)?;
        tape.add(x, h2)
    }

    /// Final encoder stage shared by both branches: last block plus the final
    /// layer norm.
    pub fn final_stage(
        &self,
        tape: &mut Tape,
        leased: &LeasedParams,
        seq: TensorId,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> TensorResult<TensorId> {
        let mut sink = Vec::new();
        let out = self.encoder_block(
            tape,
            leased,
            self.config.num_layers - 1,
            seq,
            mode,
            rng,
            &mut sink,
        )?;
        self.norm(tape, leased, out, "final_norm")
    }

    /// Full pipeline for one image. The hook runs the final layer; the fused
    /// class features feed the descriptor and the classifier.
    pub fn forward(
        &self,
        tape: &mut Tape,
        leased: &LeasedParams,
        image: &Tensor,
        mode: Mode,
        hook: &mut dyn FinalLayerHook,
        rng: &mut ChaCha8Rng,
    ) -> TensorResult<ForwardOutput> {
        let want = [3, self.config.image_height, self.config.image_width];
        if image.shape() != want {
            return Err(TensorError::ShapeMismatch {
                op: "forward",
                left: image.shape().to_vec(),
                right: want.to_vec(),
            });
        }
        let patches = patchify(image, self.config.patch_size)?;
        let pid = tape.constant(patches);
        let mut seq = self.embed(tape, leased, pid)?;
        let mut sink = Vec::new();
        for layer in 0..self.config.num_layers - 1 {
            seq = self.encoder_block(tape, leased, layer, seq, mode, rng, &mut sink)?;
        }
        let ns = self.num_special();
        let (clean_seq, perturbed_seq) = {
            let mut runner =
                |t: &mut Tape, s: TensorId| self.final_stage(t, leased, s, mode, rng);
            hook.final_layer(tape, seq, ns, mode, &mut runner)?
        };

        let clean_feature = tape.slice_rows(clean_seq, 0, 1)?;
        let perturbed_feature = if perturbed_seq == clean_seq {
            clean_feature
        } else {
            tape.slice_rows(perturbed_seq, 0, 1)?
        };
        let fused = tape.concat_cols(&[clean_feature, perturbed_feature])?;
        let descriptor = tape.l2_normalize_rows(fused)?;
        let head_in = if self.config.classifier_on_normalized {
            descriptor
        } else {
            fused
        };
        let logits = self.linear(tape, leased, head_in, "head")?;
        let distill_logits = if self.has_distill_token {
            let row = tape.slice_rows(clean_seq, 1, 2)?;
            Some(self.linear(tape, leased, row, "distill_head")?)
        } else {
            None
        };
        Ok(ForwardOutput {
            descriptor,
            logits,
            distill_logits,
            clean_feature,
            perturbed_feature,
            fused,
        })
    }

    /// Convenience eval pass on a fresh tape: returns the descriptor and the
    /// identity logits as plain vectors. Deterministic for a given hook state.
    pub fn infer(
        &self,
        image: &Tensor,
        hook: &mut dyn FinalLayerHook,
    ) -> TensorResult<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let leased = self.lease(&mut tape);
        let mut rng = derive_rng(0, &[]);
        let out = self.forward(&mut tape, &leased, image, Mode::Eval, hook, &mut rng)?;
        Ok((
            tape.value(out.descriptor).row(0).to_vec(),
            tape.value(out.logits).row(0).to_vec(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(cfg: &ModelConfig, seed: u64) -> Tensor {
        let mut rng = derive_rng(seed, &[99]);
        let n = 3 * cfg.image_height * cfg.image_width;
        Tensor::new(
            vec![3, cfg.image_height, cfg.image_width],
            (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn patchify_unit_patches_are_pixels() {
        let img = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let patches = patchify(&img, 1).unwrap();
        assert_eq!(patches.shape(), &[4, 1]);
        assert_eq!(patches.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn patchify_constant_image_gives_identical_patches() {
        let img = Tensor::filled(vec![3, 4, 4], 0.25);
        let patches = patchify(&img, 2).unwrap();
        let first = patches.row(0).to_vec();
        for r in 1..patches.shape()[0] {
            assert_eq!(patches.row(r), first.as_slice());
        }
    }

    #[test]
    fn patchify_round_trips_exactly() {
        let mut rng = derive_rng(5, &[1]);
        let data: Vec<f64> = (0..3 * 8 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let img = Tensor::new(vec![3, 8, 8], data).unwrap();
        let patches = patchify(&img, 4).unwrap();
        assert_eq!(patches.shape(), &[4, 48]);
        let back = unpatchify(&patches, 3, 8, 8, 4).unwrap();
        assert_eq!(back.data(), img.data());
    }

    #[test]
    fn patchify_rejects_non_divisible() {
        let img = Tensor::zeros(vec![3, 5, 4]);
        assert!(patchify(&img, 2).is_err());
    }

    #[test]
    fn embed_zero_patches_zero_pos_gives_cls_only() {
        let mut cfg = ModelConfig::vit_tiny(3);
        cfg.image_height = 8;
        cfg.image_width = 8;
        let mut model = VitModel::new(cfg, 1).unwrap();
        let n = model.config.num_patches();
        let d = model.config.embed_dim;
        model
            .params
            .replace("pos_embed", Tensor::zeros(vec![n + 1, d]));
        let mut tape = Tape::new();
        let leased = model.lease(&mut tape);
        let patches = tape.constant(Tensor::zeros(vec![n, model.config.patch_dim()]));
        let seq = model.embed(&mut tape, &leased, patches).unwrap();
        let t = tape.value(seq);
        assert_eq!(t.shape(), &[n + 1, d]);
        assert_eq!(t.row(0), model.params.get("cls_token").unwrap().data());
        for r in 1..n + 1 {
            assert!(t.row(r).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn attention_rows_sum_to_one_and_identical_tokens_mix_equally() {
        let cfg = ModelConfig {
            image_height: 8,
            image_width: 8,
            patch_size: 4,
            embed_dim: 16,
            num_heads: 2,
            num_layers: 1,
            mlp_ratio: 2.0,
            num_classes: 2,
            dropout_rate: 0.0,
            classifier_on_normalized: false,
        };
        let model = VitModel::new(cfg, 3).unwrap();
        let mut tape = Tape::new();
        let leased = model.lease(&mut tape);
        // All tokens identical.
        let row: Vec<f64> = (0..16).map(|j| (j as f64 * 0.1).sin()).collect();
        let seq_t = Tensor::from_rows(&vec![row; 5]).unwrap();
        let seq = tape.leaf(seq_t);
        let mut rng = derive_rng(0, &[]);
        let mut sink = Vec::new();
        let out = model
            .encoder_block(&mut tape, &leased, 0, seq, Mode::Eval, &mut rng, &mut sink)
            .unwrap();
        for &attn in &sink {
            let t = tape.value(attn);
            for r in 0..t.rows() {
                let s: f64 = t.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
        let t = tape.value(out);
        let first = t.row(0).to_vec();
        for r in 1..t.rows() {
            for j in 0..first.len() {
                assert!((t.row(r)[j] - first[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_contract_shapes_and_descriptor_norm() {
        let model = VitModel::new(ModelConfig::vit_tiny(7), 11).unwrap();
        let img = random_image(&model.config, 2);
        let (descriptor, logits) = model.infer(&img, &mut IdentityHook).unwrap();
        assert_eq!(logits.len(), 7);
        assert_eq!(descriptor.len(), 2 * model.config.embed_dim);
        let norm: f64 = descriptor.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn eval_is_bitwise_deterministic() {
        let model = VitModel::new(ModelConfig::vit_tiny(4), 13).unwrap();
        let img = random_image(&model.config, 3);
        let (d1, l1) = model.infer(&img, &mut IdentityHook).unwrap();
        let (d2, l2) = model.infer(&img, &mut IdentityHook).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&d1), bits(&d2));
        assert_eq!(bits(&l1), bits(&l2));
    }
}
