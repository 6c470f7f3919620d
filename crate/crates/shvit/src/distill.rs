//! Knowledge distillation: teacher oracles, the distillation token, and the
//! configuration for the combined identity/distillation loss.
//!
//! The loss itself is a tape operation ([`crate::tape::Tape::distill_loss`]);
//! this module owns everything around it. Two teacher styles are supported: a
//! frozen model checkpoint run in eval mode, and a container of recorded
//! logits keyed by sample path. Gradients never flow into the teacher.

use std::collections::HashMap;

use thiserror::Error;

use crate::data::checkpoint::{Checkpoint, NamedArray};
use crate::params::trunc_normal;
use crate::rng::{derive_rng, stream};
use crate::tape::Tape;
use crate::tensor::{Tensor, TensorError, TensorResult};
use crate::vit::{IdentityHook, Mode, VitModel};

pub const LOGITS_CONTAINER_KIND: &str = "teacher_logits";
const LOGITS_PREFIX: &str = "logits.";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistillMode {
    Off,
    Soft,
    Hard,
}

impl DistillMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            DistillMode::Off => "off",
            DistillMode::Soft => "soft",
            DistillMode::Hard => "hard",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "off" => Some(DistillMode::Off),
            "soft" => Some(DistillMode::Soft),
            "hard" => Some(DistillMode::Hard),
            _ => None,
        }
    }
}

/// Loss mixing configuration. `alpha` weights the distillation term against
/// the identity cross-entropy; `temperature` softens both distributions in
/// soft mode. With `mode == Off` the loss is plain cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillConfig {
    pub mode: DistillMode,
    pub temperature: f64,
    pub alpha: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            mode: DistillMode::Off,
            temperature: 3.0,
            alpha: 0.5,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> TensorResult<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(TensorError::InvalidValue {
                what: "distill temperature",
                value: self.temperature,
            });
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(TensorError::InvalidValue {
                what: "distill alpha",
                value: self.alpha,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("distillation token already attached")]
    AlreadyAttached,
    #[error("no recorded teacher logits for `{path}`")]
    MissingLogits { path: String },
    #[error("teacher logit width {got} does not match {expected} classes")]
    WidthMismatch { expected: usize, got: usize },
    #[error("bad teacher logits container: {0}")]
    BadContainer(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Maps an input image to frozen logits over the identity classes.
pub trait TeacherOracle {
    fn num_classes(&self) -> usize;
    /// `path` identifies the sample; `image` is the normalized (un-augmented
    /// or augmented, caller's choice) input tensor.
    fn logits(&self, path: &str, image: &Tensor) -> Result<Vec<f64>, DistillError>;
}

/// A frozen model run in eval mode. Deterministic per input.
pub struct FrozenModelTeacher {
    model: VitModel,
}

impl FrozenModelTeacher {
    pub fn new(model: VitModel) -> Self {
        Self { model }
    }

    pub fn model(&self) -> &VitModel {
        &self.model
    }
}

impl TeacherOracle for FrozenModelTeacher {
    fn num_classes(&self) -> usize {
        self.model.config.num_classes
    }

    fn logits(&self, _path: &str, image: &Tensor) -> Result<Vec<f64>, DistillError> {
        let mut tape = Tape::new();
        let leased = self.model.lease(&mut tape);
        let mut rng = derive_rng(0, &[]);
        let out = self.model.forward(
            &mut tape,
            &leased,
            image,
            Mode::Eval,
            &mut IdentityHook,
            &mut rng,
        )?;
        Ok(tape.value(out.logits).row(0).to_vec())
    }
}

/// Recorded logits keyed by sample path, stored in the standard checkpoint
/// container with one array per sample.
pub struct RecordedTeacher {
    by_path: HashMap<String, Vec<f64>>,
    num_classes: usize,
}

impl RecordedTeacher {
    pub fn new(entries: Vec<(String, Vec<f64>)>) -> Result<Self, DistillError> {
        let num_classes = entries
            .first()
            .map(|(_, l)| l.len())
            .ok_or_else(|| DistillError::BadContainer("no logits recorded".into()))?;
        let mut by_path = HashMap::new();
        for (path, logits) in entries {
            if logits.len() != num_classes {
                return Err(DistillError::WidthMismatch {
                    expected: num_classes,
                    got: logits.len(),
                });
            }
            by_path.insert(path, logits);
        }
        Ok(Self {
            by_path,
            num_classes,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, DistillError> {
        if ckpt.meta("format.kind") != Some(LOGITS_CONTAINER_KIND) {
            return Err(DistillError::BadContainer(
                "format.kind is not teacher_logits".into(),
            ));
        }
        let mut entries = Vec::new();
        for array in &ckpt.arrays {
            let path = array
                .name
                .strip_prefix(LOGITS_PREFIX)
                .ok_or_else(|| DistillError::BadContainer(format!("stray array `{}`", array.name)))?;
            entries.push((path.to_string(), array.data.clone()));
        }
        Self::new(entries)
    }

    /// Serializes the recorded logits, sorted by path so the container bytes
    /// are independent of recording order.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut paths: Vec<&String> = self.by_path.keys().collect();
        paths.sort();
        let arrays = paths
            .into_iter()
            .map(|p| NamedArray {
                name: format!("{LOGITS_PREFIX}{p}"),
                shape: vec![self.by_path[p].len()],
                data: self.by_path[p].clone(),
            })
            .collect();
        let mut ckpt = Checkpoint::new();
        ckpt.push_meta("format.kind", LOGITS_CONTAINER_KIND);
        ckpt.push_meta("num_classes", &self.num_classes.to_string());
        ckpt.arrays = arrays;
        ckpt
    }

    /// Records a frozen model's logits over a sample list.
    pub fn record(
        teacher: &dyn TeacherOracle,
        samples: &[(String, Tensor)],
    ) -> Result<Self, DistillError> {
        let mut entries = Vec::with_capacity(samples.len());
        for (path, image) in samples {
            entries.push((path.clone(), teacher.logits(path, image)?));
        }
        Self::new(entries)
    }
}

impl TeacherOracle for RecordedTeacher {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn logits(&self, path: &str, _image: &Tensor) -> Result<Vec<f64>, DistillError> {
        self.by_path
            .get(path)
            .cloned()
            .ok_or_else(|| DistillError::MissingLogits { path: path.into() })
    }
}

/// Adds a learnable distillation token and a separate distillation head to a
/// model. The token sits at sequence index 1 (class token at 0, patches
/// after), the positional embedding grows by one row, and the token is a
/// fixed point of the shuffle module exactly like the class token.
pub fn attach_distill_token(model: &mut VitModel, seed: u64) -> Result<(), DistillError> {
    if model.has_distill_token {
        return Err(DistillError::AlreadyAttached);
    }
    let d = model.config.embed_dim;
    let c = model.config.num_classes;
    let mut rng = derive_rng(seed, &[stream::TOKEN]);

    let token = trunc_normal(vec![1, d], 0.02, &mut rng)?;
    let pos_row = trunc_normal(vec![d], 0.02, &mut rng)?;
    let head_w = trunc_normal(vec![d, c], 0.02, &mut rng)?;

    let old_pos = model
        .params
        .get("pos_embed")
        .expect("model has a positional embedding")
        .clone();
    let mut data = Vec::with_capacity(old_pos.numel() + d);
    data.extend_from_slice(old_pos.row(0));
    data.extend_from_slice(pos_row.data());
    data.extend_from_slice(&old_pos.data()[d..]);
    let rows = old_pos.shape()[0] + 1;
    let new_pos = Tensor::new(vec![rows, d], data)?;

    model.params.insert("distill_token", token);
    model.params.replace("pos_embed", new_pos);
    model.params.insert("distill_head.weight", head_w);
    model.params.insert("distill_head.bias", Tensor::zeros(vec![c]));
    model.has_distill_token = true;
    Ok(())
}
