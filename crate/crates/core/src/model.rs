//! Unified model dispatch: one interface over the full network and the four
//! ablation kinds, covering initialization, per-sample loss graphs, greedy
//! decoding, and checkpoint naming.

use std::path::Path;

use rand::Rng;

use crate::baselines::{
    baseline_decode_greedy, baseline_forward_loss, BaselineInputs, BaselineKind, BaselineParams,
};
use crate::checkpoint::{self, CheckpointError};
use crate::config::ModelKind;
use crate::duda::{
    decode_greedy, forward_loss, DecodeOutput, DudaParams, LossWeights, ModelDims, ModelError,
};
use crate::encoder::FeatureGrid;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

/// Per-pair inputs a forward pass may consume. The pooled pixel difference
/// is only read by the pixel-difference kind.
pub struct SampleInputs<'a> {
    pub x_bef: &'a FeatureGrid,
    pub x_aft: &'a FeatureGrid,
    pub pix_diff: Option<&'a FeatureGrid>,
}

pub enum Model {
    Full(DudaParams),
    Ablation(BaselineParams),
}

fn baseline_kind(kind: ModelKind) -> Option<BaselineKind> {
    match kind {
        ModelKind::Duda => None,
        ModelKind::CaptPixDiff => Some(BaselineKind::PixDiff),
        ModelKind::CaptRepDiff => Some(BaselineKind::RepDiff),
        ModelKind::CaptAtt => Some(BaselineKind::Att),
        ModelKind::CaptDualAtt => Some(BaselineKind::DualAtt),
    }
}

impl Model {
    pub fn init<R: Rng>(kind: ModelKind, dims: ModelDims, width: usize, rng: &mut R) -> Model {
        match baseline_kind(kind) {
            None => Model::Full(DudaParams::init(dims, rng)),
            Some(k) => Model::Ablation(BaselineParams::init(k, dims, width, rng)),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Full(_) => ModelKind::Duda,
            Model::Ablation(b) => match b.kind() {
                BaselineKind::PixDiff => ModelKind::CaptPixDiff,
                BaselineKind::RepDiff => ModelKind::CaptRepDiff,
                BaselineKind::Att => ModelKind::CaptAtt,
                BaselineKind::DualAtt => ModelKind::CaptDualAtt,
            },
        }
    }

    pub fn dims(&self) -> ModelDims {
        match self {
            Model::Full(p) => p.dims,
            Model::Ablation(p) => p.dims,
        }
    }

    /// Whether forward passes need the pooled pixel difference.
    pub fn wants_pixel_diff(&self) -> bool {
        matches!(self, Model::Ablation(b) if b.kind() == BaselineKind::PixDiff)
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Model::Full(p) => p.named(),
            Model::Ablation(p) => p.named(),
        }
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            Model::Full(p) => p.named_mut(),
            Model::Ablation(p) => p.named_mut(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Build the per-sample loss graph. Returns the scalar loss, the bound
    /// parameter leaves (canonical order, for gradient harvest), and the
    /// teacher-forced `[steps, vocab]` logits.
    pub fn sample_loss(
        &self,
        tape: &mut Tape,
        inputs: &SampleInputs<'_>,
        targets: &[usize],
        weights: LossWeights,
    ) -> Result<(VarId, Vec<(&'static str, VarId)>, VarId), ModelError> {
        match self {
            Model::Full(p) => {
                let (loss, vars, _attn, fwd) =
                    forward_loss(tape, p, inputs.x_bef, inputs.x_aft, targets, weights)?;
                Ok((loss, vars.named(), fwd.logits))
            }
            Model::Ablation(p) => {
                let bi = BaselineInputs {
                    x_bef: inputs.x_bef,
                    x_aft: inputs.x_aft,
                    pix_diff: inputs.pix_diff,
                };
                let (loss, vars, _body, logits) =
                    baseline_forward_loss(tape, p, &bi, targets, weights)?;
                Ok((loss, vars.named(), logits))
            }
        }
    }

    /// Greedy caption decoding with attention artifacts.
    pub fn decode(
        &self,
        inputs: &SampleInputs<'_>,
        max_len: usize,
    ) -> Result<DecodeOutput, ModelError> {
        match self {
            Model::Full(p) => decode_greedy(p, inputs.x_bef, inputs.x_aft, max_len),
            Model::Ablation(p) => {
                let bi = BaselineInputs {
                    x_bef: inputs.x_bef,
                    x_aft: inputs.x_aft,
                    pix_diff: inputs.pix_diff,
                };
                baseline_decode_greedy(p, &bi, max_len)
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        checkpoint::save(path, &self.named())
    }

    /// Load tensor values from a checkpoint into this model, strictly.
    pub fn load_into(&mut self, path: &Path) -> Result<(), CheckpointError> {
        let loaded = checkpoint::load(path)?;
        let mut targets = self.named_mut();
        checkpoint::assign(loaded, &mut targets)
    }
}
