//! The change-captioning network: a dual-attention localizer that pools
//! before/after feature grids into compact vectors, and a dynamic speaker
//! that blends those vectors per decoding step while emitting the caption.

use std::fmt;

use rand::Rng;

use crate::encoder::FeatureGrid;
use crate::lstm::{LstmParams, LstmState, LstmVars};
use crate::tape::{Tape, TapeError, VarId};
use crate::tensor::Tensor;
use crate::vocab::{BOS, EOS, PAD};

/// The speaker blends exactly three localized vectors: before, difference,
/// and after.
pub const ALPHA_PARTS: usize = 3;


/// Initial bias of the attention gate's output conv. Gates opening at σ(0)
/// = 0.5 weight every cell equally, so pooled vectors start as background
/// averages whose view-jitter noise drowns the change signal; opening near
/// σ(-2) ≈ 0.12 makes the pool contrast-driven from the first step — cells
/// the difference-keyed kernels respond to dominate it — and leaves the
/// sparsity penalty little uniform mass to fight.
pub const ATTN_GATE_INIT_BIAS: f64 = -2.0;

/// Floor inside the entropy logarithm; α components are softmax outputs and
/// strictly positive, so this only guards saturated values.
pub const ENTROPY_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    /// Feature channels per grid.
    pub c: usize,
    /// Spatial height of the feature grid.
    pub h: usize,
    /// Spatial width of the feature grid.
    pub w: usize,
    /// LSTM hidden width (both LSTMs).
    pub d_h: usize,
    /// Word-embedding width.
    pub d_e: usize,
    /// Latent width of the pooled-feature projection.
    pub d_v: usize,
    /// Vocabulary size including reserved tokens.
    pub vocab: usize,
    /// Maximum caption length in tokens including <bos>/<eos>.
    pub max_len: usize,
}

#[derive(Debug)]
pub enum ModelError {
    Tape(TapeError),
    /// Target sequences must hold at least <bos> and one further token.
    TargetTooShort { len: usize },
    TargetTooLong { len: usize, max_len: usize },
    TokenOutOfRange { token: usize, vocab: usize },
    GridMismatch { expected: (usize, usize, usize), got: (usize, usize, usize) },
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Tape(e) => write!(f, "tape error: {e}"),
            ModelError::TargetTooShort { len } => {
                write!(f, "target sequence of length {len} is too short")
            }
            ModelError::TargetTooLong { len, max_len } => {
                write!(f, "target sequence of length {len} exceeds max_len {max_len}")
            }
            ModelError::TokenOutOfRange { token, vocab } => {
                write!(f, "token {token} out of vocabulary of size {vocab}")
            }
            ModelError::GridMismatch { expected, got } => {
                write!(f, "feature grid {got:?} does not match model dims {expected:?}")
            }
        }
    }
}

impl std::error::Error for ModelError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            ModelError::Tape(e) => Some(e),
            _ => None,
        }
    }
}

impl From<TapeError> for ModelError {
    fn from(e: TapeError) -> Self {
        ModelError::Tape(e)
    }
}

/// Full parameter set. Field order here is the canonical checkpoint and
/// optimizer-slot order; `named` must list every tensor exactly once.
pub struct DudaParams {
    /// Attention conv 1: 2C → C, 3×3, padding 1, shared across branches.
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    /// Attention conv 2: C → 1, 3×3, padding 1.
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    /// Latent projection 3C → D_v.
    pub w_d1: Tensor,
    pub b_d1: Tensor,
    /// Dynamic-attention LSTM over [v ; h_caption].
    pub lstm_dyn: LstmParams,
    /// Blend-logit head D_h → 3.
    pub w_d2: Tensor,
    pub b_d2: Tensor,
    /// Word embeddings V × D_e.
    pub embed: Tensor,
    /// Caption LSTM over [embedding ; l_dyn].
    pub lstm_cap: LstmParams,
    /// Output head D_h → V.
    pub w_c: Tensor,
    pub b_c: Tensor,
    pub dims: ModelDims,
}

pub(crate) fn linear_init<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (cols as f64).sqrt();
    Tensor::uniform(&[rows, cols], -bound, bound, rng).tracked()
}

pub(crate) fn conv_init<R: Rng>(out_c: usize, in_c: usize, k: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (in_c * k * k) as f64).sqrt();
    Tensor::uniform(&[out_c, in_c, k, k], -bound, bound, rng).tracked()
}

/// First-layer kernel for an attention head whose input is frame channels
/// followed by difference channels. The frame block starts at zero, so at
/// initialization every map is the same function of the difference
/// channels alone: per-frame maps coincide (their pooled difference
/// cancels shared content exactly, instead of injecting map-mismatch
/// noise) and they already respond where the features changed. Training
/// grows the frame block from zero once frame-specific evidence earns it.
pub(crate) fn attn_conv1_init<R: Rng>(
    out_c: usize,
    frame_c: usize,
    diff_c: usize,
    k: usize,
    rng: &mut R,
) -> Tensor {
    let bound = (6.0 / (diff_c * k * k) as f64).sqrt();
    let in_c = frame_c + diff_c;
    let mut values = vec![0.0; out_c * in_c * k * k];
    for oc in 0..out_c {
        for ic in frame_c..in_c {
            for t in 0..k * k {
                values[(oc * in_c + ic) * k * k + t] = rng.gen_range(-bound..bound);
            }
        }
    }
    Tensor::new(vec![out_c, in_c, k, k], values).expect("attention kernel shape").tracked()
}

/// Second-layer kernel for an attention head: non-negative weights. The first
/// layer is ReLU, so with this layer non-negative the gate logit starts as a
/// monotone function of local difference energy — cells where the features
/// changed open, quiet cells stay at the closed-gate bias. That gives the
/// caption loss an immediate reason to keep change cells open (pooled
/// features stop diluting the changed object with background), instead of a
/// zero-mean gate whose sign at the change is a coin flip per cell. Training
/// is free to grow negative weights where suppression earns its keep.
pub(crate) fn attn_conv2_init<R: Rng>(in_c: usize, k: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (in_c * k * k) as f64).sqrt();
    Tensor::uniform(&[1, in_c, k, k], 0.0, bound, rng).tracked()
}

impl DudaParams {
    pub fn init<R: Rng>(dims: ModelDims, rng: &mut R) -> DudaParams {
        let c = dims.c;
        DudaParams {
            conv1_w: attn_conv1_init(c, c, c, 3, rng),
            conv1_b: Tensor::zeros(&[c]).tracked(),
            conv2_w: attn_conv2_init(c, 3, rng),
            conv2_b: Tensor::new(vec![1], vec![ATTN_GATE_INIT_BIAS])
                .expect("gate bias shape")
                .tracked(),
            w_d1: linear_init(dims.d_v, 3 * c, rng),
            b_d1: Tensor::zeros(&[dims.d_v]).tracked(),
            lstm_dyn: LstmParams::init(dims.d_v + dims.d_h, dims.d_h, rng),
            w_d2: linear_init(ALPHA_PARTS, dims.d_h, rng),
            b_d2: Tensor::zeros(&[ALPHA_PARTS]).tracked(),
            embed: Tensor::uniform(&[dims.vocab, dims.d_e], -0.1, 0.1, rng).tracked(),
            lstm_cap: LstmParams::init(dims.d_e + c, dims.d_h, rng),
            w_c: linear_init(dims.vocab, dims.d_h, rng),
            b_c: Tensor::zeros(&[dims.vocab]).tracked(),
            dims,
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("conv1_w", &self.conv1_w),
            ("conv1_b", &self.conv1_b),
            ("conv2_w", &self.conv2_w),
            ("conv2_b", &self.conv2_b),
            ("w_d1", &self.w_d1),
            ("b_d1", &self.b_d1),
            ("lstm_dyn.w", &self.lstm_dyn.w),
            ("lstm_dyn.b", &self.lstm_dyn.b),
            ("w_d2", &self.w_d2),
            ("b_d2", &self.b_d2),
            ("embed", &self.embed),
            ("lstm_cap.w", &self.lstm_cap.w),
            ("lstm_cap.b", &self.lstm_cap.b),
            ("w_c", &self.w_c),
            ("b_c", &self.b_c),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("conv1_w", &mut self.conv1_w),
            ("conv1_b", &mut self.conv1_b),
            ("conv2_w", &mut self.conv2_w),
            ("conv2_b", &mut self.conv2_b),
            ("w_d1", &mut self.w_d1),
            ("b_d1", &mut self.b_d1),
            ("lstm_dyn.w", &mut self.lstm_dyn.w),
            ("lstm_dyn.b", &mut self.lstm_dyn.b),
            ("w_d2", &mut self.w_d2),
            ("b_d2", &mut self.b_d2),
            ("embed", &mut self.embed),
            ("lstm_cap.w", &mut self.lstm_cap.w),
            ("lstm_cap.b", &mut self.lstm_cap.b),
            ("w_c", &mut self.w_c),
            ("b_c", &mut self.b_c),
        ]
    }
}

/// Parameters bound onto a tape for one forward pass.
#[derive(Debug)]
pub struct DudaVars {
    pub conv1_w: VarId,
    pub conv1_b: VarId,
    pub conv2_w: VarId,
    pub conv2_b: VarId,
    pub w_d1: VarId,
    pub b_d1: VarId,
    pub lstm_dyn: LstmVars,
    pub w_d2: VarId,
    pub b_d2: VarId,
    pub embed: VarId,
    pub lstm_cap: LstmVars,
    pub w_c: VarId,
    pub b_c: VarId,
    pub dims: ModelDims,
}

impl DudaVars {
    pub fn bind(tape: &mut Tape, params: &DudaParams) -> DudaVars {
        DudaVars {
            conv1_w: tape.leaf(&params.conv1_w),
            conv1_b: tape.leaf(&params.conv1_b),
            conv2_w: tape.leaf(&params.conv2_w),
            conv2_b: tape.leaf(&params.conv2_b),
            w_d1: tape.leaf(&params.w_d1),
            b_d1: tape.leaf(&params.b_d1),
            lstm_dyn: LstmVars::bind(tape, &params.lstm_dyn),
            w_d2: tape.leaf(&params.w_d2),
            b_d2: tape.leaf(&params.b_d2),
            embed: tape.leaf(&params.embed),
            lstm_cap: LstmVars::bind(tape, &params.lstm_cap),
            w_c: tape.leaf(&params.w_c),
            b_c: tape.leaf(&params.b_c),
            dims: params.dims,
        }
    }

    pub fn attn_conv(&self) -> AttnConvVars {
        AttnConvVars {
            conv1_w: self.conv1_w,
            conv1_b: self.conv1_b,
            conv2_w: self.conv2_w,
            conv2_b: self.conv2_b,
        }
    }

    /// Leaf ids in the same canonical order as `DudaParams::named`.
    pub fn named(&self) -> Vec<(&'static str, VarId)> {
        vec![
            ("conv1_w", self.conv1_w),
            ("conv1_b", self.conv1_b),
            ("conv2_w", self.conv2_w),
            ("conv2_b", self.conv2_b),
            ("w_d1", self.w_d1),
            ("b_d1", self.b_d1),
            ("lstm_dyn.w", self.lstm_dyn.w),
            ("lstm_dyn.b", self.lstm_dyn.b),
            ("w_d2", self.w_d2),
            ("b_d2", self.b_d2),
            ("embed", self.embed),
            ("lstm_cap.w", self.lstm_cap.w),
            ("lstm_cap.b", self.lstm_cap.b),
            ("w_c", self.w_c),
            ("b_c", self.b_c),
        ]
    }
}

/// Attention maps and pooled vectors produced by the localizer.
#[derive(Debug)]
pub struct AttentionOutputs {
    /// 1×H×W maps in (0, 1).
    pub a_bef: VarId,
    pub a_aft: VarId,
    /// Pooled C-vectors.
    pub l_bef: VarId,
    pub l_aft: VarId,
    pub l_diff: VarId,
}

/// Place a feature grid on the tape as an untracked constant.
pub fn grid_leaf(tape: &mut Tape, grid: &FeatureGrid, dims: ModelDims) -> Result<VarId, ModelError> {
    if (grid.c, grid.h, grid.w) != (dims.c, dims.h, dims.w) {
        return Err(ModelError::GridMismatch {
            expected: (dims.c, dims.h, dims.w),
            got: (grid.c, grid.h, grid.w),
        });
    }
    Ok(tape.constant(&[grid.c, grid.h, grid.w], grid.data.clone())?)
}

/// The two-conv sigmoid attention head, as tape ids. Shared by the dual
/// localizer and the single-attention baseline.
#[derive(Clone, Copy, Debug)]
pub struct AttnConvVars {
    pub conv1_w: VarId,
    pub conv1_b: VarId,
    pub conv2_w: VarId,
    pub conv2_b: VarId,
}

/// sigmoid(conv2(relu(conv1(input)))) over an already-stacked input grid.
pub fn attention_map(
    tape: &mut Tape,
    input: VarId,
    conv: &AttnConvVars,
) -> Result<VarId, TapeError> {
    let hidden = tape.conv2d(input, conv.conv1_w, conv.conv1_b, 1, 1)?;
    let hidden = tape.relu(hidden);
    let pre = tape.conv2d(hidden, conv.conv2_w, conv.conv2_b, 1, 1)?;
    Ok(tape.sigmoid(pre))
}

/// Dual attention with explicit conv weights: difference grid, shared-weight
/// attention maps for both branches, attention-weighted spatial pooling.
pub fn dual_attention_with(
    tape: &mut Tape,
    x_bef: VarId,
    x_aft: VarId,
    conv: &AttnConvVars,
) -> Result<AttentionOutputs, ModelError> {
    if tape.shape(x_bef) != tape.shape(x_aft) {
        return Err(TapeError::ShapeMismatch {
            op: "dual_attention",
            lhs: tape.shape(x_bef).to_vec(),
            rhs: tape.shape(x_aft).to_vec(),
        }
        .into());
    }
    let x_diff = tape.sub(x_aft, x_bef)?;
    let stacked_bef = tape.concat(&[x_bef, x_diff])?;
    let a_bef = attention_map(tape, stacked_bef, conv)?;
    let stacked_aft = tape.concat(&[x_aft, x_diff])?;
    let a_aft = attention_map(tape, stacked_aft, conv)?;
    let l_bef = tape.attn_pool(x_bef, a_bef)?;
    let l_aft = tape.attn_pool(x_aft, a_aft)?;
    let l_diff = tape.sub(l_aft, l_bef)?;
    Ok(AttentionOutputs { a_bef, a_aft, l_bef, l_aft, l_diff })
}

/// Dual attention using the full model's localizer weights.
pub fn dual_attention(
    tape: &mut Tape,
    x_bef: VarId,
    x_aft: VarId,
    vars: &DudaVars,
) -> Result<AttentionOutputs, ModelError> {
    dual_attention_with(tape, x_bef, x_aft, &vars.attn_conv())
}

/// Recurrent state of the speaker: dynamic-attention LSTM and caption LSTM.
#[derive(Clone, Copy)]
pub struct SpeakerState {
    pub dynamic: LstmState,
    pub caption: LstmState,
}

pub fn speaker_init(tape: &mut Tape, vars: &DudaVars) -> Result<SpeakerState, ModelError> {
    Ok(SpeakerState {
        dynamic: vars.lstm_dyn.zero_state(tape)?,
        caption: vars.lstm_cap.zero_state(tape)?,
    })
}

pub struct SpeakerStep {
    /// Unnormalized scores over the vocabulary for the next token.
    pub logits: VarId,
    /// Blend weights over (before, difference, after); sums to 1.
    pub alpha: VarId,
    /// Blended feature vector fed to the caption LSTM this step.
    pub l_dyn: VarId,
    pub state: SpeakerState,
}

/// One decoding step: blend weights from the dynamic LSTM (which sees the
/// previous caption state), then the caption LSTM consumes the previous
/// token's embedding concatenated with the blended features.
pub fn speaker_step(
    tape: &mut Tape,
    vars: &DudaVars,
    attn: &AttentionOutputs,
    token: usize,
    state: &SpeakerState,
) -> Result<SpeakerStep, ModelError> {
    if token >= vars.dims.vocab {
        return Err(ModelError::TokenOutOfRange { token, vocab: vars.dims.vocab });
    }
    let pooled = tape.concat(&[attn.l_bef, attn.l_diff, attn.l_aft])?;
    let projected = tape.matvec(vars.w_d1, pooled)?;
    let projected = tape.add(projected, vars.b_d1)?;
    let v = tape.relu(projected);
    let u = tape.concat(&[v, state.caption.h])?;
    let dynamic = vars.lstm_dyn.step(tape, u, &state.dynamic)?;
    let alpha_pre = tape.matvec(vars.w_d2, dynamic.h)?;
    let alpha_pre = tape.add(alpha_pre, vars.b_d2)?;
    let alpha = tape.softmax(alpha_pre)?;
    let l_dyn = tape.blend(alpha, &[attn.l_bef, attn.l_diff, attn.l_aft])?;
    let embedding = tape.embed_row(vars.embed, token)?;
    let x = tape.concat(&[embedding, l_dyn])?;
    let caption = vars.lstm_cap.step(tape, x, &state.caption)?;
    let logits = tape.matvec(vars.w_c, caption.h)?;
    let logits = tape.add(logits, vars.b_c)?;
    Ok(SpeakerStep { logits, alpha, l_dyn, state: SpeakerState { dynamic, caption } })
}

#[derive(Debug)]
pub struct SpeakerForward {
    /// `[steps, vocab]` logits; row t scores the token at position t+1.
    pub logits: VarId,
    /// One `[3]` blend-weight vector per step.
    pub alphas: Vec<VarId>,
}

/// Teacher-forced decoding over a `<bos> … <eos>` target sequence.
pub fn speaker_forward(
    tape: &mut Tape,
    vars: &DudaVars,
    attn: &AttentionOutputs,
    targets: &[usize],
) -> Result<SpeakerForward, ModelError> {
    if targets.len() < 2 {
        return Err(ModelError::TargetTooShort { len: targets.len() });
    }
    if targets.len() > vars.dims.max_len {
        return Err(ModelError::TargetTooLong { len: targets.len(), max_len: vars.dims.max_len });
    }
    let steps = targets.len() - 1;
    let mut state = speaker_init(tape, vars)?;
    let mut rows = Vec::with_capacity(steps);
    let mut alphas = Vec::with_capacity(steps);
    for &token in &targets[..steps] {
        let step = speaker_step(tape, vars, attn, token, &state)?;
        rows.push(step.logits);
        alphas.push(step.alpha);
        state = step.state;
    }
    let stacked = tape.concat(&rows)?;
    let logits = tape.reshape(stacked, &[steps, vars.dims.vocab])?;
    Ok(SpeakerForward { logits, alphas })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Weight of the L1 penalty on both attention maps.
    pub lambda_l1: f64,
    /// Weight of the (maximized) mean per-step blend entropy.
    pub lambda_ent: f64,
}

/// Scalar training loss for one sample:
/// cross-entropy sum + λ_l1 · (Σ|a_bef| + Σ|a_aft|) − λ_ent · mean entropy(α).
pub fn sample_loss(
    tape: &mut Tape,
    attn: &AttentionOutputs,
    forward: &SpeakerForward,
    targets: &[usize],
    weights: LossWeights,
) -> Result<VarId, ModelError> {
    let target_ids: Vec<u32> = targets[1..].iter().map(|&t| t as u32).collect();
    let xe = tape.cross_entropy(forward.logits, &target_ids, PAD as u32)?;
    let abs_bef = tape.abs(attn.a_bef);
    let abs_aft = tape.abs(attn.a_aft);
    let l1_bef = tape.sum_all(abs_bef);
    let l1_aft = tape.sum_all(abs_aft);
    let l1 = tape.add(l1_bef, l1_aft)?;
    // Σ_t Σ_i α log α is the negated entropy sum; adding it scaled by
    // λ_ent / steps subtracts λ_ent · mean entropy.
    let mut neg_entropy = None;
    for &alpha in &forward.alphas {
        let log_alpha = tape.log_eps(alpha, ENTROPY_EPS);
        let plogp = tape.mul(alpha, log_alpha)?;
        let s = tape.sum_all(plogp);
        neg_entropy = Some(match neg_entropy {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }
    let loss = tape.add_scaled(xe, l1, weights.lambda_l1)?;
    let loss = match neg_entropy {
        Some(n) => tape.add_scaled(loss, n, weights.lambda_ent / forward.alphas.len() as f64)?,
        None => loss,
    };
    Ok(loss)
}

/// Convenience: bind, attend, teacher-force, and compute the loss for one
/// sample. Returns the loss plus the forward artifacts for inspection.
pub fn forward_loss(
    tape: &mut Tape,
    params: &DudaParams,
    x_bef: &FeatureGrid,
    x_aft: &FeatureGrid,
    targets: &[usize],
    weights: LossWeights,
) -> Result<(VarId, DudaVars, AttentionOutputs, SpeakerForward), ModelError> {
    let vars = DudaVars::bind(tape, params);
    let xb = grid_leaf(tape, x_bef, params.dims)?;
    let xa = grid_leaf(tape, x_aft, params.dims)?;
    let attn = dual_attention(tape, xb, xa, &vars)?;
    let forward = speaker_forward(tape, &vars, &attn, targets)?;
    let loss = sample_loss(tape, &attn, &forward, targets, weights)?;
    Ok((loss, vars, attn, forward))
}

/// Argmax over `scores[start..]`, ties broken toward the lowest index.
pub fn argmax_from(scores: &[f64], start: usize) -> usize {
    let mut best = start;
    for i in start + 1..scores.len() {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    best
}

/// Decoded caption with everything needed for localization scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOutput {
    /// Emitted word tokens; never contains <pad>, <bos>, or <eos>.
    pub tokens: Vec<usize>,
    /// Blend weights per emitted step (including the step that produced
    /// <eos>, if any).
    pub alphas: Vec<[f64; ALPHA_PARTS]>,
    /// Attention maps as H×W row-major planes.
    pub a_bef: Vec<f64>,
    pub a_aft: Vec<f64>,
}

/// Greedy decoding: start from <bos>, emit the argmax token each step
/// (control tokens <pad>/<bos> excluded from the argmax), stop at <eos> or
/// after max_len steps.
pub fn decode_greedy(
    params: &DudaParams,
    x_bef: &FeatureGrid,
    x_aft: &FeatureGrid,
    max_len: usize,
) -> Result<DecodeOutput, ModelError> {
    let mut tape = Tape::new();
    let vars = DudaVars::bind(&mut tape, params);
    let xb = grid_leaf(&mut tape, x_bef, params.dims)?;
    let xa = grid_leaf(&mut tape, x_aft, params.dims)?;
    let attn = dual_attention(&mut tape, xb, xa, &vars)?;
    let a_bef = tape.values(attn.a_bef).to_vec();
    let a_aft = tape.values(attn.a_aft).to_vec();
    let mut state = speaker_init(&mut tape, &vars)?;
    let mut token = BOS;
    let mut tokens = Vec::new();
    let mut alphas = Vec::new();
    for _ in 0..max_len {
        let step = speaker_step(&mut tape, &vars, &attn, token, &state)?;
        let alpha = tape.values(step.alpha);
        alphas.push([alpha[0], alpha[1], alpha[2]]);
        let next = argmax_from(tape.values(step.logits), EOS);
        state = step.state;
        if next == EOS {
            break;
        }
        tokens.push(next);
        token = next;
    }
    debug_assert!(tokens.iter().all(|&t| t != PAD && t != BOS && t != EOS));
    Ok(DecodeOutput { tokens, alphas, a_bef, a_aft })
}
