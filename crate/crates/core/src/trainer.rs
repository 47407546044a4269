//! Deterministic training and prediction: dataset preparation (feature
//! extraction, vocabulary, caption encoding), the epoch loop with seeded
//! shuffle/caption streams, Adam with global-norm clipping, best-validation
//! checkpointing, and split prediction files.

use std::fmt;
use std::io::{BufRead, Write as _};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{clip_global_norm, Adam, AdamConfig};
use crate::baselines::pool_pixel_diff;
use crate::checkpoint::CheckpointError;
use crate::config::{GenConfig, TrainConfig};
use crate::dataset::{self, DatasetError, PairRecord, Split};
use crate::duda::{LossWeights, ModelDims, ModelError};
use crate::encoder::{Encoder, FeatureGrid, FEATURE_CHANNELS};
use crate::kernels;
use crate::model::{Model, SampleInputs};
use crate::ppm;
use crate::scene::ChangeType;
use crate::tape::Tape;
use crate::vocab::{VocabError, Vocabulary, EOS};

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const TRAIN_LOG_NAME: &str = "train_log.json";

#[derive(Debug)]
pub enum TrainError {
    Io(std::io::Error),
    Dataset(DatasetError),
    Checkpoint(CheckpointError),
    Model(ModelError),
    Vocab(VocabError),
    Pixmap(ppm::PpmError),
    Config(crate::config::ConfigError),
    Encoder(crate::encoder::EncoderError),
    EmptySplit { split: Split },
    /// Loss became NaN or infinite; training aborts with the location.
    NonFiniteLoss { epoch: usize, step: usize, pair_id: u64, loss: f64 },
    /// The frozen encoder's parameter hash changed during training.
    EncoderChanged,
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Io(e) => write!(f, "trainer i/o error: {e}"),
            TrainError::Dataset(e) => write!(f, "trainer dataset error: {e}"),
            TrainError::Checkpoint(e) => write!(f, "trainer checkpoint error: {e}"),
            TrainError::Model(e) => write!(f, "trainer model error: {e}"),
            TrainError::Vocab(e) => write!(f, "trainer vocabulary error: {e}"),
            TrainError::Pixmap(e) => write!(f, "trainer image error: {e}"),
            TrainError::Config(e) => write!(f, "trainer config error: {e}"),
            TrainError::Encoder(e) => write!(f, "trainer encoder error: {e}"),
            TrainError::EmptySplit { split } => {
                write!(f, "split {} holds no pairs", split.name())
            }
            TrainError::NonFiniteLoss { epoch, step, pair_id, loss } => write!(
                f,
                "non-finite loss {loss} at epoch {epoch}, step {step}, pair {pair_id}"
            ),
            TrainError::EncoderChanged => {
                write!(f, "frozen encoder parameters changed during training")
            }
        }
    }
}

impl std::error::Error for TrainError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            TrainError::Io(e) => Some(e),
            TrainError::Dataset(e) => Some(e),
            TrainError::Checkpoint(e) => Some(e),
            TrainError::Model(e) => Some(e),
            TrainError::Vocab(e) => Some(e),
            TrainError::Pixmap(e) => Some(e),
            TrainError::Config(e) => Some(e),
            TrainError::Encoder(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for TrainError {
    fn from(e: std::io::Error) -> Self {
        TrainError::Io(e)
    }
}
impl From<DatasetError> for TrainError {
    fn from(e: DatasetError) -> Self {
        TrainError::Dataset(e)
    }
}
impl From<CheckpointError> for TrainError {
    fn from(e: CheckpointError) -> Self {
        TrainError::Checkpoint(e)
    }
}
impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}
impl From<VocabError> for TrainError {
    fn from(e: VocabError) -> Self {
        TrainError::Vocab(e)
    }
}
impl From<ppm::PpmError> for TrainError {
    fn from(e: ppm::PpmError) -> Self {
        TrainError::Pixmap(e)
    }
}
impl From<crate::config::ConfigError> for TrainError {
    fn from(e: crate::config::ConfigError) -> Self {
        TrainError::Config(e)
    }
}

/// One pair with everything forward passes need, features precomputed.
pub struct PreparedPair {
    pub record: PairRecord,
    pub x_bef: FeatureGrid,
    pub x_aft: FeatureGrid,
    /// 3-plane pooled absolute pixel difference at grid resolution.
    pub pix_diff: FeatureGrid,
    /// Reference captions encoded `<bos> … <eos>`; `None` where a caption
    /// holds a token outside the training vocabulary.
    pub encoded: Vec<Option<Vec<usize>>>,
}

impl PreparedPair {
    pub fn change_type(&self) -> ChangeType {
        self.record.change.change_type
    }
}

/// A dataset with features extracted and captions encoded, ready to train
/// and evaluate on. The encoder hash witnesses the frozen weights.
pub struct PreparedDataset {
    pub vocab: Vocabulary,
    pub pairs: Vec<PreparedPair>,
    pub grid_hw: usize,
    pub raster_size: usize,
    pub encoder_seed: u64,
    pub encoder_hash: u64,
}

impl PreparedDataset {
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.pairs.len()).filter(|&i| self.pairs[i].record.split == split).collect()
    }
}

/// Load a built dataset and precompute model inputs. The vocabulary is
/// built from training-split captions only.
pub fn prepare(dataset_dir: &Path, encoder_seed: u64, max_len: usize) -> Result<PreparedDataset, TrainError> {
    let gen_cfg = GenConfig::load(&dataset_dir.join(dataset::CONFIG_ECHO_NAME))?;
    let records = dataset::load_manifest(dataset_dir)?;
    let vocab = Vocabulary::build(
        records
            .iter()
            .filter(|r| r.split == Split::Train)
            .flat_map(|r| r.captions.iter().map(String::as_str)),
    );
    let encoder = Encoder::new(gen_cfg.raster_size, encoder_seed);
    let hash_before = encoder.params_hash();
    let grid_hw = encoder.grid_size();
    let mut pairs = Vec::with_capacity(records.len());
    for record in records {
        let before = ppm::load_p6(&dataset_dir.join(&record.before_image))?;
        let after = ppm::load_p6(&dataset_dir.join(&record.after_image))?;
        let x_bef = encoder.encode(&before)?;
        let x_aft = encoder.encode(&after)?;
        let pix_diff = pool_pixel_diff(&before, &after, grid_hw)?;
        let encoded = record
            .captions
            .iter()
            .map(|c| vocab.encode(c, max_len).ok())
            .collect();
        pairs.push(PreparedPair { record, x_bef, x_aft, pix_diff, encoded });
    }
    if encoder.params_hash() != hash_before {
        return Err(TrainError::EncoderChanged);
    }
    Ok(PreparedDataset {
        vocab,
        pairs,
        grid_hw,
        raster_size: gen_cfg.raster_size,
        encoder_seed,
        encoder_hash: hash_before,
    })
}

impl From<crate::encoder::EncoderError> for TrainError {
    fn from(e: crate::encoder::EncoderError) -> Self {
        TrainError::Encoder(e)
    }
}

pub fn model_dims(cfg: &TrainConfig, data: &PreparedDataset) -> ModelDims {
    ModelDims {
        c: FEATURE_CHANNELS,
        h: data.grid_hw,
        w: data.grid_hw,
        d_h: cfg.d_h,
        d_e: cfg.d_e,
        d_v: cfg.d_v,
        vocab: data.vocab.len(),
        max_len: cfg.max_len,
    }
}

fn loss_weights(cfg: &TrainConfig) -> LossWeights {
    LossWeights { lambda_l1: cfg.lambda_l1, lambda_ent: cfg.lambda_ent }
}

/// The model a config describes, freshly initialized from the config seed.
pub fn init_model(cfg: &TrainConfig, data: &PreparedDataset) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Model::init(cfg.model, model_dims(cfg, data), cfg.baseline_width, &mut rng)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EpochEntry {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_clock_s: f64,
    pub checkpoint: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrainLog {
    pub model: String,
    pub seed: u64,
    pub epochs: Vec<EpochEntry>,
    pub best_epoch: Option<usize>,
    pub best_checkpoint: String,
    /// Validation pairs skipped because their supervision caption holds a
    /// token outside the training vocabulary (0 on realistic datasets).
    pub val_skipped: usize,
}

pub struct TrainOutcome {
    pub log: TrainLog,
    pub model: Model,
    pub last_path: PathBuf,
    pub best_path: PathBuf,
}

/// Accumulated mean gradient over a batch, aligned with `model.named()`.
fn batch_gradients(
    model: &Model,
    batch: &[(usize, usize)],
    data: &PreparedDataset,
    weights: LossWeights,
    sizes: &[usize],
) -> Result<(Vec<Vec<f64>>, f64), TrainError> {
    let mut accum: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
    let mut loss_sum = 0.0;
    for &(pair_idx, caption_idx) in batch {
        let pair = &data.pairs[pair_idx];
        let Some(targets) = pair.encoded[caption_idx].as_ref() else {
            // Training captions always encode (the vocabulary is built from
            // them); this arm is unreachable for train batches.
            continue;
        };
        let mut tape = Tape::new();
        let inputs = SampleInputs {
            x_bef: &pair.x_bef,
            x_aft: &pair.x_aft,
            pix_diff: Some(&pair.pix_diff),
        };
        let (loss, vars, _) = model.sample_loss(&mut tape, &inputs, targets, weights)?;
        let value = tape.values(loss)[0];
        loss_sum += value;
        if !value.is_finite() {
            // Caller maps this into NonFiniteLoss with epoch/step context.
            return Ok((accum, value));
        }
        tape.backward(loss).map_err(ModelError::Tape)?;
        for (slot, (_, id)) in accum.iter_mut().zip(&vars) {
            if let Some(grad) = tape.grad(*id) {
                kernels::axpy(slot, 1.0, grad);
            }
        }
    }
    let scale = 1.0 / batch.len() as f64;
    for slot in &mut accum {
        for g in slot.iter_mut() {
            *g *= scale;
        }
    }
    Ok((accum, loss_sum / batch.len() as f64))
}

fn apply_step(model: &mut Model, adam: &mut Adam, mut grads: Vec<Vec<f64>>, clip: f64) {
    clip_global_norm(&mut grads, clip);
    let mut named = model.named_mut();
    let mut params: Vec<&mut [f64]> =
        named.iter_mut().map(|(_, t)| t.values.as_mut_slice()).collect();
    let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
    adam.step(&mut params, &grad_refs);
}

/// Mean per-sample loss over a split using caption 0 for supervision.
/// Returns the mean and the count of skipped (out-of-vocabulary) pairs.
fn split_loss(
    model: &Model,
    data: &PreparedDataset,
    indices: &[usize],
    weights: LossWeights,
) -> Result<(f64, usize), TrainError> {
    let mut total = 0.0;
    let mut counted = 0usize;
    let mut skipped = 0usize;
    for &i in indices {
        let pair = &data.pairs[i];
        let Some(targets) = pair.encoded[0].as_ref() else {
            skipped += 1;
            continue;
        };
        let mut tape = Tape::new();
        let inputs = SampleInputs {
            x_bef: &pair.x_bef,
            x_aft: &pair.x_aft,
            pix_diff: Some(&pair.pix_diff),
        };
        let (loss, _, _) = model.sample_loss(&mut tape, &inputs, targets, weights)?;
        total += tape.values(loss)[0];
        counted += 1;
    }
    let mean = if counted == 0 { f64::NAN } else { total / counted as f64 };
    Ok((mean, skipped))
}

/// Deterministic training: seeded init, per-epoch seeded shuffle and
/// caption-choice streams, Adam with global-norm clipping, last + best
/// validation checkpoints, JSON log. Zero epochs saves the initialized
/// model with an empty log.
pub fn train(
    cfg: &TrainConfig,
    data: &PreparedDataset,
    out_dir: &Path,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let train_idx = data.split_indices(Split::Train);
    let val_idx = data.split_indices(Split::Val);
    if train_idx.is_empty() {
        return Err(TrainError::EmptySplit { split: Split::Train });
    }
    if val_idx.is_empty() && cfg.epochs > 0 {
        return Err(TrainError::EmptySplit { split: Split::Val });
    }
    let weights = loss_weights(cfg);
    let mut model = init_model(cfg, data);
    let sizes: Vec<usize> = model.named().iter().map(|(_, t)| t.numel()).collect();
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &sizes);
    let last_path = out_dir.join(LAST_CHECKPOINT);
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let encoder_hash_before = Encoder::new(data.raster_size, data.encoder_seed).params_hash();
    let mut log = TrainLog {
        model: cfg.model.flag().to_string(),
        seed: cfg.seed,
        epochs: Vec::new(),
        best_epoch: None,
        best_checkpoint: BEST_CHECKPOINT.to_string(),
        val_skipped: 0,
    };
    model.save(&last_path)?;
    model.save(&best_path)?;
    let mut best_val = f64::INFINITY;
    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        // Independent per-epoch streams keep the schedule deterministic and
        // insensitive to loop internals.
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(dataset::derive_seed(cfg.seed, 1_000_000 + epoch as u64));
        let mut caption_rng =
            ChaCha8Rng::seed_from_u64(dataset::derive_seed(cfg.seed, 2_000_000 + epoch as u64));
        // One supervision caption per pair per epoch, drawn in dataset order.
        let choices: Vec<usize> = train_idx
            .iter()
            .map(|&i| caption_rng.gen_range(0..data.pairs[i].encoded.len()))
            .collect();
        let mut order: Vec<usize> = (0..train_idx.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(usize, usize)> =
                chunk.iter().map(|&k| (train_idx[k], choices[k])).collect();
            let (grads, batch_loss) = batch_gradients(&model, &batch, data, weights, &sizes)?;
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    step,
                    pair_id: data.pairs[batch[0].0].record.id,
                    loss: batch_loss,
                });
            }
            apply_step(&mut model, &mut adam, grads, cfg.clip_norm);
            epoch_loss += batch_loss;
            batches += 1;
        }
        let train_loss = epoch_loss / batches as f64;
        let (val_loss, skipped) = split_loss(&model, data, &val_idx, weights)?;
        log.val_skipped = skipped;
        model.save(&last_path)?;
        if val_loss < best_val {
            best_val = val_loss;
            log.best_epoch = Some(epoch);
            std::fs::copy(&last_path, &best_path)?;
        }
        log.epochs.push(EpochEntry {
            epoch,
            train_loss,
            val_loss,
            wall_clock_s: t0.elapsed().as_secs_f64(),
            checkpoint: LAST_CHECKPOINT.to_string(),
        });
    }
    if Encoder::new(data.raster_size, data.encoder_seed).params_hash() != encoder_hash_before {
        return Err(TrainError::EncoderChanged);
    }
    let log_json = serde_json::to_string_pretty(&log).expect("log serializes");
    std::fs::write(out_dir.join(TRAIN_LOG_NAME), log_json)?;
    Ok(TrainOutcome { log, model, last_path, best_path })
}

/// One decoded prediction, serialized as a JSON line.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PredictionRecord {
    pub id: u64,
    pub caption: String,
    /// Per-step blend weights over (before, difference, after); empty for
    /// models without the dynamic speaker.
    pub alphas: Vec<[f64; 3]>,
    /// Attention planes, row-major `map_h × map_w`; empty when the model
    /// has no spatial attention.
    pub a_bef: Vec<f64>,
    pub a_aft: Vec<f64>,
    pub map_h: usize,
    pub map_w: usize,
}

pub fn parse_prediction_line(line: &str) -> Result<PredictionRecord, String> {
    serde_json::from_str(line).map_err(|e| e.to_string())
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>, TrainError> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_prediction_line(&line).map_err(|detail| {
            TrainError::Dataset(DatasetError::Malformed { line: idx + 1, detail })
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Decode every pair of a split in id order and write one JSON line each.
/// Reruns are bit-identical.
pub fn predict_split(
    model: &Model,
    data: &PreparedDataset,
    split: Split,
    out_path: &Path,
) -> Result<Vec<PredictionRecord>, TrainError> {
    let indices = data.split_indices(split);
    if indices.is_empty() {
        return Err(TrainError::EmptySplit { split });
    }
    let hw = data.grid_hw;
    let mut records = Vec::with_capacity(indices.len());
    for &i in &indices {
        let pair = &data.pairs[i];
        let inputs = SampleInputs {
            x_bef: &pair.x_bef,
            x_aft: &pair.x_aft,
            pix_diff: Some(&pair.pix_diff),
        };
        let decoded = model.decode(&inputs, model.dims().max_len)?;
        let words: Result<Vec<&str>, _> =
            decoded.tokens.iter().map(|&t| data.vocab.token_at(t)).collect();
        let caption = words?.join(" ");
        let has_maps = !decoded.a_bef.is_empty();
        records.push(PredictionRecord {
            id: pair.record.id,
            caption,
            alphas: decoded.alphas,
            a_bef: decoded.a_bef,
            a_aft: decoded.a_aft,
            map_h: if has_maps { hw } else { 0 },
            map_w: if has_maps { hw } else { 0 },
        });
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(out_path)?);
    for record in &records {
        let line = serde_json::to_string(record).expect("prediction serializes");
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(records)
}

/// Outcome of a fixed-batch optimization probe.
pub struct ProbeOutcome {
    /// Batch-mean loss evaluated before each update, one entry per step.
    pub per_step_loss: Vec<f64>,
    /// Final summed cross-entropy per supervised token position.
    pub per_token_loss: f64,
    /// Pairs whose greedy decode reproduces the supervision caption exactly.
    pub reproduced: usize,
    pub probed: usize,
}

/// Optimize a fixed batch (caption 0 supervision, no resampling) for a set
/// number of steps. Drives the overfit and strict-descent checks.
pub fn fixed_batch_probe(
    cfg: &TrainConfig,
    data: &PreparedDataset,
    pair_indices: &[usize],
    steps: usize,
) -> Result<ProbeOutcome, TrainError> {
    cfg.validate()?;
    let dims = model_dims(cfg, data);
    let weights = loss_weights(cfg);
    let mut model = init_model(cfg, data);
    let sizes: Vec<usize> = model.named().iter().map(|(_, t)| t.numel()).collect();
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &sizes);
    let batch: Vec<(usize, usize)> = pair_indices.iter().map(|&i| (i, 0)).collect();
    let mut per_step_loss = Vec::with_capacity(steps);
    for step in 0..steps {
        let (grads, batch_loss) = batch_gradients(&model, &batch, data, weights, &sizes)?;
        if !batch_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch: 0,
                step,
                pair_id: data.pairs[batch[0].0].record.id,
                loss: batch_loss,
            });
        }
        per_step_loss.push(batch_loss);
        apply_step(&mut model, &mut adam, grads, cfg.clip_norm);
    }
    // Final per-token cross-entropy over the fixed batch.
    let mut xe_total = 0.0;
    let mut token_total = 0usize;
    let mut reproduced = 0usize;
    for &i in pair_indices {
        let pair = &data.pairs[i];
        let targets = pair.encoded[0].as_ref().expect("train captions encode");
        let mut tape = Tape::new();
        let inputs = SampleInputs {
            x_bef: &pair.x_bef,
            x_aft: &pair.x_aft,
            pix_diff: Some(&pair.pix_diff),
        };
        let (_, _, logits) = model.sample_loss(&mut tape, &inputs, targets, weights)?;
        let ids: Vec<u32> = targets[1..].iter().map(|&t| t as u32).collect();
        let xe = tape
            .cross_entropy(logits, &ids, crate::vocab::PAD as u32)
            .map_err(ModelError::Tape)?;
        xe_total += tape.values(xe)[0];
        token_total += ids.len();
        let decoded = model.decode(&inputs, dims.max_len)?;
        let reference: Vec<usize> =
            targets[1..].iter().copied().filter(|&t| t != EOS).collect();
        if decoded.tokens == reference {
            reproduced += 1;
        }
    }
    Ok(ProbeOutcome {
        per_step_loss,
        per_token_loss: xe_total / token_total as f64,
        reproduced,
        probed: pair_indices.len(),
    })
}
