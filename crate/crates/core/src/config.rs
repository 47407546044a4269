//! Flat `key=value` configuration files for generation and training.
//!
//! Lines are trimmed; blank lines and `#` comments are ignored. Every key
//! must be known, typed correctly, and appear at most once. Unknown keys are
//! hard errors so typos cannot silently fall back to defaults.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

#[derive(Debug)]
pub enum ConfigError {
    Io(std::io::Error),
    /// Line without `=` or with an empty key.
    Syntax { line: usize, text: String },
    UnknownKey { key: String },
    DuplicateKey { key: String },
    BadValue { key: String, value: String, expected: &'static str },
    /// Structurally valid but semantically out of range.
    Invalid { detail: String },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io(e) => write!(f, "config i/o error: {e}"),
            ConfigError::Syntax { line, text } => {
                write!(f, "config line {line} is not key=value: {text:?}")
            }
            ConfigError::UnknownKey { key } => write!(f, "unknown config key {key:?}"),
            ConfigError::DuplicateKey { key } => write!(f, "config key {key:?} appears twice"),
            ConfigError::BadValue { key, value, expected } => {
                write!(f, "config key {key:?}: {value:?} is not a valid {expected}")
            }
            ConfigError::Invalid { detail } => write!(f, "invalid config: {detail}"),
        }
    }
}

impl std::error::Error for ConfigError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            ConfigError::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for ConfigError {
    fn from(e: std::io::Error) -> Self {
        ConfigError::Io(e)
    }
}

/// Parse `key=value` text into a map, enforcing syntax and uniqueness.
pub fn parse_kv(text: &str) -> Result<HashMap<String, String>, ConfigError> {
    let mut map = HashMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::Syntax { line: idx + 1, text: line.to_string() });
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() {
            return Err(ConfigError::Syntax { line: idx + 1, text: line.to_string() });
        }
        if map.insert(key.clone(), value).is_some() {
            return Err(ConfigError::DuplicateKey { key });
        }
    }
    Ok(map)
}

struct KvReader {
    map: HashMap<String, String>,
}

impl KvReader {
    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn parse<T: std::str::FromStr>(
        &mut self,
        key: &str,
        expected: &'static str,
        slot: &mut T,
    ) -> Result<(), ConfigError> {
        if let Some(value) = self.take(key) {
            *slot = value.parse().map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value,
                expected,
            })?;
        }
        Ok(())
    }

    fn finish(self) -> Result<(), ConfigError> {
        if let Some(key) = self.map.into_keys().next() {
            return Err(ConfigError::UnknownKey { key });
        }
        Ok(())
    }
}

/// Dataset-generator parameters. All fields have desk-scale defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    /// Number of "before" scenes; the dataset holds twice as many pairs.
    pub n_scenes: usize,
    /// Square raster edge in pixels.
    pub raster_size: usize,
    pub object_count_min: usize,
    pub object_count_max: usize,
    /// Collision/glyph radii in pixels at unit scale.
    pub radius_small_px: f64,
    pub radius_large_px: f64,
    /// Object centers are sampled in `[margin, 1 - margin)` per axis.
    pub position_margin: f64,
    /// Camera-offset-to-raster constants: translation px/unit, scale /unit,
    /// brightness /unit.
    pub kappa_t: f64,
    pub kappa_s: f64,
    pub kappa_b: f64,
    /// Reference captions per pair, each from a distinct template.
    pub captions_per_pair: usize,
    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_scenes: 100,
            raster_size: 64,
            object_count_min: 4,
            object_count_max: 7,
            radius_small_px: 6.0,
            radius_large_px: 10.0,
            position_margin: 0.12,
            kappa_t: 4.0,
            kappa_s: 0.08,
            kappa_b: 0.1,
            captions_per_pair: 3,
            split_train: 0.85,
            split_val: 0.05,
            split_test: 0.10,
            seed: 17,
        }
    }
}

impl GenConfig {
    pub fn from_kv(map: HashMap<String, String>) -> Result<GenConfig, ConfigError> {
        let mut cfg = GenConfig::default();
        let mut r = KvReader { map };
        r.parse("n_scenes", "unsigned integer", &mut cfg.n_scenes)?;
        r.parse("raster_size", "unsigned integer", &mut cfg.raster_size)?;
        r.parse("object_count_min", "unsigned integer", &mut cfg.object_count_min)?;
        r.parse("object_count_max", "unsigned integer", &mut cfg.object_count_max)?;
        r.parse("radius_small_px", "real", &mut cfg.radius_small_px)?;
        r.parse("radius_large_px", "real", &mut cfg.radius_large_px)?;
        r.parse("position_margin", "real", &mut cfg.position_margin)?;
        r.parse("kappa_t", "real", &mut cfg.kappa_t)?;
        r.parse("kappa_s", "real", &mut cfg.kappa_s)?;
        r.parse("kappa_b", "real", &mut cfg.kappa_b)?;
        r.parse("captions_per_pair", "unsigned integer", &mut cfg.captions_per_pair)?;
        r.parse("split_train", "real", &mut cfg.split_train)?;
        r.parse("split_val", "real", &mut cfg.split_val)?;
        r.parse("split_test", "real", &mut cfg.split_test)?;
        r.parse("seed", "unsigned integer", &mut cfg.seed)?;
        r.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<GenConfig, ConfigError> {
        GenConfig::from_kv(parse_kv(text)?)
    }

    pub fn load(path: &Path) -> Result<GenConfig, ConfigError> {
        GenConfig::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |detail: String| Err(ConfigError::Invalid { detail });
        if self.n_scenes == 0 {
            return fail("n_scenes must be at least 1".into());
        }
        if !(16..=512).contains(&self.raster_size) {
            return fail(format!("raster_size {} outside [16, 512]", self.raster_size));
        }
        if self.object_count_min < 3 || self.object_count_max > 8 {
            return fail(format!(
                "object count range [{}, {}] outside [3, 8]",
                self.object_count_min, self.object_count_max
            ));
        }
        if self.object_count_min > self.object_count_max {
            return fail("object_count_min exceeds object_count_max".into());
        }
        if !(self.radius_small_px > 0.0 && self.radius_large_px > self.radius_small_px) {
            return fail("radii must satisfy 0 < radius_small_px < radius_large_px".into());
        }
        if self.radius_large_px * 4.0 > self.raster_size as f64 {
            return fail("radius_large_px too big for raster_size".into());
        }
        if !(0.0..0.5).contains(&self.position_margin) {
            return fail(format!("position_margin {} outside [0, 0.5)", self.position_margin));
        }
        for (name, v) in [("kappa_t", self.kappa_t), ("kappa_s", self.kappa_s), ("kappa_b", self.kappa_b)] {
            if !v.is_finite() || v < 0.0 {
                return fail(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        // Scale and brightness multipliers must stay positive at |dz| = 2.
        if self.kappa_s * 2.0 >= 1.0 || self.kappa_b * 2.0 >= 1.0 {
            return fail("kappa_s and kappa_b must be below 0.5".into());
        }
        if !(1..=3).contains(&self.captions_per_pair) {
            // Three is the smallest template pool across change types, and
            // paraphrases must come from distinct templates.
            return fail(format!("captions_per_pair {} outside [1, 3]", self.captions_per_pair));
        }
        let splits = [self.split_train, self.split_val, self.split_test];
        if splits.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return fail("split fractions must be finite and non-negative".into());
        }
        let sum: f64 = splits.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return fail(format!("split fractions sum to {sum}, expected 1"));
        }
        let (train, val, test) = self.split_counts();
        if train == 0 || val == 0 || test == 0 {
            return fail(format!(
                "split scene counts {train}/{val}/{test} contain an empty split"
            ));
        }
        Ok(())
    }

    /// Scene counts per split: train and val round half-up, test takes the rest.
    pub fn split_counts(&self) -> (usize, usize, usize) {
        let n = self.n_scenes as f64;
        let train = (n * self.split_train + 0.5).floor() as usize;
        let val = (n * self.split_val + 0.5).floor() as usize;
        let train = train.min(self.n_scenes);
        let val = val.min(self.n_scenes - train);
        let test = self.n_scenes - train - val;
        (train, val, test)
    }

    /// Canonical `key=value` text with every key present, in fixed order.
    pub fn canonical_text(&self) -> String {
        format!(
            "n_scenes={}\nraster_size={}\nobject_count_min={}\nobject_count_max={}\n\
             radius_small_px={}\nradius_large_px={}\nposition_margin={}\n\
             kappa_t={}\nkappa_s={}\nkappa_b={}\ncaptions_per_pair={}\n\
             split_train={}\nsplit_val={}\nsplit_test={}\nseed={}\n",
            self.n_scenes,
            self.raster_size,
            self.object_count_min,
            self.object_count_max,
            self.radius_small_px,
            self.radius_large_px,
            self.position_margin,
            self.kappa_t,
            self.kappa_s,
            self.kappa_b,
            self.captions_per_pair,
            self.split_train,
            self.split_val,
            self.split_test,
            self.seed,
        )
    }

    /// Move-distance floor in pixels: twice the large radius, so a moved
    /// object is visually distinguishable from camera jitter.
    pub fn move_floor_px(&self) -> f64 {
        2.0 * self.radius_large_px
    }
}

/// Model selector shared by training, prediction, and scoring.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Duda,
    CaptPixDiff,
    CaptRepDiff,
    CaptAtt,
    CaptDualAtt,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Duda,
        ModelKind::CaptPixDiff,
        ModelKind::CaptRepDiff,
        ModelKind::CaptAtt,
        ModelKind::CaptDualAtt,
    ];

    pub fn flag(self) -> &'static str {
        match self {
            ModelKind::Duda => "duda",
            ModelKind::CaptPixDiff => "capt-pix-diff",
            ModelKind::CaptRepDiff => "capt-rep-diff",
            ModelKind::CaptAtt => "capt-att",
            ModelKind::CaptDualAtt => "capt-dual-att",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModelKind::ALL
            .iter()
            .copied()
            .find(|k| k.flag() == s)
            .ok_or_else(|| format!("unknown model {s:?}"))
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.flag())
    }
}

/// Training hyperparameters. Defaults are the desk-scale configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Attention-map sparsity weight.
    pub lambda_l1: f64,
    /// Modulation-entropy reward weight.
    pub lambda_ent: f64,
    pub seed: u64,
    pub model: ModelKind,
    pub max_len: usize,
    /// Decoder hidden width.
    pub d_h: usize,
    /// Word-embedding width.
    pub d_e: usize,
    /// Projected visual width for the dynamic-attention LSTM input.
    pub d_v: usize,
    /// Seed of the frozen image encoder; independent of the training seed so
    /// every model sees identical features.
    pub encoder_seed: u64,
    /// Channel width of the baseline convolutional heads.
    pub baseline_width: usize,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            lr: 1e-3,
            lambda_l1: 2.5e-3,
            lambda_ent: 1e-4,
            seed: 0,
            model: ModelKind::Duda,
            max_len: 20,
            d_h: 128,
            d_e: 64,
            d_v: 128,
            encoder_seed: 7,
            baseline_width: 24,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn from_kv(map: HashMap<String, String>) -> Result<TrainConfig, ConfigError> {
        let mut cfg = TrainConfig::default();
        let mut r = KvReader { map };
        r.parse("epochs", "unsigned integer", &mut cfg.epochs)?;
        r.parse("batch_size", "unsigned integer", &mut cfg.batch_size)?;
        r.parse("lr", "real", &mut cfg.lr)?;
        r.parse("lambda_l1", "real", &mut cfg.lambda_l1)?;
        r.parse("lambda_ent", "real", &mut cfg.lambda_ent)?;
        r.parse("seed", "unsigned integer", &mut cfg.seed)?;
        r.parse("model", "model name", &mut cfg.model)?;
        r.parse("max_len", "unsigned integer", &mut cfg.max_len)?;
        r.parse("d_h", "unsigned integer", &mut cfg.d_h)?;
        r.parse("d_e", "unsigned integer", &mut cfg.d_e)?;
        r.parse("d_v", "unsigned integer", &mut cfg.d_v)?;
        r.parse("encoder_seed", "unsigned integer", &mut cfg.encoder_seed)?;
        r.parse("baseline_width", "unsigned integer", &mut cfg.baseline_width)?;
        r.parse("clip_norm", "real", &mut cfg.clip_norm)?;
        r.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<TrainConfig, ConfigError> {
        TrainConfig::from_kv(parse_kv(text)?)
    }

    pub fn load(path: &Path) -> Result<TrainConfig, ConfigError> {
        TrainConfig::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |detail: String| Err(ConfigError::Invalid { detail });
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        for (name, v) in [("lambda_l1", self.lambda_l1), ("lambda_ent", self.lambda_ent)] {
            if !v.is_finite() || v < 0.0 {
                return fail(format!("{name} must be non-negative, got {v}"));
            }
        }
        if self.max_len < 4 || self.max_len > 64 {
            return fail(format!("max_len {} outside [4, 64]", self.max_len));
        }
        for (name, v) in [
            ("d_h", self.d_h),
            ("d_e", self.d_e),
            ("d_v", self.d_v),
            ("baseline_width", self.baseline_width),
        ] {
            if v == 0 || v > 4096 {
                return fail(format!("{name} {v} outside [1, 4096]"));
            }
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return fail(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        Ok(())
    }

    pub fn canonical_text(&self) -> String {
        format!(
            "epochs={}\nbatch_size={}\nlr={}\nlambda_l1={}\nlambda_ent={}\nseed={}\n\
             model={}\nmax_len={}\nd_h={}\nd_e={}\nd_v={}\nencoder_seed={}\n\
             baseline_width={}\nclip_norm={}\n",
            self.epochs,
            self.batch_size,
            self.lr,
            self.lambda_l1,
            self.lambda_ent,
            self.seed,
            self.model,
            self.max_len,
            self.d_h,
            self.d_e,
            self.d_v,
            self.encoder_seed,
            self.baseline_width,
            self.clip_norm,
        )
    }
}
