//! Dataset assembly: balanced before/after pairs with images, captions,
//! boxes, and a JSON-lines manifest, plus the independent validator used to
//! audit a built dataset against its declared invariants.
//!
//! Every before-scene yields two pairs — one distractor, one scene change —
//! so a dataset of N scenes holds 2N pairs. Scene-change types are balanced
//! within one count. All randomness derives from per-scene counter seeds, so
//! generation is deterministic and order-independent.

use std::fmt;
use std::io::{BufRead, Write as _};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::caption::{self, CaptionError};
use crate::config::GenConfig;
use crate::ppm;
use crate::raster::{self, BBox, ImageTag};
use crate::scene::{
    apply_change, jitter_camera, sample_scene, verify_single_change, CameraJitter, ChangeRecord,
    ChangeType, Scene,
};

pub const MANIFEST_NAME: &str = "manifest.jsonl";
pub const CONFIG_ECHO_NAME: &str = "gen_config.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Split::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown split {s:?}"))
    }
}

/// One manifest line: the full metadata of a sample pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: u64,
    pub split: Split,
    pub change: ChangeRecord,
    pub captions: Vec<String>,
    pub bboxes: Vec<BBox>,
    pub jitter: CameraJitter,
    pub difficulty_iou: f64,
    pub before_scene: Scene,
    pub after_scene: Scene,
    pub before_image: String,
    pub after_image: String,
}

#[derive(Debug)]
pub enum DatasetError {
    Io(std::io::Error),
    Config(crate::config::ConfigError),
    Pixmap(ppm::PpmError),
    /// A scene kept failing generation within the retry budget.
    Generation { scene_index: usize, attempts: usize, last: String },
    /// A manifest line failed to parse.
    Malformed { line: usize, detail: String },
}

impl fmt::Display for DatasetError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetError::Io(e) => write!(f, "dataset i/o error: {e}"),
            DatasetError::Config(e) => write!(f, "dataset config error: {e}"),
            DatasetError::Pixmap(e) => write!(f, "dataset pixmap error: {e}"),
            DatasetError::Generation { scene_index, attempts, last } => write!(
                f,
                "scene {scene_index} failed generation after {attempts} attempts: {last}"
            ),
            DatasetError::Malformed { line, detail } => {
                write!(f, "manifest line {line} malformed: {detail}")
            }
        }
    }
}

impl std::error::Error for DatasetError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            DatasetError::Io(e) => Some(e),
            DatasetError::Config(e) => Some(e),
            DatasetError::Pixmap(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for DatasetError {
    fn from(e: std::io::Error) -> Self {
        DatasetError::Io(e)
    }
}

impl From<crate::config::ConfigError> for DatasetError {
    fn from(e: crate::config::ConfigError) -> Self {
        DatasetError::Config(e)
    }
}

impl From<ppm::PpmError> for DatasetError {
    fn from(e: ppm::PpmError) -> Self {
        DatasetError::Pixmap(e)
    }
}

#[derive(Clone, Debug)]
pub struct DatasetSummary {
    pub pairs: usize,
    pub by_type: [usize; 6],
    pub by_split: [usize; 3],
    pub manifest_path: PathBuf,
}

/// SplitMix64 finalizer: decorrelates counter-derived seeds.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent per-stream seed derived from the master seed and a counter.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    splitmix64(master ^ splitmix64(stream))
}

/// Balanced scene-change assignment: each of the five types appears
/// `n/5` or `n/5 + 1` times, order shuffled deterministically.
fn balanced_change_types(n: usize, master: u64) -> Vec<ChangeType> {
    let mut types = Vec::with_capacity(n);
    for (i, ty) in ChangeType::SCENE_CHANGES.iter().enumerate() {
        let count = n / 5 + usize::from(i < n % 5);
        types.extend(std::iter::repeat(*ty).take(count));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master, u64::MAX));
    types.shuffle(&mut rng);
    types
}

fn split_of_scene(scene_index: usize, cfg: &GenConfig) -> Split {
    let (train, val, _) = cfg.split_counts();
    if scene_index < train {
        Split::Train
    } else if scene_index < train + val {
        Split::Val
    } else {
        Split::Test
    }
}

/// Target boxes for a change record under the pair's jitter, following the
/// per-type pattern: COLOR/TEXTURE/MOVE two boxes (one per image), ADD one
/// after-box, DROP one before-box, DISTRACTOR none.
fn target_boxes(
    before: &Scene,
    after: &Scene,
    record: &ChangeRecord,
    jitter: CameraJitter,
    cfg: &GenConfig,
) -> Result<Vec<BBox>, raster::RasterError> {
    let mut boxes = Vec::new();
    let id = record.target_object_id;
    match record.change_type {
        ChangeType::Distractor => {}
        ChangeType::Color | ChangeType::Texture | ChangeType::Move => {
            let id = id.unwrap();
            boxes.push(raster::project_bbox(
                before.object(id).unwrap(),
                CameraJitter::IDENTITY,
                cfg,
                ImageTag::Before,
            )?);
            boxes.push(raster::project_bbox(
                after.object(id).unwrap(),
                jitter,
                cfg,
                ImageTag::After,
            )?);
        }
        ChangeType::Add => {
            let id = id.unwrap();
            boxes.push(raster::project_bbox(
                after.object(id).unwrap(),
                jitter,
                cfg,
                ImageTag::After,
            )?);
        }
        ChangeType::Drop => {
            let id = id.unwrap();
            boxes.push(raster::project_bbox(
                before.object(id).unwrap(),
                CameraJitter::IDENTITY,
                cfg,
                ImageTag::Before,
            )?);
        }
    }
    Ok(boxes)
}

struct BuiltScene {
    before: Scene,
    distractor: PairMeta,
    change: PairMeta,
}

struct PairMeta {
    record: ChangeRecord,
    after: Scene,
    jitter: CameraJitter,
    boxes: Vec<BBox>,
    captions: Vec<String>,
    difficulty: f64,
}

const SCENE_ATTEMPTS: usize = 40;
const JITTER_ATTEMPTS: usize = 8;

/// Generate both pairs for one before-scene, deterministically in the
/// derived seed. Retries resample from the same stream.
fn build_scene_pairs(
    scene_index: usize,
    change_type: ChangeType,
    cfg: &GenConfig,
) -> Result<BuiltScene, DatasetError> {
    let seed = derive_seed(cfg.seed, scene_index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last = String::from("no attempt made");
    for _ in 0..SCENE_ATTEMPTS {
        let before = match sample_scene(&mut rng, cfg, seed) {
            Ok(s) => s,
            Err(e) => {
                last = e.to_string();
                continue;
            }
        };
        let distractor_record = ChangeRecord {
            change_type: ChangeType::Distractor,
            target_object_id: None,
            old_value: None,
            new_value: None,
        };
        let (after, record) = match apply_change(&before, change_type, &mut rng, cfg) {
            Ok(v) => v,
            Err(e) => {
                last = e.to_string();
                continue;
            }
        };
        let distractor_jitter = jitter_camera(&mut rng);
        // The change pair's jitter must keep the target box(es) in frame;
        // resample the jitter alone a few times before restarting the scene.
        let mut change_view = None;
        for _ in 0..JITTER_ATTEMPTS {
            let jitter = jitter_camera(&mut rng);
            match target_boxes(&before, &after, &record, jitter, cfg) {
                Ok(boxes) => {
                    change_view = Some((jitter, boxes));
                    break;
                }
                Err(e) => last = e.to_string(),
            }
        }
        let Some((change_jitter, change_boxes)) = change_view else { continue };
        let distractor_captions = match caption::generate_captions(
            &distractor_record,
            &before,
            &before,
            cfg.captions_per_pair,
            &mut rng,
        ) {
            Ok(c) => c,
            Err(e) => {
                last = e.to_string();
                continue;
            }
        };
        let change_captions = match caption::generate_captions(
            &record,
            &before,
            &after,
            cfg.captions_per_pair,
            &mut rng,
        ) {
            Ok(c) => c,
            Err(e @ CaptionError::AmbiguousReference { .. }) => {
                last = e.to_string();
                continue;
            }
            Err(e) => {
                last = e.to_string();
                continue;
            }
        };
        let Some(distractor_difficulty) = raster::viewpoint_difficulty(
            &before,
            &before,
            &distractor_record,
            distractor_jitter,
            cfg,
        ) else {
            last = "distractor difficulty undefined".into();
            continue;
        };
        let Some(change_difficulty) =
            raster::viewpoint_difficulty(&before, &after, &record, change_jitter, cfg)
        else {
            last = "change difficulty undefined".into();
            continue;
        };
        return Ok(BuiltScene {
            distractor: PairMeta {
                record: distractor_record,
                after: before.clone(),
                jitter: distractor_jitter,
                boxes: Vec::new(),
                captions: distractor_captions,
                difficulty: distractor_difficulty,
            },
            change: PairMeta {
                record,
                after,
                jitter: change_jitter,
                boxes: change_boxes,
                captions: change_captions,
                difficulty: change_difficulty,
            },
            before,
        });
    }
    Err(DatasetError::Generation { scene_index, attempts: SCENE_ATTEMPTS, last })
}

/// Build the records for every pair without touching the filesystem.
pub fn build_records(cfg: &GenConfig) -> Result<Vec<PairRecord>, DatasetError> {
    cfg.validate()?;
    let types = balanced_change_types(cfg.n_scenes, cfg.seed);
    let mut records = Vec::with_capacity(cfg.n_scenes * 2);
    for scene_index in 0..cfg.n_scenes {
        let built = build_scene_pairs(scene_index, types[scene_index], cfg)?;
        let split = split_of_scene(scene_index, cfg);
        for (offset, meta) in [(0u64, &built.distractor), (1u64, &built.change)] {
            let id = scene_index as u64 * 2 + offset;
            records.push(PairRecord {
                id,
                split,
                change: meta.record.clone(),
                captions: meta.captions.clone(),
                bboxes: meta.boxes.clone(),
                jitter: meta.jitter,
                difficulty_iou: meta.difficulty,
                before_scene: built.before.clone(),
                after_scene: meta.after.clone(),
                before_image: format!("{id}_before.ppm"),
                after_image: format!("{id}_after.ppm"),
            });
        }
    }
    Ok(records)
}

/// Build the dataset on disk: pixmaps, JSON-lines manifest, config echo.
pub fn build_dataset(cfg: &GenConfig, out_dir: &Path) -> Result<DatasetSummary, DatasetError> {
    let records = build_records(cfg)?;
    std::fs::create_dir_all(out_dir)?;
    let mut by_type = [0usize; 6];
    let mut by_split = [0usize; 3];
    for record in &records {
        by_type[record.change.change_type.index()] += 1;
        by_split[Split::ALL.iter().position(|s| *s == record.split).unwrap()] += 1;
        let before = raster::render(&record.before_scene, CameraJitter::IDENTITY, cfg);
        let after = raster::render(&record.after_scene, record.jitter, cfg);
        ppm::save_p6(&out_dir.join(&record.before_image), &before)?;
        ppm::save_p6(&out_dir.join(&record.after_image), &after)?;
    }
    let manifest_path = out_dir.join(MANIFEST_NAME);
    let mut manifest = std::io::BufWriter::new(std::fs::File::create(&manifest_path)?);
    for record in &records {
        let line = serde_json::to_string(record).expect("pair record serializes");
        manifest.write_all(line.as_bytes())?;
        manifest.write_all(b"\n")?;
    }
    manifest.flush()?;
    std::fs::write(out_dir.join(CONFIG_ECHO_NAME), cfg.canonical_text())?;
    Ok(DatasetSummary { pairs: records.len(), by_type, by_split, manifest_path })
}

/// Parse one manifest line.
pub fn parse_manifest_line(line: &str) -> Result<PairRecord, String> {
    serde_json::from_str(line).map_err(|e| e.to_string())
}

/// Load every record of a built dataset's manifest.
pub fn load_manifest(dir: &Path) -> Result<Vec<PairRecord>, DatasetError> {
    let file = std::fs::File::open(dir.join(MANIFEST_NAME))?;
    let reader = std::io::BufReader::new(file);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_manifest_line(&line)
            .map_err(|detail| DatasetError::Malformed { line: idx + 1, detail })?;
        records.push(record);
    }
    Ok(records)
}

/// Audit of a built dataset against the generator's declared invariants.
#[derive(Clone, Debug, Default)]
pub struct ValidationReport {
    pub pairs: usize,
    pub by_type: [usize; 6],
    pub difficulty_min: f64,
    pub difficulty_max: f64,
    /// Human-readable invariant violations; empty means the dataset passed.
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

fn expected_box_tags(ty: ChangeType) -> &'static [ImageTag] {
    match ty {
        ChangeType::Color | ChangeType::Texture | ChangeType::Move => {
            &[ImageTag::Before, ImageTag::After]
        }
        ChangeType::Add => &[ImageTag::After],
        ChangeType::Drop => &[ImageTag::Before],
        ChangeType::Distractor => &[],
    }
}

/// Validate a dataset directory: schema, exactly-one-change, balance, box
/// pattern and validity, caption parse-back with unique reference
/// resolution, difficulty, split assignment, and image determinism.
pub fn validate_dataset(dir: &Path) -> Result<ValidationReport, DatasetError> {
    let cfg = GenConfig::load(&dir.join(CONFIG_ECHO_NAME))?;
    let records = load_manifest(dir)?;
    let mut report = ValidationReport {
        pairs: records.len(),
        difficulty_min: f64::INFINITY,
        difficulty_max: f64::NEG_INFINITY,
        ..ValidationReport::default()
    };
    let fail = |msg: String, report: &mut ValidationReport| {
        // Cap stored violations; one is enough to fail and a systematic bug
        // would otherwise produce millions of strings.
        if report.violations.len() < 100 {
            report.violations.push(msg);
        }
    };
    if records.len() != cfg.n_scenes * 2 {
        fail(
            format!("expected {} pairs, manifest has {}", cfg.n_scenes * 2, records.len()),
            &mut report,
        );
    }
    let (train, val, _) = cfg.split_counts();
    for (idx, record) in records.iter().enumerate() {
        let pair = format!("pair {}", record.id);
        if record.id != idx as u64 {
            fail(format!("{pair}: out-of-order id at line {}", idx + 1), &mut report);
        }
        report.by_type[record.change.change_type.index()] += 1;
        // Scene-change assignment: even ids distractor, odd ids a change.
        let is_distractor = record.change.change_type == ChangeType::Distractor;
        if (record.id % 2 == 0) != is_distractor {
            fail(format!("{pair}: pair parity does not match change type"), &mut report);
        }
        // Split by scene.
        let scene_index = (record.id / 2) as usize;
        let expected_split = if scene_index < train {
            Split::Train
        } else if scene_index < train + val {
            Split::Val
        } else {
            Split::Test
        };
        if record.split != expected_split {
            fail(format!("{pair}: wrong split"), &mut report);
        }
        // Exactly-one-change on the symbolic graphs.
        if let Some(detail) =
            verify_single_change(&record.before_scene, &record.after_scene, &record.change)
        {
            fail(format!("{pair}: {detail}"), &mut report);
        }
        // DISTRACTOR <=> no target.
        if is_distractor != record.change.target_object_id.is_none() {
            fail(format!("{pair}: target/distractor mismatch"), &mut report);
        }
        // MOVE displacement floor.
        if record.change.change_type == ChangeType::Move {
            match crate::scene::move_displacement_px(&record.change, &cfg) {
                Some(d) if d >= cfg.move_floor_px() - 1e-9 => {}
                other => fail(format!("{pair}: move floor violated ({other:?})"), &mut report),
            }
        }
        // Jitter range.
        for v in [record.jitter.dx, record.jitter.dy, record.jitter.dz] {
            if !(-2.0..=2.0).contains(&v) {
                fail(format!("{pair}: jitter component {v} out of range"), &mut report);
            }
        }
        // Box pattern and validity.
        let expected_tags = expected_box_tags(record.change.change_type);
        let tags: Vec<ImageTag> = record.bboxes.iter().map(|b| b.image_tag).collect();
        if tags != expected_tags {
            fail(format!("{pair}: box tags {tags:?}, expected {expected_tags:?}"), &mut report);
        } else {
            for bbox in &record.bboxes {
                if let Some(msg) = check_box_validity(record, bbox, &cfg) {
                    fail(format!("{pair}: {msg}"), &mut report);
                }
            }
        }
        // Captions: right count, distinct, parse back to the change type,
        // and non-distractor references resolve uniquely to the target.
        if record.captions.len() != cfg.captions_per_pair {
            fail(format!("{pair}: caption count {}", record.captions.len()), &mut report);
        }
        let mut distinct = record.captions.clone();
        distinct.sort();
        distinct.dedup();
        if distinct.len() != record.captions.len() {
            fail(format!("{pair}: duplicate captions"), &mut report);
        }
        for cap in &record.captions {
            let (ty, unparsed) = caption::parse_change_type(cap);
            if unparsed || ty != record.change.change_type {
                fail(format!("{pair}: caption fails parse-back: {cap:?}"), &mut report);
            }
            if !is_distractor {
                let resolved = caption::strip_template(cap)
                    .and_then(|(_, np)| caption::parse_noun_phrase(&np))
                    .map(|np| {
                        let scene = if record.change.change_type == ChangeType::Add {
                            &record.after_scene
                        } else {
                            &record.before_scene
                        };
                        caption::resolve_noun_phrase(&np, scene)
                    });
                if resolved != Some(vec![record.change.target_object_id.unwrap()]) {
                    fail(format!("{pair}: reference not unique: {cap:?}"), &mut report);
                }
            }
        }
        // Difficulty: recomputable and within [0, 1].
        match raster::viewpoint_difficulty(
            &record.before_scene,
            &record.after_scene,
            &record.change,
            record.jitter,
            &cfg,
        ) {
            Some(d) if d == record.difficulty_iou && (0.0..=1.0).contains(&d) => {}
            other => fail(
                format!("{pair}: difficulty {} != recomputed {other:?}", record.difficulty_iou),
                &mut report,
            ),
        }
        report.difficulty_min = report.difficulty_min.min(record.difficulty_iou);
        report.difficulty_max = report.difficulty_max.max(record.difficulty_iou);
        // Image files decode and match a deterministic re-render.
        for (name, scene, jitter) in [
            (&record.before_image, &record.before_scene, CameraJitter::IDENTITY),
            (&record.after_image, &record.after_scene, record.jitter),
        ] {
            match std::fs::read(dir.join(name)) {
                Ok(bytes) => {
                    let expected = ppm::encode_p6(&raster::render(scene, jitter, &cfg));
                    if bytes != expected {
                        fail(format!("{pair}: {name} differs from re-render"), &mut report);
                    }
                }
                Err(e) => fail(format!("{pair}: cannot read {name}: {e}"), &mut report),
            }
        }
    }
    // Per-type balance within one across the five scene changes.
    let change_counts: Vec<usize> = ChangeType::SCENE_CHANGES
        .iter()
        .map(|t| report.by_type[t.index()])
        .collect();
    let lo = change_counts.iter().min().copied().unwrap_or(0);
    let hi = change_counts.iter().max().copied().unwrap_or(0);
    if hi - lo > 1 {
        fail(format!("type balance violated: {change_counts:?}"), &mut report);
    }
    if report.by_type[ChangeType::Distractor.index()] != records.len() / 2 {
        fail("distractor count is not half the dataset".into(), &mut report);
    }
    Ok(report)
}

/// A recorded box must tightly bound the target's silhouette pixels in the
/// full composited render: IoU(box, mask-bounds box) >= 0.9.
fn check_box_validity(record: &PairRecord, bbox: &BBox, cfg: &GenConfig) -> Option<String> {
    let target = record.change.target_object_id?;
    let (scene, jitter) = match bbox.image_tag {
        ImageTag::Before => (&record.before_scene, CameraJitter::IDENTITY),
        ImageTag::After => (&record.after_scene, record.jitter),
    };
    let owners = raster::owner_map(scene, jitter, cfg);
    let s = cfg.raster_size;
    let mut bounds: Option<(u32, u32, u32, u32)> = None;
    for row in 0..s {
        for col in 0..s {
            if owners[row * s + col] == Some(target) {
                let (c, r) = (col as u32, row as u32);
                bounds = Some(match bounds {
                    None => (c, r, c, r),
                    Some((x0, y0, x1, y1)) => (x0.min(c), y0.min(r), x1.max(c), y1.max(r)),
                });
            }
        }
    }
    let Some((x0, y0, x1, y1)) = bounds else {
        return Some(format!("target {target} owns no pixels in {:?}", bbox.image_tag));
    };
    let mask_box = BBox {
        x_min: x0,
        y_min: y0,
        x_max: x1 + 1,
        y_max: y1 + 1,
        image_tag: bbox.image_tag,
    };
    let iou = bbox.iou(&mask_box);
    if iou < 0.9 {
        return Some(format!(
            "box {:?} vs silhouette bounds {:?}: IoU {iou:.3} < 0.9",
            (bbox.x_min, bbox.y_min, bbox.x_max, bbox.y_max),
            (x0, y0, x1 + 1, y1 + 1)
        ));
    }
    if bbox.x_max as usize > s || bbox.y_max as usize > s {
        return Some("box exceeds image bounds".into());
    }
    None
}
