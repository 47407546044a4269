//! Measurement: sentence BLEU-4, change-type parsing accuracy and confusion,
//! the Pointing Game over upsampled attention maps, and difficulty-bucket
//! breakdowns, reduced into a serializable report with text and CSV views.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use crate::caption::parse_change_type;
use crate::caption::tokenize;
use crate::config::ModelKind;
use crate::dataset::PairRecord;
use crate::raster::{BBox, ImageTag};
use crate::scene::ChangeType;
use crate::trainer::PredictionRecord;

#[derive(Debug, PartialEq)]
pub enum EvalError {
    EmptyCandidate,
    EmptyReferences,
    NoBoxes,
    NonFiniteMap,
    MapShape { expected: usize, got: usize },
    MissingMaps { id: u64 },
    EmptyRun,
    IdMismatch { missing: Vec<u64>, extra: Vec<u64> },
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::EmptyCandidate => write!(f, "candidate token list is empty"),
            EvalError::EmptyReferences => write!(f, "no reference captions supplied"),
            EvalError::NoBoxes => write!(f, "no boxes supplied for this image"),
            EvalError::NonFiniteMap => write!(f, "attention map holds non-finite values"),
            EvalError::MapShape { expected, got } => {
                write!(f, "attention map holds {got} values, expected {expected}")
            }
            EvalError::MissingMaps { id } => {
                write!(f, "pair {id} carries no attention maps but the scoring rule needs them")
            }
            EvalError::EmptyRun => write!(f, "nothing to score"),
            EvalError::IdMismatch { missing, extra } => write!(
                f,
                "prediction ids do not cover the manifest: missing {missing:?}, extra {extra:?}"
            ),
        }
    }
}

impl std::error::Error for EvalError {}

// ---------------------------------------------------------------------------
// BLEU-4
// ---------------------------------------------------------------------------

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence BLEU-4: reference-clipped modified n-gram precisions for
/// n = 1..4, geometric mean, brevity penalty against the closest reference
/// length (ties broken toward the shorter reference). No smoothing: a zero
/// precision at any order gives 0.
pub fn bleu4(candidate: &[String], references: &[Vec<String>]) -> Result<f64, EvalError> {
    if candidate.is_empty() {
        return Err(EvalError::EmptyCandidate);
    }
    if references.is_empty() {
        return Err(EvalError::EmptyReferences);
    }
    let mut log_precision_sum = 0.0;
    for n in 1..=4 {
        let cand = ngram_counts(candidate, n);
        let total: usize = cand.values().sum();
        if total == 0 {
            // Candidate shorter than n tokens: the order-n precision is
            // empty, which counts as zero under no-smoothing.
            return Ok(0.0);
        }
        let ref_counts: Vec<HashMap<&[String], usize>> =
            references.iter().map(|r| ngram_counts(r, n)).collect();
        let mut clipped = 0usize;
        for (gram, &count) in &cand {
            let limit = ref_counts.iter().map(|rc| rc.get(gram).copied().unwrap_or(0)).max();
            clipped += count.min(limit.unwrap_or(0));
        }
        if clipped == 0 {
            return Ok(0.0);
        }
        log_precision_sum += (clipped as f64 / total as f64).ln();
    }
    let c = candidate.len();
    let r = references
        .iter()
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(c), len))
        .expect("references non-empty");
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * (log_precision_sum / 4.0).exp())
}

// ---------------------------------------------------------------------------
// Pointing Game
// ---------------------------------------------------------------------------

/// Bilinear upsample of a row-major `h × w` map to `out × out`, corner
/// values aligned: output pixel (i, j) samples the map at
/// (i·(h−1)/(out−1), j·(w−1)/(out−1)).
pub fn upsample_bilinear(map: &[f64], h: usize, w: usize, out: usize) -> Result<Vec<f64>, EvalError> {
    if map.len() != h * w {
        return Err(EvalError::MapShape { expected: h * w, got: map.len() });
    }
    if map.iter().any(|v| !v.is_finite()) {
        return Err(EvalError::NonFiniteMap);
    }
    let axis = |n: usize, i: usize| -> (usize, usize, f64) {
        if n == 1 || out == 1 {
            return (0, 0, 0.0);
        }
        let pos = i as f64 * (n - 1) as f64 / (out - 1) as f64;
        let lo = (pos.floor() as usize).min(n - 1);
        let hi = (lo + 1).min(n - 1);
        (lo, hi, pos - lo as f64)
    };
    // Nested lerp form: exact on constant maps, so the row-major tie rule
    // is meaningful there.
    let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
    let mut img = vec![0.0; out * out];
    for i in 0..out {
        let (y0, y1, fy) = axis(h, i);
        for j in 0..out {
            let (x0, x1, fx) = axis(w, j);
            let top = lerp(map[y0 * w + x0], map[y0 * w + x1], fx);
            let bottom = lerp(map[y1 * w + x0], map[y1 * w + x1], fx);
            img[i * out + j] = lerp(top, bottom, fy);
        }
    }
    Ok(img)
}

/// Argmax pixel of a row-major `out × out` image as (row, col); ties take
/// the smallest row-major index.
pub fn argmax_pixel(img: &[f64], out: usize) -> (usize, usize) {
    let mut best = 0usize;
    for (idx, &v) in img.iter().enumerate() {
        if v > img[best] {
            best = idx;
        }
    }
    (best / out, best % out)
}

/// The Pointing Game for one image: upsample the map to the image size,
/// take the argmax pixel, and report whether it falls inside any box.
pub fn pointing_game(
    map: &[f64],
    h: usize,
    w: usize,
    boxes: &[BBox],
    image_size: usize,
) -> Result<bool, EvalError> {
    if boxes.is_empty() {
        return Err(EvalError::NoBoxes);
    }
    let img = upsample_bilinear(map, h, w, image_size)?;
    let (row, col) = argmax_pixel(&img, image_size);
    Ok(boxes.iter().any(|b| b.contains_pixel(col as u32, row as u32)))
}

/// How a model's attention maps are scored in the Pointing Game.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointingRule {
    /// Separate before/after maps: when both images carry boxes, both maps
    /// must hit their own image's boxes; otherwise the single boxed image
    /// is scored with its corresponding map.
    TwoMap,
    /// One shared map: hit when its argmax falls inside any box of either
    /// image.
    SingleMap,
    /// The model exposes no spatial attention; pointing is not reported.
    NoMaps,
}

pub fn pointing_rule(kind: ModelKind) -> PointingRule {
    match kind {
        ModelKind::Duda | ModelKind::CaptDualAtt => PointingRule::TwoMap,
        ModelKind::CaptAtt => PointingRule::SingleMap,
        ModelKind::CaptPixDiff | ModelKind::CaptRepDiff => PointingRule::NoMaps,
    }
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

pub const TYPE_COUNT: usize = ChangeType::ALL.len();

fn type_index(ty: ChangeType) -> usize {
    ty.index()
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BucketRow {
    pub bucket: usize,
    pub pairs: usize,
    pub difficulty_lo: f64,
    pub difficulty_hi: f64,
    pub bleu4: f64,
    pub type_accuracy: f64,
    /// `None` when the bucket holds no pointable pair or the model has no
    /// maps.
    pub pointing: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub model: String,
    pub pairs: usize,
    pub bleu_total: f64,
    pub bleu_scene_change: f64,
    pub bleu_distractor: f64,
    /// Mean sentence BLEU-4 per gold change type, in [`ChangeType::ALL`]
    /// order.
    pub bleu_by_type: Vec<f64>,
    pub type_accuracy: f64,
    /// Captions the keyword parser could not classify.
    pub unparsed: usize,
    /// Rows: gold type; columns: predicted type; both in
    /// [`ChangeType::ALL`] order. Row sums equal gold counts.
    pub confusion: Vec<Vec<usize>>,
    pub gold_counts: Vec<usize>,
    /// Pointing accuracy over every scored pair; `None` for models without
    /// maps.
    pub pointing_total: Option<f64>,
    /// Pointing accuracy per scene-change type ([`ChangeType::SCENE_CHANGES`]
    /// order); `None` where no pair of the type was scored.
    pub pointing_by_type: Vec<Option<f64>>,
    pub pointing_scored: usize,
    /// Five buckets of ascending viewpoint-difficulty overlap.
    pub buckets: Vec<BucketRow>,
}

struct PairScore {
    gold: ChangeType,
    predicted: ChangeType,
    unparsed: bool,
    bleu: f64,
    /// `None`: not scored (distractor or mapless model).
    pointing: Option<bool>,
    difficulty: f64,
    id: u64,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        None
    } else {
        Some(sum / n as f64)
    }
}

fn hit_rate<'a>(scores: impl Iterator<Item = &'a PairScore>) -> (Option<f64>, usize) {
    let mut hits = 0usize;
    let mut n = 0usize;
    for s in scores {
        if let Some(hit) = s.pointing {
            n += 1;
            if hit {
                hits += 1;
            }
        }
    }
    (if n == 0 { None } else { Some(hits as f64 / n as f64) }, n)
}

fn score_pointing(
    rule: PointingRule,
    pred: &PredictionRecord,
    record: &PairRecord,
    image_size: usize,
) -> Result<Option<bool>, EvalError> {
    if rule == PointingRule::NoMaps {
        return Ok(None);
    }
    let before: Vec<BBox> =
        record.bboxes.iter().copied().filter(|b| b.image_tag == ImageTag::Before).collect();
    let after: Vec<BBox> =
        record.bboxes.iter().copied().filter(|b| b.image_tag == ImageTag::After).collect();
    if before.is_empty() && after.is_empty() {
        return Ok(None);
    }
    if pred.a_bef.is_empty() || pred.a_aft.is_empty() {
        return Err(EvalError::MissingMaps { id: pred.id });
    }
    let (h, w) = (pred.map_h, pred.map_w);
    let hit = match rule {
        PointingRule::TwoMap => {
            let hit_before = if before.is_empty() {
                None
            } else {
                Some(pointing_game(&pred.a_bef, h, w, &before, image_size)?)
            };
            let hit_after = if after.is_empty() {
                None
            } else {
                Some(pointing_game(&pred.a_aft, h, w, &after, image_size)?)
            };
            hit_before.unwrap_or(true) && hit_after.unwrap_or(true)
        }
        PointingRule::SingleMap => {
            let mut all: Vec<BBox> = before;
            all.extend(after);
            pointing_game(&pred.a_bef, h, w, &all, image_size)?
        }
        PointingRule::NoMaps => unreachable!(),
    };
    Ok(Some(hit))
}

/// Score one prediction run against its manifest records: BLEU partitions,
/// change-type confusion, the Pointing Game under the given rule, and five
/// difficulty buckets sorted by viewpoint overlap.
pub fn score_run(
    predictions: &[PredictionRecord],
    records: &[PairRecord],
    rule: PointingRule,
    image_size: usize,
    model_label: &str,
) -> Result<EvalReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyRun);
    }
    let by_id: HashMap<u64, &PredictionRecord> =
        predictions.iter().map(|p| (p.id, p)).collect();
    let record_ids: HashSet<u64> = records.iter().map(|r| r.id).collect();
    let mut missing: Vec<u64> =
        records.iter().map(|r| r.id).filter(|id| !by_id.contains_key(id)).collect();
    let mut extra: Vec<u64> =
        predictions.iter().map(|p| p.id).filter(|id| !record_ids.contains(id)).collect();
    if !missing.is_empty() || !extra.is_empty() {
        missing.sort_unstable();
        extra.sort_unstable();
        return Err(EvalError::IdMismatch { missing, extra });
    }

    let mut scores = Vec::with_capacity(records.len());
    for record in records {
        let pred = by_id[&record.id];
        let candidate = tokenize(&pred.caption);
        let references: Vec<Vec<String>> =
            record.captions.iter().map(|c| tokenize(c)).collect();
        let bleu = if candidate.is_empty() {
            0.0
        } else {
            bleu4(&candidate, &references)?
        };
        let (predicted, unparsed) = parse_change_type(&pred.caption);
        let pointing = score_pointing(rule, pred, record, image_size)?;
        scores.push(PairScore {
            gold: record.change.change_type,
            predicted,
            unparsed,
            bleu,
            pointing,
            difficulty: record.difficulty_iou,
            id: record.id,
        });
    }

    let bleu_total = mean(scores.iter().map(|s| s.bleu)).unwrap_or(0.0);
    let bleu_scene_change = mean(
        scores.iter().filter(|s| s.gold != ChangeType::Distractor).map(|s| s.bleu),
    )
    .unwrap_or(0.0);
    let bleu_distractor = mean(
        scores.iter().filter(|s| s.gold == ChangeType::Distractor).map(|s| s.bleu),
    )
    .unwrap_or(0.0);
    let bleu_by_type = ChangeType::ALL
        .iter()
        .map(|&ty| mean(scores.iter().filter(|s| s.gold == ty).map(|s| s.bleu)).unwrap_or(0.0))
        .collect();

    let mut confusion = vec![vec![0usize; TYPE_COUNT]; TYPE_COUNT];
    let mut gold_counts = vec![0usize; TYPE_COUNT];
    let mut correct = 0usize;
    let mut unparsed = 0usize;
    for s in &scores {
        confusion[type_index(s.gold)][type_index(s.predicted)] += 1;
        gold_counts[type_index(s.gold)] += 1;
        if s.gold == s.predicted {
            correct += 1;
        }
        if s.unparsed {
            unparsed += 1;
        }
    }
    let type_accuracy = correct as f64 / scores.len() as f64;

    let (pointing_total, pointing_scored) = hit_rate(scores.iter());
    let pointing_by_type = ChangeType::SCENE_CHANGES
        .iter()
        .map(|&ty| hit_rate(scores.iter().filter(|s| s.gold == ty)).0)
        .collect();

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .difficulty
            .total_cmp(&scores[b].difficulty)
            .then(scores[a].id.cmp(&scores[b].id))
    });
    let n = order.len();
    let base = n / 5;
    let remainder = n % 5;
    let mut buckets = Vec::with_capacity(5);
    let mut cursor = 0usize;
    for bucket in 1..=5 {
        let len = base + usize::from(bucket <= remainder);
        let members: Vec<&PairScore> =
            order[cursor..cursor + len].iter().map(|&i| &scores[i]).collect();
        cursor += len;
        let (pointing, _) = hit_rate(members.iter().copied());
        buckets.push(BucketRow {
            bucket,
            pairs: members.len(),
            difficulty_lo: members.first().map_or(f64::NAN, |s| s.difficulty),
            difficulty_hi: members.last().map_or(f64::NAN, |s| s.difficulty),
            bleu4: mean(members.iter().map(|s| s.bleu)).unwrap_or(0.0),
            type_accuracy: if members.is_empty() {
                0.0
            } else {
                members.iter().filter(|s| s.gold == s.predicted).count() as f64
                    / members.len() as f64
            },
            pointing,
        });
    }
    debug_assert_eq!(cursor, n);

    Ok(EvalReport {
        model: model_label.to_string(),
        pairs: scores.len(),
        bleu_total,
        bleu_scene_change,
        bleu_distractor,
        bleu_by_type,
        type_accuracy,
        unparsed,
        confusion,
        gold_counts,
        pointing_total,
        pointing_by_type,
        pointing_scored,
        buckets,
    })
}

// ---------------------------------------------------------------------------
// Renderings
// ---------------------------------------------------------------------------

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.4}"),
        None => "-".to_string(),
    }
}

/// Plain-text summary table of a report.
pub fn render_table(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "model: {}    pairs: {}", report.model, report.pairs);
    let _ = writeln!(out, "\nBLEU-4");
    let _ = writeln!(out, "  total         {:.4}", report.bleu_total);
    let _ = writeln!(out, "  scene change  {:.4}", report.bleu_scene_change);
    let _ = writeln!(out, "  distractor    {:.4}", report.bleu_distractor);
    for (i, ty) in ChangeType::ALL.iter().enumerate() {
        let _ = writeln!(out, "  {:<12}  {:.4}", ty.label(), report.bleu_by_type[i]);
    }
    let _ = writeln!(
        out,
        "\nchange-type accuracy: {:.4}    unparsed captions: {}",
        report.type_accuracy, report.unparsed
    );
    let _ = writeln!(out, "\nconfusion (rows gold, columns predicted)");
    let _ = write!(out, "  {:<12}", "");
    for ty in ChangeType::ALL {
        let _ = write!(out, "{:>11}", ty.label());
    }
    let _ = writeln!(out);
    for (i, ty) in ChangeType::ALL.iter().enumerate() {
        let _ = write!(out, "  {:<12}", ty.label());
        for j in 0..TYPE_COUNT {
            let _ = write!(out, "{:>11}", report.confusion[i][j]);
        }
        let _ = writeln!(out);
    }
    let _ = writeln!(
        out,
        "\npointing game ({} pairs scored): total {}",
        report.pointing_scored,
        fmt_opt(report.pointing_total)
    );
    for (i, ty) in ChangeType::SCENE_CHANGES.iter().enumerate() {
        let _ = writeln!(out, "  {:<12}  {}", ty.label(), fmt_opt(report.pointing_by_type[i]));
    }
    let _ = writeln!(out, "\ndifficulty buckets (1 = hardest viewpoint shift)");
    let _ = writeln!(
        out,
        "  {:>6} {:>6} {:>8} {:>8} {:>8} {:>9} {:>9}",
        "bucket", "pairs", "iou_lo", "iou_hi", "bleu4", "type_acc", "pointing"
    );
    for b in &report.buckets {
        let _ = writeln!(
            out,
            "  {:>6} {:>6} {:>8.4} {:>8.4} {:>8.4} {:>9.4} {:>9}",
            b.bucket,
            b.pairs,
            b.difficulty_lo,
            b.difficulty_hi,
            b.bleu4,
            b.type_accuracy,
            fmt_opt(b.pointing)
        );
    }
    out
}

/// Difficulty curves as CSV, one row per bucket.
pub fn difficulty_csv(report: &EvalReport) -> String {
    let mut out = String::from("bucket,pairs,difficulty_lo,difficulty_hi,bleu4,type_accuracy,pointing\n");
    for b in &report.buckets {
        let pointing = b.pointing.map(|p| format!("{p}")).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            b.bucket, b.pairs, b.difficulty_lo, b.difficulty_hi, b.bleu4, b.type_accuracy, pointing
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    // ---- BLEU-4 against hand-enumerated n-gram counts -------------------

    #[test]
    fn bleu_frozen_cases() {
        // Each expected value is derived by hand from enumerated n-gram
        // counts; the geometric mean and brevity penalty are written out as
        // closed-form expressions.
        let geo = |p: [f64; 4]| (p.iter().map(|x| x.ln()).sum::<f64>() / 4.0).exp();
        let cases: Vec<(Vec<String>, Vec<Vec<String>>, f64)> = vec![
            // 1. candidate equals the sole reference
            (toks("a small red cube moved"), vec![toks("a small red cube moved")], 1.0),
            // 2. no shared unigram
            (toks("x y z w"), vec![toks("a b c d")], 0.0),
            // 3. precisions (5/5, 3/4, 2/3, 1/2), BP e^(1-6/5)
            (
                toks("the cube changed to yellow"),
                vec![toks("the large cube changed to yellow")],
                (1.0 - 6.0 / 5.0_f64).exp() * geo([1.0, 0.75, 2.0 / 3.0, 0.5]),
            ),
            // 4. candidate longer than the reference: BP = 1; bigram
            // "yellow quickly", trigram tails and the last two 4-grams miss
            (
                toks("the large cube changed to yellow quickly"),
                vec![toks("the large cube changed to yellow")],
                geo([6.0 / 7.0, 5.0 / 6.0, 4.0 / 5.0, 3.0 / 4.0]),
            ),
            // 5. clipping: "the" appears once in the reference
            (toks("the the the the"), vec![toks("the cat")], 0.0),
            // 6. two references; closest length is 5, all grams from ref 1
            (
                toks("a b c d"),
                vec![toks("a b c d e"), toks("f g")],
                (1.0 - 5.0 / 4.0_f64).exp() * geo([1.0, 1.0, 1.0, 1.0]),
            ),
            // 7. length tie (3 vs 5) resolves to the shorter: BP = 1
            (toks("a b c d"), vec![toks("a b c"), toks("a b c d e")], 1.0),
            // 8. zero trigram overlap zeroes the score
            (toks("a b x c d"), vec![toks("a b q c d")], 0.0),
            // 9. candidate shorter than 4 tokens has no 4-grams
            (toks("a b c"), vec![toks("a b c")], 0.0),
            // 10. clipping across two references with a length tie (7 vs 5)
            // resolving to 5: p = (6/6, 5/5, 4/4, 2/3), BP = 1
            (
                toks("a b c d e f"),
                vec![toks("a b c d x y z"), toks("c d e f u")],
                geo([1.0, 1.0, 1.0, 2.0 / 3.0]),
            ),
        ];
        for (i, (cand, refs, want)) in cases.iter().enumerate() {
            let got = bleu4(cand, refs).unwrap();
            assert!(
                (got - want).abs() < 1e-6,
                "case {}: got {got}, want {want}",
                i + 1
            );
        }
    }

    #[test]
    fn bleu_reference_permutation_and_duplication_invariant() {
        let cand = toks("the small rubber cube changed to red");
        let r1 = toks("the small rubber cube turned red");
        let r2 = toks("the small cube changed to red");
        let r3 = toks("the cube became red");
        let base = bleu4(&cand, &[r1.clone(), r2.clone(), r3.clone()]).unwrap();
        let permuted = bleu4(&cand, &[r3.clone(), r1.clone(), r2.clone()]).unwrap();
        let duplicated =
            bleu4(&cand, &[r1.clone(), r2.clone(), r3.clone(), r2.clone(), r1]).unwrap();
        assert_eq!(base, permuted);
        assert_eq!(base, duplicated);
        assert!(base > 0.0 && base < 1.0);
    }

    #[test]
    fn bleu_input_validation() {
        assert_eq!(bleu4(&[], &[toks("a b")]), Err(EvalError::EmptyCandidate));
        assert_eq!(bleu4(&toks("a b"), &[]), Err(EvalError::EmptyReferences));
    }

    // ---- parsing --------------------------------------------------------

    #[test]
    fn parse_examples() {
        assert_eq!(parse_change_type("no change was made."), (ChangeType::Distractor, false));
        assert_eq!(
            parse_change_type("the small rubber sphere is no longer there."),
            (ChangeType::Drop, false)
        );
        assert_eq!(parse_change_type("the cube turned metal"), (ChangeType::Texture, false));
        assert_eq!(parse_change_type("the cube turned yellow"), (ChangeType::Color, false));
        let (ty, unparsed) = parse_change_type("gibberish tokens here");
        assert_eq!(ty, ChangeType::Distractor);
        assert!(unparsed);
    }

    // ---- pointing game --------------------------------------------------

    /// Independent dense evaluation: tent-basis sum over every map node.
    fn oracle_upsample(map: &[f64], h: usize, w: usize, out: usize) -> Vec<f64> {
        let tri = |t: f64| (1.0 - t.abs()).max(0.0);
        let mut img = vec![0.0; out * out];
        for i in 0..out {
            for j in 0..out {
                let y = if h == 1 { 0.0 } else { i as f64 * (h - 1) as f64 / (out - 1) as f64 };
                let x = if w == 1 { 0.0 } else { j as f64 * (w - 1) as f64 / (out - 1) as f64 };
                let mut v = 0.0;
                for gy in 0..h {
                    for gx in 0..w {
                        v += map[gy * w + gx] * tri(y - gy as f64) * tri(x - gx as f64);
                    }
                }
                img[i * out + j] = v;
            }
        }
        img
    }

    #[test]
    fn upsample_matches_dense_oracle_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..40 {
            let h = rng.gen_range(1..=6);
            let w = rng.gen_range(1..=6);
            let out = rng.gen_range(8..=24);
            let map: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let fast = upsample_bilinear(&map, h, w, out).unwrap();
            let slow = oracle_upsample(&map, h, w, out);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-9, "trial {trial}");
            }
            assert_eq!(argmax_pixel(&fast, out), argmax_pixel(&slow, out), "trial {trial}");
        }
    }

    #[test]
    fn worked_two_by_two_example() {
        let map = vec![1.0, 2.0, 3.0, 4.0];
        let img = upsample_bilinear(&map, 2, 2, 8).unwrap();
        assert_eq!(argmax_pixel(&img, 8), (7, 7));
        // corners keep their values under corner alignment
        assert!((img[0] - 1.0).abs() < 1e-12);
        assert!((img[7] - 2.0).abs() < 1e-12);
        assert!((img[63] - 4.0).abs() < 1e-12);
        let hit_box = BBox { x_min: 6, y_min: 6, x_max: 8, y_max: 8, image_tag: ImageTag::After };
        let miss_box = BBox { x_min: 0, y_min: 0, x_max: 3, y_max: 3, image_tag: ImageTag::After };
        assert!(pointing_game(&map, 2, 2, &[hit_box], 8).unwrap());
        assert!(!pointing_game(&map, 2, 2, &[miss_box], 8).unwrap());
        assert!(pointing_game(&map, 2, 2, &[miss_box, hit_box], 8).unwrap());
    }

    #[test]
    fn pointing_invariant_to_positive_affine_rescale() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let boxes = [BBox { x_min: 10, y_min: 4, x_max: 30, y_max: 20, image_tag: ImageTag::Before }];
        for _ in 0..20 {
            let map: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..1.0)).collect();
            let scaled: Vec<f64> = map.iter().map(|v| 7.25 * v + 3.0).collect();
            let a = pointing_game(&map, 4, 4, &boxes, 32).unwrap();
            let b = pointing_game(&scaled, 4, 4, &boxes, 32).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn argmax_ties_take_smallest_row_major_index() {
        let img = vec![5.0; 9];
        assert_eq!(argmax_pixel(&img, 3), (0, 0));
        let map = vec![1.0, 1.0, 1.0, 1.0];
        let up = upsample_bilinear(&map, 2, 2, 6).unwrap();
        assert_eq!(argmax_pixel(&up, 6), (0, 0));
    }

    #[test]
    fn pointing_validation() {
        let map = vec![0.0; 4];
        assert_eq!(pointing_game(&map, 2, 2, &[], 8), Err(EvalError::NoBoxes));
        let b = BBox { x_min: 0, y_min: 0, x_max: 2, y_max: 2, image_tag: ImageTag::Before };
        assert_eq!(
            pointing_game(&[f64::NAN; 4], 2, 2, &[b], 8),
            Err(EvalError::NonFiniteMap)
        );
        assert_eq!(
            pointing_game(&map, 2, 3, &[b], 8),
            Err(EvalError::MapShape { expected: 6, got: 4 })
        );
    }

    // ---- score_run ------------------------------------------------------

    use crate::config::GenConfig;
    use crate::dataset;
    use crate::scene::ChangeType as CT;
    use std::path::PathBuf;

    fn tiny_records(seed: u64) -> (PathBuf, Vec<PairRecord>, usize) {
        let dir = std::env::temp_dir().join(format!(
            "changecap_ev_{seed}_{}",
            std::process::id()
        ));
        if dir.exists() {
            std::fs::remove_dir_all(&dir).unwrap();
        }
        let cfg = GenConfig { n_scenes: 20, seed, ..GenConfig::default() };
        dataset::build_dataset(&cfg, &dir).unwrap();
        let records = dataset::load_manifest(&dir).unwrap();
        (dir, records, cfg.raster_size)
    }

    /// A full-resolution delta map at the first box's center pixel, so the
    /// upsample is the identity and the argmax is guaranteed inside.
    fn delta_map_hitting(boxes: &[BBox], image_size: usize) -> Vec<f64> {
        let b = boxes[0];
        let row = (b.y_min + b.y_max - 1) / 2;
        let col = (b.x_min + b.x_max - 1) / 2;
        let mut map = vec![0.0; image_size * image_size];
        map[row as usize * image_size + col as usize] = 1.0;
        map
    }

    fn perfect_predictions(records: &[PairRecord], image_size: usize) -> Vec<PredictionRecord> {
        records
            .iter()
            .map(|r| {
                let before: Vec<BBox> = r
                    .bboxes
                    .iter()
                    .copied()
                    .filter(|b| b.image_tag == ImageTag::Before)
                    .collect();
                let after: Vec<BBox> = r
                    .bboxes
                    .iter()
                    .copied()
                    .filter(|b| b.image_tag == ImageTag::After)
                    .collect();
                let a_bef = if before.is_empty() {
                    vec![1.0; image_size * image_size]
                } else {
                    delta_map_hitting(&before, image_size)
                };
                let a_aft = if after.is_empty() {
                    vec![1.0; image_size * image_size]
                } else {
                    delta_map_hitting(&after, image_size)
                };
                PredictionRecord {
                    id: r.id,
                    caption: r.captions[0].clone(),
                    alphas: vec![[1.0 / 3.0; 3]; 4],
                    a_bef,
                    a_aft,
                    map_h: image_size,
                    map_w: image_size,
                }
            })
            .collect()
    }

    #[test]
    fn perfect_predictions_score_one_with_diagonal_confusion() {
        let (dir, records, image_size) = tiny_records(71);
        let preds = perfect_predictions(&records, image_size);
        let report =
            score_run(&preds, &records, PointingRule::TwoMap, image_size, "full").unwrap();
        assert_eq!(report.pairs, records.len());
        assert!((report.bleu_total - 1.0).abs() < 1e-12);
        assert!((report.type_accuracy - 1.0).abs() < 1e-12);
        assert_eq!(report.unparsed, 0);
        assert_eq!(report.pointing_total, Some(1.0));
        for (i, row) in report.confusion.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if i == j {
                    assert_eq!(v, report.gold_counts[i]);
                } else {
                    assert_eq!(v, 0);
                }
            }
        }
        // Rows sum to gold counts; buckets partition the population.
        let row_sums: Vec<usize> =
            report.confusion.iter().map(|r| r.iter().sum()).collect();
        assert_eq!(row_sums, report.gold_counts);
        let bucket_total: usize = report.buckets.iter().map(|b| b.pairs).sum();
        assert_eq!(bucket_total, records.len());
        for w in report.buckets.windows(2) {
            assert!(w[0].pairs >= w[1].pairs);
            assert!(w[0].difficulty_hi <= w[1].difficulty_lo + 1e-12);
        }
        // Distractors are excluded from pointing.
        let distractors =
            records.iter().filter(|r| r.change.change_type == CT::Distractor).count();
        assert_eq!(report.pointing_scored, records.len() - distractors);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn all_distractor_predictions_score_distractor_share() {
        let (dir, records, image_size) = tiny_records(72);
        let preds: Vec<PredictionRecord> = records
            .iter()
            .map(|r| PredictionRecord {
                id: r.id,
                caption: "no change was made".to_string(),
                alphas: Vec::new(),
                a_bef: Vec::new(),
                a_aft: Vec::new(),
                map_h: 0,
                map_w: 0,
            })
            .collect();
        let report =
            score_run(&preds, &records, PointingRule::NoMaps, image_size, "none").unwrap();
        let share = records
            .iter()
            .filter(|r| r.change.change_type == CT::Distractor)
            .count() as f64
            / records.len() as f64;
        assert!((report.type_accuracy - share).abs() < 1e-12);
        assert_eq!(report.pointing_total, None);
        assert_eq!(report.pointing_scored, 0);
        // The DISTRACTOR column carries every prediction.
        let dist_col = type_index(CT::Distractor);
        for (i, row) in report.confusion.iter().enumerate() {
            assert_eq!(row[dist_col], report.gold_counts[i]);
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn totals_are_weighted_means_of_per_type_entries() {
        let (dir, records, image_size) = tiny_records(73);
        let preds = perfect_predictions(&records, image_size);
        // Perturb some captions so per-type BLEU differs.
        let mut preds = preds;
        for p in preds.iter_mut().step_by(3) {
            p.caption = format!("{} indeed", p.caption);
        }
        let report =
            score_run(&preds, &records, PointingRule::TwoMap, image_size, "full").unwrap();
        let weighted: f64 = ChangeType::ALL
            .iter()
            .enumerate()
            .map(|(i, _)| report.bleu_by_type[i] * report.gold_counts[i] as f64)
            .sum::<f64>()
            / report.pairs as f64;
        assert!((report.bleu_total - weighted).abs() < 1e-12);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn id_mismatch_is_reported_with_ids() {
        let (dir, records, image_size) = tiny_records(74);
        let mut preds = perfect_predictions(&records, image_size);
        let dropped = preds.pop().unwrap().id;
        preds[0].id = 10_000;
        let err = score_run(&preds, &records, PointingRule::TwoMap, image_size, "full")
            .unwrap_err();
        match err {
            EvalError::IdMismatch { missing, extra } => {
                assert!(missing.contains(&dropped));
                assert!(missing.contains(&records[0].id));
                assert_eq!(extra, vec![10_000]);
            }
            other => panic!("unexpected error {other:?}"),
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn renderings_cover_every_bucket_and_type() {
        let (dir, records, image_size) = tiny_records(75);
        let preds = perfect_predictions(&records, image_size);
        let report =
            score_run(&preds, &records, PointingRule::TwoMap, image_size, "full").unwrap();
        let table = render_table(&report);
        for ty in ChangeType::ALL {
            assert!(table.contains(ty.label()), "missing {}", ty.label());
        }
        let csv = difficulty_csv(&report);
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.starts_with("bucket,"));
        // JSON round trip.
        let json = serde_json::to_string(&report).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
