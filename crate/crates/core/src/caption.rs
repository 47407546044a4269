//! Template captions and referring expressions.
//!
//! A caption is a referring expression naming the changed object plus a
//! change template, or a standalone no-change sentence for distractors.
//! Referring expressions use the minimal attribute subset that uniquely
//! identifies the target (subsets ordered by size, ties broken in the fixed
//! attribute order size, color, material, shape), appending one spatial
//! relation against a uniquely-attributed anchor when attributes alone are
//! ambiguous. Captions are stored lowercase without final punctuation.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::scene::{
    ChangeRecord, ChangeType, ChangeValue, Color, Material, Scene, SceneObject, Shape, Size,
};

/// Attribute-change verb forms; the value word follows the verb.
pub const VERB_TEMPLATES: [&str; 3] = ["changed to", "turned", "became"];
pub const ADD_TEMPLATES: [&str; 3] = ["has appeared", "has been newly placed", "has been added"];
pub const DROP_TEMPLATES: [&str; 4] =
    ["has disappeared", "is missing", "is gone", "is no longer there"];
pub const MOVE_TEMPLATES: [&str; 3] =
    ["moved", "is in a different location", "changed its location"];
pub const DISTRACTOR_TEMPLATES: [&str; 3] = [
    "no change was made",
    "the scene is the same as before",
    "the two scenes seem identical",
];

/// Number of distinct templates available for a change type.
pub fn template_pool_size(ty: ChangeType) -> usize {
    match ty {
        ChangeType::Color | ChangeType::Texture => VERB_TEMPLATES.len(),
        ChangeType::Add => ADD_TEMPLATES.len(),
        ChangeType::Drop => DROP_TEMPLATES.len(),
        ChangeType::Move => MOVE_TEMPLATES.len(),
        ChangeType::Distractor => DISTRACTOR_TEMPLATES.len(),
    }
}

#[derive(Debug)]
pub enum CaptionError {
    /// No attribute subset or relational clause singles out this object.
    AmbiguousReference { object_id: u32 },
    /// The record references an object absent from the relevant scene.
    UnknownTarget { object_id: u32 },
    /// A non-distractor record without a target.
    MissingTarget { change_type: ChangeType },
}

impl std::fmt::Display for CaptionError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CaptionError::AmbiguousReference { object_id } => {
                write!(f, "object {object_id} cannot be uniquely described")
            }
            CaptionError::UnknownTarget { object_id } => {
                write!(f, "caption target {object_id} not in scene")
            }
            CaptionError::MissingTarget { change_type } => {
                write!(f, "{} record has no target object", change_type.label())
            }
        }
    }
}

impl std::error::Error for CaptionError {}

/// The four spatial relations available to referring expressions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rel {
    LeftOf,
    RightOf,
    InFrontOf,
    Behind,
}

impl Rel {
    pub const ALL: [Rel; 4] = [Rel::LeftOf, Rel::RightOf, Rel::InFrontOf, Rel::Behind];

    pub fn phrase(self) -> &'static str {
        match self {
            Rel::LeftOf => "to the left of",
            Rel::RightOf => "to the right of",
            Rel::InFrontOf => "in front of",
            Rel::Behind => "behind",
        }
    }

    /// Spatial predicate on scene coordinates. Larger y is lower in the
    /// raster, which reads as closer to the viewer: "in front of".
    pub fn holds(self, obj: &SceneObject, anchor: &SceneObject) -> bool {
        match self {
            Rel::LeftOf => obj.x < anchor.x,
            Rel::RightOf => obj.x > anchor.x,
            Rel::InFrontOf => obj.y > anchor.y,
            Rel::Behind => obj.y < anchor.y,
        }
    }
}

/// A parsed or constructed noun phrase: attribute constraints plus at most
/// one relational clause whose anchor has no further relation.
#[derive(Clone, Debug, PartialEq)]
pub struct NounPhrase {
    pub size: Option<Size>,
    pub color: Option<Color>,
    pub material: Option<Material>,
    pub shape: Option<Shape>,
    pub relation: Option<(Rel, Box<NounPhrase>)>,
}

impl NounPhrase {
    fn empty() -> NounPhrase {
        NounPhrase { size: None, color: None, material: None, shape: None, relation: None }
    }

    fn matches_attrs(&self, o: &SceneObject) -> bool {
        self.size.map_or(true, |v| o.size == v)
            && self.color.map_or(true, |v| o.color == v)
            && self.material.map_or(true, |v| o.material == v)
            && self.shape.map_or(true, |v| o.shape == v)
    }

    pub fn render(&self) -> String {
        let mut words: Vec<&str> = vec!["the"];
        if let Some(v) = self.size {
            words.push(v.word());
        }
        if let Some(v) = self.color {
            words.push(v.word());
        }
        if let Some(v) = self.material {
            words.push(v.word());
        }
        words.push(self.shape.map_or("thing", |v| v.word()));
        let mut out = words.join(" ");
        if let Some((rel, anchor)) = &self.relation {
            out.push(' ');
            out.push_str(rel.phrase());
            out.push(' ');
            out.push_str(&anchor.render());
        }
        out
    }
}

/// Object ids matching a noun phrase in a scene. A relational clause applies
/// only when its anchor resolves uniquely; otherwise nothing matches.
pub fn resolve_noun_phrase(np: &NounPhrase, scene: &Scene) -> Vec<u32> {
    let base: Vec<&SceneObject> =
        scene.objects.iter().filter(|o| np.matches_attrs(o)).collect();
    match &np.relation {
        None => base.iter().map(|o| o.id).collect(),
        Some((rel, anchor_np)) => {
            let anchors = resolve_noun_phrase(anchor_np, scene);
            let [anchor_id] = anchors[..] else { return Vec::new() };
            let anchor = scene.object(anchor_id).unwrap();
            base.iter()
                .filter(|o| o.id != anchor_id && rel.holds(o, anchor))
                .map(|o| o.id)
                .collect()
        }
    }
}

/// Attribute-subset masks in selection order: smaller subsets first, ties in
/// the fixed priority order size < color < material < shape.
const SUBSET_ORDER: [u8; 15] = [
    0b0001, 0b0010, 0b0100, 0b1000, // singletons
    0b0011, 0b0101, 0b1001, 0b0110, 0b1010, 0b1100, // pairs
    0b0111, 0b1011, 0b1101, 0b1110, // triples
    0b1111,
];

fn np_from_mask(target: &SceneObject, mask: u8) -> NounPhrase {
    NounPhrase {
        size: (mask & 0b0001 != 0).then_some(target.size),
        color: (mask & 0b0010 != 0).then_some(target.color),
        material: (mask & 0b0100 != 0).then_some(target.material),
        shape: (mask & 0b1000 != 0).then_some(target.shape),
        relation: None,
    }
}

fn mask_matches(scene: &Scene, target: &SceneObject, mask: u8) -> Vec<u32> {
    let np = np_from_mask(target, mask);
    scene.objects.iter().filter(|o| np.matches_attrs(o)).map(|o| o.id).collect()
}

/// Smallest attribute subset uniquely matching the object, if any.
fn unique_np(scene: &Scene, target: &SceneObject) -> Option<NounPhrase> {
    SUBSET_ORDER
        .iter()
        .find(|&&mask| mask_matches(scene, target, mask).len() == 1)
        .map(|&mask| np_from_mask(target, mask))
}

/// Build the referring expression for an object in a scene.
pub fn referring_noun_phrase(scene: &Scene, target_id: u32) -> Result<NounPhrase, CaptionError> {
    let target = scene
        .object(target_id)
        .ok_or(CaptionError::UnknownTarget { object_id: target_id })?;
    if let Some(np) = unique_np(scene, target) {
        return Ok(np);
    }
    // Attributes alone are ambiguous: take the most specific attribute set
    // (fewest matches, then earliest in subset order) and add one relation
    // against a uniquely-attributed anchor.
    let best_mask = SUBSET_ORDER
        .iter()
        .copied()
        .min_by_key(|&mask| mask_matches(scene, target, mask).len())
        .unwrap();
    let candidates = mask_matches(scene, target, best_mask);
    for anchor in &scene.objects {
        if anchor.id == target_id {
            continue;
        }
        let Some(anchor_np) = unique_np(scene, anchor) else { continue };
        for rel in Rel::ALL {
            let filtered: Vec<u32> = candidates
                .iter()
                .copied()
                .filter(|&id| {
                    id != anchor.id && rel.holds(scene.object(id).unwrap(), anchor)
                })
                .collect();
            if filtered == [target_id] {
                let mut np = np_from_mask(target, best_mask);
                np.relation = Some((rel, Box::new(anchor_np)));
                return Ok(np);
            }
        }
    }
    Err(CaptionError::AmbiguousReference { object_id: target_id })
}

pub fn referring_expression(scene: &Scene, target_id: u32) -> Result<String, CaptionError> {
    referring_noun_phrase(scene, target_id).map(|np| np.render())
}

fn value_word(value: &Option<ChangeValue>) -> &'static str {
    match value {
        Some(ChangeValue::Color(c)) => c.word(),
        Some(ChangeValue::Material(m)) => m.word(),
        _ => unreachable!("attribute change records carry attribute values"),
    }
}

/// Render the caption for one template index.
fn caption_for_template(
    record: &ChangeRecord,
    re: Option<&str>,
    template_idx: usize,
) -> String {
    match record.change_type {
        ChangeType::Distractor => DISTRACTOR_TEMPLATES[template_idx].to_string(),
        ChangeType::Color | ChangeType::Texture => format!(
            "{} {} {}",
            re.unwrap(),
            VERB_TEMPLATES[template_idx],
            value_word(&record.new_value)
        ),
        ChangeType::Add => format!("{} {}", re.unwrap(), ADD_TEMPLATES[template_idx]),
        ChangeType::Drop => format!("{} {}", re.unwrap(), DROP_TEMPLATES[template_idx]),
        ChangeType::Move => format!("{} {}", re.unwrap(), MOVE_TEMPLATES[template_idx]),
    }
}

/// Generate `k` reference captions from distinct templates. The referring
/// expression is built from the "before" scene, except ADD which can only be
/// referenced in the "after" scene.
pub fn generate_captions<R: Rng>(
    record: &ChangeRecord,
    before: &Scene,
    after: &Scene,
    k: usize,
    rng: &mut R,
) -> Result<Vec<String>, CaptionError> {
    let pool = template_pool_size(record.change_type);
    assert!(k >= 1 && k <= pool, "caption count {k} outside template pool {pool}");
    let re = match record.change_type {
        ChangeType::Distractor => None,
        ty => {
            let target = record
                .target_object_id
                .ok_or(CaptionError::MissingTarget { change_type: ty })?;
            let scene = if ty == ChangeType::Add { after } else { before };
            Some(referring_expression(scene, target)?)
        }
    };
    let mut indices: Vec<usize> = (0..pool).collect();
    indices.shuffle(rng);
    indices.truncate(k);
    Ok(indices
        .into_iter()
        .map(|i| caption_for_template(record, re.as_deref(), i))
        .collect())
}

/// Whitespace tokens of a normalized caption: lowercased, trailing period
/// stripped.
pub fn tokenize(caption: &str) -> Vec<String> {
    normalize(caption).split_whitespace().map(str::to_string).collect()
}

fn normalize(caption: &str) -> String {
    caption.trim().trim_end_matches('.').to_lowercase()
}

fn word_is_color(w: &str) -> bool {
    Color::ALL.iter().any(|c| c.word() == w)
}

fn word_is_material(w: &str) -> bool {
    Material::ALL.iter().any(|m| m.word() == w)
}

/// Keyword-driven change-type classification over the closed template
/// grammar. Total: unmatched captions classify as DISTRACTOR with the
/// `unparsed` flag set.
pub fn parse_change_type(caption: &str) -> (ChangeType, bool) {
    let text = normalize(caption);
    let tokens: Vec<&str> = text.split_whitespace().collect();
    // Single words match on token boundaries so "appeared" cannot fire
    // inside "disappeared"; multi-word phrases match as substrings.
    let has_word = |w: &str| tokens.iter().any(|t| *t == w);
    if text.contains("no change") || text.contains("same as before") || has_word("identical") {
        return (ChangeType::Distractor, false);
    }
    if has_word("appeared") || has_word("added") || text.contains("newly placed") {
        return (ChangeType::Add, false);
    }
    if has_word("disappeared")
        || has_word("missing")
        || has_word("gone")
        || text.contains("no longer")
    {
        return (ChangeType::Drop, false);
    }
    if has_word("moved")
        || text.contains("different location")
        || text.contains("changed its location")
    {
        return (ChangeType::Move, false);
    }
    for verb in VERB_TEMPLATES {
        if let Some(pos) = text.find(verb) {
            let next = text[pos + verb.len()..].split_whitespace().next();
            if let Some(word) = next {
                if word_is_color(word) {
                    return (ChangeType::Color, false);
                }
                if word_is_material(word) {
                    return (ChangeType::Texture, false);
                }
            }
        }
    }
    (ChangeType::Distractor, true)
}

/// Split a non-distractor caption into its referring part and classified
/// change type by stripping the template suffix. `None` when no template
/// suffix matches.
pub fn strip_template(caption: &str) -> Option<(ChangeType, String)> {
    let text = normalize(caption);
    // Fixed suffixes, longest first within each type so e.g. "has been added"
    // wins over a hypothetical shorter overlap.
    let fixed: [(&[&str], ChangeType); 3] = [
        (&ADD_TEMPLATES, ChangeType::Add),
        (&DROP_TEMPLATES, ChangeType::Drop),
        (&MOVE_TEMPLATES, ChangeType::Move),
    ];
    for (pool, ty) in fixed {
        let mut sorted: Vec<&str> = pool.to_vec();
        sorted.sort_by_key(|s| std::cmp::Reverse(s.len()));
        for suffix in sorted {
            if let Some(np) = text.strip_suffix(suffix) {
                let np = np.trim_end();
                if !np.is_empty() {
                    return Some((ty, np.to_string()));
                }
            }
        }
    }
    // Attribute changes end in "<verb> <value-word>".
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if let Some(&last) = tokens.last() {
        let ty = if word_is_color(last) {
            Some(ChangeType::Color)
        } else if word_is_material(last) {
            Some(ChangeType::Texture)
        } else {
            None
        };
        if let Some(ty) = ty {
            let head = tokens[..tokens.len() - 1].join(" ");
            for verb in VERB_TEMPLATES {
                if let Some(np) = head.strip_suffix(verb) {
                    let np = np.trim_end();
                    if !np.is_empty() {
                        return Some((ty, np.to_string()));
                    }
                }
            }
        }
    }
    None
}

/// Parse a rendered noun phrase back into its constraints.
pub fn parse_noun_phrase(text: &str) -> Option<NounPhrase> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    let (np, rest) = parse_np_prefix(&tokens)?;
    if !rest.is_empty() {
        return None;
    }
    Some(np)
}

/// Parse one noun phrase from the front of `tokens`, returning the remainder.
fn parse_np_prefix<'a>(tokens: &'a [&'a str]) -> Option<(NounPhrase, &'a [&'a str])> {
    let mut rest = tokens.strip_prefix(&["the"])?;
    let mut np = NounPhrase::empty();
    loop {
        let Some(&word) = rest.first() else { return None };
        if let Some(v) = Size::ALL.iter().find(|s| s.word() == word) {
            if np.size.replace(*v).is_some() {
                return None;
            }
        } else if let Some(v) = Color::ALL.iter().find(|c| c.word() == word) {
            if np.color.replace(*v).is_some() {
                return None;
            }
        } else if let Some(v) = Material::ALL.iter().find(|m| m.word() == word) {
            if np.material.replace(*v).is_some() {
                return None;
            }
        } else if let Some(v) = Shape::ALL.iter().find(|s| s.word() == word) {
            np.shape = Some(*v);
            rest = &rest[1..];
            break;
        } else if word == "thing" {
            rest = &rest[1..];
            break;
        } else {
            return None;
        }
        rest = &rest[1..];
    }
    if rest.is_empty() {
        return Some((np, rest));
    }
    // At most one relational clause; its anchor phrase takes the remainder.
    let joined = rest.join(" ");
    for rel in Rel::ALL {
        if let Some(after) = joined.strip_prefix(rel.phrase()) {
            let after = after.trim_start();
            let anchor_tokens: Vec<&str> = after.split_whitespace().collect();
            let (anchor, anchor_rest) = parse_np_prefix(&anchor_tokens)?;
            if !anchor_rest.is_empty() || anchor.relation.is_some() {
                return None;
            }
            np.relation = Some((rel, Box::new(anchor)));
            return Some((np, &rest[rest.len()..]));
        }
    }
    Some((np, rest))
}
