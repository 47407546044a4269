//! Symbolic scenes and the single-change edit operators.
//!
//! A scene is a list of attributed objects on the unit square. A sample pair
//! derives from one scene plus exactly one semantic edit (or none for
//! distractors) and a camera jitter. Everything here is deterministic in the
//! supplied RNG.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::GenConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Cube,
    Sphere,
    Cylinder,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Cube, Shape::Sphere, Shape::Cylinder];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Cube => "cube",
            Shape::Sphere => "sphere",
            Shape::Cylinder => "cylinder",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Gray,
    Red,
    Blue,
    Green,
    Brown,
    Purple,
    Cyan,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Gray,
        Color::Red,
        Color::Blue,
        Color::Green,
        Color::Brown,
        Color::Purple,
        Color::Cyan,
        Color::Yellow,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Color::Gray => "gray",
            Color::Red => "red",
            Color::Blue => "blue",
            Color::Green => "green",
            Color::Brown => "brown",
            Color::Purple => "purple",
            Color::Cyan => "cyan",
            Color::Yellow => "yellow",
        }
    }

    /// Display color, normalized RGB.
    pub fn rgb(self) -> [f64; 3] {
        let bytes: [u8; 3] = match self {
            Color::Gray => [87, 87, 87],
            Color::Red => [173, 35, 35],
            Color::Blue => [42, 75, 215],
            Color::Green => [29, 105, 20],
            Color::Brown => [129, 74, 25],
            Color::Purple => [129, 38, 192],
            Color::Cyan => [41, 208, 208],
            Color::Yellow => [255, 238, 51],
        };
        [f64::from(bytes[0]) / 255.0, f64::from(bytes[1]) / 255.0, f64::from(bytes[2]) / 255.0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Material {
    Rubber,
    Metal,
}

impl Material {
    pub const ALL: [Material; 2] = [Material::Rubber, Material::Metal];

    pub fn word(self) -> &'static str {
        match self {
            Material::Rubber => "rubber",
            Material::Metal => "metal",
        }
    }

    pub fn other(self) -> Material {
        match self {
            Material::Rubber => Material::Metal,
            Material::Metal => Material::Rubber,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Large,
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];

    pub fn word(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }
}

/// The four categorical attributes, used for duplicate detection and
/// referring expressions.
pub type AttrTuple = (Size, Color, Material, Shape);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: u32,
    pub shape: Shape,
    pub color: Color,
    pub material: Material,
    pub size: Size,
    /// Center in scene coordinates, each axis in `[0, 1)`.
    pub x: f64,
    pub y: f64,
}

impl SceneObject {
    pub fn attrs(&self) -> AttrTuple {
        (self.size, self.color, self.material, self.shape)
    }

    /// Collision/glyph radius in pixels at unit scale.
    pub fn radius_px(&self, cfg: &GenConfig) -> f64 {
        match self.size {
            Size::Small => cfg.radius_small_px,
            Size::Large => cfg.radius_large_px,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub seed: u64,
}

impl Scene {
    pub fn object(&self, id: u32) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ChangeType {
    Color,
    Texture,
    Add,
    Drop,
    Move,
    Distractor,
}

impl ChangeType {
    pub const ALL: [ChangeType; 6] = [
        ChangeType::Color,
        ChangeType::Texture,
        ChangeType::Add,
        ChangeType::Drop,
        ChangeType::Move,
        ChangeType::Distractor,
    ];

    /// The five semantic edits, excluding DISTRACTOR.
    pub const SCENE_CHANGES: [ChangeType; 5] = [
        ChangeType::Color,
        ChangeType::Texture,
        ChangeType::Add,
        ChangeType::Drop,
        ChangeType::Move,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ChangeType::Color => "COLOR",
            ChangeType::Texture => "TEXTURE",
            ChangeType::Add => "ADD",
            ChangeType::Drop => "DROP",
            ChangeType::Move => "MOVE",
            ChangeType::Distractor => "DISTRACTOR",
        }
    }

    pub fn index(self) -> usize {
        ChangeType::ALL.iter().position(|t| *t == self).unwrap()
    }
}

/// Old/new value carried by a change record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum ChangeValue {
    Color(Color),
    Material(Material),
    Position { x: f64, y: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChangeRecord {
    pub change_type: ChangeType,
    pub target_object_id: Option<u32>,
    pub old_value: Option<ChangeValue>,
    pub new_value: Option<ChangeValue>,
}

/// Camera offset; each component lies in `[-2, 2]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraJitter {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

impl CameraJitter {
    pub const IDENTITY: CameraJitter = CameraJitter { dx: 0.0, dy: 0.0, dz: 0.0 };
}

#[derive(Debug)]
pub enum GenError {
    /// Could not place an object without collisions within the retry budget.
    PlacementFailed { attempts: usize },
    /// The requested change cannot be applied to this scene.
    NoFeasibleChange { change_type: ChangeType, detail: String },
    /// No referring expression can single out this object in this scene.
    AmbiguousReference { object_id: u32 },
    /// The jittered view pushed a required object fully out of frame.
    TargetOutOfFrame { object_id: u32 },
}

impl std::fmt::Display for GenError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GenError::PlacementFailed { attempts } => {
                write!(f, "object placement failed after {attempts} attempts")
            }
            GenError::NoFeasibleChange { change_type, detail } => {
                write!(f, "no feasible {} change: {detail}", change_type.label())
            }
            GenError::AmbiguousReference { object_id } => {
                write!(f, "object {object_id} cannot be uniquely described")
            }
            GenError::TargetOutOfFrame { object_id } => {
                write!(f, "target object {object_id} rendered fully out of frame")
            }
        }
    }
}

impl std::error::Error for GenError {}

const PLACE_RETRIES: usize = 200;
const ATTR_RETRIES: usize = 60;

fn sample_position<R: Rng>(rng: &mut R, cfg: &GenConfig) -> (f64, f64) {
    let lo = cfg.position_margin;
    let hi = 1.0 - cfg.position_margin;
    (rng.gen_range(lo..hi), rng.gen_range(lo..hi))
}

fn overlaps(cfg: &GenConfig, a: (f64, f64, f64), b: (f64, f64, f64)) -> bool {
    let s = cfg.raster_size as f64;
    let dist_px = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt() * s;
    dist_px < a.2 + b.2
}

fn position_free(cfg: &GenConfig, objects: &[SceneObject], x: f64, y: f64, radius: f64) -> bool {
    objects
        .iter()
        .all(|o| !overlaps(cfg, (x, y, radius), (o.x, o.y, o.radius_px(cfg))))
}

/// A new attribute tuple is acceptable when no tuple reaches three copies and
/// at most one tuple in the scene is duplicated. The cap keeps every object
/// describable: referring expressions resolve duplicates with one spatial
/// relation against a uniquely-attributed anchor.
fn attrs_acceptable(existing: &[AttrTuple], candidate: AttrTuple) -> bool {
    let same = existing.iter().filter(|t| **t == candidate).count();
    if same >= 2 {
        return false;
    }
    if same == 1 {
        let mut sorted = existing.to_vec();
        sorted.sort();
        let already_duplicated = sorted.windows(2).any(|w| w[0] == w[1]);
        if already_duplicated {
            return false;
        }
    }
    true
}

fn sample_attrs<R: Rng>(rng: &mut R, existing: &[AttrTuple]) -> Result<AttrTuple, GenError> {
    for _ in 0..ATTR_RETRIES {
        let t = (
            *Size::ALL.choose(rng).unwrap(),
            *Color::ALL.choose(rng).unwrap(),
            *Material::ALL.choose(rng).unwrap(),
            *Shape::ALL.choose(rng).unwrap(),
        );
        if attrs_acceptable(existing, t) {
            return Ok(t);
        }
    }
    Err(GenError::PlacementFailed { attempts: ATTR_RETRIES })
}

/// Sample a valid scene: object count in the configured range, non-overlapping
/// placements, attribute tuples under the duplicate cap. Sequential rejection
/// sampling can paint itself into a corner on crowded draws, so the whole
/// scene restarts a bounded number of times before reporting failure.
pub fn sample_scene<R: Rng>(rng: &mut R, cfg: &GenConfig, seed: u64) -> Result<Scene, GenError> {
    const SCENE_RESTARTS: usize = 25;
    let mut last = GenError::PlacementFailed { attempts: 0 };
    for _ in 0..SCENE_RESTARTS {
        match sample_scene_once(rng, cfg, seed) {
            Ok(scene) => return Ok(scene),
            Err(e) => last = e,
        }
    }
    Err(last)
}

fn sample_scene_once<R: Rng>(rng: &mut R, cfg: &GenConfig, seed: u64) -> Result<Scene, GenError> {
    let count = rng.gen_range(cfg.object_count_min..=cfg.object_count_max);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    for id in 0..count {
        let existing: Vec<AttrTuple> = objects.iter().map(|o| o.attrs()).collect();
        let (size, color, material, shape) = sample_attrs(rng, &existing)?;
        let radius = match size {
            Size::Small => cfg.radius_small_px,
            Size::Large => cfg.radius_large_px,
        };
        let mut placed = false;
        for _ in 0..PLACE_RETRIES {
            let (x, y) = sample_position(rng, cfg);
            if position_free(cfg, &objects, x, y, radius) {
                objects.push(SceneObject {
                    id: id as u32,
                    shape,
                    color,
                    material,
                    size,
                    x,
                    y,
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(GenError::PlacementFailed { attempts: PLACE_RETRIES });
        }
    }
    Ok(Scene { objects, seed })
}

/// Uniform camera offset in `[-2, 2]` per component.
pub fn jitter_camera<R: Rng>(rng: &mut R) -> CameraJitter {
    CameraJitter {
        dx: rng.gen_range(-2.0..=2.0),
        dy: rng.gen_range(-2.0..=2.0),
        dz: rng.gen_range(-2.0..=2.0),
    }
}

/// Apply one semantic edit, returning the edited scene and its record.
/// DISTRACTOR returns the scene unchanged. Errors leave no partial state;
/// the caller resamples the scene.
pub fn apply_change<R: Rng>(
    scene: &Scene,
    change_type: ChangeType,
    rng: &mut R,
    cfg: &GenConfig,
) -> Result<(Scene, ChangeRecord), GenError> {
    let mut after = scene.clone();
    match change_type {
        ChangeType::Distractor => Ok((
            after,
            ChangeRecord {
                change_type,
                target_object_id: None,
                old_value: None,
                new_value: None,
            },
        )),
        ChangeType::Color => {
            let order = shuffled_indices(rng, scene.objects.len());
            for idx in order {
                let old = scene.objects[idx].color;
                let mut colors: Vec<Color> =
                    Color::ALL.iter().copied().filter(|c| *c != old).collect();
                colors.shuffle(rng);
                for new in colors {
                    if recolor_ok(scene, idx, new) {
                        after.objects[idx].color = new;
                        return Ok((
                            after,
                            ChangeRecord {
                                change_type,
                                target_object_id: Some(scene.objects[idx].id),
                                old_value: Some(ChangeValue::Color(old)),
                                new_value: Some(ChangeValue::Color(new)),
                            },
                        ));
                    }
                }
            }
            Err(GenError::NoFeasibleChange {
                change_type,
                detail: "every recolor violates the duplicate cap".into(),
            })
        }
        ChangeType::Texture => {
            let order = shuffled_indices(rng, scene.objects.len());
            for idx in order {
                let old = scene.objects[idx].material;
                let new = old.other();
                if rematerial_ok(scene, idx, new) {
                    after.objects[idx].material = new;
                    return Ok((
                        after,
                        ChangeRecord {
                            change_type,
                            target_object_id: Some(scene.objects[idx].id),
                            old_value: Some(ChangeValue::Material(old)),
                            new_value: Some(ChangeValue::Material(new)),
                        },
                    ));
                }
            }
            Err(GenError::NoFeasibleChange {
                change_type,
                detail: "every material flip violates the duplicate cap".into(),
            })
        }
        ChangeType::Add => {
            if scene.objects.len() >= cfg.object_count_max {
                return Err(GenError::NoFeasibleChange {
                    change_type,
                    detail: "scene already at maximum object count".into(),
                });
            }
            let existing: Vec<AttrTuple> = scene.objects.iter().map(|o| o.attrs()).collect();
            let (size, color, material, shape) = sample_attrs(rng, &existing)?;
            let radius = match size {
                Size::Small => cfg.radius_small_px,
                Size::Large => cfg.radius_large_px,
            };
            for _ in 0..PLACE_RETRIES {
                let (x, y) = sample_position(rng, cfg);
                if position_free(cfg, &scene.objects, x, y, radius) {
                    let id = scene.objects.iter().map(|o| o.id).max().unwrap_or(0) + 1;
                    after.objects.push(SceneObject {
                        id,
                        shape,
                        color,
                        material,
                        size,
                        x,
                        y,
                    });
                    return Ok((
                        after,
                        ChangeRecord {
                            change_type,
                            target_object_id: Some(id),
                            old_value: None,
                            new_value: None,
                        },
                    ));
                }
            }
            Err(GenError::NoFeasibleChange {
                change_type,
                detail: "no free space for a new object".into(),
            })
        }
        ChangeType::Drop => {
            let idx = rng.gen_range(0..scene.objects.len());
            let id = scene.objects[idx].id;
            after.objects.remove(idx);
            Ok((
                after,
                ChangeRecord {
                    change_type,
                    target_object_id: Some(id),
                    old_value: None,
                    new_value: None,
                },
            ))
        }
        ChangeType::Move => {
            let floor_px = cfg.move_floor_px();
            let s = cfg.raster_size as f64;
            let order = shuffled_indices(rng, scene.objects.len());
            for idx in order {
                let target = &scene.objects[idx];
                let radius = target.radius_px(cfg);
                let others: Vec<SceneObject> = scene
                    .objects
                    .iter()
                    .filter(|o| o.id != target.id)
                    .cloned()
                    .collect();
                for _ in 0..PLACE_RETRIES {
                    let (x, y) = sample_position(rng, cfg);
                    let disp_px = ((x - target.x).powi(2) + (y - target.y).powi(2)).sqrt() * s;
                    if disp_px >= floor_px && position_free(cfg, &others, x, y, radius) {
                        after.objects[idx].x = x;
                        after.objects[idx].y = y;
                        return Ok((
                            after,
                            ChangeRecord {
                                change_type,
                                target_object_id: Some(target.id),
                                old_value: Some(ChangeValue::Position {
                                    x: target.x,
                                    y: target.y,
                                }),
                                new_value: Some(ChangeValue::Position { x, y }),
                            },
                        ));
                    }
                }
            }
            Err(GenError::NoFeasibleChange {
                change_type,
                detail: "no reachable destination beyond the move floor".into(),
            })
        }
    }
}

fn shuffled_indices<R: Rng>(rng: &mut R, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

fn recolor_ok(scene: &Scene, idx: usize, new: Color) -> bool {
    let mut tuples: Vec<AttrTuple> = Vec::with_capacity(scene.objects.len() - 1);
    for (i, o) in scene.objects.iter().enumerate() {
        if i != idx {
            tuples.push(o.attrs());
        }
    }
    let o = &scene.objects[idx];
    attrs_acceptable(&tuples, (o.size, new, o.material, o.shape))
}

fn rematerial_ok(scene: &Scene, idx: usize, new: Material) -> bool {
    let mut tuples: Vec<AttrTuple> = Vec::with_capacity(scene.objects.len() - 1);
    for (i, o) in scene.objects.iter().enumerate() {
        if i != idx {
            tuples.push(o.attrs());
        }
    }
    let o = &scene.objects[idx];
    attrs_acceptable(&tuples, (o.size, o.color, new, o.shape))
}

/// Check that `after` differs from `before` by exactly the edit described in
/// `record`. Returns a violation description, or `None` when consistent.
pub fn verify_single_change(
    before: &Scene,
    after: &Scene,
    record: &ChangeRecord,
) -> Option<String> {
    let same_object = |a: &SceneObject, b: &SceneObject| a == b;
    match record.change_type {
        ChangeType::Distractor => {
            if record.target_object_id.is_some() {
                return Some("distractor record carries a target".into());
            }
            if before.objects != after.objects {
                return Some("distractor scenes differ".into());
            }
            None
        }
        ChangeType::Color | ChangeType::Texture => {
            let Some(id) = record.target_object_id else {
                return Some("attribute change without target".into());
            };
            if before.objects.len() != after.objects.len() {
                return Some("object count changed".into());
            }
            for (b, a) in before.objects.iter().zip(&after.objects) {
                if b.id != a.id {
                    return Some("object ids reordered".into());
                }
                if b.id == id {
                    let attr_diffs = usize::from(b.color != a.color)
                        + usize::from(b.material != a.material)
                        + usize::from(b.size != a.size)
                        + usize::from(b.shape != a.shape);
                    let pos_same = b.x == a.x && b.y == a.y;
                    let field_ok = match record.change_type {
                        ChangeType::Color => {
                            b.color != a.color
                                && record.old_value == Some(ChangeValue::Color(b.color))
                                && record.new_value == Some(ChangeValue::Color(a.color))
                        }
                        _ => {
                            b.material != a.material
                                && record.old_value == Some(ChangeValue::Material(b.material))
                                && record.new_value == Some(ChangeValue::Material(a.material))
                        }
                    };
                    if attr_diffs != 1 || !pos_same || !field_ok {
                        return Some(format!("target {id} not changed by exactly one attribute"));
                    }
                } else if !same_object(b, a) {
                    return Some(format!("non-target object {} changed", b.id));
                }
            }
            None
        }
        ChangeType::Add => {
            let Some(id) = record.target_object_id else {
                return Some("ADD without target".into());
            };
            if after.objects.len() != before.objects.len() + 1 {
                return Some("ADD did not grow the scene by one".into());
            }
            let (added, rest): (Vec<&SceneObject>, Vec<&SceneObject>) =
                after.objects.iter().partition(|o| o.id == id);
            if added.len() != 1 {
                return Some("added id not unique".into());
            }
            if rest.len() != before.objects.len()
                || !rest.iter().zip(&before.objects).all(|(a, b)| same_object(a, b))
            {
                return Some("ADD disturbed existing objects".into());
            }
            None
        }
        ChangeType::Drop => {
            let Some(id) = record.target_object_id else {
                return Some("DROP without target".into());
            };
            if after.objects.len() + 1 != before.objects.len() {
                return Some("DROP did not shrink the scene by one".into());
            }
            if before.object(id).is_none() || after.object(id).is_some() {
                return Some("DROP target bookkeeping wrong".into());
            }
            let remaining: Vec<&SceneObject> =
                before.objects.iter().filter(|o| o.id != id).collect();
            if !remaining.iter().zip(&after.objects).all(|(b, a)| same_object(b, a)) {
                return Some("DROP disturbed surviving objects".into());
            }
            None
        }
        ChangeType::Move => {
            let Some(id) = record.target_object_id else {
                return Some("MOVE without target".into());
            };
            if before.objects.len() != after.objects.len() {
                return Some("object count changed".into());
            }
            for (b, a) in before.objects.iter().zip(&after.objects) {
                if b.id != a.id {
                    return Some("object ids reordered".into());
                }
                if b.id == id {
                    let attrs_same = b.attrs() == a.attrs();
                    let moved = b.x != a.x || b.y != a.y;
                    let rec_ok = record.old_value
                        == Some(ChangeValue::Position { x: b.x, y: b.y })
                        && record.new_value == Some(ChangeValue::Position { x: a.x, y: a.y });
                    if !attrs_same || !moved || !rec_ok {
                        return Some(format!("MOVE target {id} inconsistent"));
                    }
                } else if !same_object(b, a) {
                    return Some(format!("non-target object {} changed", b.id));
                }
            }
            None
        }
    }
}

/// Displacement of a MOVE record in pixels at unit scale.
pub fn move_displacement_px(record: &ChangeRecord, cfg: &GenConfig) -> Option<f64> {
    match (&record.old_value, &record.new_value) {
        (
            Some(ChangeValue::Position { x: x0, y: y0 }),
            Some(ChangeValue::Position { x: x1, y: y1 }),
        ) => Some(((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt() * cfg.raster_size as f64),
        _ => None,
    }
}
