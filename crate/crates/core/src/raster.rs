//! 2-D rasterization of symbolic scenes.
//!
//! Objects render as flat silhouettes — cube→square, sphere→disc,
//! cylinder→vertical bar — in their attribute color, with metal drawn as
//! alternating-row stripes. The camera offset turns into an affine view
//! transform (translation, center scaling) plus a brightness multiplier.
//! Later-listed objects occlude earlier ones.

use serde::{Deserialize, Serialize};

use crate::config::GenConfig;
use crate::ppm::Image;
use crate::scene::{CameraJitter, ChangeRecord, Scene, SceneObject, Shape};

pub const BACKGROUND: [f64; 3] = [0.15, 0.15, 0.15];
/// Darkening factor for the striped rows of metal objects.
const METAL_STRIPE: f64 = 0.55;

/// Which image of a pair a box belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageTag {
    Before,
    After,
}

/// Axis-aligned pixel box, half-open: pixels with `x_min <= col < x_max`,
/// `y_min <= row < y_max`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
    pub image_tag: ImageTag,
}

impl BBox {
    pub fn width(&self) -> u32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> u32 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width()) * u64::from(self.height())
    }

    pub fn contains_pixel(&self, col: u32, row: u32) -> bool {
        col >= self.x_min && col < self.x_max && row >= self.y_min && row < self.y_max
    }

    /// Intersection-over-union of the pixel sets; tags are ignored.
    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = self.x_max.min(other.x_max).saturating_sub(self.x_min.max(other.x_min));
        let iy = self.y_max.min(other.y_max).saturating_sub(self.y_min.max(other.y_min));
        let inter = u64::from(ix) * u64::from(iy);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            return 0.0;
        }
        inter as f64 / union as f64
    }
}

#[derive(Debug)]
pub enum RasterError {
    /// The object's silhouette has no pixel inside the frame.
    OutOfFrame { object_id: u32 },
}

impl std::fmt::Display for RasterError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RasterError::OutOfFrame { object_id } => {
                write!(f, "object {object_id} renders fully outside the frame")
            }
        }
    }
}

impl std::error::Error for RasterError {}

/// Affine view derived from a camera offset: scaling about the image center,
/// pixel translation, and a global brightness multiplier.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewTransform {
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
    pub brightness: f64,
    pub size: usize,
}

impl ViewTransform {
    pub fn new(jitter: CameraJitter, cfg: &GenConfig) -> ViewTransform {
        ViewTransform {
            scale: 1.0 + cfg.kappa_s * jitter.dz,
            tx: cfg.kappa_t * jitter.dx,
            ty: cfg.kappa_t * jitter.dy,
            brightness: 1.0 + cfg.kappa_b * jitter.dz,
            size: cfg.raster_size,
        }
    }

    /// Map a scene-coordinate point to pixel coordinates.
    pub fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let s = self.size as f64;
        let c = s / 2.0;
        (c + (x * s - c) * self.scale + self.tx, c + (y * s - c) * self.scale + self.ty)
    }
}

/// Glyph half-extents in pixels for a unit-scale radius `r`:
/// squares and bars are inscribed in the collision circle.
fn half_extents(shape: Shape, r: f64) -> (f64, f64) {
    match shape {
        Shape::Cube => (r / std::f64::consts::SQRT_2, r / std::f64::consts::SQRT_2),
        Shape::Sphere => (r, r),
        // Taller than wide: a vertical bar.
        Shape::Cylinder => (0.6 * r, 0.8 * r),
    }
}

/// True when the pixel center `(px, py)` lies inside the object's silhouette
/// under the view transform.
fn silhouette_contains(obj: &SceneObject, cfg: &GenConfig, tf: &ViewTransform, px: f64, py: f64) -> bool {
    let (cx, cy) = tf.map(obj.x, obj.y);
    let r = obj.radius_px(cfg) * tf.scale;
    match obj.shape {
        Shape::Sphere => (px - cx).powi(2) + (py - cy).powi(2) <= r * r,
        shape => {
            let (hw, hh) = half_extents(shape, r);
            (px - cx).abs() <= hw && (py - cy).abs() <= hh
        }
    }
}

fn shade(obj: &SceneObject, row: usize) -> [f64; 3] {
    let rgb = obj.color.rgb();
    match obj.material {
        crate::scene::Material::Rubber => rgb,
        crate::scene::Material::Metal => {
            if row % 2 == 1 {
                [rgb[0] * METAL_STRIPE, rgb[1] * METAL_STRIPE, rgb[2] * METAL_STRIPE]
            } else {
                rgb
            }
        }
    }
}

/// Render the scene under the given camera offset.
pub fn render(scene: &Scene, jitter: CameraJitter, cfg: &GenConfig) -> Image {
    let tf = ViewTransform::new(jitter, cfg);
    let s = cfg.raster_size;
    let mut img = Image::filled(s, s, BACKGROUND);
    for row in 0..s {
        for col in 0..s {
            let px = col as f64 + 0.5;
            let py = row as f64 + 0.5;
            // Later-listed objects occlude earlier ones.
            let mut rgb = BACKGROUND;
            for obj in scene.objects.iter().rev() {
                if silhouette_contains(obj, cfg, &tf, px, py) {
                    rgb = shade(obj, row);
                    break;
                }
            }
            let lit = [
                (rgb[0] * tf.brightness).clamp(0.0, 1.0),
                (rgb[1] * tf.brightness).clamp(0.0, 1.0),
                (rgb[2] * tf.brightness).clamp(0.0, 1.0),
            ];
            img.set_pixel(col, row, lit);
        }
    }
    img
}

/// Per-pixel topmost owner ids, same occlusion rule as `render`.
pub fn owner_map(scene: &Scene, jitter: CameraJitter, cfg: &GenConfig) -> Vec<Option<u32>> {
    let tf = ViewTransform::new(jitter, cfg);
    let s = cfg.raster_size;
    let mut owners = vec![None; s * s];
    for row in 0..s {
        for col in 0..s {
            let px = col as f64 + 0.5;
            let py = row as f64 + 0.5;
            for obj in scene.objects.iter().rev() {
                if silhouette_contains(obj, cfg, &tf, px, py) {
                    owners[row * s + col] = Some(obj.id);
                    break;
                }
            }
        }
    }
    owners
}

/// Tight pixel-bounds box of the object's rendered silhouette, clipped to the
/// frame. Errors when no silhouette pixel lands inside the frame.
pub fn project_bbox(
    obj: &SceneObject,
    jitter: CameraJitter,
    cfg: &GenConfig,
    tag: ImageTag,
) -> Result<BBox, RasterError> {
    let tf = ViewTransform::new(jitter, cfg);
    let (cx, cy) = tf.map(obj.x, obj.y);
    let r = obj.radius_px(cfg) * tf.scale;
    let s = cfg.raster_size as isize;
    let lo_col = ((cx - r - 1.0).floor() as isize).max(0);
    let hi_col = ((cx + r + 1.0).ceil() as isize).min(s - 1);
    let lo_row = ((cy - r - 1.0).floor() as isize).max(0);
    let hi_row = ((cy + r + 1.0).ceil() as isize).min(s - 1);
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for row in lo_row..=hi_row {
        for col in lo_col..=hi_col {
            if row < 0 || col < 0 {
                continue;
            }
            let px = col as f64 + 0.5;
            let py = row as f64 + 0.5;
            if silhouette_contains(obj, cfg, &tf, px, py) {
                let (row, col) = (row as usize, col as usize);
                bounds = Some(match bounds {
                    None => (col, row, col, row),
                    Some((x0, y0, x1, y1)) => (x0.min(col), y0.min(row), x1.max(col), y1.max(row)),
                });
            }
        }
    }
    match bounds {
        Some((x0, y0, x1, y1)) => Ok(BBox {
            x_min: x0 as u32,
            y_min: y0 as u32,
            x_max: (x1 + 1) as u32,
            y_max: (y1 + 1) as u32,
            image_tag: tag,
        }),
        None => Err(RasterError::OutOfFrame { object_id: obj.id }),
    }
}

/// Viewpoint difficulty: mean IoU of unchanged objects' boxes between the
/// identity-rendered "before" view and the jittered "after" view. Lower means
/// harder. An unchanged object pushed fully out of either frame contributes
/// zero. `None` when the pair has no unchanged object.
pub fn viewpoint_difficulty(
    before: &Scene,
    after: &Scene,
    record: &ChangeRecord,
    jitter: CameraJitter,
    cfg: &GenConfig,
) -> Option<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for b_obj in &before.objects {
        if Some(b_obj.id) == record.target_object_id {
            continue;
        }
        let Some(a_obj) = after.object(b_obj.id) else { continue };
        count += 1;
        let b_box = project_bbox(b_obj, CameraJitter::IDENTITY, cfg, ImageTag::Before);
        let a_box = project_bbox(a_obj, jitter, cfg, ImageTag::After);
        if let (Ok(b_box), Ok(a_box)) = (b_box, a_box) {
            total += b_box.iou(&a_box);
        }
    }
    if count == 0 {
        return None;
    }
    Some(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{ChangeType, Color, Material, Size};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> GenConfig {
        GenConfig::default()
    }

    fn obj(id: u32, shape: Shape, color: Color, material: Material, size: Size, x: f64, y: f64) -> SceneObject {
        SceneObject { id, shape, color, material, size, x, y }
    }

    fn single(objdef: SceneObject) -> Scene {
        Scene { objects: vec![objdef], seed: 0 }
    }

    #[test]
    fn identity_jitter_gives_identity_transform() {
        let tf = ViewTransform::new(CameraJitter::IDENTITY, &cfg());
        assert_eq!(tf.scale, 1.0);
        assert_eq!((tf.tx, tf.ty), (0.0, 0.0));
        assert_eq!(tf.brightness, 1.0);
        let (x, y) = tf.map(0.5, 0.25);
        assert!((x - 32.0).abs() < 1e-12 && (y - 16.0).abs() < 1e-12);
    }

    #[test]
    fn scale_formula_exact() {
        let cfg = GenConfig { kappa_s: 0.1, ..cfg() };
        let tf = ViewTransform::new(CameraJitter { dx: 0.0, dy: 0.0, dz: 2.0 }, &cfg);
        assert_eq!(tf.scale, 1.2);
    }

    #[test]
    fn empty_scene_renders_uniform_background() {
        let scene = Scene { objects: vec![], seed: 0 };
        let img = render(&scene, CameraJitter::IDENTITY, &cfg());
        for row in 0..img.height {
            for col in 0..img.width {
                assert_eq!(img.pixel(col, row), BACKGROUND);
            }
        }
    }

    #[test]
    fn centered_large_red_cube_renders_centered_square() {
        let cfg = cfg();
        let scene = single(obj(0, Shape::Cube, Color::Red, Material::Rubber, Size::Large, 0.5, 0.5));
        let img = render(&scene, CameraJitter::IDENTITY, &cfg);
        let bbox = project_bbox(&scene.objects[0], CameraJitter::IDENTITY, &cfg, ImageTag::Before)
            .unwrap();
        // Half-side 10/sqrt(2) = 7.07 px about pixel coordinate 32: columns 25..=38.
        assert_eq!((bbox.x_min, bbox.x_max, bbox.y_min, bbox.y_max), (25, 39, 25, 39));
        assert_eq!(bbox.width(), bbox.height());
        let red = Color::Red.rgb();
        for row in 0..img.height {
            for col in 0..img.width {
                let inside = bbox.contains_pixel(col as u32, row as u32);
                let px = img.pixel(col, row);
                if inside {
                    assert_eq!(px, red, "pixel ({col},{row}) should be red");
                } else {
                    assert_eq!(px, BACKGROUND, "pixel ({col},{row}) should be background");
                }
            }
        }
    }

    #[test]
    fn sphere_renders_a_disc_not_a_square() {
        let cfg = cfg();
        let scene =
            single(obj(0, Shape::Sphere, Color::Blue, Material::Rubber, Size::Large, 0.5, 0.5));
        let img = render(&scene, CameraJitter::IDENTITY, &cfg);
        let b = project_bbox(&scene.objects[0], CameraJitter::IDENTITY, &cfg, ImageTag::Before)
            .unwrap();
        let blue = Color::Blue.rgb();
        // Center pixel lit, bounding-box corner dark (disc curvature).
        assert_eq!(img.pixel(32, 32), blue);
        assert_eq!(img.pixel(b.x_min as usize, b.y_min as usize), BACKGROUND);
        // Cardinal extremes of the center row/column are lit.
        assert_eq!(img.pixel(b.x_min as usize, 32), blue);
        assert_eq!(img.pixel(32, b.y_min as usize), blue);
    }

    #[test]
    fn cylinder_renders_taller_than_wide() {
        let cfg = cfg();
        let scene =
            single(obj(0, Shape::Cylinder, Color::Cyan, Material::Rubber, Size::Large, 0.5, 0.5));
        let b = project_bbox(&scene.objects[0], CameraJitter::IDENTITY, &cfg, ImageTag::Before)
            .unwrap();
        assert!(b.height() > b.width(), "bar should be vertical: {b:?}");
    }

    #[test]
    fn metal_objects_show_alternating_row_stripes() {
        let cfg = cfg();
        let scene = single(obj(0, Shape::Cube, Color::Yellow, Material::Metal, Size::Large, 0.5, 0.5));
        let img = render(&scene, CameraJitter::IDENTITY, &cfg);
        let full = Color::Yellow.rgb();
        let dark = [full[0] * METAL_STRIPE, full[1] * METAL_STRIPE, full[2] * METAL_STRIPE];
        assert_eq!(img.pixel(32, 32), full); // even row
        assert_eq!(img.pixel(32, 33), dark); // odd row
        assert_eq!(img.pixel(32, 34), full);
    }

    #[test]
    fn later_listed_objects_occlude_earlier() {
        let cfg = cfg();
        // Hand-built overlapping pair; the sampler never produces overlaps, so
        // construct the scene directly.
        let scene = Scene {
            objects: vec![
                obj(0, Shape::Cube, Color::Red, Material::Rubber, Size::Large, 0.5, 0.5),
                obj(1, Shape::Cube, Color::Green, Material::Rubber, Size::Large, 0.52, 0.5),
            ],
            seed: 0,
        };
        let img = render(&scene, CameraJitter::IDENTITY, &cfg);
        // Overlap region: both contain pixel near x=0.51*64.
        assert_eq!(img.pixel(33, 32), Color::Green.rgb());
        let owners = owner_map(&scene, CameraJitter::IDENTITY, &cfg);
        assert_eq!(owners[32 * 64 + 33], Some(1));
        // The leftmost column of the red cube is outside the green one.
        assert_eq!(img.pixel(25, 32), Color::Red.rgb());
        assert_eq!(owners[32 * 64 + 25], Some(0));
    }

    #[test]
    fn centroid_displaced_exactly_by_translation() {
        let cfg = cfg();
        // kappa_t * (dx, dy) = (2, -1) px: integer shift, rigid pixel translation.
        let jitter = CameraJitter { dx: 0.5, dy: -0.25, dz: 0.0 };
        let scene =
            single(obj(0, Shape::Sphere, Color::Purple, Material::Rubber, Size::Large, 0.5, 0.5));
        let centroid = |img: &Image| {
            let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
            for row in 0..img.height {
                for col in 0..img.width {
                    if img.pixel(col, row) != BACKGROUND {
                        sx += col as f64;
                        sy += row as f64;
                        n += 1.0;
                    }
                }
            }
            (sx / n, sy / n)
        };
        let base = centroid(&render(&scene, CameraJitter::IDENTITY, &cfg));
        let moved = centroid(&render(&scene, jitter, &cfg));
        assert!((moved.0 - base.0 - 2.0).abs() < 1e-9, "dx: {} vs {}", moved.0, base.0);
        assert!((moved.1 - base.1 + 1.0).abs() < 1e-9, "dy: {} vs {}", moved.1, base.1);
    }

    #[test]
    fn brightness_scales_and_clamps() {
        let cfg = cfg();
        let scene = single(obj(0, Shape::Cube, Color::Yellow, Material::Rubber, Size::Large, 0.5, 0.5));
        let dim = render(&scene, CameraJitter { dx: 0.0, dy: 0.0, dz: -2.0 }, &cfg);
        let bright = render(&scene, CameraJitter { dx: 0.0, dy: 0.0, dz: 2.0 }, &cfg);
        let y = Color::Yellow.rgb();
        // dz = -2 with kappa_b = 0.1 dims to 0.8x.
        let center_dim = dim.pixel(32, 32);
        assert!((center_dim[0] - y[0] * 0.8).abs() < 1e-12);
        // dz = +2 brightens to 1.2x; the red channel (1.0) clamps at 1.
        let center_bright = bright.pixel(32, 32);
        assert_eq!(center_bright[0], 1.0);
        assert!((center_bright[2] - y[2] * 1.2).abs() < 1e-12);
        for v in dim.samples.iter().chain(&bright.samples) {
            assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn bbox_matches_full_render_mask_bounds() {
        let cfg = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for trial in 0..200u64 {
            let scene = crate::scene::sample_scene(&mut rng, &cfg, trial).unwrap();
            let jitter = crate::scene::jitter_camera(&mut rng);
            let owners = owner_map(&scene, jitter, &cfg);
            for objdef in &scene.objects {
                let bbox = match project_bbox(objdef, jitter, &cfg, ImageTag::After) {
                    Ok(b) => b,
                    Err(RasterError::OutOfFrame { .. }) => continue,
                };
                // Objects never overlap, so the owner map's pixel set for this
                // id must have exactly the projected bounds.
                let s = cfg.raster_size;
                let mut seen: Option<(u32, u32, u32, u32)> = None;
                for row in 0..s {
                    for col in 0..s {
                        if owners[row * s + col] == Some(objdef.id) {
                            let (c, r) = (col as u32, row as u32);
                            seen = Some(match seen {
                                None => (c, r, c, r),
                                Some((x0, y0, x1, y1)) => {
                                    (x0.min(c), y0.min(r), x1.max(c), y1.max(r))
                                }
                            });
                        }
                    }
                }
                let (x0, y0, x1, y1) = seen.expect("in-frame object must own pixels");
                assert_eq!(
                    (bbox.x_min, bbox.y_min, bbox.x_max, bbox.y_max),
                    (x0, y0, x1 + 1, y1 + 1),
                    "trial {trial} object {}",
                    objdef.id
                );
            }
        }
    }

    #[test]
    fn out_of_frame_object_errors() {
        let cfg = GenConfig { kappa_t: 40.0, ..cfg() };
        let jitter = CameraJitter { dx: 2.0, dy: 0.0, dz: 0.0 }; // 80 px shift
        let o = obj(3, Shape::Sphere, Color::Gray, Material::Rubber, Size::Small, 0.5, 0.5);
        assert!(matches!(
            project_bbox(&o, jitter, &cfg, ImageTag::After),
            Err(RasterError::OutOfFrame { object_id: 3 })
        ));
    }

    #[test]
    fn iou_hand_cases() {
        let mk = |x0, y0, x1, y1| BBox {
            x_min: x0,
            y_min: y0,
            x_max: x1,
            y_max: y1,
            image_tag: ImageTag::Before,
        };
        let a = mk(0, 0, 10, 10);
        let b = mk(5, 5, 15, 15);
        assert!((a.iou(&b) - 25.0 / 175.0).abs() < 1e-12);
        let c = mk(0, 0, 4, 4);
        assert_eq!(c.iou(&c), 1.0);
        let d = mk(20, 20, 30, 30);
        assert_eq!(a.iou(&d), 0.0);
        // Mean of the two hand IoUs: the worked difficulty example.
        let mean = (a.iou(&b) + c.iou(&c)) / 2.0;
        assert!((mean - 0.5714285714285714).abs() < 1e-10);
    }

    #[test]
    fn difficulty_identity_is_one_and_disjoint_is_zero() {
        let cfg = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let scene = crate::scene::sample_scene(&mut rng, &cfg, 77).unwrap();
        let record = ChangeRecord {
            change_type: ChangeType::Distractor,
            target_object_id: None,
            old_value: None,
            new_value: None,
        };
        let d = viewpoint_difficulty(&scene, &scene, &record, CameraJitter::IDENTITY, &cfg)
            .unwrap();
        assert_eq!(d, 1.0);
        // A violent translation leaves zero overlap for every object.
        let wild = GenConfig { kappa_t: 40.0, ..cfg };
        let d0 = viewpoint_difficulty(
            &scene,
            &scene,
            &record,
            CameraJitter { dx: 2.0, dy: 2.0, dz: 0.0 },
            &wild,
        )
        .unwrap();
        assert_eq!(d0, 0.0);
    }

    #[test]
    fn difficulty_excludes_change_targets() {
        let cfg = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let scene = crate::scene::sample_scene(&mut rng, &cfg, 13).unwrap();
        let (after, record) =
            crate::scene::apply_change(&scene, ChangeType::Move, &mut rng, &cfg).unwrap();
        // With identity jitter every unchanged box matches exactly; the moved
        // target must not drag the mean below 1.
        let d = viewpoint_difficulty(&scene, &after, &record, CameraJitter::IDENTITY, &cfg)
            .unwrap();
        assert_eq!(d, 1.0);
    }
}
