//! Procedural multi-rendering scenes and locking-aware example sampling.
//!
//! A scene holds 1–4 glyph subjects with fixed identities (shape, hue,
//! pattern) rendered three times with different poses over a background
//! whose hue is named by the prompt. Every rendering is a stack of
//! full-canvas RGBA layers: the background at index 0, subject `i` at `i+1`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgba, RgbaImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canvas::{compose_collage, Layer, LayeredCanvas, PromptAttrs};
use crate::color::hsv_to_rgb;
use crate::model::{hue_degrees, ARRANGEMENT_TOKENS, HUE_TOKENS};
use crate::parallel::par_map_range;

pub const RENDERINGS: usize = 3;
pub const MAX_SUBJECTS: usize = 4;
/// Minimum opaque pixels for a subject raster.
const MIN_OPAQUE: usize = 16;
const POSE_ATTEMPTS: usize = 64;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("scene has {0} renderings, sampling needs at least 2")]
    TooFewRenderings(usize),
    #[error("probability {name} = {value} outside [0, 1]")]
    Probability { name: &'static str, value: f64 },
    #[error("augmentation magnitudes must be non-negative")]
    Augment,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

pub const SHAPES: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross];

impl Shape {
    /// Membership test in the glyph's unit frame (`y` points down).
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Circle => u * u + v * v <= 1.0,
            Shape::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
            Shape::Triangle => (-0.9..=0.6).contains(&v) && u.abs() <= 0.9 * (v + 0.9) / 1.5,
            Shape::Cross => (u.abs() <= 0.3 && v.abs() <= 0.9) || (v.abs() <= 0.3 && u.abs() <= 0.9),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Solid,
    Striped,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Identity {
    pub shape: Shape,
    /// Degrees in `[0, 360)`.
    pub hue: f64,
    pub pattern: Pattern,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// Centre in pixels.
    pub x: f64,
    pub y: f64,
    pub scale: f64,
    pub rotation_deg: f64,
}

/// Per-rendering background lighting: overall gain plus a linear ramp.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lighting {
    pub gain: f64,
    pub ramp_x: f64,
    pub ramp_y: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub width: u32,
    pub height: u32,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rendering {
    /// Background first, then one layer per identity.
    pub layers: Vec<RgbaImage>,
    pub composite: RgbImage,
}

/// Everything needed to re-render a scene; this is `scene.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub scene_id: u64,
    pub width: u32,
    pub height: u32,
    pub prompt: PromptAttrs,
    pub identities: Vec<Identity>,
    pub lighting: Vec<Lighting>,
    /// `poses[k][i]`: subject `i` in rendering `k`.
    pub poses: Vec<Vec<Pose>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub meta: SceneMeta,
    pub renderings: Vec<Rendering>,
}

impl Scene {
    pub fn layer_count(&self) -> usize {
        self.meta.identities.len() + 1
    }
}

pub fn layer_id(index: usize) -> String {
    if index == 0 {
        "background".to_string()
    } else {
        format!("subject_{}", index - 1)
    }
}

pub fn render_subject(identity: &Identity, pose: &Pose, width: u32, height: u32) -> RgbaImage {
    let r = base_radius(width, height) * pose.scale;
    let (sin, cos) = pose.rotation_deg.to_radians().sin_cos();
    RgbaImage::from_fn(width, height, |px, py| {
        let dx = px as f64 + 0.5 - pose.x;
        let dy = py as f64 + 0.5 - pose.y;
        let u = (dx * cos + dy * sin) / r;
        let v = (-dx * sin + dy * cos) / r;
        if !identity.shape.contains(u, v) {
            return Rgba([0, 0, 0, 0]);
        }
        let value = match identity.pattern {
            Pattern::Solid => 0.9,
            Pattern::Striped if ((u + 2.0) * 2.5).floor() as i64 % 2 == 0 => 0.9,
            Pattern::Striped => 0.55,
        };
        let [r, g, b] = hsv_to_rgb(identity.hue, 0.85, value);
        Rgba([r, g, b, 255])
    })
}

pub fn render_background(hue: f64, light: &Lighting, width: u32, height: u32) -> RgbaImage {
    RgbaImage::from_fn(width, height, |x, y| {
        let fx = (x as f64 + 0.5) / width as f64 - 0.5;
        let fy = (y as f64 + 0.5) / height as f64 - 0.5;
        let v = (0.55 * light.gain * (1.0 + light.ramp_x * fx + light.ramp_y * fy)).clamp(0.0, 1.0);
        let [r, g, b] = hsv_to_rgb(hue, 0.45, v);
        Rgba([r, g, b, 255])
    })
}

fn base_radius(width: u32, height: u32) -> f64 {
    0.18 * width.min(height) as f64
}

fn opaque_count(img: &RgbaImage) -> usize {
    img.pixels().filter(|p| p.0[3] > 0).count()
}

fn bbox(img: &RgbaImage) -> Option<(u32, u32, u32, u32)> {
    let mut b: Option<(u32, u32, u32, u32)> = None;
    for (x, y, p) in img.enumerate_pixels() {
        if p.0[3] > 0 {
            b = Some(match b {
                None => (x, y, x, y),
                Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
            });
        }
    }
    b
}

/// Inclusive opaque bounding box `(x0, y0, x1, y1)`.
pub fn opaque_bbox(img: &RgbaImage) -> Option<(u32, u32, u32, u32)> {
    bbox(img)
}

fn non_degenerate(img: &RgbaImage) -> bool {
    opaque_count(img) >= MIN_OPAQUE
        && bbox(img).is_some_and(|(x0, y0, x1, y1)| x1 - x0 + 1 >= 4 && y1 - y0 + 1 >= 4)
}

fn arrangement_anchor(arrangement: &str, i: usize, n: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let f = (i as f64 + 0.5) / n as f64;
    match arrangement {
        "row" => (f, 0.5),
        "column" => (0.5, f),
        "diagonal" => (f, f),
        _ => (rng.random_range(0.2..=0.8), rng.random_range(0.2..=0.8)),
    }
}

pub fn render_scene(meta: &SceneMeta) -> Scene {
    let hue = hue_degrees(&meta.prompt.background_hue).unwrap_or(0.0);
    let renderings = meta
        .poses
        .iter()
        .zip(&meta.lighting)
        .map(|(poses, light)| {
            let mut layers = vec![render_background(hue, light, meta.width, meta.height)];
            layers.extend(
                meta.identities
                    .iter()
                    .zip(poses)
                    .map(|(id, pose)| render_subject(id, pose, meta.width, meta.height)),
            );
            let composite = composite_layers(&layers, meta.width, meta.height);
            Rendering { layers, composite }
        })
        .collect();
    Scene {
        meta: meta.clone(),
        renderings,
    }
}

fn composite_layers(layers: &[RgbaImage], width: u32, height: u32) -> RgbImage {
    let canvas = LayeredCanvas {
        width,
        height,
        prompt: PromptAttrs::default(),
        layers: layers
            .iter()
            .enumerate()
            .map(|(i, l)| Layer {
                id: layer_id(i),
                rgba: l.clone(),
                locked: false,
                z_order: i as i32,
            })
            .collect(),
    };
    compose_collage(&canvas).expect("scene layers share the canvas size")
}

/// Deterministic in `(seed, cfg)`. Poses and lighting are redrawn until no
/// layer repeats a raster from an earlier rendering, so the renderings of a
/// scene never share a pixel-identical layer.
pub fn gen_scene(seed: u64, cfg: &SceneConfig) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (cfg.width, cfg.height);
    let n = rng.random_range(1..=MAX_SUBJECTS);
    let (hue_token, hue) = HUE_TOKENS[rng.random_range(0..HUE_TOKENS.len())];
    let arrangement = ARRANGEMENT_TOKENS[rng.random_range(0..ARRANGEMENT_TOKENS.len())];
    let identities: Vec<Identity> = (0..n)
        .map(|_| Identity {
            shape: SHAPES[rng.random_range(0..SHAPES.len())],
            hue: rng.random_range(0.0..360.0),
            pattern: if rng.random_bool(0.5) {
                Pattern::Solid
            } else {
                Pattern::Striped
            },
        })
        .collect();
    let anchors: Vec<(f64, f64)> = (0..n)
        .map(|i| arrangement_anchor(arrangement, i, n, &mut rng))
        .collect();

    let r0 = base_radius(w, h);
    let mut lighting: Vec<Lighting> = Vec::new();
    let mut backgrounds: Vec<RgbaImage> = Vec::new();
    let mut poses: Vec<Vec<Pose>> = Vec::new();
    let mut rasters: Vec<Vec<RgbaImage>> = vec![Vec::new(); n];
    for _ in 0..RENDERINGS {
        let (light, bg) = redraw(&mut rng, &backgrounds, |rng| {
            let light = Lighting {
                gain: rng.random_range(0.85..=1.15),
                ramp_x: rng.random_range(-0.3..=0.3),
                ramp_y: rng.random_range(-0.3..=0.3),
            };
            let bg = render_background(hue, &light, w, h);
            (light, bg, true)
        });
        lighting.push(light);
        backgrounds.push(bg);
        let mut row = Vec::with_capacity(n);
        for (i, id) in identities.iter().enumerate() {
            let (ax, ay) = anchors[i];
            let (pose, raster) = redraw(&mut rng, &rasters[i], |rng| {
                let clamp_x = |x: f64| x.clamp(r0, w as f64 - r0);
                let clamp_y = |y: f64| y.clamp(r0, h as f64 - r0);
                let pose = Pose {
                    x: clamp_x(ax * w as f64 + rng.random_range(-0.25..=0.25) * w as f64),
                    y: clamp_y(ay * h as f64 + rng.random_range(-0.25..=0.25) * h as f64),
                    scale: rng.random_range(0.7..=1.3),
                    rotation_deg: rng.random_range(-30.0..=30.0),
                };
                let raster = render_subject(id, &pose, w, h);
                let ok = non_degenerate(&raster);
                (pose, raster, ok)
            });
            rasters[i].push(raster);
            row.push(pose);
        }
        poses.push(row);
    }
    render_scene(&SceneMeta {
        scene_id: seed,
        width: w,
        height: h,
        prompt: PromptAttrs {
            background_hue: hue_token.to_string(),
            arrangement: arrangement.to_string(),
        },
        identities,
        lighting,
        poses,
    })
}

/// Draws until the raster is acceptable and differs from every earlier one;
/// after `POSE_ATTEMPTS` the last draw is kept.
fn redraw<P>(
    rng: &mut ChaCha8Rng,
    earlier: &[RgbaImage],
    mut draw: impl FnMut(&mut ChaCha8Rng) -> (P, RgbaImage, bool),
) -> (P, RgbaImage) {
    let mut attempt = 0;
    loop {
        let (p, raster, ok) = draw(rng);
        attempt += 1;
        if (ok && !earlier.contains(&raster)) || attempt >= POSE_ATTEMPTS {
            return (p, raster);
        }
    }
}

/// Seed of scene `index` in a dataset drawn from `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64)
        .rotate_left(17)
}

pub fn gen_dataset(seed: u64, scenes: usize, cfg: &SceneConfig) -> Vec<Scene> {
    par_map_range(scenes, |i| gen_scene(scene_seed(seed, i), cfg))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Scale factor drawn from `[1 − scale, 1 + scale]`.
    pub scale: f64,
    /// Integer shift drawn from `[−shift, shift]` on each axis.
    pub shift: i32,
    /// Per-channel colour gain drawn from `[1 − color, 1 + color]`.
    pub color: f64,
    /// Also apply scale and shift to locked layers (breaks pixel alignment).
    pub geometric_on_locked: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale: 0.1,
            shift: 2,
            color: 0.1,
            geometric_on_locked: false,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            scale: 0.0,
            shift: 0,
            color: 0.0,
            geometric_on_locked: false,
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        if self.scale < 0.0 || self.shift < 0 || self.color < 0.0 || !self.scale.is_finite() || !self.color.is_finite() {
            return Err(SynthError::Augment);
        }
        Ok(())
    }
}

/// Scales about the opaque bounding-box centre, then shifts by `(dx, dy)`
/// pixels. Nearest-neighbour; pixels mapped from outside are transparent.
pub fn transform_layer(img: &RgbaImage, scale: f64, dx: i32, dy: i32) -> RgbaImage {
    let Some((x0, y0, x1, y1)) = bbox(img) else {
        return img.clone();
    };
    let cx = (x0 + x1 + 1) as f64 / 2.0;
    let cy = (y0 + y1 + 1) as f64 / 2.0;
    let (w, h) = img.dimensions();
    RgbaImage::from_fn(w, h, |x, y| {
        let sx = ((x as f64 + 0.5 - dx as f64 - cx) / scale + cx).floor();
        let sy = ((y as f64 + 0.5 - dy as f64 - cy) / scale + cy).floor();
        if sx < 0.0 || sy < 0.0 || sx >= w as f64 || sy >= h as f64 {
            Rgba([0, 0, 0, 0])
        } else {
            *img.get_pixel(sx as u32, sy as u32)
        }
    })
}

/// Multiplies RGB by per-channel gains, rounding and clamping; alpha is kept.
pub fn color_gain(img: &RgbaImage, gains: [f64; 3]) -> RgbaImage {
    let mut out = img.clone();
    for p in out.pixels_mut() {
        for c in 0..3 {
            p.0[c] = (p.0[c] as f64 * gains[c]).round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

/// Locked layers get colour gain only unless `geometric_on_locked` is set.
/// The same random draws are made either way.
pub fn augment_layer(img: &RgbaImage, locked: bool, cfg: &AugmentConfig, rng: &mut impl Rng) -> RgbaImage {
    let scale = rng.random_range(1.0 - cfg.scale..=1.0 + cfg.scale);
    let dx = rng.random_range(-cfg.shift..=cfg.shift);
    let dy = rng.random_range(-cfg.shift..=cfg.shift);
    let gains = [(); 3].map(|_| rng.random_range(1.0 - cfg.color..=1.0 + cfg.color));
    let geometric = !locked || cfg.geometric_on_locked;
    let moved = if geometric && (scale != 1.0 || dx != 0 || dy != 0) {
        transform_layer(img, scale, dx, dy)
    } else {
        img.clone()
    };
    color_gain(&moved, gains)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub p_lock: f64,
    /// Probability that the background appears on the canvas at all. It is
    /// always part of the target.
    pub p_background: f64,
    pub augment: AugmentConfig,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            p_lock: 0.5,
            p_background: 0.8,
            augment: AugmentConfig::default(),
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        for (name, value) in [("p_lock", self.p_lock), ("p_background", self.p_background)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(SynthError::Probability { name, value });
            }
        }
        self.augment.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LayerProvenance {
    /// 0 for the background, `i + 1` for subject `i`.
    pub layer_index: usize,
    pub source_rendering: usize,
    pub locked: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub canvas: LayeredCanvas,
    pub target: RgbImage,
    pub prompt: PromptAttrs,
    pub target_index: usize,
    /// Parallel to `canvas.layers`.
    pub provenance: Vec<LayerProvenance>,
    /// The target rendering's layers, indexed by `layer_index`.
    pub reference_layers: Vec<RgbaImage>,
    pub identities: Vec<Identity>,
}

impl TrainingExample {
    pub fn locked_fraction(&self) -> f64 {
        if self.provenance.is_empty() {
            return 0.0;
        }
        self.provenance.iter().filter(|p| p.locked).count() as f64 / self.provenance.len() as f64
    }
}

/// Assembles a canvas from explicit per-layer choices:
/// `(layer_index, source_rendering, locked)`.
pub fn build_example(
    scene: &Scene,
    target_index: usize,
    choices: &[LayerProvenance],
    augment: &AugmentConfig,
    rng: &mut impl Rng,
) -> TrainingExample {
    let layers = choices
        .iter()
        .map(|c| Layer {
            id: layer_id(c.layer_index),
            rgba: augment_layer(
                &scene.renderings[c.source_rendering].layers[c.layer_index],
                c.locked,
                augment,
                rng,
            ),
            locked: c.locked,
            z_order: c.layer_index as i32,
        })
        .collect();
    let target = &scene.renderings[target_index];
    TrainingExample {
        canvas: LayeredCanvas {
            width: scene.meta.width,
            height: scene.meta.height,
            layers,
            prompt: scene.meta.prompt.clone(),
        },
        target: target.composite.clone(),
        prompt: scene.meta.prompt.clone(),
        target_index,
        provenance: choices.to_vec(),
        reference_layers: target.layers.clone(),
        identities: scene.meta.identities.clone(),
    }
}

/// Picks a target rendering uniformly; each layer is locked with
/// probability `p_lock` (taken from the target) or else taken from a
/// uniformly chosen other rendering.
pub fn sample_example(
    scene: &Scene,
    cfg: &SamplingConfig,
    rng: &mut impl Rng,
) -> Result<TrainingExample, SynthError> {
    cfg.validate()?;
    let m = scene.renderings.len();
    if m < 2 {
        return Err(SynthError::TooFewRenderings(m));
    }
    let target = rng.random_range(0..m);
    let mut choices = Vec::with_capacity(scene.layer_count());
    for index in 0..scene.layer_count() {
        if index == 0 && !rng.random_bool(cfg.p_background) {
            continue;
        }
        let locked = rng.random_bool(cfg.p_lock);
        let source = if locked {
            target
        } else {
            let k = rng.random_range(0..m - 1);
            if k >= target {
                k + 1
            } else {
                k
            }
        };
        choices.push(LayerProvenance {
            layer_index: index,
            source_rendering: source,
            locked,
        });
    }
    Ok(build_example(scene, target, &choices, &cfg.augment, rng))
}

/// Best-IoU glyph for `alpha` given the pose it was rendered with.
pub fn classify_shape(layer: &RgbaImage, pose: &Pose) -> Shape {
    let (w, h) = layer.dimensions();
    let iou = |shape: Shape| {
        let template = render_subject(
            &Identity {
                shape,
                hue: 0.0,
                pattern: Pattern::Solid,
            },
            pose,
            w,
            h,
        );
        let (mut inter, mut union) = (0usize, 0usize);
        for (a, b) in layer.pixels().zip(template.pixels()) {
            let (a, b) = (a.0[3] > 0, b.0[3] > 0);
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        inter as f64 / union.max(1) as f64
    };
    SHAPES
        .into_iter()
        .max_by(|a, b| iou(*a).total_cmp(&iou(*b)))
        .expect("non-empty shape list")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_owned(),
        source,
    }
}

fn format_err(path: &Path, message: impl ToString) -> SynthError {
    SynthError::Format {
        path: path.to_owned(),
        message: message.to_string(),
    }
}

/// Writes `scene_<id>/rendering_<k>/layer_<n>.png` and `scene_<id>/scene.json`.
pub fn dump_scene(scene: &Scene, root: &Path) -> Result<PathBuf, SynthError> {
    let dir = root.join(format!("scene_{}", scene.meta.scene_id));
    for (k, r) in scene.renderings.iter().enumerate() {
        let rdir = dir.join(format!("rendering_{k}"));
        fs::create_dir_all(&rdir).map_err(io_err(&rdir))?;
        for (n, layer) in r.layers.iter().enumerate() {
            let path = rdir.join(format!("layer_{n}.png"));
            layer.save(&path).map_err(|e| format_err(&path, e))?;
        }
    }
    let path = dir.join("scene.json");
    let json = serde_json::to_vec_pretty(&scene.meta).expect("scene metadata serializes");
    fs::write(&path, json).map_err(io_err(&path))?;
    Ok(dir)
}

pub fn load_scene(dir: &Path) -> Result<Scene, SynthError> {
    let path = dir.join("scene.json");
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let meta: SceneMeta = serde_json::from_slice(&bytes).map_err(|e| format_err(&path, e))?;
    if meta.poses.len() != meta.lighting.len() || meta.poses.iter().any(|p| p.len() != meta.identities.len()) {
        return Err(format_err(&path, "poses, lighting and identities disagree"));
    }
    let mut renderings = Vec::with_capacity(meta.poses.len());
    for k in 0..meta.poses.len() {
        let layers = (0..=meta.identities.len())
            .map(|n| {
                let path = dir.join(format!("rendering_{k}/layer_{n}.png"));
                let img = image::open(&path).map_err(|e| format_err(&path, e))?.to_rgba8();
                if img.dimensions() != (meta.width, meta.height) {
                    return Err(format_err(&path, "layer size does not match scene"));
                }
                Ok(img)
            })
            .collect::<Result<Vec<_>, SynthError>>()?;
        let composite = composite_layers(&layers, meta.width, meta.height);
        renderings.push(Rendering { layers, composite });
    }
    Ok(Scene { meta, renderings })
}

pub fn dump_dataset(scenes: &[Scene], root: &Path) -> Result<(), SynthError> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    for s in scenes {
        dump_scene(s, root)?;
    }
    Ok(())
}

/// Loads every `scene_<id>` directory under `root`, ordered by id.
pub fn load_dataset(root: &Path) -> Result<Vec<Scene>, SynthError> {
    let mut dirs: Vec<(u64, PathBuf)> = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let entry = entry.map_err(io_err(root))?;
        let name = entry.file_name();
        if let Some(id) = name.to_str().and_then(|n| n.strip_prefix("scene_")).and_then(|n| n.parse().ok()) {
            dirs.push((id, entry.path()));
        }
    }
    dirs.sort();
    dirs.iter().map(|(_, d)| load_scene(d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canvas::compose_collage;
    use crate::color::{hue_distance, rgb_to_hsv};

    fn cfg() -> SceneConfig {
        SceneConfig::default()
    }

    #[test]
    fn deterministic_and_well_formed() {
        for seed in 0..20 {
            let a = gen_scene(seed, &cfg());
            assert_eq!(a, gen_scene(seed, &cfg()));
            let n = a.meta.identities.len();
            assert!((1..=4).contains(&n));
            assert_eq!(a.renderings.len(), RENDERINGS);
            for r in &a.renderings {
                assert_eq!(r.layers.len(), n + 1);
                assert!(r.layers[0].pixels().all(|p| p.0[3] == 255));
                assert!(r.layers[1..].iter().all(non_degenerate));
            }
        }
    }

    #[test]
    fn background_hue_matches_prompt() {
        let s = gen_scene(4, &cfg());
        let expected = hue_degrees(&s.meta.prompt.background_hue).unwrap();
        for r in &s.renderings {
            let (h, _, _) = rgb_to_hsv(r.layers[0].get_pixel(16, 16).0[..3].try_into().unwrap());
            assert!(hue_distance(h, expected) < 3.0);
        }
    }

    #[test]
    fn identities_measurable_across_renderings() {
        for seed in 0..10 {
            let s = gen_scene(seed, &cfg());
            for (k, r) in s.renderings.iter().enumerate() {
                for (i, id) in s.meta.identities.iter().enumerate() {
                    let layer = &r.layers[i + 1];
                    assert_eq!(classify_shape(layer, &s.meta.poses[k][i]), id.shape, "seed {seed}");
                    let hues: Vec<f64> = layer
                        .pixels()
                        .filter(|p| p.0[3] > 0)
                        .map(|p| rgb_to_hsv([p.0[0], p.0[1], p.0[2]]).0)
                        .collect();
                    assert!(hues.iter().all(|&h| hue_distance(h, id.hue) < 2.0));
                }
            }
        }
    }

    #[test]
    fn renderings_never_repeat_a_layer() {
        for seed in 0..30 {
            let s = gen_scene(seed, &cfg());
            for n in 0..s.layer_count() {
                for a in 0..RENDERINGS {
                    for b in a + 1..RENDERINGS {
                        assert_ne!(s.renderings[a].layers[n], s.renderings[b].layers[n]);
                    }
                }
            }
        }
    }

    #[test]
    fn composite_is_collage_of_layers() {
        let s = gen_scene(7, &cfg());
        let r = &s.renderings[1];
        assert_eq!(r.composite, composite_layers(&r.layers, 32, 32));
    }

    #[test]
    fn full_lock_is_lossless_relayering() {
        let s = gen_scene(11, &cfg());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = SamplingConfig {
            p_lock: 1.0,
            p_background: 1.0,
            augment: AugmentConfig::none(),
        };
        let ex = sample_example(&s, &c, &mut rng).unwrap();
        assert_eq!(compose_collage(&ex.canvas).unwrap(), ex.target);
        for (l, p) in ex.canvas.layers.iter().zip(&ex.provenance) {
            assert_eq!(l.rgba, ex.reference_layers[p.layer_index]);
        }
    }

    #[test]
    fn zero_lock_uses_other_renderings() {
        let s = gen_scene(12, &cfg());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = SamplingConfig {
            p_lock: 0.0,
            ..SamplingConfig::default()
        };
        for _ in 0..50 {
            let ex = sample_example(&s, &c, &mut rng).unwrap();
            assert!(ex.provenance.iter().all(|p| !p.locked && p.source_rendering != ex.target_index));
        }
    }

    #[test]
    fn lock_fraction_concentrates() {
        let s = gen_scene(13, &cfg());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = SamplingConfig {
            p_background: 1.0,
            augment: AugmentConfig::none(),
            ..SamplingConfig::default()
        };
        let (mut locked, mut total) = (0usize, 0usize);
        for _ in 0..10_000 {
            let ex = sample_example(&s, &c, &mut rng).unwrap();
            locked += ex.provenance.iter().filter(|p| p.locked).count();
            total += ex.provenance.len();
        }
        let f = locked as f64 / total as f64;
        assert!((f - 0.5).abs() < 0.02, "{f}");
    }

    #[test]
    fn sampling_errors() {
        let mut s = gen_scene(1, &cfg());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = SamplingConfig {
            p_lock: 1.5,
            ..SamplingConfig::default()
        };
        assert!(matches!(sample_example(&s, &bad, &mut rng), Err(SynthError::Probability { .. })));
        s.renderings.truncate(1);
        assert!(matches!(
            sample_example(&s, &SamplingConfig::default(), &mut rng),
            Err(SynthError::TooFewRenderings(1))
        ));
    }

    #[test]
    fn zero_augmentation_is_identity() {
        let s = gen_scene(3, &cfg());
        let img = &s.renderings[0].layers[1];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for locked in [false, true] {
            assert_eq!(&augment_layer(img, locked, &AugmentConfig::none(), &mut rng), img);
        }
    }

    #[test]
    fn locked_augmentation_keeps_geometry() {
        let s = gen_scene(3, &cfg());
        let img = &s.renderings[0].layers[1];
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let strong = AugmentConfig {
            scale: 0.3,
            shift: 4,
            color: 0.3,
            geometric_on_locked: false,
        };
        for _ in 0..20 {
            let out = augment_layer(img, true, &strong, &mut rng);
            assert!(out.pixels().zip(img.pixels()).all(|(a, b)| a.0[3] == b.0[3]));
        }
    }

    #[test]
    fn shift_translates_bounding_box() {
        let mut img = RgbaImage::new(32, 32);
        for y in 10..15 {
            for x in 26..30 {
                img.put_pixel(x, y, Rgba([9, 9, 9, 255]));
            }
        }
        let moved = transform_layer(&img, 1.0, 3, 0);
        assert_eq!(opaque_bbox(&moved), Some((29, 10, 31, 14)));
        let back = transform_layer(&img, 1.0, -3, 2);
        assert_eq!(opaque_bbox(&back), Some((23, 12, 26, 16)));
    }

    #[test]
    fn dump_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = gen_dataset(9, 3, &cfg());
        dump_dataset(&scenes, dir.path()).unwrap();
        let first = dir.path().join(format!("scene_{}", scenes[0].meta.scene_id));
        assert!(first.join("rendering_2/layer_0.png").exists());
        assert!(first.join("scene.json").exists());
        let mut loaded = load_dataset(dir.path()).unwrap();
        let mut expected = scenes.clone();
        loaded.sort_by_key(|s| s.meta.scene_id);
        expected.sort_by_key(|s| s.meta.scene_id);
        assert_eq!(loaded, expected);
    }
}
