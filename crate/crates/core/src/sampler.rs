//! Euler integration of the learned flow and desk-scale evaluation proxies.

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canvas::{validate_canvas, visible_mask, LayeredCanvas, PromptAttrs, Violation};
use crate::codec::{build_condition_sequence, decode_latents, CodecError, LatentGrid, TokenSequence};
use crate::color::{hue_distance, rgb_to_hsv};
use crate::model::{ModelError, VelocityField};
use crate::parallel::par_map_range;
use crate::synth::{build_example, AugmentConfig, LayerProvenance, Scene, TrainingExample};
use crate::train::gaussian_grid;

/// PSNR reported for an exact match.
pub const PSNR_CAP: f64 = 99.0;
/// Pixels below this saturation carry no usable hue.
const MIN_SATURATION: f64 = 0.15;
const MIN_VALUE: f64 = 0.1;
/// Fraction of a region that must be chromatic for a hue to be measured.
const MIN_CHROMATIC_FRACTION: f64 = 0.25;

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("steps must be at least 1")]
    NoSteps,
    #[error("invalid canvas: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Canvas(Vec<Violation>),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub steps: usize,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { steps: 16, seed: 0 }
    }
}

pub fn initial_noise(h: usize, w: usize, dim: usize, seed: u64) -> LatentGrid {
    gaussian_grid(h, w, dim, seed)
}

/// `z ← z + v(z, k/steps)/steps` for `k = 0..steps`, accumulated in f64.
pub fn euler_integrate(
    field: &impl VelocityField,
    z0: &LatentGrid,
    steps: usize,
    cond: &TokenSequence,
    prompt: &PromptAttrs,
) -> Result<LatentGrid, SampleError> {
    if steps == 0 {
        return Err(SampleError::NoSteps);
    }
    let mut z: Vec<f64> = z0.data.iter().map(|&v| v as f64).collect();
    let dt = 1.0 / steps as f64;
    let mut current = z0.clone();
    for k in 0..steps {
        let v = field.velocity(&current, k as f64 / steps as f64, cond, prompt)?;
        if !v.same_shape(&current) {
            return Err(ModelError::TokenDim {
                expected: current.dim,
                got: v.dim,
            }
            .into());
        }
        z.iter_mut().zip(&v.data).for_each(|(a, &b)| *a += dt * b as f64);
        current.data = z.iter().map(|&v| v as f32).collect();
    }
    Ok(current)
}

/// Generated image plus the condition sequence it was conditioned on.
pub struct Sample {
    pub image: RgbImage,
    pub cond: TokenSequence,
}

pub fn euler_sample(
    field: &impl VelocityField,
    canvas: &LayeredCanvas,
    patch: usize,
    cfg: &SampleConfig,
) -> Result<Sample, SampleError> {
    let violations = validate_canvas(canvas, patch);
    if !violations.is_empty() {
        return Err(SampleError::Canvas(violations));
    }
    let cond = build_condition_sequence(canvas, patch)?;
    let (h, w) = (canvas.height as usize / patch, canvas.width as usize / patch);
    let z0 = initial_noise(h, w, patch * patch * 3, cfg.seed);
    let z1 = euler_integrate(field, &z0, cfg.steps, &cond, &canvas.prompt)?;
    Ok(Sample {
        image: decode_latents(&z1, patch)?,
        cond,
    })
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// PSNR over the pixels where `mask` is set, all three channels; `None`
/// for an empty mask.
pub fn region_psnr(output: &RgbImage, reference: &RgbImage, mask: &[bool]) -> Option<f64> {
    let (mut sum, mut n) = (0.0f64, 0usize);
    for ((a, b), &m) in output.pixels().zip(reference.pixels()).zip(mask) {
        if m {
            for c in 0..3 {
                sum += (a.0[c] as f64 - b.0[c] as f64).powi(2);
            }
            n += 3;
        }
    }
    (n > 0).then(|| psnr_from_mse(sum / n as f64))
}

pub fn mean_abs_diff(a: &RgbImage, b: &RgbImage) -> f64 {
    let total: f64 = a
        .as_raw()
        .iter()
        .zip(b.as_raw())
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .sum();
    total / a.as_raw().len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerEval {
    pub layer_id: String,
    pub layer_index: usize,
    pub locked: bool,
    pub region_pixels: usize,
    /// `None` when the layer is not visible in the target.
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum HueStatus {
    Ok,
    EmptyRegion,
    /// Too few saturated pixels for a hue to exist.
    UndefinedSaturation,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubjectEval {
    pub layer_id: String,
    pub locked: bool,
    pub reference_hue: f64,
    pub measured_hue: Option<f64>,
    /// Circular distance in degrees, `[0, 180]`.
    pub hue_error: Option<f64>,
    pub status: HueStatus,
}

/// Region of reference layer `index` that is visible in the target.
pub fn target_region(example: &TrainingExample, index: usize) -> Vec<bool> {
    let refs: Vec<&image::RgbaImage> = example.reference_layers.iter().collect();
    visible_mask(&refs, index)
}

/// Per canvas layer: PSNR between `output` and the target over the part of
/// that layer visible in the target rendering.
pub fn eval_locked_fidelity(output: &RgbImage, example: &TrainingExample) -> Vec<LayerEval> {
    example
        .canvas
        .layers
        .iter()
        .zip(&example.provenance)
        .map(|(layer, p)| {
            let mask = target_region(example, p.layer_index);
            let n = mask.iter().filter(|&&m| m).count();
            let psnr = region_psnr(output, &example.target, &mask);
            LayerEval {
                layer_id: layer.id.clone(),
                layer_index: p.layer_index,
                locked: p.locked,
                region_pixels: n,
                psnr,
                note: psnr.is_none().then(|| "empty region, skipped".to_string()),
            }
        })
        .collect()
}

/// Dominant hue of the chromatic pixels in `mask`: the peak of a 1° histogram
/// smoothed over ±5°, refined by the circular mean within ±15° of the peak.
pub fn hue_mode(img: &RgbImage, mask: &[bool]) -> Result<f64, HueStatus> {
    let region: Vec<(f64, f64, f64)> = img
        .pixels()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(p, _)| rgb_to_hsv(p.0))
        .collect();
    if region.is_empty() {
        return Err(HueStatus::EmptyRegion);
    }
    let hues: Vec<f64> = region
        .iter()
        .filter(|(_, s, v)| *s >= MIN_SATURATION && *v >= MIN_VALUE)
        .map(|(h, _, _)| *h)
        .collect();
    if (hues.len() as f64) < MIN_CHROMATIC_FRACTION * region.len() as f64 || hues.is_empty() {
        return Err(HueStatus::UndefinedSaturation);
    }
    let mut hist = [0usize; 360];
    for &h in &hues {
        hist[(h.floor() as usize) % 360] += 1;
    }
    let smoothed = |i: usize| (0..11).map(|k| hist[(i + 360 + k - 5) % 360]).sum::<usize>();
    let peak = (0..360).max_by_key(|&i| (smoothed(i), std::cmp::Reverse(i))).unwrap() as f64 + 0.5;
    let (mut sx, mut sy) = (0.0, 0.0);
    for &h in hues.iter().filter(|&&h| hue_distance(h, peak) <= 15.0) {
        let r = h.to_radians();
        sx += r.cos();
        sy += r.sin();
    }
    Ok(sy.atan2(sx).to_degrees().rem_euclid(360.0))
}

/// Per subject on the canvas: hue error between the identity's hue and the
/// dominant output hue inside the subject's target region.
pub fn eval_identity(output: &RgbImage, example: &TrainingExample) -> Vec<SubjectEval> {
    example
        .provenance
        .iter()
        .zip(&example.canvas.layers)
        .filter(|(p, _)| p.layer_index > 0)
        .map(|(p, layer)| {
            let reference_hue = example.identities[p.layer_index - 1].hue;
            let mask = target_region(example, p.layer_index);
            let (measured_hue, hue_error, status) = match hue_mode(output, &mask) {
                Ok(h) => (Some(h), Some(hue_distance(h, reference_hue)), HueStatus::Ok),
                Err(status) => (None, None, status),
            };
            SubjectEval {
                layer_id: layer.id.clone(),
                locked: p.locked,
                reference_hue,
                measured_hue,
                hue_error,
                status,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub layers: Vec<LayerEval>,
    pub subjects: Vec<SubjectEval>,
    pub mean_locked_psnr: Option<f64>,
    pub mean_unlocked_psnr: Option<f64>,
    pub mean_hue_error: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl EvalReport {
    pub fn new(layers: Vec<LayerEval>, subjects: Vec<SubjectEval>) -> Self {
        let psnr = |locked: bool| mean(layers.iter().filter(|l| l.locked == locked).filter_map(|l| l.psnr));
        Self {
            mean_locked_psnr: psnr(true),
            mean_unlocked_psnr: psnr(false),
            mean_hue_error: mean(subjects.iter().filter_map(|s| s.hue_error)),
            layers,
            subjects,
        }
    }

    pub fn evaluate(output: &RgbImage, example: &TrainingExample) -> Self {
        Self::new(eval_locked_fidelity(output, example), eval_identity(output, example))
    }

    /// Pools several reports; means are over all pooled entries.
    pub fn merge(reports: impl IntoIterator<Item = EvalReport>) -> Self {
        let (mut layers, mut subjects) = (Vec::new(), Vec::new());
        for r in reports {
            layers.extend(r.layers);
            subjects.extend(r.subjects);
        }
        Self::new(layers, subjects)
    }
}

/// Canvas with the locked background, one locked subject and one unlocked
/// subject drawn from another rendering. `None` for single-subject scenes.
pub fn locking_probe_example(scene: &Scene, seed: u64) -> Option<TrainingExample> {
    let n = scene.meta.identities.len();
    let m = scene.renderings.len();
    if n < 2 || m < 2 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = rng.random_range(0..m);
    let locked = rng.random_range(0..n);
    let mut unlocked = rng.random_range(0..n - 1);
    if unlocked >= locked {
        unlocked += 1;
    }
    let mut other = rng.random_range(0..m - 1);
    if other >= target {
        other += 1;
    }
    let mut choices = vec![
        LayerProvenance {
            layer_index: 0,
            source_rendering: target,
            locked: true,
        },
        LayerProvenance {
            layer_index: locked + 1,
            source_rendering: target,
            locked: true,
        },
        LayerProvenance {
            layer_index: unlocked + 1,
            source_rendering: other,
            locked: false,
        },
    ];
    choices.sort_by_key(|c| c.layer_index);
    Some(build_example(scene, target, &choices, &AugmentConfig::none(), &mut rng))
}

/// Every layer locked from a random target rendering, no augmentation.
pub fn full_lock_example(scene: &Scene, seed: u64) -> TrainingExample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = rng.random_range(0..scene.renderings.len());
    let choices: Vec<LayerProvenance> = (0..scene.layer_count())
        .map(|i| LayerProvenance {
            layer_index: i,
            source_rendering: target,
            locked: true,
        })
        .collect();
    build_example(scene, target, &choices, &AugmentConfig::none(), &mut rng)
}

/// Locking behaviour over held-in scenes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LockingEval {
    pub steps: usize,
    pub canvases: usize,
    /// Canvases with one locked and one unlocked subject.
    pub probe: EvalReport,
    /// Canvases with every layer locked.
    pub full_lock: EvalReport,
    pub locked_subject_psnr: Option<f64>,
    pub unlocked_subject_psnr: Option<f64>,
    /// `locked_subject_psnr − unlocked_subject_psnr`.
    pub locking_gap_db: Option<f64>,
}

/// Samples `canvases` probe canvases (cycling over scenes with at least two
/// subjects) and as many fully locked canvases, canvas `i` using seed
/// `cfg.seed + i` for both its layout and its noise.
pub fn evaluate_locking<F: VelocityField + Sync>(
    field: &F,
    patch: usize,
    scenes: &[Scene],
    canvases: usize,
    cfg: &SampleConfig,
) -> Result<LockingEval, SampleError> {
    let eligible: Vec<&Scene> = scenes
        .iter()
        .filter(|s| s.meta.identities.len() >= 2 && s.renderings.len() >= 2)
        .collect();
    let run = |ex: &TrainingExample, i: usize| -> Result<EvalReport, SampleError> {
        let seed = cfg.seed.wrapping_add(i as u64);
        let sample = euler_sample(field, &ex.canvas, patch, &SampleConfig { seed, ..*cfg })?;
        Ok(EvalReport::evaluate(&sample.image, ex))
    };
    let probe = if eligible.is_empty() {
        Vec::new()
    } else {
        par_map_range(canvases, |i| {
            let seed = cfg.seed.wrapping_add(i as u64);
            let ex = locking_probe_example(eligible[i % eligible.len()], seed).expect("eligible scene");
            run(&ex, i)
        })
    };
    let full = if scenes.is_empty() {
        Vec::new()
    } else {
        par_map_range(canvases, |i| {
            let ex = full_lock_example(&scenes[i % scenes.len()], cfg.seed.wrapping_add(i as u64));
            run(&ex, i)
        })
    };
    let probe = EvalReport::merge(probe.into_iter().collect::<Result<Vec<_>, _>>()?);
    let full_lock = EvalReport::merge(full.into_iter().collect::<Result<Vec<_>, _>>()?);
    let subject_psnr = |locked: bool| {
        mean(
            probe
                .layers
                .iter()
                .filter(|l| l.layer_index > 0 && l.locked == locked)
                .filter_map(|l| l.psnr),
        )
    };
    let (locked_subject_psnr, unlocked_subject_psnr) = (subject_psnr(true), subject_psnr(false));
    Ok(LockingEval {
        steps: cfg.steps,
        canvases,
        locking_gap_db: locked_subject_psnr.zip(unlocked_subject_psnr).map(|(a, b)| a - b),
        locked_subject_psnr,
        unlocked_subject_psnr,
        probe,
        full_lock,
    })
}
