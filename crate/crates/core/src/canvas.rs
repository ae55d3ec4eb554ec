//! The layered canvas: full-canvas RGBA layers with lock flags, placement of
//! source images onto layers, validation, and collage flattening.

use std::collections::HashMap;
use std::fmt;

use image::{Rgb, RgbImage, Rgba, RgbaImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Latent patch size used when none is configured explicitly.
pub const DEFAULT_PATCH: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CanvasError {
    #[error("placement scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("canvas has zero area ({width}x{height})")]
    ZeroArea { width: u32, height: u32 },
    #[error("layer {id} is {got_w}x{got_h}, canvas is {width}x{height}")]
    LayerDimensions {
        id: String,
        got_w: u32,
        got_h: u32,
        width: u32,
        height: u32,
    },
}

/// Stand-in for the text prompt: two categorical attributes.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptAttrs {
    pub background_hue: String,
    pub arrangement: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub id: String,
    pub rgba: RgbaImage,
    pub locked: bool,
    pub z_order: i32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayeredCanvas {
    pub width: u32,
    pub height: u32,
    pub layers: Vec<Layer>,
    pub prompt: PromptAttrs,
}

impl LayeredCanvas {
    /// Layers in ascending z-order. Ties keep list order.
    pub fn layers_by_z(&self) -> Vec<&Layer> {
        let mut layers: Vec<&Layer> = self.layers.iter().collect();
        layers.sort_by_key(|l| l.z_order);
        layers
    }
}

/// Where a source image lands on the canvas: scaled about its top-left
/// corner, then offset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub offset_x: i32,
    pub offset_y: i32,
    pub scale: f64,
}

impl Default for Placement {
    fn default() -> Self {
        Self {
            offset_x: 0,
            offset_y: 0,
            scale: 1.0,
        }
    }
}

/// Nearest-neighbour placement of `source` onto a transparent
/// `width`×`height` layer. Pixels that map outside the source stay fully
/// transparent; source pixels that land outside the canvas are clipped.
pub fn rasterize_layer(
    source: &RgbaImage,
    placement: &Placement,
    width: u32,
    height: u32,
) -> Result<RgbaImage, CanvasError> {
    if !(placement.scale > 0.0) || !placement.scale.is_finite() {
        return Err(CanvasError::NonPositiveScale(placement.scale));
    }
    if width == 0 || height == 0 {
        return Err(CanvasError::ZeroArea { width, height });
    }
    let (sw, sh) = source.dimensions();
    let mut out = RgbaImage::new(width, height);
    let map = |dst: u32, offset: i32, len: u32| -> Option<u32> {
        let u = (dst as f64 - offset as f64 + 0.5) / placement.scale;
        let s = u.floor();
        (s >= 0.0 && s < len as f64).then_some(s as u32)
    };
    for y in 0..height {
        let Some(sy) = map(y, placement.offset_y, sh) else {
            continue;
        };
        for x in 0..width {
            if let Some(sx) = map(x, placement.offset_x, sw) {
                out.put_pixel(x, y, *source.get_pixel(sx, sy));
            }
        }
    }
    Ok(out)
}

/// `(src·a + dst·(255−a)) / 255`, rounded half-up, in exact integer math.
#[inline]
pub fn blend_channel(src: u8, dst: u8, alpha: u8) -> u8 {
    let a = alpha as u32;
    let num = src as u32 * a + dst as u32 * (255 - a);
    ((2 * num + 255) / 510) as u8
}

/// Alpha-over compositing of every layer in ascending z-order onto opaque
/// black.
pub fn compose_collage(canvas: &LayeredCanvas) -> Result<RgbImage, CanvasError> {
    let (w, h) = (canvas.width, canvas.height);
    if w == 0 || h == 0 {
        return Err(CanvasError::ZeroArea {
            width: w,
            height: h,
        });
    }
    let mut out = RgbImage::from_pixel(w, h, Rgb([0, 0, 0]));
    for layer in canvas.layers_by_z() {
        let (lw, lh) = layer.rgba.dimensions();
        if (lw, lh) != (w, h) {
            return Err(CanvasError::LayerDimensions {
                id: layer.id.clone(),
                got_w: lw,
                got_h: lh,
                width: w,
                height: h,
            });
        }
        for (dst, src) in out.pixels_mut().zip(layer.rgba.pixels()) {
            let Rgba([r, g, b, a]) = *src;
            if a == 0 {
                continue;
            }
            dst.0 = [
                blend_channel(r, dst.0[0], a),
                blend_channel(g, dst.0[1], a),
                blend_channel(b, dst.0[2], a),
            ];
        }
    }
    Ok(out)
}

/// A reason a canvas cannot be used.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    NoLayers,
    ZeroArea {
        width: u32,
        height: u32,
    },
    NonDivisibleDimensions {
        width: u32,
        height: u32,
        patch: usize,
    },
    DimensionMismatch {
        layer: String,
        width: u32,
        height: u32,
        expected_width: u32,
        expected_height: u32,
    },
    DuplicateZOrder {
        z_order: i32,
        layers: Vec<String>,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoLayers => write!(f, "canvas has no layers"),
            Violation::ZeroArea { width, height } => {
                write!(f, "canvas has zero area ({width}x{height})")
            }
            Violation::NonDivisibleDimensions {
                width,
                height,
                patch,
            } => write!(
                f,
                "canvas {width}x{height} is not divisible by patch size {patch}"
            ),
            Violation::DimensionMismatch {
                layer,
                width,
                height,
                expected_width,
                expected_height,
            } => write!(
                f,
                "layer {layer} is {width}x{height}, expected {expected_width}x{expected_height}"
            ),
            Violation::DuplicateZOrder { z_order, layers } => {
                write!(f, "z_order {z_order} shared by layers {}", layers.join(", "))
            }
        }
    }
}

/// Every problem with `canvas`; an empty list means it is valid.
pub fn validate_canvas(canvas: &LayeredCanvas, patch: usize) -> Vec<Violation> {
    let mut out = Vec::new();
    let (w, h) = (canvas.width, canvas.height);
    if canvas.layers.is_empty() {
        out.push(Violation::NoLayers);
    }
    if w == 0 || h == 0 {
        out.push(Violation::ZeroArea {
            width: w,
            height: h,
        });
    } else if patch == 0 || w as usize % patch != 0 || h as usize % patch != 0 {
        out.push(Violation::NonDivisibleDimensions {
            width: w,
            height: h,
            patch,
        });
    }
    for layer in &canvas.layers {
        let (lw, lh) = layer.rgba.dimensions();
        if (lw, lh) != (w, h) {
            out.push(Violation::DimensionMismatch {
                layer: layer.id.clone(),
                width: lw,
                height: lh,
                expected_width: w,
                expected_height: h,
            });
        }
    }
    let mut by_z: HashMap<i32, Vec<String>> = HashMap::new();
    for layer in &canvas.layers {
        by_z.entry(layer.z_order).or_default().push(layer.id.clone());
    }
    let mut dups: Vec<_> = by_z.into_iter().filter(|(_, ids)| ids.len() > 1).collect();
    dups.sort_by_key(|(z, _)| *z);
    out.extend(
        dups.into_iter()
            .map(|(z_order, layers)| Violation::DuplicateZOrder { z_order, layers }),
    );
    out
}

/// Pixels of `layer` that are opaque and not covered by any opaque pixel of a
/// layer above it.
pub fn visible_mask(layers_by_z: &[&RgbaImage], index: usize) -> Vec<bool> {
    let base = layers_by_z[index];
    let mut mask: Vec<bool> = base.pixels().map(|p| p.0[3] > 0).collect();
    for above in &layers_by_z[index + 1..] {
        for (m, p) in mask.iter_mut().zip(above.pixels()) {
            if p.0[3] == 255 {
                *m = false;
            }
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prompt() -> PromptAttrs {
        PromptAttrs {
            background_hue: "blue".into(),
            arrangement: "row".into(),
        }
    }

    fn solid(w: u32, h: u32, px: [u8; 4]) -> RgbaImage {
        RgbaImage::from_pixel(w, h, Rgba(px))
    }

    fn layer(id: &str, z: i32, rgba: RgbaImage) -> Layer {
        Layer {
            id: id.into(),
            rgba,
            locked: false,
            z_order: z,
        }
    }

    fn canvas(layers: Vec<Layer>) -> LayeredCanvas {
        LayeredCanvas {
            width: 64,
            height: 64,
            layers,
            prompt: prompt(),
        }
    }

    #[test]
    fn identity_placement_reproduces_source() {
        let src = RgbaImage::from_fn(64, 64, |x, y| Rgba([x as u8, y as u8, (x ^ y) as u8, 200]));
        let out = rasterize_layer(&src, &Placement::default(), 64, 64).unwrap();
        assert_eq!(out, src);
        let again = rasterize_layer(&out, &Placement::default(), 64, 64).unwrap();
        assert_eq!(again, out);
    }

    #[test]
    fn doubled_source_covers_exact_square() {
        let src = solid(16, 16, [10, 20, 30, 255]);
        let p = Placement {
            scale: 2.0,
            ..Placement::default()
        };
        let out = rasterize_layer(&src, &p, 64, 64).unwrap();
        // Forward mapping oracle: source pixel (sx, sy) covers destination
        // [2sx, 2sx+2) × [2sy, 2sy+2).
        let mut covered = vec![false; 64 * 64];
        for sy in 0..16 {
            for sx in 0..16 {
                for dy in 0..2 {
                    for dx in 0..2 {
                        covered[(2 * sy + dy) * 64 + 2 * sx + dx] = true;
                    }
                }
            }
        }
        for (i, px) in out.pixels().enumerate() {
            assert_eq!(px.0[3] == 255, covered[i], "pixel {i}");
        }
        assert_eq!(covered.iter().filter(|c| **c).count(), 32 * 32);
    }

    #[test]
    fn placement_outside_canvas_is_transparent() {
        let src = solid(8, 8, [255, 255, 255, 255]);
        let p = Placement {
            offset_x: 100,
            offset_y: -50,
            scale: 1.0,
        };
        let out = rasterize_layer(&src, &p, 32, 32).unwrap();
        assert!(out.pixels().all(|p| p.0[3] == 0));
    }

    #[test]
    fn rasterize_rejects_bad_inputs() {
        let src = solid(4, 4, [0; 4]);
        let bad = Placement {
            scale: 0.0,
            ..Placement::default()
        };
        assert_eq!(
            rasterize_layer(&src, &bad, 8, 8),
            Err(CanvasError::NonPositiveScale(0.0))
        );
        assert!(matches!(
            rasterize_layer(&src, &Placement::default(), 0, 8),
            Err(CanvasError::ZeroArea { .. })
        ));
    }

    #[test]
    fn collage_of_single_opaque_layer_is_its_rgb() {
        let img = RgbaImage::from_fn(64, 64, |x, y| Rgba([x as u8 * 3, y as u8, 7, 255]));
        let out = compose_collage(&canvas(vec![layer("a", 0, img.clone())])).unwrap();
        for (o, i) in out.pixels().zip(img.pixels()) {
            assert_eq!(o.0, [i.0[0], i.0[1], i.0[2]]);
        }
    }

    #[test]
    fn higher_z_wins_and_list_order_is_irrelevant() {
        let low = layer("low", 0, solid(64, 64, [255, 0, 0, 255]));
        let high = layer("high", 5, solid(64, 64, [0, 255, 0, 255]));
        let a = compose_collage(&canvas(vec![low.clone(), high.clone()])).unwrap();
        let b = compose_collage(&canvas(vec![high, low])).unwrap();
        assert_eq!(a, b);
        assert!(a.pixels().all(|p| p.0 == [0, 255, 0]));
    }

    #[test]
    fn half_alpha_blend_matches_scalar_oracle() {
        let bottom = layer("b", 0, solid(64, 64, [200, 17, 0, 255]));
        let top = layer("t", 1, solid(64, 64, [51, 100, 255, 128]));
        let out = compose_collage(&canvas(vec![bottom, top])).unwrap();
        let oracle = |t: f64, b: f64| {
            let v = t * (128.0 / 255.0) + b * (1.0 - 128.0 / 255.0);
            (v + 0.5).floor() as u8
        };
        let expected = [oracle(51.0, 200.0), oracle(100.0, 17.0), oracle(255.0, 0.0)];
        assert!(out.pixels().all(|p| p.0 == expected), "{:?}", out.get_pixel(0, 0));
    }

    #[test]
    fn blend_matches_float_rounding_everywhere() {
        for a in 0..=255u32 {
            for s in (0..=255u32).step_by(5) {
                for d in (0..=255u32).step_by(17) {
                    let exact = (s * a + d * (255 - a)) as f64 / 255.0;
                    let want = (exact + 0.5).floor() as u8;
                    assert_eq!(blend_channel(s as u8, d as u8, a as u8), want);
                }
            }
        }
    }

    #[test]
    fn empty_canvas_collage_is_black() {
        let out = compose_collage(&canvas(vec![])).unwrap();
        assert!(out.pixels().all(|p| p.0 == [0, 0, 0]));
    }

    #[test]
    fn collage_rejects_mismatched_layer() {
        let bad = layer("odd", 0, solid(63, 64, [1, 2, 3, 255]));
        assert!(matches!(
            compose_collage(&canvas(vec![bad])),
            Err(CanvasError::LayerDimensions { .. })
        ));
    }

    #[test]
    fn validation_reports_each_problem() {
        let ok = canvas(vec![
            layer("a", 0, solid(64, 64, [0; 4])),
            layer("b", 1, solid(64, 64, [0; 4])),
        ]);
        assert!(validate_canvas(&ok, 4).is_empty());

        let odd = canvas(vec![layer("odd", 0, solid(63, 64, [0; 4]))]);
        assert!(matches!(
            validate_canvas(&odd, 4).as_slice(),
            [Violation::DimensionMismatch { layer, .. }] if layer == "odd"
        ));

        let dup = canvas(vec![
            layer("first", 2, solid(64, 64, [0; 4])),
            layer("second", 2, solid(64, 64, [0; 4])),
        ]);
        assert_eq!(
            validate_canvas(&dup, 4),
            vec![Violation::DuplicateZOrder {
                z_order: 2,
                layers: vec!["first".into(), "second".into()]
            }]
        );

        assert_eq!(validate_canvas(&canvas(vec![]), 4), vec![Violation::NoLayers]);

        let mut nondiv = canvas(vec![layer("a", 0, solid(30, 64, [0; 4]))]);
        nondiv.width = 30;
        assert!(matches!(
            validate_canvas(&nondiv, 4).as_slice(),
            [Violation::NonDivisibleDimensions { .. }]
        ));
    }

    #[test]
    fn visible_mask_excludes_occluded_pixels() {
        let low = solid(4, 4, [0, 0, 0, 255]);
        let mut high = RgbaImage::new(4, 4);
        high.put_pixel(1, 1, Rgba([9, 9, 9, 255]));
        let mask = visible_mask(&[&low, &high], 0);
        assert_eq!(mask.iter().filter(|m| **m).count(), 15);
        assert!(!mask[5]);
    }
}
