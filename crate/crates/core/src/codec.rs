//! Patch codec and condition-sequence assembly.
//!
//! The encoder is an exact space-to-depth transform: every `patch×patch`
//! block of RGB pixels becomes one latent cell of `patch²·3` values in
//! `[-1, 1]`. Alpha is downsampled to the latent grid by picking the pixel
//! nearest each cell centre; only cells with downsampled alpha above 0.5
//! survive pruning.

use std::fmt::Write as _;

use image::{GrayImage, Rgb, RgbImage, RgbaImage};
use serde::Serialize;
use thiserror::Error;

use crate::canvas::LayeredCanvas;
use crate::parallel::par_map;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("image {width}x{height} is not divisible by patch size {patch}")]
    NonDivisible { width: u32, height: u32, patch: usize },
    #[error("latent dim {dim} does not match patch size {patch} (expected {expected})")]
    DimMismatch {
        dim: usize,
        patch: usize,
        expected: usize,
    },
    #[error("grid is {grid_h}x{grid_w} but mask is {mask_h}x{mask_w}")]
    ShapeMismatch {
        grid_h: usize,
        grid_w: usize,
        mask_h: usize,
        mask_w: usize,
    },
    #[error("unlocked layers need an index >= 1, got {0}")]
    UnlockedIndex(u32),
    #[error("layer {id} is {width}x{height}, canvas is {canvas_w}x{canvas_h}")]
    LayerDimensions {
        id: String,
        width: u32,
        height: u32,
        canvas_w: u32,
        canvas_h: u32,
    },
}

/// `h × w` cells of `dim` values each, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub h: usize,
    pub w: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl LatentGrid {
    pub fn zeros(h: usize, w: usize, dim: usize) -> Self {
        Self {
            h,
            w,
            dim,
            data: vec![0.0; h * w * dim],
        }
    }

    pub fn cell(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.w + x) * self.dim;
        &self.data[i..i + self.dim]
    }

    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    pub fn same_shape(&self, other: &LatentGrid) -> bool {
        (self.h, self.w, self.dim) == (other.h, other.w, other.dim)
    }
}

/// Downsampled alpha, one value in `[0, 1]` per latent cell.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaLatentMask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

/// Three-component rotary position: `(layer_axis, x, y)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct PosId {
    pub layer: u32,
    pub x: u32,
    pub y: u32,
}

impl PosId {
    pub fn new(layer: u32, x: u32, y: u32) -> Self {
        Self { layer, x, y }
    }
}

/// A latent cell that survived pruning.
#[derive(Clone, Debug, PartialEq)]
pub struct PrunedCell {
    pub x: u32,
    pub y: u32,
    pub vector: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Token {
    pub vector: Vec<f32>,
    pub pos: PosId,
}

/// Conditioning tokens concatenated across layers in z-order.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub dim: usize,
    pub tokens: Vec<Token>,
    /// Index into `layer_ids` for every token.
    pub provenance: Vec<usize>,
    /// Layer ids in z-order, including layers that contributed no tokens.
    pub layer_ids: Vec<String>,
}

impl TokenSequence {
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            tokens: Vec::new(),
            provenance: Vec::new(),
            layer_ids: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// `(layer id, token count)` in z-order.
    pub fn per_layer_counts(&self) -> Vec<(String, usize)> {
        let mut counts = vec![0usize; self.layer_ids.len()];
        for &p in &self.provenance {
            counts[p] += 1;
        }
        self.layer_ids.iter().cloned().zip(counts).collect()
    }

    /// One token per line: `layer_axis x y` followed by the vector, nine
    /// significant digits each.
    pub fn to_debug_table(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            write!(out, "{} {} {}", t.pos.layer, t.pos.x, t.pos.y).unwrap();
            for v in &t.vector {
                write!(out, " {v:.8e}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

fn check_divisible(width: u32, height: u32, patch: usize) -> Result<(usize, usize), CodecError> {
    if patch == 0 || width as usize % patch != 0 || height as usize % patch != 0 {
        return Err(CodecError::NonDivisible {
            width,
            height,
            patch,
        });
    }
    Ok((height as usize / patch, width as usize / patch))
}

#[inline]
fn normalize(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// Inverse of the normalization, rounded half-up and clamped to `[0, 255]`.
#[inline]
pub fn denormalize(z: f32) -> u8 {
    ((z + 1.0) * 127.5 + 0.5).floor().clamp(0.0, 255.0) as u8
}

fn encode_pixels(
    width: u32,
    height: u32,
    patch: usize,
    pixel: impl Fn(u32, u32) -> [u8; 3],
) -> Result<LatentGrid, CodecError> {
    let (h, w) = check_divisible(width, height, patch)?;
    let dim = patch * patch * 3;
    let mut data = Vec::with_capacity(h * w * dim);
    for cy in 0..h {
        for cx in 0..w {
            for py in 0..patch {
                for px in 0..patch {
                    let p = pixel((cx * patch + px) as u32, (cy * patch + py) as u32);
                    data.extend(p.iter().map(|&v| normalize(v)));
                }
            }
        }
    }
    Ok(LatentGrid { h, w, dim, data })
}

/// Space-to-depth encoding of an RGB image.
pub fn encode_layer(rgb: &RgbImage, patch: usize) -> Result<LatentGrid, CodecError> {
    encode_pixels(rgb.width(), rgb.height(), patch, |x, y| rgb.get_pixel(x, y).0)
}

/// Encodes the colour channels of an RGBA layer; alpha is ignored.
pub fn encode_rgba(rgba: &RgbaImage, patch: usize) -> Result<LatentGrid, CodecError> {
    encode_pixels(rgba.width(), rgba.height(), patch, |x, y| {
        let [r, g, b, _] = rgba.get_pixel(x, y).0;
        [r, g, b]
    })
}

pub fn decode_latents(grid: &LatentGrid, patch: usize) -> Result<RgbImage, CodecError> {
    let expected = patch * patch * 3;
    if grid.dim != expected {
        return Err(CodecError::DimMismatch {
            dim: grid.dim,
            patch,
            expected,
        });
    }
    let mut img = RgbImage::new((grid.w * patch) as u32, (grid.h * patch) as u32);
    for cy in 0..grid.h {
        for cx in 0..grid.w {
            let cell = grid.cell(cx, cy);
            for py in 0..patch {
                for px in 0..patch {
                    let o = (py * patch + px) * 3;
                    img.put_pixel(
                        (cx * patch + px) as u32,
                        (cy * patch + py) as u32,
                        Rgb([
                            denormalize(cell[o]),
                            denormalize(cell[o + 1]),
                            denormalize(cell[o + 2]),
                        ]),
                    );
                }
            }
        }
    }
    Ok(img)
}

pub fn alpha_channel(rgba: &RgbaImage) -> GrayImage {
    GrayImage::from_fn(rgba.width(), rgba.height(), |x, y| {
        image::Luma([rgba.get_pixel(x, y).0[3]])
    })
}

/// Nearest-neighbour alpha at each cell centre:
/// `alpha[floor((y+0.5)·patch), floor((x+0.5)·patch)] / 255`.
pub fn downsample_alpha(alpha: &GrayImage, patch: usize) -> Result<AlphaLatentMask, CodecError> {
    let (h, w) = check_divisible(alpha.width(), alpha.height(), patch)?;
    let centre = |i: usize| ((i as f64 + 0.5) * patch as f64).floor() as u32;
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            data.push(alpha.get_pixel(centre(x), centre(y)).0[0] as f32 / 255.0);
        }
    }
    Ok(AlphaLatentMask { h, w, data })
}

/// Keeps the cells whose mask value exceeds 0.5, in row-major order.
pub fn prune_tokens(grid: &LatentGrid, mask: &AlphaLatentMask) -> Result<Vec<PrunedCell>, CodecError> {
    if (grid.h, grid.w) != (mask.h, mask.w) {
        return Err(CodecError::ShapeMismatch {
            grid_h: grid.h,
            grid_w: grid.w,
            mask_h: mask.h,
            mask_w: mask.w,
        });
    }
    let mut out = Vec::new();
    for y in 0..grid.h {
        for x in 0..grid.w {
            if mask.data[y * grid.w + x] > 0.5 {
                out.push(PrunedCell {
                    x: x as u32,
                    y: y as u32,
                    vector: grid.cell(x, y).to_vec(),
                });
            }
        }
    }
    Ok(out)
}

/// Locked layers share layer axis 0 with the noisy grid; the `j`-th unlocked
/// layer uses `j`.
pub fn assign_pos_ids(
    cells: Vec<PrunedCell>,
    locked: bool,
    unlocked_index: u32,
) -> Result<Vec<Token>, CodecError> {
    let layer = if locked {
        0
    } else if unlocked_index >= 1 {
        unlocked_index
    } else {
        return Err(CodecError::UnlockedIndex(unlocked_index));
    };
    Ok(cells
        .into_iter()
        .map(|c| Token {
            vector: c.vector,
            pos: PosId::new(layer, c.x, c.y),
        })
        .collect())
}

/// Position ids of the noisy latent grid, row-major: `(0, x, y)`.
pub fn noisy_positions(h: usize, w: usize) -> Vec<PosId> {
    (0..h)
        .flat_map(|y| (0..w).map(move |x| PosId::new(0, x as u32, y as u32)))
        .collect()
}

/// Encode, downsample, prune and tag every layer, then concatenate in
/// z-order. Unlocked layers are numbered 1, 2, … in z-order; a fully
/// transparent unlocked layer still consumes its number.
pub fn build_condition_sequence(canvas: &LayeredCanvas, patch: usize) -> Result<TokenSequence, CodecError> {
    let (_, _) = check_divisible(canvas.width, canvas.height, patch)?;
    let layers = canvas.layers_by_z();
    let mut next_unlocked = 0u32;
    let jobs: Vec<_> = layers
        .iter()
        .map(|l| {
            let j = if l.locked {
                0
            } else {
                next_unlocked += 1;
                next_unlocked
            };
            (*l, j)
        })
        .collect();
    let per_layer = par_map(&jobs, |&(layer, j)| -> Result<Vec<Token>, CodecError> {
        let (lw, lh) = layer.rgba.dimensions();
        if (lw, lh) != (canvas.width, canvas.height) {
            return Err(CodecError::LayerDimensions {
                id: layer.id.clone(),
                width: lw,
                height: lh,
                canvas_w: canvas.width,
                canvas_h: canvas.height,
            });
        }
        let grid = encode_rgba(&layer.rgba, patch)?;
        let mask = downsample_alpha(&alpha_channel(&layer.rgba), patch)?;
        let cells = prune_tokens(&grid, &mask)?;
        assign_pos_ids(cells, layer.locked, j)
    });
    let mut seq = TokenSequence::empty(patch * patch * 3);
    for (i, (tokens, layer)) in per_layer.into_iter().zip(&layers).enumerate() {
        let tokens = tokens?;
        seq.provenance.extend(std::iter::repeat(i).take(tokens.len()));
        seq.tokens.extend(tokens);
        seq.layer_ids.push(layer.id.clone());
    }
    Ok(seq)
}
