//! Three-axis rotary embedding. A head vector is split into
//! `(layer axis, x, y)` slices of `axis_dims` values; each slice rotates
//! consecutive pairs by `pos_component · base^(−2k/dim_axis)`.

use layerforge_autodiff::Real;

use super::config::{ModelConfig, ModelError};
use crate::codec::PosId;

pub fn axis_frequencies(dim: usize, base: f64) -> Vec<f64> {
    (0..dim / 2)
        .map(|k| base.powf(-2.0 * k as f64 / dim as f64))
        .collect()
}

/// One angle per rotary pair of a head: layer-axis pairs, then x, then y.
pub fn rope_angles(pos: PosId, axis_dims: [usize; 3], base: f64) -> Result<Vec<f64>, ModelError> {
    if let Some(d) = axis_dims.iter().find(|d| *d % 2 != 0) {
        return Err(ModelError::Config(format!("rotary slice width {d} is odd")));
    }
    let comps = [pos.layer, pos.x, pos.y];
    let mut out = Vec::with_capacity(axis_dims.iter().sum::<usize>() / 2);
    for (dim, p) in axis_dims.into_iter().zip(comps) {
        out.extend(axis_frequencies(dim, base).into_iter().map(|f| p as f64 * f));
    }
    Ok(out)
}

/// Rotates one head vector of length `sum(axis_dims)`.
pub fn rope3d_apply(v: &[f64], pos: PosId, axis_dims: [usize; 3], base: f64) -> Result<Vec<f64>, ModelError> {
    let angles = rope_angles(pos, axis_dims, base)?;
    if v.len() != 2 * angles.len() {
        return Err(ModelError::Config(format!(
            "head vector has {} values, axis dims need {}",
            v.len(),
            2 * angles.len()
        )));
    }
    let mut out = vec![0.0; v.len()];
    for (p, a) in angles.iter().enumerate() {
        let (c, s) = (a.cos(), a.sin());
        let (x0, x1) = (v[2 * p], v[2 * p + 1]);
        out[2 * p] = x0 * c - x1 * s;
        out[2 * p + 1] = x0 * s + x1 * c;
    }
    Ok(out)
}

/// Cosine and sine tables of shape `[tokens, d_model/2]`, the per-head
/// angles tiled across heads, for [`layerforge_autodiff::Tape::rotary`].
pub fn rope_table<T: Real>(positions: &[PosId], cfg: &ModelConfig) -> Result<(Vec<T>, Vec<T>), ModelError> {
    let half = cfg.d_model / 2;
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &pos in positions {
        let angles = rope_angles(pos, cfg.axis_dims, cfg.rope_base)?;
        for _ in 0..cfg.n_heads {
            for a in &angles {
                cos.push(T::of(a.cos()));
                sin.push(T::of(a.sin()));
            }
        }
    }
    Ok((cos, sin))
}
