use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::codec::{encode_layer, CodecError, LatentGrid};

/// One point on the straight noise→data path.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub z0: LatentGrid,
    pub z1: LatentGrid,
    pub t: f64,
    pub zt: LatentGrid,
    pub v_target: LatentGrid,
}

pub fn gaussian_grid(h: usize, w: usize, dim: usize, seed: u64) -> LatentGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LatentGrid {
        h,
        w,
        dim,
        data: (0..h * w * dim).map(|_| StandardNormal.sample(&mut rng)).collect(),
    }
}

/// `z_t = (1−t)·z0 + t·z1`, `v = z1 − z0`.
pub fn flow_sample_from(z0: LatentGrid, z1: LatentGrid, t: f64) -> FlowSample {
    assert!(z0.same_shape(&z1), "noise and data grids differ in shape");
    let zt_data = z0
        .data
        .iter()
        .zip(&z1.data)
        .map(|(&a, &b)| ((1.0 - t) * a as f64 + t * b as f64) as f32)
        .collect();
    let v_data = z0.data.iter().zip(&z1.data).map(|(&a, &b)| b - a).collect();
    let zt = LatentGrid {
        data: zt_data,
        ..z0.clone()
    };
    let v_target = LatentGrid {
        data: v_data,
        ..z0.clone()
    };
    FlowSample {
        z0,
        z1,
        t,
        zt,
        v_target,
    }
}

pub fn make_flow_sample(target: &RgbImage, patch: usize, t: f64, noise_seed: u64) -> Result<FlowSample, CodecError> {
    let z1 = encode_layer(target, patch)?;
    let z0 = gaussian_grid(z1.h, z1.w, z1.dim, noise_seed);
    Ok(flow_sample_from(z0, z1, t))
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("prediction has {pred} values, target has {target}")]
pub struct LossShapeError {
    pub pred: usize,
    pub target: usize,
}

/// Mean squared error over every supervised component.
pub fn flow_loss(pred: &[f32], v_target: &[f32]) -> Result<f64, LossShapeError> {
    if pred.len() != v_target.len() || pred.is_empty() {
        return Err(LossShapeError {
            pred: pred.len(),
            target: v_target.len(),
        });
    }
    let sum: f64 = pred
        .iter()
        .zip(v_target)
        .map(|(&p, &v)| (p as f64 - v as f64).powi(2))
        .sum();
    Ok(sum / pred.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn image() -> RgbImage {
        RgbImage::from_fn(16, 16, |x, y| Rgb([(x * 16) as u8, (y * 16) as u8, 77]))
    }

    #[test]
    fn endpoints() {
        let s0 = make_flow_sample(&image(), 4, 0.0, 3).unwrap();
        assert_eq!(s0.zt, s0.z0);
        let s1 = make_flow_sample(&image(), 4, 1.0, 3).unwrap();
        assert_eq!(s1.zt, s1.z1);
    }

    #[test]
    fn midpoint_with_zero_noise() {
        let z1 = encode_layer(&image(), 4).unwrap();
        let z0 = LatentGrid::zeros(z1.h, z1.w, z1.dim);
        let s = flow_sample_from(z0, z1.clone(), 0.5);
        assert!(s.zt.data.iter().zip(&z1.data).all(|(a, b)| *a == 0.5 * b));
        assert_eq!(s.v_target, z1);
    }

    #[test]
    fn velocity_independent_of_t() {
        let a = make_flow_sample(&image(), 4, 0.1, 9).unwrap();
        for t in [0.0, 0.37, 0.9, 1.0] {
            assert_eq!(make_flow_sample(&image(), 4, t, 9).unwrap().v_target, a.v_target);
        }
    }

    #[test]
    fn noise_is_seeded_standard_normal() {
        let g = gaussian_grid(8, 8, 48, 1);
        assert_eq!(g, gaussian_grid(8, 8, 48, 1));
        let n = g.data.len() as f64;
        let mean = g.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = g.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.1 && (var - 1.0).abs() < 0.1);
    }

    #[test]
    fn loss_values() {
        let v = [1.0f32, -2.0, 0.5, 3.0];
        assert_eq!(flow_loss(&v, &v).unwrap(), 0.0);
        let zero = flow_loss(&[0.0; 4], &v).unwrap();
        assert!((zero - (1.0 + 4.0 + 0.25 + 9.0) / 4.0).abs() < 1e-12);
        let perm = [3usize, 0, 2, 1];
        let p = [0.1f32, 0.2, 0.3, 0.4];
        let pp: Vec<f32> = perm.iter().map(|&i| p[i]).collect();
        let vp: Vec<f32> = perm.iter().map(|&i| v[i]).collect();
        assert!((flow_loss(&p, &v).unwrap() - flow_loss(&pp, &vp).unwrap()).abs() < 1e-12);
        assert!(flow_loss(&p, &v[..3]).is_err());
    }
}
