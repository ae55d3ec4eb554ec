use std::collections::BTreeMap;

use layerforge_autodiff::{Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{ModelConfig, ModelError};

/// Named parameter tensors in name order.
pub type ParamMap<T = f32> = BTreeMap<String, Tensor<T>>;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Zeros,
    /// Normal with standard deviation `1/sqrt(fan_in)`.
    FanIn,
}

pub const LORA_TARGETS: [&str; 4] = ["q", "k", "v", "o"];

fn base_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, td, f) = (cfg.d_model, cfg.token_dim(), cfg.time_freq_dim);
    let hidden = d * cfg.mlp_ratio;
    let mut v = vec![
        ("noisy_in.w".to_string(), vec![td, d], Init::FanIn),
        ("noisy_in.b".to_string(), vec![d], Init::Zeros),
        ("cond_in.w".to_string(), vec![td, d], Init::FanIn),
        ("cond_in.b".to_string(), vec![d], Init::Zeros),
        ("time.w1".to_string(), vec![f, d], Init::FanIn),
        ("time.b1".to_string(), vec![d], Init::Zeros),
        ("time.w2".to_string(), vec![d, d], Init::FanIn),
        ("time.b2".to_string(), vec![d], Init::Zeros),
        ("prompt.hue".to_string(), vec![cfg.hue_vocab.len(), d], Init::FanIn),
        ("prompt.arrangement".to_string(), vec![cfg.arrangement_vocab.len(), d], Init::FanIn),
    ];
    for i in 0..cfg.n_blocks {
        let p = |s: &str| format!("blocks.{i}.{s}");
        // adaLN-zero: the modulation starts at zero so every block is the identity.
        v.push((p("mod.w"), vec![d, 6 * d], Init::Zeros));
        v.push((p("mod.b"), vec![6 * d], Init::Zeros));
        for w in ["wq", "wk", "wv", "wo"] {
            v.push((p(&format!("attn.{w}")), vec![d, d], Init::FanIn));
        }
        v.push((p("mlp.w1"), vec![d, hidden], Init::FanIn));
        v.push((p("mlp.b1"), vec![hidden], Init::Zeros));
        v.push((p("mlp.w2"), vec![hidden, d], Init::FanIn));
        v.push((p("mlp.b2"), vec![d], Init::Zeros));
    }
    v.push(("final.mod.w".to_string(), vec![d, 2 * d], Init::Zeros));
    v.push(("final.mod.b".to_string(), vec![2 * d], Init::Zeros));
    v.push(("head.w".to_string(), vec![d, td], Init::Zeros));
    v.push(("head.b".to_string(), vec![td], Init::Zeros));
    v
}

fn lora_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    if cfg.lora_rank == 0 {
        return Vec::new();
    }
    let (d, r) = (cfg.d_model, cfg.lora_rank);
    let mut v = Vec::new();
    for i in 0..cfg.n_blocks {
        for t in LORA_TARGETS {
            v.push((lora_name(i, t, 'a'), vec![d, r], Init::FanIn));
            v.push((lora_name(i, t, 'b'), vec![r, d], Init::Zeros));
        }
    }
    v
}

pub fn lora_name(block: usize, target: &str, which: char) -> String {
    format!("lora.blocks.{block}.{target}.{which}")
}

pub fn base_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    base_layout(cfg).into_iter().map(|(n, s, _)| (n, s)).collect()
}

pub fn lora_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    lora_layout(cfg).into_iter().map(|(n, s, _)| (n, s)).collect()
}

fn materialize(layout: Vec<(String, Vec<usize>, Init)>, rng: &mut ChaCha8Rng) -> ParamMap {
    layout
        .into_iter()
        .map(|(name, shape, init)| {
            let t = match init {
                Init::Zeros => Tensor::zeros(shape),
                Init::FanIn => {
                    let std = 1.0 / (shape[0] as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("positive std");
                    Tensor::from_fn(shape, |_| normal.sample(rng) as f32)
                }
            };
            (name, t)
        })
        .collect()
}

fn check_layout(
    params: &ParamMap,
    expected: Vec<(String, Vec<usize>)>,
) -> Result<(), ModelError> {
    for (name, shape) in &expected {
        let t = params
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.clone()))?;
        if t.shape() != shape.as_slice() {
            return Err(ModelError::ParamShape {
                name: name.clone(),
                expected: shape.clone(),
                got: t.shape().to_vec(),
            });
        }
    }
    if params.len() != expected.len() {
        let names: std::collections::BTreeSet<_> = expected.iter().map(|(n, _)| n).collect();
        let extra = params.keys().find(|k| !names.contains(k)).expect("extra parameter");
        return Err(ModelError::UnexpectedParam(extra.clone()));
    }
    Ok(())
}

/// Base transformer parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DiTWeights {
    pub params: ParamMap,
}

impl DiTWeights {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            params: materialize(base_layout(cfg), &mut rng),
        }
    }

    pub fn from_params(cfg: &ModelConfig, params: ParamMap) -> Result<Self, ModelError> {
        check_layout(&params, base_shapes(cfg))?;
        Ok(Self { params })
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }
}

/// Low-rank deltas `ΔW = scaling·A·B` on the attention projections.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub rank: usize,
    pub scaling: f32,
    pub params: ParamMap,
}

impl LoraAdapter {
    /// `A` is random, `B` is zero, so a fresh adapter is a no-op.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4c6f_5241);
        Self {
            rank: cfg.lora_rank,
            scaling: cfg.lora_scaling(),
            params: materialize(lora_layout(cfg), &mut rng),
        }
    }

    pub fn from_params(cfg: &ModelConfig, params: ParamMap) -> Result<Self, ModelError> {
        check_layout(&params, lora_shapes(cfg))?;
        Ok(Self {
            rank: cfg.lora_rank,
            scaling: cfg.lora_scaling(),
            params,
        })
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub struct ParamCounts {
    pub frozen: usize,
    pub trainable: usize,
}

pub fn count_params(weights: &DiTWeights, adapter: &LoraAdapter, base_frozen: bool) -> ParamCounts {
    let (b, a) = (weights.numel(), adapter.numel());
    if base_frozen {
        ParamCounts {
            frozen: b,
            trainable: a,
        }
    } else {
        ParamCounts {
            frozen: a,
            trainable: b,
        }
    }
}

/// `W + scaling·A·B`, computed in f64 and rounded once.
pub fn merge_delta(w: &Tensor, a: &Tensor, b: &Tensor, scaling: f32) -> Result<Tensor, ModelError> {
    let (rows, cols) = w.dims2()?;
    let (ar, r) = a.dims2()?;
    let (br, bc) = b.dims2()?;
    if ar != rows || br != r || bc != cols {
        return Err(ModelError::Config(format!(
            "lora shapes {:?}·{:?} do not match base {:?}",
            a.shape(),
            b.shape(),
            w.shape()
        )));
    }
    let (ad, bd, wd) = (a.data(), b.data(), w.data());
    Ok(Tensor::from_fn(vec![rows, cols], |idx| {
        let (i, j) = (idx / cols, idx % cols);
        let delta: f64 = (0..r).map(|k| ad[i * r + k] as f64 * bd[k * cols + j] as f64).sum();
        (wd[idx] as f64 + scaling as f64 * delta) as f32
    }))
}

/// Plain-matrix LoRA projection `x·W + scaling·(x·A)·B`.
pub fn lora_forward(
    w: &Tensor,
    a: &Tensor,
    b: &Tensor,
    scaling: f32,
    x: &Tensor,
) -> Result<Tensor, ModelError> {
    let mut tape = layerforge_autodiff::Tape::new();
    let (xv, wv, av, bv) = (
        tape.constant(x.clone()),
        tape.constant(w.clone()),
        tape.constant(a.clone()),
        tape.constant(b.clone()),
    );
    let base = tape.matmul(xv, wv)?;
    let low = tape.matmul(xv, av)?;
    let delta = tape.matmul(low, bv)?;
    let delta = tape.scale(delta, scaling)?;
    let out = tape.add(base, delta)?;
    Ok(tape.value(out).clone())
}

pub fn cast_params<T: Real>(params: &ParamMap) -> ParamMap<T> {
    params.iter().map(|(k, v)| (k.clone(), v.cast())).collect()
}
