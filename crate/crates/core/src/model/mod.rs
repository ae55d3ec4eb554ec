//! The velocity network: joint self-attention over noisy latent tokens and
//! condition tokens with three-axis rotary positions, adaLN-style timestep
//! and prompt conditioning, and LoRA on the attention projections.

mod config;
mod forward;
mod params;
mod rope;

pub use config::{hue_degrees, ModelConfig, ModelError, ARRANGEMENT_TOKENS, HUE_TOKENS};
pub use forward::{forward, timestep_embedding, ForwardInputs, ParamVars};
pub use params::{
    base_shapes, cast_params, count_params, lora_forward, lora_name, lora_shapes, merge_delta, DiTWeights,
    LoraAdapter, ParamCounts, ParamMap, LORA_TARGETS,
};
pub use rope::{axis_frequencies, rope3d_apply, rope_angles, rope_table};

use layerforge_autodiff::{Real, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::canvas::PromptAttrs;
use crate::codec::{LatentGrid, TokenSequence};

/// Anything that maps `(z_t, t, condition, prompt)` to a velocity grid.
pub trait VelocityField {
    fn velocity(
        &self,
        z: &LatentGrid,
        t: f64,
        cond: &TokenSequence,
        prompt: &PromptAttrs,
    ) -> Result<LatentGrid, ModelError>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: DiTWeights,
    pub adapter: LoraAdapter,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        Ok(Self {
            weights: DiTWeights::init(&config, seed),
            adapter: LoraAdapter::init(&config, seed),
            config,
        })
    }

    /// All parameters (base then adapter) under their names.
    pub fn all_params(&self) -> ParamMap {
        let mut all = self.weights.params.clone();
        all.extend(self.adapter.params.iter().map(|(k, v)| (k.clone(), v.clone())));
        all
    }

    /// Adds Gaussian noise to every parameter, including the zero-initialised
    /// ones. Used to get non-trivial gradients for diagnostics.
    pub fn perturb(&mut self, std: f32, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, std).expect("finite std");
        for t in self
            .weights
            .params
            .values_mut()
            .chain(self.adapter.params.values_mut())
        {
            t.data_mut().iter_mut().for_each(|v| *v += normal.sample(&mut rng));
        }
    }

    /// Folds the adapter into the base attention weights, returning a
    /// rank-0 model.
    pub fn merged(&self) -> Result<Model, ModelError> {
        let mut config = self.config.clone();
        config.lora_rank = 0;
        let mut weights = self.weights.clone();
        if self.config.lora_rank > 0 {
            for i in 0..self.config.n_blocks {
                for (w, t) in ["wq", "wk", "wv", "wo"].into_iter().zip(LORA_TARGETS) {
                    let name = format!("blocks.{i}.attn.{w}");
                    let merged = merge_delta(
                        &weights.params[&name],
                        &self.adapter.params[&lora_name(i, t, 'a')],
                        &self.adapter.params[&lora_name(i, t, 'b')],
                        self.adapter.scaling,
                    )?;
                    weights.params.insert(name, merged);
                }
            }
        }
        Ok(Model {
            adapter: LoraAdapter::init(&config, 0),
            config,
            weights,
        })
    }

    /// Forward pass in precision `T` without recording gradients.
    pub fn predict_in<T: Real>(
        &self,
        z: &LatentGrid,
        t: f64,
        cond: &TokenSequence,
        prompt: &PromptAttrs,
    ) -> Result<Vec<T>, ModelError> {
        if z.dim != self.config.token_dim() {
            return Err(ModelError::TokenDim {
                expected: self.config.token_dim(),
                got: z.dim,
            });
        }
        let mut tape = Tape::<T>::new();
        let params = cast_params::<T>(&self.all_params());
        let p = ParamVars::bind(&mut tape, &params, |_| false);
        let noisy = Tensor::new(
            vec![z.cells(), z.dim],
            z.data.iter().map(|&v| T::of(v as f64)).collect(),
        )?;
        let out = forward(
            &mut tape,
            &self.config,
            &p,
            ForwardInputs {
                noisy,
                grid: (z.h, z.w),
                cond,
                t,
                prompt,
            },
        )?;
        Ok(tape.value(out).data().to_vec())
    }
}

impl VelocityField for Model {
    fn velocity(
        &self,
        z: &LatentGrid,
        t: f64,
        cond: &TokenSequence,
        prompt: &PromptAttrs,
    ) -> Result<LatentGrid, ModelError> {
        let data = self.predict_in::<f32>(z, t, cond, prompt)?;
        Ok(LatentGrid {
            h: z.h,
            w: z.w,
            dim: z.dim,
            data,
        })
    }
}
