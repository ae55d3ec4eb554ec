use std::collections::BTreeMap;

use layerforge_autodiff::{Real, Tape, Tensor, Var};

use super::config::{ModelConfig, ModelError};
use super::params::{lora_name, ParamMap};
use super::rope::rope_table;
use crate::canvas::PromptAttrs;
use crate::codec::{noisy_positions, TokenSequence};

const NORM_EPS: f64 = 1e-6;

/// Parameters recorded on a tape, by name.
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    /// Records every tensor as a leaf; `trainable` decides which ones are
    /// differentiated.
    pub fn bind<T: Real>(tape: &mut Tape<T>, params: &ParamMap<T>, trainable: impl Fn(&str) -> bool) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| {
                let v = tape.leaf(t.clone().with_requires_grad(trainable(name)));
                (name.clone(), v)
            })
            .collect();
        Self { vars }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn extend(&mut self, other: ParamVars) {
        self.vars.extend(other.vars);
    }

    pub fn get(&self, name: &str) -> Result<Var, ModelError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParam(name.to_owned()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Sinusoidal embedding of `1000·t`: cosines then sines.
pub fn timestep_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|k| (-(10_000f64.ln()) * k as f64 / half as f64).exp())
        .collect();
    let arg = |f: f64| 1000.0 * t * f;
    freqs
        .iter()
        .map(|&f| arg(f).cos())
        .chain(freqs.iter().map(|&f| arg(f).sin()))
        .collect()
}

fn one_hot<T: Real>(n: usize, i: usize) -> Tensor<T> {
    Tensor::from_fn(vec![1, n], |k| if k == i { T::one() } else { T::zero() })
}

/// Everything the velocity network reads besides its parameters.
pub struct ForwardInputs<'a, T: Real> {
    /// `[h·w, token_dim]`, row-major over the latent grid.
    pub noisy: Tensor<T>,
    pub grid: (usize, usize),
    pub cond: &'a TokenSequence,
    pub t: f64,
    pub prompt: &'a PromptAttrs,
}

struct Ctx<'a, T: Real> {
    tape: &'a mut Tape<T>,
    p: &'a ParamVars,
    cfg: &'a ModelConfig,
}

impl<T: Real> Ctx<'_, T> {
    fn linear(&mut self, x: Var, w: &str, b: &str) -> Result<Var, ModelError> {
        let y = self.tape.matmul(x, self.p.get(w)?)?;
        Ok(self.tape.add_bias(y, self.p.get(b)?)?)
    }

    /// `x·W` plus the LoRA delta when the adapter has rank > 0.
    fn projection(&mut self, x: Var, block: usize, w: &str, target: &str) -> Result<Var, ModelError> {
        let y = self.tape.matmul(x, self.p.get(&format!("blocks.{block}.attn.{w}"))?)?;
        if self.cfg.lora_rank == 0 {
            return Ok(y);
        }
        let a = self.p.get(&lora_name(block, target, 'a'))?;
        let b = self.p.get(&lora_name(block, target, 'b'))?;
        let low = self.tape.matmul(x, a)?;
        let delta = self.tape.matmul(low, b)?;
        let delta = self.tape.scale(delta, T::of(self.cfg.lora_scaling() as f64))?;
        Ok(self.tape.add(y, delta)?)
    }

    /// Splits a `[1, n·d]` modulation row into `n` row-broadcast `[rows, d]` chunks.
    fn chunks(&mut self, m: Var, n: usize, rows: usize) -> Result<Vec<Var>, ModelError> {
        let d = self.cfg.d_model;
        (0..n)
            .map(|j| {
                let c = self.tape.slice(m, 1, j * d, (j + 1) * d)?;
                Ok(self.tape.broadcast_rows(c, rows)?)
            })
            .collect()
    }

    /// `rms_norm(x)·(1 + scale) + shift`.
    fn modulated_norm(&mut self, x: Var, shift: Var, scale: Var) -> Result<Var, ModelError> {
        let h = self.tape.rms_norm(x, T::of(NORM_EPS))?;
        let hs = self.tape.mul(h, scale)?;
        let h = self.tape.add(h, hs)?;
        Ok(self.tape.add(h, shift)?)
    }

    fn attention(&mut self, h: Var, block: usize, cos: &[T], sin: &[T]) -> Result<Var, ModelError> {
        let q = self.projection(h, block, "wq", "q")?;
        let k = self.projection(h, block, "wk", "k")?;
        let v = self.projection(h, block, "wv", "v")?;
        let q = self.tape.rotary(q, cos.to_vec(), sin.to_vec())?;
        let k = self.tape.rotary(k, cos.to_vec(), sin.to_vec())?;
        let hd = self.cfg.head_dim;
        let inv_sqrt = T::of(1.0 / (hd as f64).sqrt());
        let mut heads = Vec::with_capacity(self.cfg.n_heads);
        for i in 0..self.cfg.n_heads {
            let qh = self.tape.slice(q, 1, i * hd, (i + 1) * hd)?;
            let kh = self.tape.slice(k, 1, i * hd, (i + 1) * hd)?;
            let vh = self.tape.slice(v, 1, i * hd, (i + 1) * hd)?;
            let kt = self.tape.transpose(kh)?;
            let scores = self.tape.matmul(qh, kt)?;
            let scores = self.tape.scale(scores, inv_sqrt)?;
            let weights = self.tape.softmax_rows(scores)?;
            heads.push(self.tape.matmul(weights, vh)?);
        }
        let o = self.tape.concat(&heads, 1)?;
        self.projection(o, block, "wo", "o")
    }
}

/// Records the velocity network on `tape` and returns the `[h·w, token_dim]`
/// prediction at the noisy positions. Condition tokens take part in every
/// attention layer but are dropped before the output head.
pub fn forward<T: Real>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    p: &ParamVars,
    inputs: ForwardInputs<'_, T>,
) -> Result<Var, ModelError> {
    let td = cfg.token_dim();
    let (gh, gw) = inputs.grid;
    let sn = gh * gw;
    if inputs.noisy.shape() != [sn, td] {
        return Err(ModelError::TokenDim {
            expected: td,
            got: inputs.noisy.shape().last().copied().unwrap_or(0),
        });
    }
    if inputs.cond.dim != td && !inputs.cond.is_empty() {
        return Err(ModelError::TokenDim {
            expected: td,
            got: inputs.cond.dim,
        });
    }
    if !(0.0..=1.0).contains(&inputs.t) {
        return Err(ModelError::Timestep(inputs.t));
    }
    if let Some(tok) = inputs
        .cond
        .tokens
        .iter()
        .find(|t| t.pos.layer > cfg.max_unlocked_layers)
    {
        return Err(ModelError::LayerAxis {
            axis: tok.pos.layer,
            max: cfg.max_unlocked_layers,
        });
    }
    let hue = cfg.hue_index(&inputs.prompt.background_hue)?;
    let arrangement = cfg.arrangement_index(&inputs.prompt.arrangement)?;

    let mut cx = Ctx { tape, p, cfg };
    let sc = inputs.cond.len();
    let s = sn + sc;

    let noisy = cx.tape.constant(inputs.noisy);
    let mut x = cx.linear(noisy, "noisy_in.w", "noisy_in.b")?;
    if sc > 0 {
        let data = inputs
            .cond
            .tokens
            .iter()
            .flat_map(|t| t.vector.iter().map(|&v| T::of(v as f64)))
            .collect();
        let cond = cx.tape.constant(Tensor::new(vec![sc, td], data)?);
        let xc = cx.linear(cond, "cond_in.w", "cond_in.b")?;
        x = cx.tape.concat(&[x, xc], 0)?;
    }

    let temb: Vec<T> = timestep_embedding(inputs.t, cfg.time_freq_dim)
        .into_iter()
        .map(T::of)
        .collect();
    let temb = cx.tape.constant(Tensor::new(vec![1, cfg.time_freq_dim], temb)?);
    let c = cx.linear(temb, "time.w1", "time.b1")?;
    let c = cx.tape.gelu(c)?;
    let c = cx.linear(c, "time.w2", "time.b2")?;
    let hue_hot = cx.tape.constant(one_hot(cfg.hue_vocab.len(), hue));
    let hue_emb = cx.tape.matmul(hue_hot, p.get("prompt.hue")?)?;
    let arr_hot = cx.tape.constant(one_hot(cfg.arrangement_vocab.len(), arrangement));
    let arr_emb = cx.tape.matmul(arr_hot, p.get("prompt.arrangement")?)?;
    let c = cx.tape.add(c, hue_emb)?;
    let c = cx.tape.add(c, arr_emb)?;
    let c = cx.tape.gelu(c)?;

    let mut positions = noisy_positions(gh, gw);
    positions.extend(inputs.cond.tokens.iter().map(|t| t.pos));
    let (cos, sin) = rope_table::<T>(&positions, cfg)?;

    for i in 0..cfg.n_blocks {
        let m = cx.linear(c, &format!("blocks.{i}.mod.w"), &format!("blocks.{i}.mod.b"))?;
        let mods = cx.chunks(m, 6, s)?;
        let (shift1, scale1, gate1, shift2, scale2, gate2) =
            (mods[0], mods[1], mods[2], mods[3], mods[4], mods[5]);

        let h = cx.modulated_norm(x, shift1, scale1)?;
        let a = cx.attention(h, i, &cos, &sin)?;
        let a = cx.tape.mul(a, gate1)?;
        x = cx.tape.add(x, a)?;

        let h = cx.modulated_norm(x, shift2, scale2)?;
        let h = cx.linear(h, &format!("blocks.{i}.mlp.w1"), &format!("blocks.{i}.mlp.b1"))?;
        let h = cx.tape.gelu(h)?;
        let h = cx.linear(h, &format!("blocks.{i}.mlp.w2"), &format!("blocks.{i}.mlp.b2"))?;
        let h = cx.tape.mul(h, gate2)?;
        x = cx.tape.add(x, h)?;
    }

    let xn = if sc > 0 { cx.tape.slice(x, 0, 0, sn)? } else { x };
    let m = cx.linear(c, "final.mod.w", "final.mod.b")?;
    let mods = cx.chunks(m, 2, sn)?;
    let h = cx.modulated_norm(xn, mods[0], mods[1])?;
    cx.linear(h, "head.w", "head.b")
}
