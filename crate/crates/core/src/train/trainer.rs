use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use layerforge_autodiff::{AdamW, GradCheckError, OptimizerState, Tape, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::flow::{make_flow_sample, FlowSample};
use crate::canvas::PromptAttrs;
use crate::codec::{build_condition_sequence, CodecError, TokenSequence};
use crate::model::{forward, ForwardInputs, Model, ModelConfig, ModelError, ParamVars};
use crate::parallel::{par_map, par_map_range};
use crate::synth::{gen_dataset, load_dataset, sample_example, SamplingConfig, Scene, SceneConfig, SynthError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regime {
    /// Every base weight trains, with conditioning, from the first step.
    Full,
    /// Unconditional pretraining of the base for `pretrain_steps`, then the
    /// base is frozen and only the LoRA adapter trains, with conditioning.
    FreezeLora { pretrain_steps: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f32,
    pub weight_decay: f32,
    pub batch: usize,
    pub steps: u64,
    pub scenes: usize,
    pub seed: u64,
    pub regime: Regime,
    /// Steps between checkpoints written by [`Trainer::run`]; 0 disables.
    pub checkpoint_interval: u64,
    pub sampling: SamplingConfig,
    pub scene: SceneConfig,
    /// Load scenes from a dumped dataset instead of generating them.
    pub data_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.01,
            batch: 8,
            steps: 2000,
            scenes: 16,
            seed: 0,
            regime: Regime::Full,
            checkpoint_interval: 500,
            sampling: SamplingConfig::default(),
            scene: SceneConfig::default(),
            data_dir: None,
        }
    }
}

/// Model and training configuration together; the `train --config` file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        let t = &self.train;
        if !(t.lr > 0.0) || !t.lr.is_finite() {
            return Err(TrainError::Config(format!("lr must be positive, got {}", t.lr)));
        }
        if t.batch == 0 {
            return Err(TrainError::Config("batch must be at least 1".into()));
        }
        if t.scenes == 0 && t.data_dir.is_none() {
            return Err(TrainError::Config("scenes must be at least 1".into()));
        }
        let p = self.model.patch as u32;
        if t.scene.width == 0 || t.scene.height == 0 || t.scene.width % p != 0 || t.scene.height % p != 0 {
            return Err(TrainError::Config(format!(
                "scene size {}x{} must be a positive multiple of patch {p}",
                t.scene.width, t.scene.height
            )));
        }
        t.sampling.validate()?;
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}{}", dump.as_ref().map(|p| format!(" (diagnostics in {})", p.display())).unwrap_or_default())]
    NonFiniteLoss { step: u64, dump: Option<PathBuf> },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    GradCheck(#[from] GradCheckError),
}

/// Which parameter groups train and whether the canvas is shown.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Phase {
    pub base_trainable: bool,
    pub adapter_trainable: bool,
    pub conditioned: bool,
}

impl Regime {
    pub fn phase(self, step: u64) -> Phase {
        match self {
            Regime::Full => Phase {
                base_trainable: true,
                adapter_trainable: false,
                conditioned: true,
            },
            Regime::FreezeLora { pretrain_steps } if step < pretrain_steps => Phase {
                base_trainable: true,
                adapter_trainable: false,
                conditioned: false,
            },
            Regime::FreezeLora { .. } => Phase {
                base_trainable: false,
                adapter_trainable: true,
                conditioned: true,
            },
        }
    }
}

/// One training input: condition tokens, prompt and a flow sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedExample {
    pub cond: TokenSequence,
    pub prompt: PromptAttrs,
    pub flow: FlowSample,
    pub locked_fraction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub locked_fraction: f64,
    pub wallclock_ms: u64,
}

/// Seed for example `index` of the batch at `step`.
pub fn example_seed(seed: u64, step: u64, index: usize) -> u64 {
    let mut h = seed ^ 0x6C61_7965_7266_6F72;
    for v in [step, index as u64] {
        h = (h ^ v).wrapping_mul(0x0000_0100_0000_01B3).rotate_left(29) ^ (h >> 31);
    }
    h
}

pub struct Trainer {
    pub run: RunConfig,
    pub model: Model,
    pub optimizer: OptimizerState,
    pub step: u64,
    pub scenes: Vec<Scene>,
}

fn scenes_for(run: &RunConfig) -> Result<Vec<Scene>, TrainError> {
    let scenes = match &run.train.data_dir {
        Some(dir) => load_dataset(dir)?,
        None => gen_dataset(run.train.seed, run.train.scenes, &run.train.scene),
    };
    if scenes.is_empty() {
        return Err(TrainError::Config("dataset is empty".into()));
    }
    Ok(scenes)
}

impl Trainer {
    pub fn new(run: RunConfig) -> Result<Self, TrainError> {
        let scenes = scenes_for(&run)?;
        Self::with_scenes(run, scenes)
    }

    pub fn with_scenes(run: RunConfig, scenes: Vec<Scene>) -> Result<Self, TrainError> {
        run.validate()?;
        let model = Model::init(run.model.clone(), run.train.seed)?;
        let optimizer = OptimizerState::new(AdamW {
            lr: run.train.lr,
            weight_decay: run.train.weight_decay,
            ..AdamW::default()
        });
        Ok(Self {
            run,
            model,
            optimizer,
            step: 0,
            scenes,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self, TrainError> {
        ckpt.run.validate()?;
        let scenes = scenes_for(&ckpt.run)?;
        Ok(Self {
            run: ckpt.run,
            model: ckpt.model,
            optimizer: ckpt.optimizer,
            step: ckpt.step,
            scenes,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            run: self.run.clone(),
            step: self.step,
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
        }
    }

    pub fn phase(&self) -> Phase {
        self.run.train.regime.phase(self.step)
    }

    pub fn prepare_example(&self, step: u64, index: usize) -> Result<PreparedExample, TrainError> {
        let t = &self.run.train;
        let patch = self.run.model.patch;
        let mut rng = ChaCha8Rng::seed_from_u64(example_seed(t.seed, step, index));
        let scene = &self.scenes[rng.random_range(0..self.scenes.len())];
        let ex = sample_example(scene, &t.sampling, &mut rng)?;
        let cond = if t.regime.phase(step).conditioned {
            build_condition_sequence(&ex.canvas, patch)?
        } else {
            TokenSequence::empty(self.run.model.token_dim())
        };
        let time: f64 = rng.random();
        let flow = make_flow_sample(&ex.target, patch, time, rng.random())?;
        Ok(PreparedExample {
            cond,
            locked_fraction: ex.locked_fraction(),
            prompt: ex.prompt,
            flow,
        })
    }

    pub fn prepare_batch(&self, step: u64) -> Result<Vec<PreparedExample>, TrainError> {
        par_map_range(self.run.train.batch, |i| self.prepare_example(step, i))
            .into_iter()
            .collect()
    }

    /// Mean loss of `batch` under the current parameters.
    pub fn batch_loss(&self, batch: &[PreparedExample]) -> Result<f64, TrainError> {
        let losses = par_map(batch, |ex| example_loss_and_grads(&self.model, NO_GRAD, ex).map(|(l, _)| l));
        let mut sum = 0.0;
        for l in losses {
            sum += l?;
        }
        Ok(sum / batch.len() as f64)
    }

    /// One optimizer update on `batch`; returns the batch loss before the
    /// update. Per-example gradients are computed independently and summed in
    /// batch order, so the result does not depend on thread scheduling.
    pub fn step_on_batch(&mut self, batch: &[PreparedExample]) -> Result<f64, TrainError> {
        let phase = self.phase();
        let model = &self.model;
        let results = par_map(batch, |ex| example_loss_and_grads(model, phase, ex));
        let mut loss = 0.0;
        let mut total: Vec<(String, Vec<f32>)> = Vec::new();
        for r in results {
            let (l, grads) = r?;
            loss += l;
            if total.is_empty() {
                total = grads;
            } else {
                for ((_, acc), (_, g)) in total.iter_mut().zip(grads) {
                    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
        }
        let n = batch.len() as f64;
        loss /= n;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step: self.step,
                dump: None,
            });
        }
        let inv = 1.0 / n as f32;
        let grads: Vec<(String, Tensor)> = total
            .into_iter()
            .map(|(name, mut g)| {
                g.iter_mut().for_each(|v| *v *= inv);
                let shape = self.param(&name).shape().to_vec();
                (name, Tensor::new(shape, g).expect("gradient matches parameter"))
            })
            .collect();
        if !grads.is_empty() {
            let mut by_name: std::collections::BTreeMap<&str, &Tensor> =
                grads.iter().map(|(k, g)| (k.as_str(), g)).collect();
            let updates = self
                .model
                .weights
                .params
                .iter_mut()
                .chain(self.model.adapter.params.iter_mut())
                .filter_map(|(k, p)| by_name.remove(k.as_str()).map(|g| (k.as_str(), p, g)));
            self.optimizer.adamw_step(updates)?;
        }
        self.step += 1;
        Ok(loss)
    }

    fn param(&self, name: &str) -> &Tensor {
        self.model
            .weights
            .params
            .get(name)
            .or_else(|| self.model.adapter.params.get(name))
            .expect("gradient for a known parameter")
    }

    pub fn train_step(&mut self) -> Result<StepRecord, TrainError> {
        let batch = self.prepare_batch(self.step)?;
        let locked_fraction = batch.iter().map(|e| e.locked_fraction).sum::<f64>() / batch.len() as f64;
        let step = self.step;
        let loss = self.step_on_batch(&batch).map_err(|e| match e {
            TrainError::NonFiniteLoss { .. } => TrainError::NonFiniteLoss { step, dump: None },
            other => other,
        })?;
        Ok(StepRecord {
            step,
            loss,
            locked_fraction,
            wallclock_ms: 0,
        })
    }

    /// Trains until `run.train.steps`, appending to `metrics.csv` and writing
    /// checkpoints under `out_dir` when given. A non-finite loss aborts the
    /// run after writing `nan_dump.json`.
    pub fn run(
        &mut self,
        out_dir: Option<&Path>,
        mut on_step: impl FnMut(&StepRecord),
    ) -> Result<Vec<StepRecord>, TrainError> {
        let mut csv = match out_dir {
            Some(dir) => Some(open_metrics(dir)?),
            None => None,
        };
        let start = Instant::now();
        let mut records = Vec::new();
        while self.step < self.run.train.steps {
            let mut rec = match self.train_step() {
                Ok(r) => r,
                Err(TrainError::NonFiniteLoss { step, .. }) => {
                    let dump = out_dir.map(|d| self.write_nan_dump(d, step)).transpose()?;
                    return Err(TrainError::NonFiniteLoss { step, dump });
                }
                Err(e) => return Err(e),
            };
            rec.wallclock_ms = start.elapsed().as_millis() as u64;
            if let Some((path, f)) = csv.as_mut() {
                writeln!(f, "{},{},{},{}", rec.step, rec.loss, rec.locked_fraction, rec.wallclock_ms)
                    .map_err(|source| TrainError::Io {
                        path: path.clone(),
                        source,
                    })?;
            }
            on_step(&rec);
            records.push(rec);
            let interval = self.run.train.checkpoint_interval;
            if let Some(dir) = out_dir {
                if interval > 0 && self.step % interval == 0 && self.step < self.run.train.steps {
                    self.save_to(&dir.join(format!("checkpoint_{}.lckp", self.step)))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            self.save_to(&dir.join("checkpoint.lckp"))?;
        }
        Ok(records)
    }

    pub fn save_to(&self, path: &Path) -> Result<(), TrainError> {
        fs::write(path, save_checkpoint(&self.checkpoint())).map_err(|source| TrainError::Io {
            path: path.to_owned(),
            source,
        })
    }

    fn write_nan_dump(&self, dir: &Path, step: u64) -> Result<PathBuf, TrainError> {
        let batch = self.prepare_batch(step)?;
        let examples: Vec<_> = batch
            .iter()
            .map(|ex| {
                let loss = example_loss_and_grads(&self.model, NO_GRAD, ex).map(|(l, _)| l).ok();
                serde_json::json!({
                    "t": ex.flow.t,
                    "cond_tokens": ex.cond.len(),
                    "prompt": ex.prompt,
                    "loss": loss.filter(|l| l.is_finite()),
                })
            })
            .collect();
        let params: serde_json::Map<String, serde_json::Value> = self
            .model
            .all_params()
            .iter()
            .map(|(k, t)| {
                let finite = t.is_finite();
                let norm = t.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
                (k.clone(), serde_json::json!({ "finite": finite, "l2": if finite { Some(norm) } else { None } }))
            })
            .collect();
        let dump = serde_json::json!({ "step": step, "examples": examples, "params": params });
        let path = dir.join("nan_dump.json");
        fs::write(&path, serde_json::to_vec_pretty(&dump).expect("dump serializes")).map_err(|source| {
            TrainError::Io {
                path: path.clone(),
                source,
            }
        })?;
        Ok(path)
    }
}

fn open_metrics(dir: &Path) -> Result<(PathBuf, fs::File), TrainError> {
    let io = |path: &Path| {
        let path = path.to_owned();
        move |source| TrainError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let path = dir.join("metrics.csv");
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(io(&path))?;
    if fresh {
        writeln!(f, "step,loss,locked_fraction,wallclock_ms").map_err(io(&path))?;
    }
    Ok((path, f))
}

const NO_GRAD: Phase = Phase {
    base_trainable: false,
    adapter_trainable: false,
    conditioned: true,
};

/// Loss of one example and the gradients of every trainable parameter, in
/// parameter-name order (base, then adapter).
pub fn example_loss_and_grads(
    model: &Model,
    phase: Phase,
    ex: &PreparedExample,
) -> Result<(f64, Vec<(String, Vec<f32>)>), TrainError> {
    let mut tape = Tape::<f32>::new();
    let mut p = ParamVars::bind(&mut tape, &model.weights.params, |_| phase.base_trainable);
    p.extend(ParamVars::bind(&mut tape, &model.adapter.params, |_| phase.adapter_trainable));
    let z = &ex.flow.zt;
    let noisy = Tensor::new(vec![z.cells(), z.dim], z.data.clone())?;
    let out = forward(
        &mut tape,
        &model.config,
        &p,
        ForwardInputs {
            noisy,
            grid: (z.h, z.w),
            cond: &ex.cond,
            t: ex.flow.t,
            prompt: &ex.prompt,
        },
    )?;
    let v = &ex.flow.v_target;
    let target = tape.constant(Tensor::new(vec![v.cells(), v.dim], v.data.clone())?);
    let loss = tape.mse(out, target)?;
    let value = tape.value(loss).data()[0] as f64;
    if !tape.requires_grad(loss) || !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    let mut grads = tape.backward(loss)?;
    let names: Vec<(String, bool)> = model
        .weights
        .params
        .keys()
        .map(|k| (k.clone(), phase.base_trainable))
        .chain(model.adapter.params.keys().map(|k| (k.clone(), phase.adapter_trainable)))
        .collect();
    let mut out = Vec::new();
    for (name, trainable) in names {
        if trainable {
            let var = p.get(&name)?;
            let g = grads.take(var).expect("trainable parameter has a gradient");
            out.push((name, g.into_data()));
        }
    }
    Ok((value, out))
}

/// Configuration of a model small enough for quick checks.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        head_dim: 8,
        n_blocks: 1,
        axis_dims: [2, 2, 4],
        mlp_ratio: 2,
        time_freq_dim: 8,
        lora_rank: 2,
        lora_alpha: 2.0,
        ..ModelConfig::default()
    }
}
