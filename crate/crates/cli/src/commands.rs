//! Subcommand implementations. Each returns the JSON summary it prints.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use layerforge_core::manifest::parse_manifest;
use layerforge_core::model::Model;
use layerforge_core::sampler::{evaluate_locking, full_lock_example, euler_sample, mean_abs_diff, SampleConfig};
use layerforge_core::synth::{dump_dataset, gen_dataset, load_dataset, SceneConfig};
use layerforge_core::train::{load_checkpoint, model_grad_check, Checkpoint, GradCheckOptions, RunConfig, Trainer};
use serde_json::{json, Value};

use crate::service::{self, run_generation};

/// Maximum relative error `grad-check` accepts.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;
/// Canvases per category in `eval`.
pub const EVAL_CANVASES: usize = 16;
/// Canvases compared between 16 and 64 Euler steps in `eval`.
const STEP_COMPARISON_CANVASES: usize = 4;
pub const DEFAULT_ADDR: &str = "127.0.0.1:8787";
pub const ADDR_ENV: &str = "LAYERFORGE_ADDR";
/// Maximum concurrent generations in `serve`.
pub const MAX_PARALLEL_ENV: &str = "LAYERFORGE_MAX_PARALLEL";

pub fn gen_data(seed: u64, scenes: usize, out: &Path) -> Result<Value> {
    if scenes == 0 {
        bail!("--scenes must be at least 1");
    }
    let data = gen_dataset(seed, scenes, &SceneConfig::default());
    dump_dataset(&data, out)?;
    Ok(json!({ "scenes": data.len(), "out": out }))
}

pub fn read_run_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let run: RunConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    run.validate()?;
    Ok(run)
}

pub fn train(config: Option<&Path>, out: &Path) -> Result<Value> {
    let run = read_run_config(config)?;
    let mut trainer = Trainer::new(run)?;
    let total = trainer.run.train.steps;
    let records = trainer.run(Some(out), |r| {
        if (r.step + 1) % 100 == 0 || r.step + 1 == total {
            eprintln!("step {} loss {:.5}", r.step + 1, r.loss);
        }
    })?;
    let checkpoint = trainer.save_to(&out.join("checkpoint.lckp"))?;
    Ok(json!({
        "steps": trainer.step,
        "final_loss": records.last().map(|r| r.loss),
        "checkpoint": checkpoint,
        "metrics": out.join("metrics.csv"),
    }))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    load_checkpoint(&bytes).with_context(|| format!("loading {}", path.display()))
}

/// Writes the PNG to `out` and a JSON sidecar with token counts next to it.
pub fn generate(checkpoint: &Path, canvas: &Path, steps: usize, seed: u64, out: &Path) -> Result<Value> {
    let ckpt = read_checkpoint(checkpoint)?;
    let bytes = fs::read(canvas).with_context(|| format!("reading {}", canvas.display()))?;
    let canvas = parse_manifest(&bytes).with_context(|| format!("parsing {}", canvas.display()))?;
    let (png, condition_tokens, layers) = run_generation(&ckpt.model, &canvas, &SampleConfig { steps, seed })?;
    fs::write(out, png).with_context(|| format!("writing {}", out.display()))?;
    let sidecar_path = out.with_extension("json");
    let sidecar = json!({
        "image": out,
        "condition_tokens": condition_tokens,
        "layers": layers,
        "steps": steps,
        "seed": seed,
        "checkpoint_step": ckpt.step,
    });
    fs::write(&sidecar_path, serde_json::to_vec_pretty(&sidecar)?)
        .with_context(|| format!("writing {}", sidecar_path.display()))?;
    Ok(sidecar)
}

/// `LAYERFORGE_ADDR` wins over `--addr`, which wins over the default.
pub fn resolve_addr(flag: Option<&str>, env: Option<&str>) -> Result<SocketAddr> {
    let raw = env.filter(|s| !s.is_empty()).or(flag).unwrap_or(DEFAULT_ADDR);
    raw.parse().with_context(|| format!("invalid address {raw:?}"))
}

pub fn serve(checkpoint: &Path, addr: Option<&str>) -> Result<()> {
    let ckpt = read_checkpoint(checkpoint)?;
    let addr = resolve_addr(addr, std::env::var(ADDR_ENV).ok().as_deref())?;
    let max_parallel = match std::env::var(MAX_PARALLEL_ENV) {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .with_context(|| format!("{MAX_PARALLEL_ENV} must be a positive integer, got {v:?}"))?,
        Err(_) => service::DEFAULT_MAX_PARALLEL,
    };
    let app = service::router(ckpt.model, ckpt.step, max_parallel);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        eprintln!("listening on {}", listener.local_addr()?);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}

/// Returns the report and whether it is within tolerance.
pub fn grad_check(config: Option<&Path>) -> Result<(Value, bool)> {
    let run = read_run_config(config)?;
    let report = model_grad_check(&run, &GradCheckOptions::default())?;
    let pass = report.max_rel_error < GRAD_CHECK_TOLERANCE;
    let tensors: Vec<Value> = report
        .tensors
        .iter()
        .map(|t| json!({ "name": t.name, "checked": t.checked, "max_rel_error": t.max_rel_error }))
        .collect();
    Ok((
        json!({
            "max_rel_error": report.max_rel_error,
            "tolerance": GRAD_CHECK_TOLERANCE,
            "pass": pass,
            "tensors": tensors,
        }),
        pass,
    ))
}

/// `scenes` is either a dataset directory written by `gen-data` or a count
/// `N`, meaning the first `N` scenes the checkpoint was trained on.
pub fn eval(checkpoint: &Path, scenes: &str, report: &Path) -> Result<Value> {
    let ckpt = read_checkpoint(checkpoint)?;
    let data = match scenes.parse::<usize>() {
        Ok(0) => bail!("--scenes must be at least 1"),
        Ok(n) => {
            let mut all = Trainer::from_checkpoint(ckpt.clone())?.scenes;
            all.truncate(n);
            all
        }
        Err(_) => load_dataset(&PathBuf::from(scenes))?,
    };
    let model: &Model = &ckpt.model;
    let patch = model.config.patch;
    let locking = evaluate_locking(model, patch, &data, EVAL_CANVASES, &SampleConfig::default())?;
    let mut step_mad = Vec::new();
    for i in 0..STEP_COMPARISON_CANVASES.min(data.len()) {
        let ex = full_lock_example(&data[i], i as u64);
        let a = euler_sample(model, &ex.canvas, patch, &SampleConfig { steps: 16, seed: i as u64 })?;
        let b = euler_sample(model, &ex.canvas, patch, &SampleConfig { steps: 64, seed: i as u64 })?;
        step_mad.push(mean_abs_diff(&a.image, &b.image));
    }
    let value = json!({
        "checkpoint_step": ckpt.step,
        "scenes": data.len(),
        "locking": locking,
        "steps_16_vs_64_mean_abs_diff": step_mad,
    });
    if let Some(dir) = report.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(report, serde_json::to_vec_pretty(&value)?).with_context(|| format!("writing {}", report.display()))?;
    Ok(json!({
        "report": report,
        "locked_subject_psnr": locking.locked_subject_psnr,
        "unlocked_subject_psnr": locking.unlocked_subject_psnr,
        "locking_gap_db": locking.locking_gap_db,
        "full_lock_psnr": locking.full_lock.mean_locked_psnr,
    }))
}
