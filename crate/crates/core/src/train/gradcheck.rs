//! Finite-difference check of the full training loss in double precision.

use layerforge_autodiff::{grad_check, GradCheckReport, Tape, Tensor};

use super::trainer::{RunConfig, TrainError, Trainer};
use crate::model::{cast_params, forward, ForwardInputs, ParamVars};
use crate::synth::gen_dataset;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub samples_per_tensor: usize,
    /// Noise added to every parameter so zero-initialised gates and heads
    /// pass gradient to everything upstream.
    pub perturb_std: f32,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            samples_per_tensor: 3,
            perturb_std: 0.05,
            seed: 0,
        }
    }
}

/// Checks the gradient of the flow loss on one conditioned example with
/// respect to every base and adapter parameter.
pub fn model_grad_check(run: &RunConfig, opts: &GradCheckOptions) -> Result<GradCheckReport, TrainError> {
    let scenes = gen_dataset(opts.seed, 1, &run.train.scene);
    let mut trainer = Trainer::with_scenes(run.clone(), scenes)?;
    trainer.model.perturb(opts.perturb_std, opts.seed ^ 0x9e37_79b9);
    // Pick the first conditioned example so condition tokens take part.
    let ex = (0..64u64)
        .map(|s| trainer.prepare_example(u64::MAX - s, 0))
        .find(|e| e.as_ref().map_or(true, |e| !e.cond.is_empty()))
        .unwrap_or_else(|| trainer.prepare_example(0, 0))?;
    let model = &trainer.model;
    // Surfaces input errors here; inside the loss closure only tensor
    // errors remain possible.
    model.predict_in::<f64>(&ex.flow.zt, ex.flow.t, &ex.cond, &ex.prompt)?;
    let params: Vec<(String, Tensor<f64>)> = cast_params::<f64>(&model.all_params())
        .into_iter()
        .map(|(k, v)| (k, v.with_requires_grad(true)))
        .collect();
    let names: Vec<String> = params.iter().map(|(k, _)| k.clone()).collect();
    let z = &ex.flow.zt;
    let v = &ex.flow.v_target;
    let to64 = |d: &[f32]| d.iter().map(|&x| x as f64).collect::<Vec<f64>>();
    let noisy = Tensor::new(vec![z.cells(), z.dim], to64(&z.data))?;
    let target = Tensor::new(vec![v.cells(), v.dim], to64(&v.data))?;
    let report = grad_check(&params, opts.eps, opts.samples_per_tensor, |tape: &mut Tape<f64>, vars| {
        let p = ParamVars::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
        let out = forward(
            tape,
            &model.config,
            &p,
            ForwardInputs {
                noisy: noisy.clone(),
                grid: (z.h, z.w),
                cond: &ex.cond,
                t: ex.flow.t,
                prompt: &ex.prompt,
            },
        )
        .map_err(|e| match e {
            crate::model::ModelError::Tensor(t) => t,
            other => unreachable!("validated above: {other}"),
        })?;
        let target = tape.constant(target.clone());
        tape.mse(out, target)
    })?;
    Ok(report)
}
