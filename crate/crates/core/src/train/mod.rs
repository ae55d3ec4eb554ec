//! Rectified-flow training over locking-aware samples.

mod checkpoint;
mod flow;
mod gradcheck;
mod trainer;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, CheckpointError, MAGIC, VERSION};
pub use gradcheck::{model_grad_check, GradCheckOptions};
pub use flow::{flow_loss, flow_sample_from, gaussian_grid, make_flow_sample, FlowSample, LossShapeError};
pub use trainer::{
    example_loss_and_grads, example_seed, tiny_model_config, Phase, PreparedExample, Regime, RunConfig, StepRecord,
    TrainConfig, TrainError, Trainer,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_run(steps: u64) -> RunConfig {
        RunConfig {
            model: tiny_model_config(),
            train: TrainConfig {
                lr: 1e-3,
                batch: 2,
                steps,
                scenes: 3,
                seed: 17,
                checkpoint_interval: 0,
                ..TrainConfig::default()
            },
        }
    }

    #[test]
    fn tiny_model_gradients_match_finite_differences() {
        let report = model_grad_check(&tiny_run(1), &GradCheckOptions::default()).unwrap();
        assert!(report.tensors.len() > 20);
        assert!(report.max_rel_error < 1e-4, "{:?}", report.tensors.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut tr = Trainer::new(tiny_run(3)).unwrap();
        tr.run(None, |_| {}).unwrap();
        let bytes = save_checkpoint(&tr.checkpoint());
        let back = load_checkpoint(&bytes).unwrap();
        assert_eq!(back, tr.checkpoint());
        assert_eq!(save_checkpoint(&back), bytes);
    }

    #[test]
    fn checkpoint_errors() {
        let tr = Trainer::new(tiny_run(0)).unwrap();
        let bytes = save_checkpoint(&tr.checkpoint());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(load_checkpoint(&bad), Err(CheckpointError::BadMagic(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(load_checkpoint(&bad), Err(CheckpointError::Version(2))));
        assert!(matches!(
            load_checkpoint(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated(_))
        ));
        let mut other = tiny_model_config();
        other.d_model = 32;
        other.head_dim = 16;
        other.axis_dims = [4, 6, 6];
        match load_checkpoint_for(&bytes, &other) {
            Err(CheckpointError::ShapeMismatch { name, .. }) => assert_eq!(name, "noisy_in.w"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let mut straight = Trainer::new(tiny_run(6)).unwrap();
        straight.run(None, |_| {}).unwrap();

        let mut first = Trainer::new(tiny_run(6)).unwrap();
        first.run.train.steps = 3;
        first.run(None, |_| {}).unwrap();
        let mut ckpt = load_checkpoint(&save_checkpoint(&first.checkpoint())).unwrap();
        ckpt.run.train.steps = 6;
        let mut resumed = Trainer::from_checkpoint(ckpt).unwrap();
        resumed.run(None, |_| {}).unwrap();
        assert_eq!(save_checkpoint(&resumed.checkpoint()), save_checkpoint(&straight.checkpoint()));
    }

    #[test]
    fn small_step_decreases_fixed_batch_loss() {
        let mut run = tiny_run(1);
        run.train.lr = 1e-5;
        let mut tr = Trainer::new(run).unwrap();
        // Leave the zero-initialised output head so gradients reach every layer.
        tr.model.perturb(0.05, 1);
        let batch = tr.prepare_batch(0).unwrap();
        let before = tr.batch_loss(&batch).unwrap();
        let reported = tr.step_on_batch(&batch).unwrap();
        assert_eq!(before, reported);
        let after = tr.batch_loss(&batch).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn rank_zero_adapter_cannot_learn() {
        let mut run = tiny_run(5);
        run.model.lora_rank = 0;
        run.train.regime = Regime::FreezeLora { pretrain_steps: 0 };
        let mut tr = Trainer::new(run).unwrap();
        let before = tr.model.clone();
        tr.run(None, |_| {}).unwrap();
        assert_eq!(tr.model, before);
        assert_eq!(tr.step, 5);
    }

    #[test]
    fn freeze_then_lora_phases() {
        let mut run = tiny_run(4);
        run.train.regime = Regime::FreezeLora { pretrain_steps: 2 };
        let mut tr = Trainer::new(run).unwrap();
        assert!(tr.prepare_example(0, 0).unwrap().cond.is_empty());
        tr.run.train.steps = 2;
        tr.run(None, |_| {}).unwrap();
        let base = tr.model.weights.clone();
        let adapter = tr.model.adapter.clone();
        tr.run.train.steps = 4;
        tr.run(None, |_| {}).unwrap();
        assert_eq!(tr.model.weights, base);
        assert_ne!(tr.model.adapter, adapter);
    }

    #[test]
    fn conditioning_receives_gradient() {
        let mut run = tiny_run(1);
        run.train.sampling.p_background = 1.0;
        let mut tr = Trainer::new(run).unwrap();
        tr.model.perturb(0.05, 2);
        let batch = tr.prepare_batch(0).unwrap();
        assert!(batch.iter().any(|e| !e.cond.is_empty()));
        let (_, grads) = example_loss_and_grads(&tr.model, tr.phase(), &batch[0]).unwrap();
        let g = &grads.iter().find(|(n, _)| n == "cond_in.w").unwrap().1;
        assert!(g.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn metrics_and_checkpoints_written() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = tiny_run(4);
        run.train.checkpoint_interval = 2;
        let mut tr = Trainer::new(run).unwrap();
        let recs = tr.run(Some(dir.path()), |_| {}).unwrap();
        assert_eq!(recs.len(), 4);
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "step,loss,locked_fraction,wallclock_ms");
        assert_eq!(lines.len(), 5);
        assert!(dir.path().join("checkpoint_2.lckp").exists());
        assert!(dir.path().join("checkpoint.lckp").exists());
    }

    #[test]
    fn non_finite_loss_aborts_with_dump() {
        let dir = tempfile::tempdir().unwrap();
        let mut tr = Trainer::new(tiny_run(3)).unwrap();
        tr.model.weights.params.get_mut("head.b").unwrap().data_mut()[0] = f32::NAN;
        match tr.run(Some(dir.path()), |_| {}) {
            Err(TrainError::NonFiniteLoss { step: 0, dump: Some(p) }) => assert!(p.exists()),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        let mut run = RunConfig::default();
        run.train.batch = 0;
        assert!(Trainer::new(run).is_err());
        let parsed: RunConfig = serde_json::from_str(r#"{"train":{"steps":5}}"#).unwrap();
        assert_eq!(parsed.train.steps, 5);
        assert_eq!(parsed.model, ModelConfig::default());
    }
}
