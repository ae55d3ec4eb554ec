//! End-to-end checks across modules through the public API.

use image::{Rgba, RgbaImage};
use layerforge_core::canvas::{compose_collage, rasterize_layer, Placement};
use layerforge_core::codec::{build_condition_sequence, decode_latents, encode_layer};
use layerforge_core::manifest::{encode_png, parse_manifest, serialize_manifest};
use layerforge_core::model::{Model, VelocityField};
use layerforge_core::sampler::{euler_sample, full_lock_example, locking_probe_example, EvalReport, SampleConfig, PSNR_CAP};
use layerforge_core::synth::{dump_dataset, gen_dataset, load_dataset, SceneConfig};
use layerforge_core::train::{load_checkpoint, save_checkpoint, tiny_model_config, RunConfig, TrainConfig, Trainer};
use proptest::prelude::*;
use serde_json::json;

#[test]
fn placement_manifest_rasterizes_on_load() {
    let source = RgbaImage::from_fn(4, 4, |x, y| Rgba([x as u8 * 60, y as u8 * 60, 9, 255]));
    let placement = Placement {
        offset_x: 3,
        offset_y: 5,
        scale: 2.0,
    };
    let b64 = |img: &RgbaImage| {
        use base64::Engine;
        base64::engine::general_purpose::STANDARD.encode(encode_png(img))
    };
    let manifest = json!({
        "version": "1", "width": 16, "height": 16,
        "prompt": {"background_hue": "red", "arrangement": "row"},
        "layers": [{"id": "a", "z_order": 0, "locked": true, "source_png": b64(&source),
                    "placement": {"offset_x": 3, "offset_y": 5, "scale": 2.0}}]
    });
    let canvas = parse_manifest(&serde_json::to_vec(&manifest).unwrap()).unwrap();
    assert_eq!(canvas.layers[0].rgba, rasterize_layer(&source, &placement, 16, 16).unwrap());
    // Canonical form is a fixed point.
    let bytes = serialize_manifest(&canvas);
    assert_eq!(serialize_manifest(&parse_manifest(&bytes).unwrap()), bytes);
}

#[test]
fn dumped_dataset_trains_like_generated() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = gen_dataset(4, 2, &SceneConfig::default());
    dump_dataset(&scenes, dir.path()).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap(), scenes);

    let run = |data_dir| RunConfig {
        model: tiny_model_config(),
        train: TrainConfig {
            steps: 2,
            batch: 2,
            scenes: 2,
            seed: 4,
            checkpoint_interval: 0,
            data_dir,
            ..TrainConfig::default()
        },
    };
    let mut a = Trainer::new(run(None)).unwrap();
    let mut b = Trainer::new(run(Some(dir.path().to_path_buf()))).unwrap();
    a.run(None, |_| {}).unwrap();
    b.run(None, |_| {}).unwrap();
    assert_eq!(a.model, b.model);

    let ckpt = load_checkpoint(&save_checkpoint(&b.checkpoint())).unwrap();
    assert_eq!(ckpt.model, b.model);
}

#[test]
fn sampling_a_checkpoint_is_reproducible_and_evaluable() {
    let mut model = Model::init(tiny_model_config(), 1).unwrap();
    model.perturb(0.05, 2);
    let scene = gen_dataset(6, 4, &SceneConfig::default())
        .into_iter()
        .find(|s| s.meta.identities.len() >= 2)
        .unwrap();
    let ex = locking_probe_example(&scene, 3).unwrap();
    let cfg = SampleConfig { steps: 3, seed: 8 };
    let a = euler_sample(&model, &ex.canvas, 4, &cfg).unwrap();
    let b = euler_sample(&model, &ex.canvas, 4, &cfg).unwrap();
    assert_eq!(a.image, b.image);
    assert_eq!(a.cond, build_condition_sequence(&ex.canvas, 4).unwrap());
    let report = EvalReport::evaluate(&a.image, &ex);
    assert_eq!(report.layers.len(), ex.canvas.layers.len());
    assert!(report.layers.iter().filter_map(|l| l.psnr).all(|p| p < PSNR_CAP));
    assert!(model.velocity(&encode_layer(&ex.target, 4).unwrap(), 0.5, &a.cond, &ex.prompt).is_ok());
}

#[test]
fn full_lock_collage_is_target_and_scores_cap() {
    for scene in gen_dataset(7, 6, &SceneConfig::default()) {
        let ex = full_lock_example(&scene, 0);
        assert_eq!(compose_collage(&ex.canvas).unwrap(), ex.target);
        let report = EvalReport::evaluate(&ex.target, &ex);
        assert!(report.layers.iter().all(|l| l.psnr.map_or(true, |p| p == PSNR_CAP)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn codec_round_trips_any_image(seed in any::<u64>()) {
        let img = image::RgbImage::from_fn(16, 12, |x, y| {
            let v = seed.wrapping_mul(31).wrapping_add((x * 7 + y * 13) as u64);
            image::Rgb([v as u8, (v >> 8) as u8, (v >> 16) as u8])
        });
        prop_assert_eq!(decode_latents(&encode_layer(&img, 4).unwrap(), 4).unwrap(), img);
    }
}
