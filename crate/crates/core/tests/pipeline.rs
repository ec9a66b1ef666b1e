use std::path::Path;

use footprint_core::dataset::synthetic::{generate_corpus, write_corpus, SyntheticConfig};
use footprint_core::dataset::load_dataset_index;
use footprint_core::fusion::{confidence_threshold, ensemble_merge, polygonize, rasterize};
use footprint_core::metrics::{confusion, scores};
use footprint_core::models::{build_model, ModelConfig};
use footprint_core::pipeline::{load_split, predict_scene, prepare, DataConfig, PredictTiling, SplitData};
use footprint_core::training::{fit, load_checkpoint, FitOptions, TrainConfig};

fn data_config(dir: &Path) -> DataConfig {
    let mut cfg = DataConfig {
        root: dir.join("data"),
        cache_dir: dir.join("cache"),
        patches_per_scene: 6,
        tile_size: 32,
        resize_to: 32,
        ..DataConfig::default()
    };
    cfg.sampler.min_width = 24;
    cfg.sampler.max_width = 48;
    cfg.sampler.output_size = 32;
    cfg
}

fn setup(dir: &Path, scenes: usize) -> (DataConfig, SplitData) {
    let synth = SyntheticConfig { size: 64, ..SyntheticConfig::default() };
    write_corpus(&dir.join("data"), &generate_corpus(&synth, scenes, 3).unwrap()).unwrap();
    let cfg = data_config(dir);
    let report = prepare(&cfg).unwrap();
    assert!(report.failed.is_empty());
    let index = load_dataset_index(&cfg.root).unwrap();
    let split = load_split(&cfg, &index).unwrap();
    (cfg, split)
}

fn train_config(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 4, record_wall_time: false, samples: 0, ..TrainConfig::default() }
}

fn tiny() -> ModelConfig {
    ModelConfig { base_channels: 4, ..ModelConfig::unet_scratch() }
}

#[test]
fn split_partitions_scenes_and_counts_training_pixels() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, split) = setup(tmp.path(), 5);
    assert_eq!(split.train_scenes.len() + split.val_scenes.len(), 5);
    assert!(split.train_scenes.iter().all(|s| !split.val_scenes.contains(s)));
    assert_eq!(split.train.len(), 6 * split.train_scenes.len());
    assert_eq!(split.val.len(), 6 * split.val_scenes.len());
    let total: u64 = split.class_stats.pixel_count.iter().sum();
    assert_eq!(total, 64 * 64 * split.train_scenes.len() as u64);
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, split) = setup(tmp.path(), 4);

    let mut straight = build_model(&tiny()).unwrap();
    fit(&mut straight, &split.train, &split.val, &train_config(2), FitOptions::default()).unwrap();

    let first_dir = tmp.path().join("first");
    let mut first = build_model(&tiny()).unwrap();
    let opts = FitOptions { run_dir: Some(&first_dir), ..FitOptions::default() };
    // The first epoch always improves on "no metric yet" and is checkpointed.
    let outcome = fit(&mut first, &split.train, &split.val, &train_config(1), opts).unwrap();
    let ck = load_checkpoint(outcome.checkpoints.last().unwrap()).unwrap();
    assert_eq!(ck.meta.epoch, 1);

    let mut resumed = ck.restore_model().unwrap();
    let opts = FitOptions { resume: Some(&ck), ..FitOptions::default() };
    let out = fit(&mut resumed, &split.train, &split.val, &train_config(2), opts).unwrap();
    assert_eq!(out.history.len(), 1);
    assert_eq!(out.history[0].epoch, 2);
    assert_eq!(resumed.weight_digest(), straight.weight_digest());
}

#[test]
fn trained_models_predict_ensemble_and_polygonize() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, split) = setup(tmp.path(), 4);
    let tiling = PredictTiling::from_data(&cfg);
    let scene = load_dataset_index(&cfg.root)
        .unwrap()
        .descriptors
        .into_iter()
        .find(|d| d.scene_id == split.val_scenes[0])
        .unwrap()
        .load()
        .unwrap();

    let mut members = Vec::new();
    for seed in [1, 2] {
        let mut model = build_model(&ModelConfig { seed, ..tiny() }).unwrap();
        fit(&mut model, &split.train, &split.val, &train_config(2), FitOptions::default()).unwrap();
        let p = predict_scene(&model, scene.image.view(), &tiling, &cfg.normalization).unwrap();
        assert_eq!((p.height(), p.width()), (64, 64));
        members.push(p);
    }
    let merged = ensemble_merge(&members).unwrap();
    let strict = confidence_threshold(&merged, 0.9).unwrap();
    let loose = confidence_threshold(&merged, 0.6).unwrap();
    assert!(strict.iter().zip(loose.iter()).all(|(&s, &l)| s <= l));

    let truth = scene.mask.as_ref().unwrap();
    let accuracy = scores(confusion(loose.view(), truth.view()).unwrap()).accuracy;
    assert!(accuracy > 0.5, "accuracy {accuracy}");

    let set = polygonize(loose.view(), 0.0, 1).unwrap();
    assert_eq!(rasterize(&set, 64, 64), loose);
}
