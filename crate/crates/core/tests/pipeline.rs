//! Training, evaluation, querying and checkpoints end to end on a small run.

mod support;

use std::fs;

use depthfield::augment::AugmentConfig;
use depthfield::pipeline::{
    evaluate, evaluate_views, frame_metrics, load_checkpoint, query_view, train, Predictor, Protocol, Trainer,
    LOSS_HEADER,
};
use support::fixtures::{small_dataset, small_run};

#[test]
fn smoke_run_writes_one_loss_row_per_step() {
    let dataset = small_dataset();
    let dir = tempfile::tempdir().unwrap();
    let outcome = train(&small_run(20), &dataset, Some(dir.path()), |_| {}).unwrap();
    let csv = fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], LOSS_HEADER);
    assert_eq!(lines.len(), 21);
    assert!(lines[20].starts_with("20,"));
    assert_eq!(outcome.losses.len(), 20);
    assert!(outcome.losses.iter().all(|l| l.total.is_finite()));
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    assert!(dir.path().join("checkpoint.dfck").exists());
    assert!(dir.path().join("config.toml").exists());
}

#[test]
fn loss_decreases_over_training() {
    let outcome = train(&small_run(200), &small_dataset(), None, |_| {}).unwrap();
    let (first, last) = (outcome.losses[0].total, outcome.losses[199].total);
    assert!(last < first, "loss went from {first} to {last}");
}

#[test]
fn same_seed_gives_identical_csv_files() {
    let dataset = small_dataset();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut cfg = small_run(12);
    cfg.train.eval_every = 6;
    train(&cfg, &dataset, Some(a.path()), |_| {}).unwrap();
    train(&cfg, &dataset, Some(b.path()), |_| {}).unwrap();
    for file in ["loss.csv", "metrics.csv", "config.toml", "checkpoint.dfck"] {
        assert_eq!(fs::read(a.path().join(file)).unwrap(), fs::read(b.path().join(file)).unwrap(), "{file}");
    }
    let c = tempfile::tempdir().unwrap();
    cfg.seed += 1;
    train(&cfg, &dataset, Some(c.path()), |_| {}).unwrap();
    assert_ne!(fs::read(a.path().join("loss.csv")).unwrap(), fs::read(c.path().join("loss.csv")).unwrap());
}

#[test]
fn ten_step_replay_is_bit_identical() {
    let dataset = small_dataset();
    let run = || {
        let mut t = Trainer::new(small_run(10), &dataset).unwrap();
        let losses: Vec<_> = (0..10).map(|_| t.step().unwrap()).collect();
        (losses, t.params)
    };
    let (la, pa) = run();
    let (lb, pb) = run();
    assert_eq!(la, lb);
    assert_eq!(pa, pb);
}

#[test]
fn disabled_augmentations_ignore_their_settings() {
    let dataset = small_dataset();
    let mut a = small_run(5);
    a.augment = AugmentConfig::disabled();
    let mut b = a.clone();
    b.augment.virtual_translation_std = 3.0;
    b.augment.jitter_rotation_std = 0.7;
    let la = train(&a, &dataset, None, |_| {}).unwrap().losses;
    let lb = train(&b, &dataset, None, |_| {}).unwrap().losses;
    assert_eq!(la, lb);
    assert!(la.iter().all(|l| l.virtual_depth == 0.0 && l.virtual_rgb == 0.0));
}

#[test]
fn checkpoint_roundtrip_reproduces_evaluation() {
    let dataset = small_dataset();
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(8);
    let outcome = train(&cfg, &dataset, Some(dir.path()), |_| {}).unwrap();
    let ck = load_checkpoint(&dir.path().join("checkpoint.dfck")).unwrap();
    assert_eq!(ck.config, cfg);
    assert_eq!(ck.step, 8);
    assert_eq!(ck.params, outcome.params);
    for protocol in [Protocol::Video, Protocol::Stereo, Protocol::Interpolate] {
        let before = evaluate(&Predictor::new(&outcome.model, &outcome.params), &dataset, &cfg, protocol, true).unwrap();
        let after = evaluate(&Predictor::new(&ck.model, &ck.params), &dataset, &ck.config, protocol, true).unwrap();
        assert_eq!(before, after, "{protocol}");
    }
}

#[test]
fn query_reproduces_the_evaluation_path() {
    let dataset = small_dataset();
    let outcome = train(&small_run(4), &dataset, None, |_| {}).unwrap();
    let pred = Predictor::new(&outcome.model, &outcome.params);
    let scene = &dataset.scenes[0];
    let encode = [2, 5, 8];
    let frames: Vec<_> = encode.iter().map(|&i| &scene.frames[i]).collect();
    let from_eval = evaluate_views(&pred, scene, &encode, &[5], false).unwrap();
    let (depth, rgb) = query_view(&pred, &frames, &scene.frames[5].pose).unwrap();
    let from_query = frame_metrics(&depth, &scene.frames[5].depth, false).unwrap().unwrap();
    assert_eq!(from_eval, vec![from_query]);
    assert_eq!(rgb.len(), 3 * depth.len());
    // Decoding again gives the same bits.
    assert_eq!(query_view(&pred, &frames, &scene.frames[5].pose).unwrap().0, depth);
}

#[test]
fn offset_protocols_report_query_and_projection_curves() {
    let dataset = small_dataset();
    let cfg = small_run(2);
    let outcome = train(&cfg, &dataset, None, |_| {}).unwrap();
    let pred = Predictor::new(&outcome.model, &outcome.params);
    for protocol in [Protocol::Interpolate, Protocol::Extrapolate] {
        let report = evaluate(&pred, &dataset, &cfg, protocol, true).unwrap();
        let query: Vec<_> = report.curves.iter().filter(|c| c.mode == "query").collect();
        let projection: Vec<_> = report.curves.iter().filter(|c| c.mode == "projection").collect();
        assert_eq!(query.len(), 9);
        assert_eq!(projection.len(), 9);
        assert!(query.iter().all(|c| c.coverage == 1.0 && c.rmse.is_finite()));
        assert!(projection.iter().all(|c| c.coverage < 1.0));
    }
}
