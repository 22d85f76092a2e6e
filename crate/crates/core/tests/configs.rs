//! The shipped config files parse and describe what their comments say.

use depthfield::pipeline::RunConfig;
use depthfield::scenedata::DatasetSpec;

#[test]
fn tiny_run_config_parses() {
    let cfg = RunConfig::from_toml(include_str!("../../../configs/tiny.toml")).unwrap();
    assert_eq!((cfg.model.latents, cfg.train.steps), (128, 2000));
    assert_eq!(cfg.data.views, vec![10, 20, 30, 40]);
    assert!(cfg.augment.virtual_cameras && !cfg.augment.jitter && !cfg.augment.randomize_canonical);
}

#[test]
fn dataset_config_is_the_default_dataset() {
    let spec = DatasetSpec::from_toml(include_str!("../../../configs/dataset.toml")).unwrap();
    assert_eq!(spec, DatasetSpec::default());
}
