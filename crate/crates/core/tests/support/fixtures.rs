//! Small datasets and run configs that train in seconds.

use depthfield::augment::AugmentConfig;
use depthfield::embeddings::{EmbeddingConfig, ImageEncoderConfig};
use depthfield::model::ModelConfig;
use depthfield::pipeline::{RunConfig, TrainConfig};
use depthfield::scenedata::{generate_dataset, Dataset, DatasetSpec, SceneSpec};
use depthfield::tensor::AdamConfig;

pub fn small_dataset() -> Dataset {
    generate_dataset(&DatasetSpec {
        seed: 5,
        train_scenes: 2,
        test_scenes: 1,
        scene: SceneSpec { height: 16, width: 24, focal: 16.0, frames: 24, ..Default::default() },
    })
    .unwrap()
}

pub fn small_run(steps: usize) -> RunConfig {
    RunConfig {
        seed: 3,
        model: ModelConfig {
            latents: 16,
            latent_width: 32,
            blocks: 1,
            heads: 2,
            image: ImageEncoderConfig { quarter_channels: 4, eighth_channels: 4 },
            embedding: EmbeddingConfig { origin_freqs: 4, ray_freqs: 4, ..Default::default() },
            ..Default::default()
        },
        augment: AugmentConfig { virtual_count: 1, ..Default::default() },
        optim: AdamConfig { lr: 1e-3, ..Default::default() },
        train: TrainConfig { steps, queries_per_view: 64, eval_every: 0 },
        ..Default::default()
    }
}
