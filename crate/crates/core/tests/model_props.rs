//! Structural properties of the encoder and decoders.

use depthfield::embeddings::{assemble_decoder_queries, EmbeddingConfig, ImageEncoderConfig, ViewInput};
use depthfield::geometry::{euler_to_rotation, Camera, Intrinsics, Pose};
use depthfield::model::{DepthFieldModel, ModelConfig};
use depthfield::objective::{depth_loss, rgb_loss};
use depthfield::rng::substream;
use depthfield::tensor::ParamStore;
use depthfield::{Graph, Tensor, Var};
use nalgebra::Vector3;
use rand::Rng as _;

const SIZE: usize = 16;

fn small_config() -> ModelConfig {
    ModelConfig {
        latents: 16,
        latent_width: 32,
        blocks: 1,
        heads: 2,
        image: ImageEncoderConfig { quarter_channels: 4, eighth_channels: 4 },
        embedding: EmbeddingConfig { origin_freqs: 3, ray_freqs: 3, ..Default::default() },
        ..Default::default()
    }
}

struct Fixture {
    model: DepthFieldModel,
    store: ParamStore,
    images: Vec<Tensor>,
    cameras: Vec<Camera>,
}

impl Fixture {
    fn new(seed: u64) -> Self {
        let mut rng = substream(seed, "model-fixture");
        let (model, store) = DepthFieldModel::new(small_config(), &mut rng).unwrap();
        let k = Intrinsics::new(16.0, 16.0, 7.5, 7.5).unwrap();
        let cameras = vec![
            Camera::new(k, Pose::identity()),
            Camera::new(k, Pose::new(euler_to_rotation(0.1, 0.05, -0.1), Vector3::new(0.2, -0.1, 0.05)).unwrap()),
        ];
        let images = (0..2)
            .map(|_| Tensor::from_fn([SIZE, SIZE, 3], |_| rng.random_range(0.0..1.0)))
            .collect();
        Fixture { model, store, images, cameras }
    }

    fn views(&self) -> Vec<ViewInput<'_>> {
        self.images.iter().zip(&self.cameras).map(|(image, &camera)| ViewInput { image, camera }).collect()
    }

    fn latent(&self) -> Tensor {
        let g = Graph::new();
        let p = g.bind(&self.store);
        self.model.encode_views(&p, &self.views()).unwrap().to_tensor()
    }

    fn queries(&self, subset: Option<&[usize]>) -> Tensor {
        let target = Camera::new(
            self.cameras[0].intrinsics,
            Pose::new(euler_to_rotation(-0.05, 0.1, 0.0), Vector3::new(-0.1, 0.0, 0.2)).unwrap(),
        );
        assemble_decoder_queries(&target, SIZE, SIZE, subset, &self.model.config.embedding).unwrap()
    }

    fn decode(&self, latent: &Tensor, queries: &Tensor) -> (Tensor, Tensor) {
        let g = Graph::new();
        let p = g.bind(&self.store);
        let lat = self.model.latent_in(&g, latent).unwrap();
        let q = g.constant(queries.clone());
        let d = self.model.decode_depth(&p, lat, q).unwrap().to_tensor();
        let c = self.model.decode_rgb(&p, lat, q).unwrap().to_tensor();
        (d, c)
    }
}

#[test]
fn embedding_width_matches_for_all_frequency_counts() {
    let cam = Camera::new(Intrinsics::new(5.0, 5.0, 2.0, 2.0).unwrap(), Pose::identity());
    for ko in 0..=16 {
        for kr in 0..=16 {
            let cfg = EmbeddingConfig { origin_freqs: ko, ray_freqs: kr, ..Default::default() };
            let q = assemble_decoder_queries(&cam, 2, 3, None, &cfg).unwrap();
            assert_eq!(cfg.width(), 6 * (ko + kr + 2));
            assert_eq!(q.shape(), [6, cfg.width()]);
        }
    }
}

#[test]
fn duplicated_tokens_leave_the_latent_unchanged() {
    let f = Fixture::new(0);
    let g = Graph::new();
    let p = g.bind(&f.store);
    let tokens = f.model.tokens(&p, &f.views()).unwrap();
    let once = f.model.encode(&p, tokens).unwrap().to_tensor();
    let twice = f.model.encode(&p, Var::concat(&[tokens, tokens], 0).unwrap()).unwrap().to_tensor();
    assert!(once.max_abs_diff(&twice) < 1e-9, "difference {}", once.max_abs_diff(&twice));
}

#[test]
fn latent_shape_does_not_depend_on_view_count() {
    let f = Fixture::new(1);
    let g = Graph::new();
    let p = g.bind(&f.store);
    let views = f.views();
    let one = f.model.encode_views(&p, &views[..1]).unwrap().to_tensor();
    let two = f.model.encode_views(&p, &views).unwrap().to_tensor();
    assert_eq!(one.shape(), two.shape());
    assert_eq!(one.shape(), [16, 32]);
}

#[test]
fn sparse_decoding_equals_gathered_dense_decoding() {
    let f = Fixture::new(2);
    let latent = f.latent();
    let (dense_d, dense_c) = f.decode(&latent, &f.queries(None));
    let subset = [0, 17, 100, 255, 42, 17];
    let (sparse_d, sparse_c) = f.decode(&latent, &f.queries(Some(&subset)));
    assert!(sparse_d.max_abs_diff(&dense_d.gather_rows(&subset).unwrap()) < 1e-12);
    assert!(sparse_c.max_abs_diff(&dense_c.gather_rows(&subset).unwrap()) < 1e-12);
}

#[test]
fn decoding_is_a_pure_function() {
    let f = Fixture::new(3);
    let latent = f.latent();
    assert_eq!(latent, f.latent());
    let q = f.queries(None);
    assert_eq!(f.decode(&latent, &q), f.decode(&latent, &q));
}

#[test]
fn outputs_stay_in_range() {
    let f = Fixture::new(4);
    let (d, c) = f.decode(&f.latent(), &f.queries(None));
    let cfg = small_config();
    assert!(d.data().iter().all(|&v| v > cfg.depth_min && v < cfg.depth_max));
    assert!(c.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn every_parameter_receives_gradient() {
    let f = Fixture::new(5);
    let g = Graph::new();
    let p = g.bind(&f.store);
    let latent = f.model.encode_views(&p, &f.views()).unwrap();
    let q = g.constant(f.queries(Some(&[3, 50, 77, 200])));
    let mask = [true; 4];
    let depth_gt = Tensor::new([4, 1], vec![1.5, 2.0, 2.5, 3.0]).unwrap();
    let rgb_gt = Tensor::full([4, 3], 0.3);
    let loss = depth_loss(f.model.decode_depth(&p, latent, q).unwrap(), &depth_gt, &mask)
        .unwrap()
        .add(rgb_loss(f.model.decode_rgb(&p, latent, q).unwrap(), &rgb_gt, &mask).unwrap())
        .unwrap();
    let grads = g.backward(loss).unwrap().for_params(&f.store);
    for id in f.store.ids() {
        let norm: f64 = grads[id.index()].data().iter().map(|v| v * v).sum::<f64>();
        assert!(norm > 0.0, "{} has no gradient", f.store.name(id));
    }
}

#[test]
fn decoding_cost_is_linear_in_queries_and_encoding_cost_is_not() {
    let f = Fixture::new(6);
    let encode_macs = |n_queries: usize| {
        let g = Graph::new();
        let p = g.bind(&f.store);
        let latent = f.model.encode_views(&p, &f.views()).unwrap();
        let encode = g.macs();
        let idx: Vec<usize> = (0..n_queries).collect();
        f.model.decode_depth(&p, latent, g.constant(f.queries(Some(&idx)))).unwrap();
        (encode, g.macs() - encode)
    };
    let (e1, d1) = encode_macs(8);
    let (e2, d2) = encode_macs(16);
    let (e3, d3) = encode_macs(32);
    assert_eq!(e1, e2);
    assert_eq!(e2, e3);
    // Key and value projections of the latent are paid once per decode, the rest per query.
    assert_eq!(d3 - d2, 2 * (d2 - d1));
    assert!(d1 > 0);
}
