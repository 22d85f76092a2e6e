//! Central finite-difference checks of the reverse-mode tape.

use depthfield::embeddings::{EmbeddingConfig, ImageEncoderConfig, ViewInput};
use depthfield::geometry::{euler_to_rotation, Camera, Intrinsics, Pose};
use depthfield::model::{DepthFieldModel, ModelConfig};
use depthfield::objective::{depth_loss, rgb_loss};
use depthfield::rng::{substream, Rng};
use depthfield::tensor::ParamStore;
use depthfield::{Graph, Result, Tensor, Var};
use nalgebra::Vector3;
use rand::Rng as _;

const H: f64 = 1e-5;
pub const OP_TOL: f64 = 1e-4;
const INSTANCES: u64 = 20;

/// Relative error with a floor so that gradients that are zero on both sides compare equal.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn random(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero so kinks (`abs`, `relu`) are never straddled by ±h.
fn away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.05..1.5);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

/// Projects an op output onto fixed random weights so every output entry matters.
fn project<'g>(y: Var<'g>, seed: u64) -> Result<Var<'g>> {
    let mut rng = substream(seed, "projection");
    let w = random(&mut rng, &y.shape(), -1.0, 1.0);
    y.mul(y.graph().constant(w))?.sum()
}

type OpFn = dyn for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>;

fn loss_value(inputs: &[Tensor], f: &OpFn, seed: u64) -> f64 {
    let g = Graph::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let y = f(&g, &vars).unwrap();
    let loss = project(y, seed).unwrap().value().item().unwrap();
    loss
}

/// Largest relative error between tape and central-difference gradients over all inputs.
fn max_error(inputs: &[Tensor], f: &OpFn, seed: u64) -> f64 {
    let g = Graph::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = project(f(&g, &vars).unwrap(), seed).unwrap();
    let grads = g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            let numeric = (loss_value(&plus, f, seed) - loss_value(&minus, f, seed)) / (2.0 * H);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    worst
}

/// One differentiable op checked on `INSTANCES` random input sets.
pub struct OpCase {
    pub name: &'static str,
    pub tol: f64,
    make: Box<dyn Fn(&mut Rng) -> Vec<Tensor>>,
    f: Box<OpFn>,
}

impl OpCase {
    fn new(
        name: &'static str,
        tol: f64,
        make: impl Fn(&mut Rng) -> Vec<Tensor> + 'static,
        f: impl for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>> + 'static,
    ) -> Self {
        OpCase { name, tol, make: Box::new(make), f: Box::new(f) }
    }

    /// Worst relative error over all instances.
    pub fn worst_error(&self) -> f64 {
        (0..INSTANCES)
            .map(|seed| {
                let inputs = (self.make)(&mut substream(seed, self.name));
                max_error(&inputs, self.f.as_ref(), seed)
            })
            .fold(0.0, f64::max)
    }
}

fn dims(rng: &mut Rng) -> (usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..6))
}

fn same(rng: &mut Rng) -> Vec<Tensor> {
    let (r, c) = dims(rng);
    vec![random(rng, &[r, c], -2.0, 2.0), random(rng, &[r, c], -2.0, 2.0)]
}

fn broadcast(rng: &mut Rng) -> Vec<Tensor> {
    let (r, c) = dims(rng);
    vec![random(rng, &[r, c], -2.0, 2.0), random(rng, &[c], -2.0, 2.0)]
}

fn any(rng: &mut Rng) -> Vec<Tensor> {
    let (r, c) = dims(rng);
    vec![random(rng, &[r, c], -2.0, 2.0)]
}

fn kinked(rng: &mut Rng) -> Vec<Tensor> {
    let (r, c) = dims(rng);
    vec![away_from_zero(rng, &[r, c])]
}

fn positive(rng: &mut Rng) -> Vec<Tensor> {
    let (r, c) = dims(rng);
    vec![random(rng, &[r, c], 0.1, 3.0)]
}

fn rows(rng: &mut Rng) -> Vec<Tensor> {
    let (r, c) = dims(rng);
    vec![random(rng, &[r, c + 1], -3.0, 3.0)]
}

fn cube(rng: &mut Rng) -> Vec<Tensor> {
    vec![random(rng, &[2, 3, 4], -1.0, 1.0)]
}

/// Every differentiable op of the tape, plus a two-layer perceptron.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase::new("add", OP_TOL, same, |_, v| v[0].add(v[1])),
        OpCase::new("sub", OP_TOL, same, |_, v| v[0].sub(v[1])),
        OpCase::new("mul", OP_TOL, same, |_, v| v[0].mul(v[1])),
        OpCase::new("add_broadcast", OP_TOL, broadcast, |_, v| v[0].add(v[1])),
        OpCase::new("sub_broadcast", OP_TOL, broadcast, |_, v| v[1].sub(v[0])),
        OpCase::new("mul_broadcast", OP_TOL, broadcast, |_, v| v[0].mul(v[1])),
        OpCase::new("scale", OP_TOL, any, |_, v| v[0].scale(-1.7)),
        OpCase::new("affine", OP_TOL, any, |_, v| v[0].affine(0.3, 2.0)),
        OpCase::new("sigmoid", OP_TOL, any, |_, v| v[0].sigmoid()),
        OpCase::new("gelu", OP_TOL, any, |_, v| v[0].gelu()),
        OpCase::new("exp", OP_TOL, any, |_, v| v[0].exp()),
        OpCase::new("square", OP_TOL, any, |_, v| v[0].square()),
        OpCase::new("relu", OP_TOL, kinked, |_, v| v[0].relu()),
        OpCase::new("abs", OP_TOL, kinked, |_, v| v[0].abs()),
        OpCase::new("log", OP_TOL, positive, |_, v| v[0].log()),
        OpCase::new("sum", OP_TOL, rows, |_, v| v[0].sum()),
        OpCase::new("mean", OP_TOL, rows, |_, v| v[0].mean()),
        OpCase::new("softmax", OP_TOL, rows, |_, v| v[0].softmax()),
        OpCase::new("softmax_2x5", OP_TOL, |rng| vec![random(rng, &[2, 5], -3.0, 3.0)], |_, v| v[0].softmax()),
        OpCase::new("layer_norm", OP_TOL, rows, |_, v| v[0].layer_norm()),
        OpCase::new(
            "matmul_3x4_4x2",
            1e-6,
            |rng| vec![random(rng, &[3, 4], -1.0, 1.0), random(rng, &[4, 2], -1.0, 1.0)],
            |_, v| v[0].matmul(v[1]),
        ),
        OpCase::new(
            "matmul",
            OP_TOL,
            |rng| {
                let (m, k) = dims(rng);
                let n = rng.random_range(1..5);
                vec![random(rng, &[m, k], -1.0, 1.0), random(rng, &[k, n], -1.0, 1.0)]
            },
            |_, v| v[0].matmul(v[1]),
        ),
        OpCase::new(
            "matmul_batched",
            OP_TOL,
            |rng| vec![random(rng, &[2, 3, 4], -1.0, 1.0), random(rng, &[2, 4, 2], -1.0, 1.0)],
            |_, v| v[0].matmul(v[1]),
        ),
        OpCase::new(
            "matmul_shared_rhs",
            OP_TOL,
            |rng| vec![random(rng, &[3, 2, 4], -1.0, 1.0), random(rng, &[4, 3], -1.0, 1.0)],
            |_, v| v[0].matmul(v[1]),
        ),
        OpCase::new(
            "mlp_2_layer",
            OP_TOL,
            |rng| {
                vec![
                    random(rng, &[5, 3], -1.0, 1.0),
                    random(rng, &[3, 6], -1.0, 1.0),
                    random(rng, &[6], -0.5, 0.5),
                    random(rng, &[6, 2], -1.0, 1.0),
                    random(rng, &[2], -0.5, 0.5),
                ]
            },
            |_, v| v[0].matmul(v[1])?.add(v[2])?.gelu()?.matmul(v[3])?.add(v[4]),
        ),
        OpCase::new("transpose", OP_TOL, cube, |_, v| v[0].transpose()),
        OpCase::new("permute", OP_TOL, cube, |_, v| v[0].permute(&[1, 0, 2])),
        OpCase::new("reshape", OP_TOL, cube, |_, v| v[0].reshape(&[6, 4])?.sigmoid()),
        OpCase::new("slice", OP_TOL, cube, |_, v| v[0].slice(2, 1, 2)),
        OpCase::new(
            "gather_rows",
            OP_TOL,
            |rng| vec![random(rng, &[4, 3], -1.0, 1.0)],
            |_, v| v[0].gather_rows(&[3, 0, 3, 1]),
        ),
        OpCase::new(
            "concat",
            OP_TOL,
            |rng| vec![random(rng, &[2, 3], -1.0, 1.0), random(rng, &[2, 2], -1.0, 1.0)],
            |_, v| Var::concat(&[v[0], v[1], v[0]], 1),
        ),
        OpCase::new("im2col", OP_TOL, |rng| vec![random(rng, &[5, 4, 2], -1.0, 1.0)], |_, v| v[0].im2col(3, 2, 1)),
        OpCase::new(
            "upsample_bilinear",
            OP_TOL,
            |rng| vec![random(rng, &[2, 3, 2], -1.0, 1.0)],
            |_, v| v[0].upsample_bilinear(4, 6),
        ),
    ]
}

struct TinySetup {
    model: DepthFieldModel,
    images: Vec<Tensor>,
    cameras: Vec<Camera>,
    queries: Tensor,
    depth_gt: Tensor,
    rgb_gt: Tensor,
}

/// The smallest model the encoder accepts: 8×8 images, which the three stride-2
/// stages need.
fn tiny_setup() -> (TinySetup, ParamStore) {
    let config = ModelConfig {
        latents: 8,
        latent_width: 16,
        blocks: 1,
        heads: 2,
        mlp_ratio: 2,
        image: ImageEncoderConfig { quarter_channels: 4, eighth_channels: 4 },
        embedding: EmbeddingConfig { origin_freqs: 2, ray_freqs: 2, ..Default::default() },
        ..Default::default()
    };
    let mut rng = substream(11, "gradcheck");
    let (model, store) = DepthFieldModel::new(config, &mut rng).unwrap();
    let k = Intrinsics::new(8.0, 8.0, 3.5, 3.5).unwrap();
    let cameras = vec![
        Camera::new(k, Pose::identity()),
        Camera::new(k, Pose::new(euler_to_rotation(0.05, -0.1, 0.02), Vector3::new(0.3, 0.0, 0.1)).unwrap()),
    ];
    let images = (0..2).map(|_| random(&mut rng, &[8, 8, 3], 0.0, 1.0)).collect();
    let pixels: Vec<(f64, f64)> = (0..6).map(|i| ((i % 8) as f64, (i * 3 % 8) as f64)).collect();
    let queries = depthfield::embeddings::camera_embedding_rows(&cameras[0], &pixels, &config.embedding);
    let depth_gt = random(&mut rng, &[6, 1], 1.0, 8.0);
    let rgb_gt = random(&mut rng, &[6, 3], 0.0, 1.0);
    (TinySetup { model, images, cameras, queries, depth_gt, rgb_gt }, store)
}

fn tiny_loss<'g>(s: &TinySetup, g: &'g Graph, store: &ParamStore) -> Var<'g> {
    let p = g.bind(store);
    let views: Vec<ViewInput<'_>> =
        s.images.iter().zip(&s.cameras).map(|(image, &camera)| ViewInput { image, camera }).collect();
    let latent = s.model.encode_views(&p, &views).unwrap();
    let q = g.constant(s.queries.clone());
    let mask = vec![true; 6];
    let d = depth_loss(s.model.decode_depth(&p, latent, q).unwrap(), &s.depth_gt, &mask).unwrap();
    let c = rgb_loss(s.model.decode_rgb(&p, latent, q).unwrap(), &s.rgb_gt, &mask).unwrap();
    d.add(c).unwrap()
}

/// Tolerance of the end-to-end check.
pub const MODEL_TOL: f64 = 1e-3;

/// Worst relative error over a few entries of every parameter array of the tiny
/// model, and the number of entries checked.
pub fn end_to_end_error() -> (f64, usize) {
    let (setup, store) = tiny_setup();
    let g = Graph::new();
    let loss = tiny_loss(&setup, &g, &store);
    let grads = g.backward(loss).unwrap().for_params(&store);
    let value = |s: &ParamStore| {
        let g = Graph::new();
        let loss = tiny_loss(&setup, &g, s).value().item().unwrap();
        loss
    };
    let mut rng = substream(5, "gradcheck-entries");
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for id in store.ids() {
        let n = store.get(id).numel();
        for _ in 0..n.min(6) {
            let j = rng.random_range(0..n);
            let mut plus = store.clone();
            plus.get_mut(id).data_mut()[j] += H;
            let mut minus = store.clone();
            minus.get_mut(id).data_mut()[j] -= H;
            let numeric = (value(&plus) - value(&minus)) / (2.0 * H);
            worst = worst.max(rel_err(grads[id.index()].data()[j], numeric));
            checked += 1;
        }
    }
    (worst, checked)
}
