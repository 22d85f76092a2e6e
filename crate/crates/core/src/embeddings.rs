//! Encoder tokens and decoder queries.
//!
//! A camera embedding row describes the viewing ray through one pixel: the
//! Fourier features of the ray origin, the Fourier features of the ray direction,
//! then the raw origin and direction once more, for a width of
//! `6·(K_o + K_r + 2)`. Encoder tokens append these rows to image features at
//! quarter resolution; decoder queries are camera embedding rows alone.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, RayMode};
use crate::nn::Conv2d;
use crate::rng::Rng;
use crate::tensor::{Bound, ParamStore, Tensor, Var};

/// Output stride of the image encoder relative to the input image.
pub const ENCODER_STRIDE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingConfig {
    /// Number of origin frequencies `K_o`.
    pub origin_freqs: usize,
    /// Number of ray-direction frequencies `K_r`.
    pub ray_freqs: usize,
    /// Origin frequencies span `[1, origin_max_freq / 2]`.
    pub origin_max_freq: f64,
    /// Ray frequencies span `[1, ray_max_freq / 2]`.
    pub ray_max_freq: f64,
    pub rays: RayMode,
    /// Scale ray directions to unit length before encoding.
    pub normalize_rays: bool,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            origin_freqs: 8,
            ray_freqs: 8,
            origin_max_freq: 64.0,
            ray_max_freq: 2.0,
            rays: RayMode::Global,
            normalize_rays: false,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.origin_max_freq >= 2.0) || !(self.ray_max_freq >= 2.0) {
            return Err(Error::Config(format!(
                "max frequencies must be ≥ 2, got {} and {}",
                self.origin_max_freq, self.ray_max_freq
            )));
        }
        Ok(())
    }

    /// Camera embedding width, `6·(K_o + K_r + 2)`.
    pub fn width(&self) -> usize {
        6 * (self.origin_freqs + self.ray_freqs + 2)
    }
}

/// `count` frequencies equally spaced over `[1, max_freq/2]`; a single frequency is 1.
pub fn frequencies(count: usize, max_freq: f64) -> Vec<f64> {
    let hi = max_freq / 2.0;
    match count {
        0 => Vec::new(),
        1 => vec![1.0],
        n => (0..n).map(|i| 1.0 + (hi - 1.0) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Appends `[x, sin(f₁πx), cos(f₁πx), …, sin(f_Kπx), cos(f_Kπx)]` for every
/// component of `xs`.
pub fn fourier_encode_into(xs: &[f64], freqs: &[f64], out: &mut Vec<f64>) {
    for &x in xs {
        out.push(x);
        for f in freqs {
            let (s, c) = (f * std::f64::consts::PI * x).sin_cos();
            out.push(s);
            out.push(c);
        }
    }
}

/// Fourier features of each component of `xs` with `count` frequencies up to `max_freq/2`.
pub fn fourier_encode(xs: &[f64], count: usize, max_freq: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(xs.len() * (2 * count + 1));
    fourier_encode_into(xs, &frequencies(count, max_freq), &mut out);
    out
}

struct Encoder {
    origin: Vec<f64>,
    ray: Vec<f64>,
    cfg: EmbeddingConfig,
}

impl Encoder {
    fn new(cfg: &EmbeddingConfig) -> Self {
        Encoder {
            origin: frequencies(cfg.origin_freqs, cfg.origin_max_freq),
            ray: frequencies(cfg.ray_freqs, cfg.ray_max_freq),
            cfg: *cfg,
        }
    }

    fn row(&self, cam: &Camera, u: f64, v: f64, out: &mut Vec<f64>) {
        let ray = cam.ray(u, v, self.cfg.rays);
        let mut dir = ray.direction;
        if self.cfg.normalize_rays {
            dir = dir.normalize();
        }
        let o = [ray.origin.x, ray.origin.y, ray.origin.z];
        let d = [dir.x, dir.y, dir.z];
        fourier_encode_into(&o, &self.origin, out);
        fourier_encode_into(&d, &self.ray, out);
        out.extend_from_slice(&o);
        out.extend_from_slice(&d);
    }
}

/// Embedding rows for arbitrary pixel locations.
pub fn camera_embedding_rows(cam: &Camera, pixels: &[(f64, f64)], cfg: &EmbeddingConfig) -> Tensor {
    let enc = Encoder::new(cfg);
    let mut data = Vec::with_capacity(pixels.len() * cfg.width());
    for &(u, v) in pixels {
        enc.row(cam, u, v, &mut data);
    }
    Tensor::new([pixels.len(), cfg.width()], data).expect("row width matches config")
}

/// One embedding row per pixel of a `height × width` grid, row-major. `cam` must
/// already be calibrated for that grid.
pub fn camera_embedding_grid(cam: &Camera, height: usize, width: usize, cfg: &EmbeddingConfig) -> Tensor {
    let pixels: Vec<(f64, f64)> = (0..height)
        .flat_map(|v| (0..width).map(move |u| (u as f64, v as f64)))
        .collect();
    camera_embedding_rows(cam, &pixels, cfg)
}

/// Decoder queries for a `height × width` view of `cam`, optionally restricted to
/// the row-major pixel indices in `subset`.
pub fn assemble_decoder_queries(
    cam: &Camera,
    height: usize,
    width: usize,
    subset: Option<&[usize]>,
    cfg: &EmbeddingConfig,
) -> Result<Tensor> {
    match subset {
        None => Ok(camera_embedding_grid(cam, height, width, cfg)),
        Some(idx) => {
            let n = height * width;
            let pixels = idx
                .iter()
                .map(|&i| {
                    if i >= n {
                        Err(Error::shape("decoder_queries", format!("pixel {i} outside {height}×{width}")))
                    } else {
                        Ok(((i % width) as f64, (i / width) as f64))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(camera_embedding_rows(cam, &pixels, cfg))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageEncoderConfig {
    /// Channels of the half- and quarter-resolution stages.
    pub quarter_channels: usize,
    /// Channels of the eighth-resolution stage.
    pub eighth_channels: usize,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        ImageEncoderConfig { quarter_channels: 32, eighth_channels: 32 }
    }
}

impl ImageEncoderConfig {
    pub fn output_channels(&self) -> usize {
        self.quarter_channels + self.eighth_channels
    }
}

/// Three stride-2 convolution stages. The eighth-resolution map is bilinearly
/// upsampled to quarter resolution and concatenated with the quarter map.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    stages: [Conv2d; 3],
    pub config: ImageEncoderConfig,
}

impl ImageEncoder {
    pub fn new(store: &mut ParamStore, name: &str, config: ImageEncoderConfig, rng: &mut Rng) -> Result<Self> {
        let (q, e) = (config.quarter_channels, config.eighth_channels);
        Ok(ImageEncoder {
            stages: [
                Conv2d::new(store, &format!("{name}.stage1"), 3, q, 3, 2, 1, rng)?,
                Conv2d::new(store, &format!("{name}.stage2"), q, q, 3, 2, 1, rng)?,
                Conv2d::new(store, &format!("{name}.stage3"), q, e, 3, 2, 1, rng)?,
            ],
            config,
        })
    }

    /// `[H, W, 3]` image to `[H/4 · W/4, C_img]` features, row-major over the
    /// quarter-resolution grid.
    pub fn forward<'g>(&self, p: &Bound<'g>, image: Var<'g>) -> Result<Var<'g>> {
        let shape = image.shape();
        if shape.len() != 3 || shape[2] != 3 {
            return Err(Error::shape("image_encoder", format!("expected [H, W, 3], got {shape:?}")));
        }
        let (h, w) = (shape[0], shape[1]);
        if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(Error::shape("image_encoder", format!("{h}×{w} is not divisible by 8")));
        }
        let half = self.stages[0].forward(p, image)?.gelu()?;
        let quarter = self.stages[1].forward(p, half)?.gelu()?;
        let eighth = self.stages[2].forward(p, quarter)?.gelu()?;
        let (hq, wq) = (h / ENCODER_STRIDE, w / ENCODER_STRIDE);
        let up = eighth.upsample_bilinear(hq, wq)?;
        Var::concat(&[quarter, up], 2)?.reshape(&[hq * wq, self.config.output_channels()])
    }
}

/// An input view: `[H, W, 3]` image in `[0, 1]` with its full-resolution camera.
#[derive(Clone, Copy, Debug)]
pub struct ViewInput<'a> {
    pub image: &'a Tensor,
    pub camera: Camera,
}

/// Camera embedding of the quarter-resolution grid of a full-resolution camera.
pub fn encoder_camera_grid(cam: &Camera, height: usize, width: usize, cfg: &EmbeddingConfig) -> Tensor {
    let s = 1.0 / ENCODER_STRIDE as f64;
    camera_embedding_grid(&cam.scaled(s, s), height / ENCODER_STRIDE, width / ENCODER_STRIDE, cfg)
}

/// Stack image features and camera embeddings of every view, view-major then
/// row-major, into `[N_e, C_img + 6(K_o+K_r+2)]`.
pub fn assemble_encoder_tokens<'g>(
    p: &Bound<'g>,
    encoder: &ImageEncoder,
    views: &[ViewInput<'_>],
    cfg: &EmbeddingConfig,
) -> Result<Var<'g>> {
    let first = views.first().ok_or_else(|| Error::Data("no views to encode".into()))?;
    let dims = first.image.shape().to_vec();
    let mut blocks = Vec::with_capacity(views.len());
    for view in views {
        if view.image.shape() != dims.as_slice() {
            return Err(Error::shape(
                "encoder_tokens",
                format!("mixed resolutions {:?} and {dims:?}", view.image.shape()),
            ));
        }
        let graph = p.graph();
        let features = encoder.forward(p, graph.constant(view.image.clone()))?;
        let cams = graph.constant(encoder_camera_grid(&view.camera, dims[0], dims[1], cfg));
        blocks.push(Var::concat(&[features, cams], 1)?);
    }
    Var::concat(&blocks, 0)
}
