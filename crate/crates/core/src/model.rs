//! Latent attention encoder with query decoders.
//!
//! Encoder tokens are folded into a fixed `N_l × C_l` latent array by one
//! cross-attention block, refined by self-attention blocks, and read out by
//! per-task decoders whose queries are camera embeddings only. All blocks are
//! pre-norm residual.

use serde::{Deserialize, Serialize};

use crate::embeddings::{assemble_encoder_tokens, EmbeddingConfig, ImageEncoder, ImageEncoderConfig, ViewInput};
use crate::error::{Error, Result};
use crate::nn::{init_uniform, LayerNorm, Linear, Mlp};
use crate::rng::Rng;
use crate::tensor::{Bound, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthScaling {
    /// `d = d_min + σ(x)·(d_max − d_min)`
    #[default]
    Linear,
    /// `1/d = 1/d_max + σ(x)·(1/d_min − 1/d_max)`
    Inverse,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub latents: usize,
    pub latent_width: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Hidden width of every MLP as a multiple of its input width.
    pub mlp_ratio: usize,
    pub depth_min: f64,
    pub depth_max: f64,
    pub depth_scaling: DepthScaling,
    pub image: ImageEncoderConfig,
    pub embedding: EmbeddingConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latents: 128,
            latent_width: 128,
            blocks: 4,
            heads: 4,
            mlp_ratio: 2,
            depth_min: 0.1,
            depth_max: 10.0,
            depth_scaling: DepthScaling::Linear,
            image: ImageEncoderConfig::default(),
            embedding: EmbeddingConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.depth_min > 0.0) || !(self.depth_max > self.depth_min) || !self.depth_max.is_finite() {
            return Err(Error::Config(format!(
                "depth range must satisfy 0 < d_min < d_max, got [{}, {}]",
                self.depth_min, self.depth_max
            )));
        }
        if self.heads == 0 || self.latent_width % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide latent width {}",
                self.heads, self.latent_width
            )));
        }
        if self.latents == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("latents and mlp_ratio must be positive".into()));
        }
        if self.image.quarter_channels == 0 || self.image.eighth_channels == 0 {
            return Err(Error::Config("image encoder channels must be positive".into()));
        }
        self.embedding.validate()
    }

    pub fn token_width(&self) -> usize {
        self.image.output_channels() + self.embedding.width()
    }

    pub fn query_width(&self) -> usize {
        self.embedding.width()
    }
}

/// Multi-head scaled dot-product attention with separate query and key/value inputs.
#[derive(Clone, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    width: usize,
}

impl Attention {
    fn new(store: &mut ParamStore, name: &str, q_in: usize, kv_in: usize, width: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Attention {
            q: Linear::new(store, &format!("{name}.q"), q_in, width, rng)?,
            k: Linear::new(store, &format!("{name}.k"), kv_in, width, rng)?,
            v: Linear::new(store, &format!("{name}.v"), kv_in, width, rng)?,
            o: Linear::new(store, &format!("{name}.o"), width, width, rng)?,
            heads,
            width,
        })
    }

    fn split_heads<'g>(&self, x: Var<'g>) -> Result<Var<'g>> {
        let n = x.shape()[0];
        x.reshape(&[n, self.heads, self.width / self.heads])?.permute(&[1, 0, 2])
    }

    fn forward<'g>(&self, p: &Bound<'g>, queries: Var<'g>, context: Var<'g>) -> Result<Var<'g>> {
        let nq = queries.shape()[0];
        let head_dim = self.width / self.heads;
        let q = self.split_heads(self.q.forward(p, queries)?)?;
        let k = self.split_heads(self.k.forward(p, context)?)?;
        let v = self.split_heads(self.v.forward(p, context)?)?;
        let weights = q.matmul(k.transpose()?)?.scale(1.0 / (head_dim as f64).sqrt())?.softmax()?;
        let mixed = weights.matmul(v)?.permute(&[1, 0, 2])?.reshape(&[nq, self.width])?;
        self.o.forward(p, mixed)
    }
}

/// `x + Attn(LN(x), LN(ctx))`, then `x + MLP(LN(x))`. The query input is first
/// projected to the block width when it differs.
#[derive(Clone, Debug)]
struct CrossBlock {
    input: Option<Linear>,
    norm_q: LayerNorm,
    norm_kv: LayerNorm,
    attn: Attention,
    norm_mlp: LayerNorm,
    mlp: Mlp,
}

impl CrossBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        q_in: usize,
        kv_in: usize,
        width: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let input = if q_in != width {
            Some(Linear::new(store, &format!("{name}.input"), q_in, width, rng)?)
        } else {
            None
        };
        Ok(CrossBlock {
            input,
            norm_q: LayerNorm::new(store, &format!("{name}.norm_q"), width)?,
            norm_kv: LayerNorm::new(store, &format!("{name}.norm_kv"), kv_in)?,
            attn: Attention::new(store, &format!("{name}.attn"), width, kv_in, width, heads, rng)?,
            norm_mlp: LayerNorm::new(store, &format!("{name}.norm_mlp"), width)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), width, width * mlp_ratio, rng)?,
        })
    }

    fn forward<'g>(&self, p: &Bound<'g>, queries: Var<'g>, context: Var<'g>) -> Result<Var<'g>> {
        let x = match &self.input {
            Some(l) => l.forward(p, queries)?,
            None => queries,
        };
        let kv = self.norm_kv.forward(p, context)?;
        let x = x.add(self.attn.forward(p, self.norm_q.forward(p, x)?, kv)?)?;
        x.add(self.mlp.forward(p, self.norm_mlp.forward(p, x)?)?)
    }
}

#[derive(Clone, Debug)]
struct SelfBlock {
    norm_attn: LayerNorm,
    attn: Attention,
    norm_mlp: LayerNorm,
    mlp: Mlp,
}

impl SelfBlock {
    fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, mlp_ratio: usize, rng: &mut Rng) -> Result<Self> {
        Ok(SelfBlock {
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), width)?,
            attn: Attention::new(store, &format!("{name}.attn"), width, width, width, heads, rng)?,
            norm_mlp: LayerNorm::new(store, &format!("{name}.norm_mlp"), width)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), width, width * mlp_ratio, rng)?,
        })
    }

    fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let n = self.norm_attn.forward(p, x)?;
        let x = x.add(self.attn.forward(p, n, n)?)?;
        x.add(self.mlp.forward(p, self.norm_mlp.forward(p, x)?)?)
    }
}

/// One cross-attention block from queries onto the latent, a linear head and a sigmoid.
#[derive(Clone, Debug)]
struct Decoder {
    block: CrossBlock,
    norm_out: LayerNorm,
    head: Linear,
}

impl Decoder {
    fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, outputs: usize, rng: &mut Rng) -> Result<Self> {
        let w = cfg.latent_width;
        Ok(Decoder {
            block: CrossBlock::new(store, &format!("{name}.cross"), cfg.query_width(), w, w, cfg.heads, cfg.mlp_ratio, rng)?,
            norm_out: LayerNorm::new(store, &format!("{name}.norm_out"), w)?,
            head: Linear::new(store, &format!("{name}.head"), w, outputs, rng)?,
        })
    }

    /// Pre-activation outputs `[N_d, outputs]`.
    fn logits<'g>(&self, p: &Bound<'g>, latent: Var<'g>, queries: Var<'g>) -> Result<Var<'g>> {
        let y = self.block.forward(p, queries, latent)?;
        self.head.forward(p, self.norm_out.forward(p, y)?)
    }
}

/// The conditioned latent array `[N_l, C_l]`.
#[derive(Clone, Copy, Debug)]
pub struct LatentState<'g> {
    pub var: Var<'g>,
}

impl LatentState<'_> {
    pub fn to_tensor(&self) -> Tensor {
        self.var.to_tensor()
    }
}

#[derive(Clone, Debug)]
pub struct DepthFieldModel {
    pub config: ModelConfig,
    image_encoder: ImageEncoder,
    latent: ParamId,
    encoder: CrossBlock,
    blocks: Vec<SelfBlock>,
    depth: Decoder,
    rgb: Decoder,
}

impl DepthFieldModel {
    /// Build the model and its freshly initialized parameters.
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let s = &mut store;
        let (w, h, r) = (config.latent_width, config.heads, config.mlp_ratio);
        let image_encoder = ImageEncoder::new(s, "image", config.image, rng)?;
        let latent = s.add("latent", init_uniform(rng, &[config.latents, w], w))?;
        let encoder = CrossBlock::new(s, "encode", w, config.token_width(), w, h, r, rng)?;
        let blocks = (0..config.blocks)
            .map(|i| SelfBlock::new(s, &format!("process.{i}"), w, h, r, rng))
            .collect::<Result<_>>()?;
        let depth = Decoder::new(s, "decode_depth", &config, 1, rng)?;
        let rgb = Decoder::new(s, "decode_rgb", &config, 3, rng)?;
        let model = DepthFieldModel { config, image_encoder, latent, encoder, blocks, depth, rgb };
        Ok((model, store))
    }

    pub fn tokens<'g>(&self, p: &Bound<'g>, views: &[ViewInput<'_>]) -> Result<Var<'g>> {
        assemble_encoder_tokens(p, &self.image_encoder, views, &self.config.embedding)
    }

    /// Fold `[N_e, C_e]` tokens into the latent.
    pub fn encode<'g>(&self, p: &Bound<'g>, tokens: Var<'g>) -> Result<LatentState<'g>> {
        let shape = tokens.shape();
        if shape.len() != 2 || shape[1] != self.config.token_width() || shape[0] == 0 {
            return Err(Error::shape(
                "encode",
                format!("tokens must be [N_e ≥ 1, {}], got {shape:?}", self.config.token_width()),
            ));
        }
        let mut x = self.encoder.forward(p, p.get(self.latent), tokens)?;
        for b in &self.blocks {
            x = b.forward(p, x)?;
        }
        Ok(LatentState { var: x })
    }

    pub fn encode_views<'g>(&self, p: &Bound<'g>, views: &[ViewInput<'_>]) -> Result<LatentState<'g>> {
        self.encode(p, self.tokens(p, views)?)
    }

    fn check_queries(&self, queries: &Var<'_>) -> Result<()> {
        let s = queries.shape();
        if s.len() != 2 || s[1] != self.config.query_width() {
            return Err(Error::shape(
                "decode",
                format!("queries must be [N_d, {}], got {s:?}", self.config.query_width()),
            ));
        }
        Ok(())
    }

    /// Depth logits before the sigmoid, `[N_d, 1]`.
    pub fn depth_logits<'g>(&self, p: &Bound<'g>, latent: LatentState<'g>, queries: Var<'g>) -> Result<Var<'g>> {
        self.check_queries(&queries)?;
        self.depth.logits(p, latent.var, queries)
    }

    /// Depth in meters inside `(d_min, d_max)`, `[N_d, 1]`.
    pub fn decode_depth<'g>(&self, p: &Bound<'g>, latent: LatentState<'g>, queries: Var<'g>) -> Result<Var<'g>> {
        let s = self.depth_logits(p, latent, queries)?.sigmoid()?;
        scale_depth(s, &self.config)
    }

    /// RGB in `(0, 1)`, `[N_d, 3]`.
    pub fn decode_rgb<'g>(&self, p: &Bound<'g>, latent: LatentState<'g>, queries: Var<'g>) -> Result<Var<'g>> {
        self.check_queries(&queries)?;
        self.rgb.logits(p, latent.var, queries)?.sigmoid()
    }

    /// Bind `latent` (computed elsewhere) into `graph` for decoding.
    pub fn latent_in<'g>(&self, graph: &'g Graph, latent: &Tensor) -> Result<LatentState<'g>> {
        let s = latent.shape();
        if s != [self.config.latents, self.config.latent_width] {
            return Err(Error::shape("latent", format!("unexpected latent shape {s:?}")));
        }
        Ok(LatentState { var: graph.constant(latent.clone()) })
    }
}

/// Map a sigmoid output in `(0, 1)` to depth.
pub fn scale_depth<'g>(s: Var<'g>, cfg: &ModelConfig) -> Result<Var<'g>> {
    let (lo, hi) = (cfg.depth_min, cfg.depth_max);
    match cfg.depth_scaling {
        DepthScaling::Linear => s.affine(hi - lo, lo),
        DepthScaling::Inverse => s.affine(1.0 / lo - 1.0 / hi, 1.0 / hi)?.log()?.scale(-1.0)?.exp(),
    }
}
