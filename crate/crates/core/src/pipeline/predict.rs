//! Inference: encode posed frames once, decode depth or color for any camera.

use crate::embeddings::{assemble_decoder_queries, ViewInput};
use crate::error::{Error, Result};
use crate::geometry::{Camera, Intrinsics, Pose};
use crate::model::DepthFieldModel;
use crate::scenedata::FrameRecord;
use crate::tensor::{Graph, ParamStore, Tensor};

/// Queries decoded per graph. Rows are independent, so results do not depend on it.
pub const DECODE_CHUNK: usize = 1024;

#[derive(Clone, Copy, Debug)]
pub struct Predictor<'m> {
    pub model: &'m DepthFieldModel,
    pub params: &'m ParamStore,
}

/// Latent of a set of frames plus the frame they were expressed in.
#[derive(Clone, Debug)]
pub struct EncodedScene {
    pub latent: Tensor,
    /// World-to-camera pose of the first encoded frame, which is the canonical frame.
    pub anchor: Pose,
    pub intrinsics: Intrinsics,
    pub height: usize,
    pub width: usize,
}

impl EncodedScene {
    /// Camera for a world-to-camera `pose` given in the dataset frame.
    pub fn camera(&self, pose: &Pose) -> Camera {
        Camera::new(self.intrinsics, pose.compose(&self.anchor.inverse()))
    }
}

impl<'m> Predictor<'m> {
    pub fn new(model: &'m DepthFieldModel, params: &'m ParamStore) -> Self {
        Predictor { model, params }
    }

    /// Encode views whose cameras are already in a common frame.
    pub fn encode(&self, views: &[ViewInput<'_>]) -> Result<Tensor> {
        let g = Graph::new();
        let p = g.bind(self.params);
        Ok(self.model.encode_views(&p, views)?.to_tensor())
    }

    /// Encode dataset frames with the first one as the canonical camera.
    pub fn encode_frames(&self, frames: &[&FrameRecord]) -> Result<EncodedScene> {
        let first = frames.first().ok_or_else(|| Error::Data("no frames to encode".into()))?;
        let anchor = first.pose;
        let inv = anchor.inverse();
        let images: Vec<Tensor> = frames.iter().map(|f| f.image()).collect();
        let views: Vec<ViewInput<'_>> = frames
            .iter()
            .zip(&images)
            .map(|(f, image)| ViewInput { image, camera: Camera::new(f.intrinsics, f.pose.compose(&inv)) })
            .collect();
        Ok(EncodedScene {
            latent: self.encode(&views)?,
            anchor,
            intrinsics: first.intrinsics,
            height: first.height,
            width: first.width,
        })
    }

    fn decode(&self, latent: &Tensor, camera: &Camera, height: usize, width: usize, rgb: bool) -> Result<Vec<f64>> {
        let queries = assemble_decoder_queries(camera, height, width, None, &self.model.config.embedding)?;
        let n = queries.rows();
        let mut out = Vec::with_capacity(n * if rgb { 3 } else { 1 });
        for start in (0..n).step_by(DECODE_CHUNK) {
            let idx: Vec<usize> = (start..(start + DECODE_CHUNK).min(n)).collect();
            let g = Graph::new();
            let p = g.bind(self.params);
            let lat = self.model.latent_in(&g, latent)?;
            let q = g.constant(queries.gather_rows(&idx)?);
            let y = if rgb { self.model.decode_rgb(&p, lat, q)? } else { self.model.decode_depth(&p, lat, q)? };
            out.extend_from_slice(y.value().data());
        }
        Ok(out)
    }

    /// Dense `height × width` depth for `camera`.
    pub fn decode_depth(&self, latent: &Tensor, camera: &Camera, height: usize, width: usize) -> Result<Vec<f64>> {
        self.decode(latent, camera, height, width, false)
    }

    /// Dense `height × width × 3` color for `camera`.
    pub fn decode_rgb(&self, latent: &Tensor, camera: &Camera, height: usize, width: usize) -> Result<Vec<f64>> {
        self.decode(latent, camera, height, width, true)
    }

    pub fn depth_at(&self, scene: &EncodedScene, pose: &Pose) -> Result<Vec<f64>> {
        self.decode_depth(&scene.latent, &scene.camera(pose), scene.height, scene.width)
    }

    pub fn rgb_at(&self, scene: &EncodedScene, pose: &Pose) -> Result<Vec<f64>> {
        self.decode_rgb(&scene.latent, &scene.camera(pose), scene.height, scene.width)
    }
}

/// Encode `frames` and decode depth and color at the dataset-frame `pose`.
pub fn query_view(predictor: &Predictor<'_>, frames: &[&FrameRecord], pose: &Pose) -> Result<(Vec<f64>, Vec<f64>)> {
    let scene = predictor.encode_frames(frames)?;
    Ok((predictor.depth_at(&scene, pose)?, predictor.rgb_at(&scene, pose)?))
}
