//! Evaluation protocols.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::predict::Predictor;
use super::RunConfig;
use crate::augment::{render_virtual_gt, RgbdView};
use crate::error::{Error, Result};
use crate::objective::{median_scale, metrics, valid_mask, Metrics};
use crate::scenedata::{ContextMode, Dataset, Scene};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Encode `{t, t+s}`, evaluate `t`.
    Stereo,
    /// Encode `{t−s, t, t+s}`, evaluate `t`.
    #[default]
    Video,
    /// As `video`, with median-scaled predictions.
    ZeroShot,
    /// Encode `{t−5, t+5}`, evaluate `t−4 … t+4` by query and by projection.
    Interpolate,
    /// Encode `{t−5, …, t−1}`, evaluate `t … t+8` by query and by projection.
    Extrapolate,
}

impl Protocol {
    pub const ALL: [Protocol; 5] =
        [Protocol::Stereo, Protocol::Video, Protocol::ZeroShot, Protocol::Interpolate, Protocol::Extrapolate];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Stereo => "stereo",
            Protocol::Video => "video",
            Protocol::ZeroShot => "zero-shot",
            Protocol::Interpolate => "interpolate",
            Protocol::Extrapolate => "extrapolate",
        }
    }

    fn context(self) -> ContextMode {
        match self {
            Protocol::Stereo => ContextMode::Stereo,
            Protocol::Video | Protocol::ZeroShot => ContextMode::Video,
            Protocol::Interpolate => ContextMode::Interpolate,
            Protocol::Extrapolate => ContextMode::Extrapolate,
        }
    }

    fn has_offsets(self) -> bool {
        matches!(self, Protocol::Interpolate | Protocol::Extrapolate)
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown protocol {s:?} (expected one of stereo, video, zero-shot, interpolate, extrapolate)")))
    }
}

/// Metrics of one predicted map against its ground truth, or `None` without valid pixels.
pub fn frame_metrics(pred: &[f64], gt: &[f64], zero_shot: bool) -> Result<Option<Metrics>> {
    let mask = valid_mask(gt);
    if !mask.contains(&true) {
        return Ok(None);
    }
    if zero_shot {
        let scaled = median_scale(pred, gt, &mask)?;
        return metrics(&scaled, gt, &mask).map(Some);
    }
    metrics(pred, gt, &mask).map(Some)
}

/// Encode `encode`, then decode and score every frame in `query`.
pub fn evaluate_views(pred: &Predictor<'_>, scene: &Scene, encode: &[usize], query: &[usize], zero_shot: bool) -> Result<Vec<Metrics>> {
    let frames: Vec<_> = encode.iter().map(|&i| &scene.frames[i]).collect();
    let enc = pred.encode_frames(&frames)?;
    let mut out = Vec::new();
    for &q in query {
        let f = &scene.frames[q];
        let depth = pred.depth_at(&enc, &f.pose)?;
        out.extend(frame_metrics(&depth, &f.depth, zero_shot)?);
    }
    Ok(out)
}

pub const CURVES_HEADER: &str = "mode,offset,rmse,rmse_shared,coverage,frames";

/// One point of an RMSE-versus-offset curve. `rmse` uses every pixel the mode
/// covers, `rmse_shared` only pixels both modes cover, and `coverage` is the
/// covered fraction of valid ground-truth pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub mode: &'static str,
    pub offset: isize,
    pub rmse: f64,
    pub rmse_shared: f64,
    pub coverage: f64,
    pub frames: usize,
}

impl CurveRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.mode, self.offset, self.rmse, self.rmse_shared, self.coverage, self.frames
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<(String, Metrics)>,
    pub curves: Vec<CurveRow>,
}

/// `n` evenly spaced targets over the valid range of `mode` in `frames` frames.
fn targets(mode: ContextMode, stride: usize, frames: usize, n: usize) -> Vec<usize> {
    let Some((first, last)) = mode.target_range(stride, frames) else { return Vec::new() };
    let mut out: Vec<usize> = if n == 1 {
        vec![(first + last) / 2]
    } else {
        (0..n).map(|i| first + i * (last - first) / (n - 1)).collect()
    };
    out.dedup();
    out
}

#[derive(Default)]
struct OffsetStats {
    query: Vec<Metrics>,
    projection: Vec<Metrics>,
    query_shared: Vec<f64>,
    projection_shared: Vec<f64>,
    coverage: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn masked(values: &[f64], gt: &[f64], mask: &[bool]) -> Result<Metrics> {
    metrics(values, gt, mask)
}

/// Run `protocol` over the test split (or the train split) of `dataset`.
pub fn evaluate(pred: &Predictor<'_>, dataset: &Dataset, config: &RunConfig, protocol: Protocol, test_split: bool) -> Result<EvalReport> {
    let scenes = dataset.split(test_split)?;
    if scenes.is_empty() {
        return Err(Error::Data(format!("no {} scenes to evaluate", if test_split { "test" } else { "train" })));
    }
    let mode = protocol.context();
    let stride = config.data.stride;
    let mut report = EvalReport::default();
    let mut per_frame = Vec::new();
    let mut offsets: BTreeMap<isize, OffsetStats> = BTreeMap::new();
    for scene in scenes {
        for t in targets(mode, stride, scene.len(), config.eval.targets_per_scene) {
            let sample = mode.sample_at(stride, scene.len(), t)?;
            if !protocol.has_offsets() {
                per_frame.extend(evaluate_views(pred, scene, &sample.encode, &[t], protocol == Protocol::ZeroShot)?);
                continue;
            }
            let frames: Vec<_> = sample.encode.iter().map(|&i| &scene.frames[i]).collect();
            let enc = pred.encode_frames(&frames)?;
            let views: Vec<RgbdView<'_>> = frames
                .iter()
                .map(|f| RgbdView { camera: enc.camera(&f.pose), height: f.height, width: f.width, rgb: &f.rgb, depth: &f.depth })
                .collect();
            for &q in &sample.query {
                let f = &scene.frames[q];
                let valid = valid_mask(&f.depth);
                let nvalid = valid.iter().filter(|&&b| b).count();
                if nvalid == 0 {
                    continue;
                }
                let stats = offsets.entry(q as isize - t as isize).or_default();
                let depth = pred.depth_at(&enc, &f.pose)?;
                stats.query.push(masked(&depth, &f.depth, &valid)?);
                let projected = render_virtual_gt(&views, &enc.camera(&f.pose), f.height, f.width, config.augment.splat_radius).dense_depth();
                let covered: Vec<bool> = valid.iter().zip(&projected).map(|(&v, &p)| v && p > 0.0).collect();
                let ncovered = covered.iter().filter(|&&b| b).count();
                stats.coverage.push(ncovered as f64 / nvalid as f64);
                if ncovered > 0 {
                    let pm = masked(&projected, &f.depth, &covered)?;
                    stats.projection.push(pm);
                    stats.projection_shared.push(pm.rmse);
                    stats.query_shared.push(masked(&depth, &f.depth, &covered)?.rmse);
                }
            }
        }
    }
    if !protocol.has_offsets() {
        report.rows.push((protocol.name().to_string(), Metrics::mean(&per_frame)?));
        return Ok(report);
    }
    for (offset, s) in offsets {
        let query_rmse: Vec<f64> = s.query.iter().map(|m| m.rmse).collect();
        report.rows.push((format!("{}-query@{offset}", protocol.name()), Metrics::mean(&s.query)?));
        if !s.projection.is_empty() {
            report.rows.push((format!("{}-projection@{offset}", protocol.name()), Metrics::mean(&s.projection)?));
        }
        report.curves.push(CurveRow {
            mode: "query",
            offset,
            rmse: mean(&query_rmse),
            rmse_shared: mean(&s.query_shared),
            coverage: 1.0,
            frames: s.query.len(),
        });
        let proj_rmse: Vec<f64> = s.projection.iter().map(|m| m.rmse).collect();
        report.curves.push(CurveRow {
            mode: "projection",
            offset,
            rmse: mean(&proj_rmse),
            rmse_shared: mean(&s.projection_shared),
            coverage: mean(&s.coverage),
            frames: s.coverage.len(),
        });
    }
    Ok(report)
}
