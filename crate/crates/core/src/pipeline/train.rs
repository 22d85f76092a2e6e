//! The training loop.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;

use super::eval::{evaluate, evaluate_views, EvalReport};
use super::predict::Predictor;
use super::{save_checkpoint, RunConfig};
use crate::augment::{canonical_jitter, canonical_randomize, rebase, render_virtual_gt, sample_virtual_camera, RgbdView};
use crate::embeddings::{assemble_decoder_queries, ViewInput};
use crate::error::{Error, Result};
use crate::geometry::{Camera, Pose};
use crate::model::DepthFieldModel;
use crate::objective::{depth_loss, rgb_loss, total_loss, Metrics, METRICS_HEADER};
use crate::rng::{substream, Rng};
use crate::scenedata::{Dataset, Sample, Scene};
use crate::tensor::{Adam, Graph, ParamStore, Tensor, Var};

pub const LOSS_HEADER: &str = "step,loss,depth,rgb,virtual_depth,virtual_rgb";

/// Loss components of one step. Virtual terms are 0 when no virtual view was rendered.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub step: usize,
    pub total: f64,
    pub depth: f64,
    pub rgb: f64,
    pub virtual_depth: f64,
    pub virtual_rgb: f64,
}

impl StepLosses {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.total, self.depth, self.rgb, self.virtual_depth, self.virtual_rgb
        )
    }
}

/// Supervision for one decoded view: query embeddings and the targets at those pixels.
struct Target {
    queries: Tensor,
    depth: Tensor,
    rgb: Tensor,
}

pub struct Trainer<'d> {
    pub config: RunConfig,
    pub model: DepthFieldModel,
    pub params: ParamStore,
    adam: Adam,
    scenes: Vec<&'d Scene>,
    images: Vec<Vec<Tensor>>,
    data_rng: Rng,
    augment_rng: Rng,
    query_rng: Rng,
    step: usize,
}

impl<'d> Trainer<'d> {
    pub fn new(config: RunConfig, dataset: &'d Dataset) -> Result<Self> {
        config.validate()?;
        let scenes: Vec<&Scene> = if config.data.scenes.is_empty() {
            dataset.split(false)?
        } else {
            config.data.scenes.iter().map(|n| dataset.scene(n)).collect::<Result<_>>()?
        };
        if scenes.is_empty() {
            return Err(Error::Data("no training scenes".into()));
        }
        for s in &scenes {
            if let Some(&v) = config.data.views.iter().find(|&&v| v >= s.len()) {
                return Err(Error::Data(format!("view {v} is outside scene {} ({} frames)", s.name, s.len())));
            }
            if config.data.views.is_empty() && config.data.mode.target_range(config.data.stride, s.len()).is_none() {
                return Err(Error::Data(format!("scene {} is too short for {:?}", s.name, config.data.mode)));
            }
        }
        let images = scenes.iter().map(|s| s.frames.iter().map(|f| f.image()).collect()).collect();
        let (model, params) = DepthFieldModel::new(config.model, &mut substream(config.seed, "init"))?;
        let adam = Adam::new(config.optim, &params);
        Ok(Trainer {
            data_rng: substream(config.seed, "data"),
            augment_rng: substream(config.seed, "augment"),
            query_rng: substream(config.seed, "queries"),
            config,
            model,
            params,
            adam,
            scenes,
            images,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn predictor(&self) -> Predictor<'_> {
        Predictor::new(&self.model, &self.params)
    }

    pub fn scenes(&self) -> &[&'d Scene] {
        &self.scenes
    }

    fn draw_sample(&mut self) -> Result<(usize, Sample)> {
        let si = self.data_rng.random_range(0..self.scenes.len());
        let d = &self.config.data;
        let sample = if d.views.is_empty() {
            d.mode.sample(d.stride, self.scenes[si].len(), &mut self.data_rng)?
        } else {
            Sample { target: d.views[0], encode: d.views.clone(), query: d.views.clone() }
        };
        Ok((si, sample))
    }

    /// Up to `queries_per_view` of `candidates`, in increasing order.
    fn subsample(&mut self, candidates: Vec<usize>) -> Vec<usize> {
        let k = self.config.train.queries_per_view;
        if k == 0 || candidates.len() <= k {
            return candidates;
        }
        let mut picked: Vec<usize> = sample_indices(&mut self.query_rng, candidates.len(), k)
            .into_iter()
            .map(|i| candidates[i])
            .collect();
        picked.sort_unstable();
        picked
    }

    fn real_target(&mut self, camera: &Camera, depth: &[f64], rgb: &[f64], h: usize, w: usize) -> Result<Option<Target>> {
        let valid: Vec<usize> = (0..depth.len()).filter(|&i| depth[i] > 0.0).collect();
        if valid.is_empty() {
            return Ok(None);
        }
        let idx = self.subsample(valid);
        let queries = assemble_decoder_queries(camera, h, w, Some(&idx), &self.config.model.embedding)?;
        let d = Tensor::new([idx.len(), 1], idx.iter().map(|&i| depth[i]).collect())?;
        let c = Tensor::new([idx.len(), 3], idx.iter().flat_map(|&i| rgb[3 * i..3 * i + 3].to_vec()).collect())?;
        Ok(Some(Target { queries, depth: d, rgb: c }))
    }

    /// Apply the canonical augmentations (or the fixed first-frame anchor).
    fn canonical_poses(&mut self, poses: &[Pose], encoded: usize) -> Vec<Pose> {
        let aug = self.config.augment;
        let mut out = if aug.randomize_canonical {
            let (_, o) = canonical_randomize(&poses[..encoded], &mut self.augment_rng);
            rebase(poses, o)
        } else {
            rebase(poses, 0)
        };
        if aug.jitter {
            out = canonical_jitter(&out, aug.jitter_translation_std, aug.jitter_rotation_std, &mut self.augment_rng).0;
        }
        out
    }

    /// One optimizer step.
    pub fn step(&mut self) -> Result<StepLosses> {
        let step = self.step + 1;
        let numeric = |e: Error| if e.is_numeric() { Error::NonFiniteLoss { step } } else { e };
        let losses = self.step_inner(step).map_err(numeric)?;
        self.step = step;
        Ok(losses)
    }

    fn step_inner(&mut self, step: usize) -> Result<StepLosses> {
        let (si, sample) = self.draw_sample()?;
        let scene = self.scenes[si];
        let mut ids = sample.encode.clone();
        ids.extend(sample.query.iter().filter(|q| !sample.encode.contains(q)));
        let frames: Vec<_> = ids.iter().map(|&i| &scene.frames[i]).collect();
        let poses: Vec<Pose> = frames.iter().map(|f| f.pose).collect();
        let poses = self.canonical_poses(&poses, sample.encode.len());
        let cameras: Vec<Camera> = frames.iter().zip(&poses).map(|(f, p)| Camera::new(f.intrinsics, *p)).collect();
        let (h, w) = (frames[0].height, frames[0].width);

        let mut real = Vec::new();
        for (j, &fi) in ids.iter().enumerate() {
            if sample.query.contains(&fi) {
                let f = frames[j];
                if let Some(t) = self.real_target(&cameras[j], &f.depth, &f.rgb, h, w)? {
                    real.push(t);
                }
            }
        }
        if real.is_empty() {
            return Err(Error::Data(format!("step {step}: no supervised pixels in scene {}", scene.name)));
        }

        let aug = self.config.augment;
        let mut virt = Vec::new();
        if aug.virtual_cameras && aug.virtual_count > 0 {
            let views: Vec<RgbdView<'_>> = ids
                .iter()
                .enumerate()
                .filter(|(_, fi)| sample.query.contains(fi))
                .map(|(j, _)| RgbdView { camera: cameras[j], height: h, width: w, rgb: &frames[j].rgb, depth: &frames[j].depth })
                .collect();
            for _ in 0..aug.virtual_count {
                let cam = sample_virtual_camera(&views, aug.virtual_translation_std, aug.center_std, &mut self.augment_rng)?;
                let vf = render_virtual_gt(&views, &cam, h, w, aug.splat_radius);
                if vf.is_empty() {
                    continue;
                }
                let (depth, rgb) = (vf.dense_depth(), {
                    let mut c = vec![0.0; h * w * 3];
                    for p in &vf.pixels {
                        c[3 * p.index..3 * p.index + 3].copy_from_slice(&p.rgb);
                    }
                    c
                });
                if let Some(t) = self.real_target(&cam, &depth, &rgb, h, w)? {
                    virt.push(t);
                }
            }
        }

        let g = Graph::new();
        let p = g.bind(&self.params);
        let images = &self.images[si];
        let inputs: Vec<ViewInput<'_>> = sample
            .encode
            .iter()
            .enumerate()
            .map(|(j, &fi)| ViewInput { image: &images[fi], camera: cameras[j] })
            .collect();
        let latent = self.model.encode_views(&p, &inputs)?;

        let all: Vec<&Target> = real.iter().chain(&virt).collect();
        let queries = g.constant(Tensor::stack_rows(&all.iter().map(|t| t.queries.clone()).collect::<Vec<_>>())?);
        let depth = self.model.decode_depth(&p, latent, queries)?;
        let with_rgb = self.config.loss.synthesis > 0.0;
        let rgb = if with_rgb { Some(self.model.decode_rgb(&p, latent, queries)?) } else { None };

        let zero = g.constant(Tensor::scalar(0.0));
        let mut sums = [zero; 4];
        let mut start = 0;
        for (k, t) in all.iter().enumerate() {
            let n = t.queries.rows();
            let mask = vec![true; n];
            let slot = if k < real.len() { 0 } else { 2 };
            let ld = depth_loss(depth.slice(0, start, n)?, &t.depth, &mask)?;
            sums[slot] = sums[slot].add(ld)?;
            if let Some(rgb) = rgb {
                let ls = rgb_loss(rgb.slice(0, start, n)?, &t.rgb, &mask)?;
                sums[slot + 1] = sums[slot + 1].add(ls)?;
            }
            start += n;
        }
        let ld = mean_of(sums[0], real.len())?;
        let ls = mean_of(sums[1], real.len())?;
        let ldv = mean_of(sums[2], virt.len())?;
        let lsv = mean_of(sums[3], virt.len())?;
        let loss = total_loss(ld, ls, ldv, lsv, &self.config.loss)?;
        let value = loss.to_tensor().item()?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let grads = g.backward(loss)?.for_params(&self.params);
        if grads.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFiniteLoss { step });
        }
        let scalar = |v: Var<'_>| v.to_tensor().item();
        let out = StepLosses {
            step,
            total: value,
            depth: scalar(ld)?,
            rgb: scalar(ls)?,
            virtual_depth: scalar(ldv)?,
            virtual_rgb: scalar(lsv)?,
        };
        drop(p);
        self.adam.step(&mut self.params, &grads);
        Ok(out)
    }

    /// Periodic evaluation: the fixed training views when configured, else the
    /// configured protocol on the test split.
    pub fn evaluate(&self, dataset: &Dataset) -> Result<Vec<(String, Metrics)>> {
        let pred = self.predictor();
        if !self.config.data.views.is_empty() {
            let mut all = Vec::new();
            for s in &self.scenes {
                all.extend(evaluate_views(&pred, s, &self.config.data.views, &self.config.data.views, false)?);
            }
            return Ok(vec![("train".into(), Metrics::mean(&all)?)]);
        }
        let report: EvalReport = evaluate(&pred, dataset, &self.config, self.config.eval.protocol, true)?;
        Ok(report.rows)
    }
}

fn mean_of(v: Var<'_>, n: usize) -> Result<Var<'_>> {
    if n == 0 {
        Ok(v)
    } else {
        v.scale(1.0 / n as f64)
    }
}

pub struct TrainOutcome {
    pub config: RunConfig,
    pub model: DepthFieldModel,
    pub params: ParamStore,
    pub losses: Vec<StepLosses>,
    pub metrics: Vec<(usize, String, Metrics)>,
}

fn append(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

fn create(path: &Path, header: &str) -> Result<()> {
    fs::write(path, format!("{header}\n")).map_err(|e| Error::io(path, e))
}

/// Train for `config.train.steps` steps. With `out`, writes `loss.csv`,
/// `metrics.csv`, `config.toml` and `checkpoint.dfck` there as it goes.
pub fn train(config: &RunConfig, dataset: &Dataset, out: Option<&Path>, mut progress: impl FnMut(&StepLosses)) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone(), dataset)?;
    let files = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let loss = dir.join("loss.csv");
            let metrics = dir.join("metrics.csv");
            create(&loss, LOSS_HEADER)?;
            create(&metrics, METRICS_HEADER)?;
            let cfg_path = dir.join("config.toml");
            fs::write(&cfg_path, config.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
            Some((loss, metrics, dir.join("checkpoint.dfck")))
        }
        None => None,
    };
    let mut losses = Vec::with_capacity(config.train.steps);
    let mut metrics = Vec::new();
    let steps = config.train.steps;
    for _ in 0..steps {
        let l = trainer.step()?;
        progress(&l);
        if let Some((loss_csv, _, _)) = &files {
            append(loss_csv, &l.csv_row())?;
        }
        losses.push(l);
        let every = config.train.eval_every;
        if l.step == steps || (every > 0 && l.step % every == 0) {
            for (label, m) in trainer.evaluate(dataset)? {
                if let Some((_, metrics_csv, ckpt)) = &files {
                    append(metrics_csv, &m.csv_row(&label, l.step))?;
                    save_checkpoint(ckpt, config, l.step as u64, &trainer.params)?;
                }
                metrics.push((l.step, label, m));
            }
        }
    }
    if let Some((_, _, ckpt)) = &files {
        save_checkpoint(ckpt, config, steps as u64, &trainer.params)?;
    }
    Ok(TrainOutcome { config: config.clone(), model: trainer.model, params: trainer.params, losses, metrics })
}
