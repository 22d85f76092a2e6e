//! Training losses and depth evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// `λ_s` weights the synthesis terms, `λ_v` the virtual-camera terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub synthesis: f64,
    pub virtual_views: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { synthesis: 1.0, virtual_views: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.synthesis >= 0.0 && self.virtual_views >= 0.0) || !self.synthesis.is_finite() || !self.virtual_views.is_finite() {
            return Err(Error::Config(format!("loss weights must be finite and ≥ 0, got {self:?}")));
        }
        Ok(())
    }
}

fn selected(mask: &[bool], rows: usize, op: &'static str) -> Result<Vec<usize>> {
    if mask.len() != rows {
        return Err(Error::shape(op, format!("mask has {} entries for {rows} rows", mask.len())));
    }
    let idx: Vec<usize> = (0..rows).filter(|&i| mask[i]).collect();
    if idx.is_empty() {
        return Err(Error::Domain { op, msg: "empty mask".into() });
    }
    Ok(idx)
}

/// Restrict `pred` and `gt` (same leading extent) to the masked rows.
fn restrict<'g>(pred: Var<'g>, gt: &Tensor, mask: &[bool], op: &'static str) -> Result<(Var<'g>, Tensor)> {
    let shape = pred.shape();
    if shape.is_empty() || gt.numel() != shape.iter().product::<usize>() {
        return Err(Error::shape(op, format!("prediction {shape:?} vs target {:?}", gt.shape())));
    }
    let rows = shape[0];
    let width = gt.numel() / rows.max(1);
    let idx = selected(mask, rows, op)?;
    let pred = pred.reshape(&[rows, width])?;
    let gt = gt.clone().reshape([rows, width])?;
    if idx.len() == rows {
        return Ok((pred, gt));
    }
    Ok((pred.gather_rows(&idx)?, gt.gather_rows(&idx)?))
}

/// Mean over masked pixels of `|log gt − log pred|`.
pub fn depth_loss<'g>(pred: Var<'g>, gt: &Tensor, mask: &[bool]) -> Result<Var<'g>> {
    let (pred, gt) = restrict(pred, gt, mask, "depth_loss")?;
    if gt.data().iter().any(|&d| d <= 0.0) {
        return Err(Error::Domain { op: "depth_loss", msg: "ground truth must be positive under the mask".into() });
    }
    let log_gt = Tensor::new(gt.shape().to_vec(), gt.data().iter().map(|d| d.ln()).collect())?;
    let g = pred.graph();
    pred.log()?.sub(g.constant(log_gt))?.abs()?.mean()
}

/// Mean over masked pixels of the squared error summed over channels.
pub fn rgb_loss<'g>(pred: Var<'g>, gt: &Tensor, mask: &[bool]) -> Result<Var<'g>> {
    let (pred, gt) = restrict(pred, gt, mask, "rgb_loss")?;
    let n = gt.rows() as f64;
    let g = pred.graph();
    pred.sub(g.constant(gt))?.square()?.sum()?.scale(1.0 / n)
}

/// `L = L_d + λ_s L_s + λ_v (L_dv + λ_s L_sv)`
pub fn total_loss<'g>(ld: Var<'g>, ls: Var<'g>, ldv: Var<'g>, lsv: Var<'g>, w: &LossWeights) -> Result<Var<'g>> {
    let virt = ldv.add(lsv.scale(w.synthesis)?)?;
    ld.add(ls.scale(w.synthesis)?)?.add(virt.scale(w.virtual_views)?)
}

pub fn total_loss_value(ld: f64, ls: f64, ldv: f64, lsv: f64, w: &LossWeights) -> f64 {
    ld + w.synthesis * ls + w.virtual_views * (ldv + w.synthesis * lsv)
}

/// `gt > 0` per pixel.
pub fn valid_mask(gt: &[f64]) -> Vec<bool> {
    gt.iter().map(|&d| d > 0.0).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
}

pub const METRICS_HEADER: &str = "split,step,AbsRel,SqRel,RMSE,d1,d2,d3";

impl Metrics {
    pub fn csv_row(&self, split: &str, step: usize) -> String {
        format!(
            "{split},{step},{},{},{},{},{},{}",
            self.abs_rel, self.sq_rel, self.rmse, self.d1, self.d2, self.d3
        )
    }

    /// Unweighted mean over frames.
    pub fn mean(all: &[Metrics]) -> Result<Metrics> {
        if all.is_empty() {
            return Err(Error::Domain { op: "metrics", msg: "no frames to average".into() });
        }
        let n = all.len() as f64;
        let sum = |f: fn(&Metrics) -> f64| all.iter().map(f).sum::<f64>() / n;
        Ok(Metrics {
            abs_rel: sum(|m| m.abs_rel),
            sq_rel: sum(|m| m.sq_rel),
            rmse: sum(|m| m.rmse),
            d1: sum(|m| m.d1),
            d2: sum(|m| m.d2),
            d3: sum(|m| m.d3),
        })
    }
}

fn check_pair(pred: &[f64], gt: &[f64], mask: &[bool], op: &'static str) -> Result<Vec<usize>> {
    if pred.len() != gt.len() {
        return Err(Error::shape(op, format!("{} predictions for {} targets", pred.len(), gt.len())));
    }
    let idx = selected(mask, gt.len(), op)?;
    if idx.iter().any(|&i| gt[i] <= 0.0) {
        return Err(Error::Domain { op, msg: "ground truth must be positive under the mask".into() });
    }
    Ok(idx)
}

/// AbsRel, SqRel, RMSE and `δ < 1.25^k` over masked pixels.
pub fn metrics(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<Metrics> {
    let idx = check_pair(pred, gt, mask, "metrics")?;
    let n = idx.len() as f64;
    let mut m = Metrics::default();
    let mut sq = 0.0;
    for &i in &idx {
        let (p, d) = (pred[i], gt[i]);
        let e = d - p;
        m.abs_rel += e.abs() / d;
        m.sq_rel += e * e / d;
        sq += e * e;
        let ratio = (p / d).max(d / p);
        m.d1 += f64::from(u8::from(ratio < 1.25));
        m.d2 += f64::from(u8::from(ratio < 1.25 * 1.25));
        m.d3 += f64::from(u8::from(ratio < 1.25 * 1.25 * 1.25));
    }
    m.abs_rel /= n;
    m.sq_rel /= n;
    m.rmse = (sq / n).sqrt();
    m.d1 /= n;
    m.d2 /= n;
    m.d3 /= n;
    Ok(m)
}

/// RMSE alone, for curves over masked pixels.
pub fn rmse(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<f64> {
    Ok(metrics(pred, gt, mask)?.rmse)
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// `pred · median(gt) / median(pred)`, both medians over masked pixels.
pub fn median_scale(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    let idx = check_pair(pred, gt, mask, "median_scale")?;
    let mut p: Vec<f64> = idx.iter().map(|&i| pred[i]).collect();
    let mut g: Vec<f64> = idx.iter().map(|&i| gt[i]).collect();
    let mp = median(&mut p);
    if !(mp > 0.0) {
        return Err(Error::Domain { op: "median_scale", msg: format!("median prediction {mp} is not positive") });
    }
    let s = median(&mut g) / mp;
    Ok(pred.iter().map(|v| v * s).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    fn col(v: &[f64]) -> Tensor {
        Tensor::new([v.len(), 1], v.to_vec()).unwrap()
    }

    #[test]
    fn depth_loss_examples() {
        let g = Graph::new();
        let gt = col(&[1.0, 2.0]);
        let same = depth_loss(g.constant(gt.clone()), &gt, &[true, true]).unwrap();
        assert_eq!(same.to_tensor().item().unwrap(), 0.0);
        let one = depth_loss(g.constant(col(&[std::f64::consts::E])), &col(&[1.0]), &[true]).unwrap();
        assert!((one.to_tensor().item().unwrap() - 1.0).abs() < 1e-15);
        let a = depth_loss(g.constant(col(&[0.7, 3.0])), &col(&[1.1, 2.5]), &[true, true]).unwrap();
        let b = depth_loss(g.constant(col(&[1.4, 6.0])), &col(&[2.2, 5.0]), &[true, true]).unwrap();
        assert!((a.to_tensor().item().unwrap() - b.to_tensor().item().unwrap()).abs() < 1e-15);
        assert!(depth_loss(g.constant(col(&[1.0])), &col(&[1.0]), &[false]).is_err());
    }

    #[test]
    fn rgb_loss_examples() {
        let g = Graph::new();
        let gt = Tensor::new([1, 3], vec![0.2, 0.3, 0.4]).unwrap();
        let off = Tensor::new([1, 3], vec![1.2, 0.3, 0.4]).unwrap();
        let l = rgb_loss(g.constant(off), &gt, &[true]).unwrap();
        assert!((l.to_tensor().item().unwrap() - 1.0).abs() < 1e-15);
        // two pixels: ((0.1² + 0.2² + 0.3²) + (0.5² + 0² + 0.4²)) / 2 = (0.14 + 0.41) / 2
        let p = Tensor::new([2, 3], vec![0.1, 0.2, 0.3, 0.5, 0.5, 0.5]).unwrap();
        let t = Tensor::new([2, 3], vec![0.0, 0.0, 0.0, 0.0, 0.5, 0.9]).unwrap();
        let l = rgb_loss(g.constant(p), &t, &[true, true]).unwrap();
        assert!((l.to_tensor().item().unwrap() - 0.275).abs() < 1e-15);
    }

    #[test]
    fn total_loss_arithmetic_and_gradient() {
        let w = LossWeights { synthesis: 0.5, virtual_views: 0.1 };
        assert!((total_loss_value(1.0, 2.0, 3.0, 4.0, &w) - 2.5).abs() < 1e-15);
        let zero = LossWeights { synthesis: 0.0, virtual_views: 0.0 };
        assert_eq!(total_loss_value(1.0, 2.0, 3.0, 4.0, &zero), 1.0);
        let g = Graph::new();
        let v: Vec<_> = [1.0, 2.0, 3.0, 4.0].iter().map(|&x| g.leaf(Tensor::scalar(x))).collect();
        let l = total_loss(v[0], v[1], v[2], v[3], &w).unwrap();
        assert!((l.to_tensor().item().unwrap() - 2.5).abs() < 1e-15);
        let grads = g.backward(l).unwrap();
        let expect = [1.0, 0.5, 0.1, 0.05];
        for (var, e) in v.iter().zip(expect) {
            assert!((grads.wrt(*var).unwrap().item().unwrap() - e).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_loss_matches_subset_loss() {
        let g = Graph::new();
        let pred = col(&[1.0, 2.0, 3.0, 4.0]);
        let gt = col(&[1.5, 0.0, 2.0, 5.0]);
        let mask = valid_mask(gt.data());
        let full = depth_loss(g.constant(pred), &gt, &mask).unwrap();
        let sub = depth_loss(g.constant(col(&[1.0, 3.0, 4.0])), &col(&[1.5, 2.0, 5.0]), &[true; 3]).unwrap();
        assert_eq!(full.to_tensor().item().unwrap(), sub.to_tensor().item().unwrap());
    }

    #[test]
    fn metric_examples() {
        let m = metrics(&[1.0, 2.0], &[1.0, 2.0], &[true, true]).unwrap();
        assert_eq!(m, Metrics { d1: 1.0, d2: 1.0, d3: 1.0, ..Default::default() });
        let m = metrics(&[1.0], &[2.0], &[true]).unwrap();
        assert_eq!((m.abs_rel, m.sq_rel, m.rmse), (0.5, 0.5, 1.0));
        // A ratio of 2 exceeds 1.25³ ≈ 1.95, so every threshold fails.
        assert_eq!((m.d1, m.d2, m.d3), (0.0, 0.0, 0.0));
        let m = metrics(&[1.0], &[1.5], &[true]).unwrap();
        assert_eq!((m.d1, m.d2, m.d3), (0.0, 1.0, 1.0));
        assert!(metrics(&[1.0], &[2.0], &[false]).is_err());
    }

    #[test]
    fn median_scale_examples() {
        let s = median_scale(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0], &[true; 3]).unwrap();
        assert_eq!(s, vec![2.0, 4.0, 6.0]);
        assert_eq!(metrics(&s, &[2.0, 4.0, 6.0], &[true; 3]).unwrap().abs_rel, 0.0);
        let p = [1.5, 0.25, 7.0, 3.0];
        assert_eq!(median_scale(&p, &p, &[true; 4]).unwrap(), p.to_vec());
        let mut v = vec![3.0, 1.0, 2.0, 10.0];
        assert_eq!(median(&mut v), 2.5);
    }

    #[test]
    fn csv_row_layout() {
        let m = Metrics { abs_rel: 0.5, sq_rel: 0.25, rmse: 1.0, d1: 0.0, d2: 1.0, d3: 1.0 };
        assert_eq!(m.csv_row("test", 7), "test,7,0.5,0.25,1,0,1,1");
        assert_eq!(METRICS_HEADER.split(',').count(), 8);
    }
}
