use rand_chacha::ChaCha8Rng;

use super::{sample_indices, HeadOutputs};
use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

pub const POSITIVE_IOU: f64 = 0.5;
pub const NEGATIVE_IOU: f64 = 0.3;

/// Sampled training rows for one head.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Targets {
    /// Sampled box indices, ascending.
    pub rows: Vec<usize>,
    /// 1 for person, 0 for background, aligned with `rows`.
    pub labels: Vec<usize>,
    /// Positive box indices, ascending (a subset of `rows`).
    pub positives: Vec<usize>,
    /// Index of the matched ground-truth box for each positive.
    pub matched: Vec<usize>,
    /// Regression target deltas for each positive.
    pub reg_targets: Vec<[f64; 4]>,
}

/// Matches `boxes` to `gt` (positive at IoU ≥ 0.5, negative below 0.3,
/// otherwise ignored) and samples up to `max_samples` rows with at most half
/// positives, filling the remainder with negatives.
pub fn assign_targets(boxes: &[BBox], gt: &[BBox], max_samples: usize, rng: &mut ChaCha8Rng) -> Targets {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    let mut best_gt = vec![0; boxes.len()];
    for (i, b) in boxes.iter().enumerate() {
        let mut best = (f64::NEG_INFINITY, 0);
        for (j, t) in gt.iter().enumerate() {
            let iou = b.iou(t);
            if iou > best.0 {
                best = (iou, j);
            }
        }
        best_gt[i] = best.1;
        if best.0 >= POSITIVE_IOU {
            pos.push(i);
        } else if gt.is_empty() || best.0 < NEGATIVE_IOU {
            neg.push(i);
        }
    }
    let n_pos = pos.len().min(max_samples / 2);
    let pos: Vec<usize> = sample_indices(rng, pos.len(), n_pos).into_iter().map(|k| pos[k]).collect();
    let n_neg = neg.len().min(max_samples - n_pos);
    let neg: Vec<usize> = sample_indices(rng, neg.len(), n_neg).into_iter().map(|k| neg[k]).collect();

    let mut rows: Vec<(usize, usize)> = pos.iter().map(|&i| (i, 1)).chain(neg.iter().map(|&i| (i, 0))).collect();
    rows.sort_unstable();
    Targets {
        rows: rows.iter().map(|r| r.0).collect(),
        labels: rows.iter().map(|r| r.1).collect(),
        matched: pos.iter().map(|&i| best_gt[i]).collect(),
        reg_targets: pos.iter().map(|&i| boxes[i].deltas_to(&gt[best_gt[i]])).collect(),
        positives: pos,
    }
}

fn zero(g: &mut Graph) -> Var {
    g.constant(Tensor::scalar(0.0))
}

/// Mean two-class cross-entropy of `logits[rows]` against `labels`.
pub fn classification_loss(g: &mut Graph, logits: Var, rows: &[usize], labels: &[usize]) -> Result<Var> {
    if rows.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "classification_loss",
            lhs: vec![rows.len()],
            rhs: vec![labels.len()],
        });
    }
    if rows.is_empty() {
        return Ok(zero(g));
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::invalid("classification_loss", format!("label {l} is not 0 or 1")));
    }
    let sel = g.select_rows(logits, rows)?;
    let logp = g.log_softmax(sel, 1.0)?;
    let idx: Vec<usize> = labels.iter().enumerate().map(|(i, &l)| 2 * i + l).collect();
    let picked = g.gather(logp, idx, vec![rows.len()])?;
    let m = g.mean(picked);
    Ok(g.scale(m, -1.0))
}

/// Smooth-L1 between `deltas[rows]` and `targets`, summed over the four
/// coordinates and averaged over rows. Zero when there are no rows.
pub fn regression_loss(g: &mut Graph, deltas: Var, rows: &[usize], targets: &[[f64; 4]]) -> Result<Var> {
    if rows.len() != targets.len() {
        return Err(Error::ShapeMismatch {
            op: "regression_loss",
            lhs: vec![rows.len()],
            rhs: vec![targets.len()],
        });
    }
    if rows.is_empty() {
        return Ok(zero(g));
    }
    let sel = g.select_rows(deltas, rows)?;
    let t = g.constant(Tensor::new(vec![rows.len(), 4], targets.iter().flatten().copied().collect())?);
    let d = g.sub(sel, t)?;
    let l = g.smooth_l1(d);
    let s = g.sum(l);
    Ok(g.scale(s, 1.0 / rows.len() as f64))
}

/// The four ground-truth detector losses.
#[derive(Clone, Copy, Debug)]
pub struct DetectorLosses {
    pub rpn_cls: Var,
    pub rpn_reg: Var,
    pub rcn_cls: Var,
    pub rcn_reg: Var,
}

impl DetectorLosses {
    pub fn values(&self, g: &Graph) -> [f64; 4] {
        [self.rpn_cls, self.rpn_reg, self.rcn_cls, self.rcn_reg].map(|v| g.value(v).item())
    }
}

pub fn detector_gt_losses(
    g: &mut Graph,
    rpn: HeadOutputs,
    rpn_targets: &Targets,
    rcn: HeadOutputs,
    rcn_targets: &Targets,
) -> Result<DetectorLosses> {
    Ok(DetectorLosses {
        rpn_cls: classification_loss(g, rpn.cls, &rpn_targets.rows, &rpn_targets.labels)?,
        rpn_reg: regression_loss(g, rpn.deltas, &rpn_targets.positives, &rpn_targets.reg_targets)?,
        rcn_cls: classification_loss(g, rcn.cls, &rcn_targets.rows, &rcn_targets.labels)?,
        rcn_reg: regression_loss(g, rcn.deltas, &rcn_targets.positives, &rcn_targets.reg_targets)?,
    })
}
