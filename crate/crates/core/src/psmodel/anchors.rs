use serde::{Deserialize, Serialize};

use super::BackboneSpec;
use crate::boxes::{nms, rank_by_score, BBox};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// One anchor per aspect ratio at every feature cell centre, ordered by
/// `(row, col, aspect)` to match the proposal-head rows.
pub fn anchor_grid(spec: &BackboneSpec) -> Vec<BBox> {
    let fs = spec.feature_size();
    let stride = spec.feature_stride() as f64;
    let mut out = Vec::with_capacity(fs * fs * spec.num_anchors());
    for y in 0..fs {
        for x in 0..fs {
            let (cx, cy) = ((x as f64 + 0.5) * stride, (y as f64 + 0.5) * stride);
            for &r in &spec.aspect_ratios {
                let w = spec.anchor_size / r.sqrt();
                let h = spec.anchor_size * r.sqrt();
                out.push(BBox::from_center(cx, cy, w, h));
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposalConfig {
    pub pre_nms_top: usize,
    pub nms_iou: f64,
    pub keep: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            pre_nms_top: 150,
            nms_iou: 0.7,
            keep: 32,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    /// Person probability from the proposal head.
    pub score: f64,
    pub anchor: usize,
}

/// Decodes per-anchor logits `[n, 2]` and deltas `[n, 4]` into at most
/// `cfg.keep` proposals, sorted by score with ties broken by anchor index.
/// Returns the proposals and the number of degenerate boxes dropped.
pub fn propose(
    anchors: &[BBox],
    logits: &Tensor,
    deltas: &Tensor,
    image_size: f64,
    cfg: &ProposalConfig,
) -> Result<(Vec<Proposal>, usize)> {
    let n = anchors.len();
    if logits.shape() != [n, 2] || deltas.shape() != [n, 4] {
        return Err(Error::ShapeMismatch {
            op: "propose",
            lhs: vec![n, 2, n, 4],
            rhs: [logits.shape(), deltas.shape()].concat(),
        });
    }
    let scores: Vec<f64> = (0..n)
        .map(|i| {
            let l = logits.row(i);
            1.0 / (1.0 + (l[0] - l[1]).exp())
        })
        .collect();
    let order = rank_by_score(&scores);
    let mut boxes = Vec::new();
    let mut kept_scores = Vec::new();
    let mut kept_anchors = Vec::new();
    let mut dropped = 0;
    for &i in order.iter().take(cfg.pre_nms_top) {
        let b = anchors[i].apply_deltas(deltas.row(i)).clip(image_size, image_size);
        if !b.is_valid() {
            dropped += 1;
            continue;
        }
        boxes.push(b);
        kept_scores.push(scores[i]);
        kept_anchors.push(i);
    }
    let keep = nms(&boxes, &kept_scores, cfg.nms_iou, cfg.keep);
    Ok((
        keep.into_iter()
            .map(|k| Proposal {
                bbox: boxes[k],
                score: kept_scores[k],
                anchor: kept_anchors[k],
            })
            .collect(),
        dropped,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::psmodel::BackboneSize;

    fn spec() -> BackboneSpec {
        BackboneSpec::new(BackboneSize::Large, 32, 96)
    }

    #[test]
    fn grid_layout_and_shape() {
        let s = spec();
        let a = anchor_grid(&s);
        assert_eq!(a.len(), 12 * 12 * 2);
        let (cx, cy) = a[(1 * 12 + 2) * 2 + 1].center();
        assert!((cx - 20.0).abs() < 1e-9 && (cy - 12.0).abs() < 1e-9);
        for b in &a {
            assert!((b.area() - 27.0 * 27.0).abs() < 1e-9);
            assert!(b.height() > b.width());
        }
    }

    #[test]
    fn equal_logits_keep_anchor_order() {
        let s = spec();
        let a = anchor_grid(&s);
        let n = a.len();
        let (p, dropped) = propose(
            &a,
            &Tensor::zeros(vec![n, 2]),
            &Tensor::zeros(vec![n, 4]),
            96.0,
            &ProposalConfig::default(),
        )
        .unwrap();
        assert_eq!(dropped, 0);
        assert_eq!(p.len(), 32);
        let idx: Vec<usize> = p.iter().map(|p| p.anchor).collect();
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        assert_eq!(idx, sorted);
        assert_eq!(idx[0], 0);
    }

    #[test]
    fn dominant_anchor_ranks_first() {
        let s = spec();
        let a = anchor_grid(&s);
        let n = a.len();
        let mut logits = Tensor::zeros(vec![n, 2]);
        logits.data_mut()[2 * 77 + 1] = 5.0;
        let (p, _) = propose(&a, &logits, &Tensor::zeros(vec![n, 4]), 96.0, &ProposalConfig::default()).unwrap();
        assert_eq!(p[0].anchor, 77);
        assert!(p.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn degenerate_boxes_are_counted() {
        let s = spec();
        let a = anchor_grid(&s);
        let n = a.len();
        let mut deltas = Tensor::zeros(vec![n, 4]);
        // push anchor 0 fully outside the image
        deltas.data_mut()[0] = -10.0;
        let mut logits = Tensor::zeros(vec![n, 2]);
        logits.data_mut()[1] = 3.0;
        let (p, dropped) = propose(&a, &logits, &deltas, 96.0, &ProposalConfig::default()).unwrap();
        assert_eq!(dropped, 1);
        assert!(p.iter().all(|p| p.anchor != 0 && p.bbox.is_valid()));
    }
}
