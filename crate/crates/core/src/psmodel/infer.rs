use serde::{Deserialize, Serialize};

use super::{propose, PersonSearchModel, ProposalConfig};
use crate::boxes::{nms, BBox};
use crate::error::Result;
use crate::numerics::{Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub proposals: ProposalConfig,
    pub nms_iou: f64,
    pub min_score: f64,
    pub max_detections: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            proposals: ProposalConfig::default(),
            nms_iou: 0.5,
            min_score: 0.05,
            max_detections: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    /// Unit-norm identity embedding.
    pub embedding: Vec<f64>,
}

/// Full inference on a `[1, h, w]` image: proposals, region scoring and
/// refinement, NMS, then embeddings of the final boxes. Detections are
/// sorted by descending score.
pub fn detect(model: &PersonSearchModel, image: &Tensor, cfg: &InferenceConfig) -> Result<Vec<Detection>> {
    let mut g = Graph::new();
    let bp = model.params.bind(&mut g, false);
    let img = g.constant(image.clone());
    let f = model.backbone_forward(&mut g, &bp, img)?;
    let rpn = model.rpn_forward(&mut g, &bp, f)?;
    let size = model.spec.image_size as f64;
    let (props, _) = propose(
        &model.anchors(),
        g.value(rpn.cls),
        g.value(rpn.deltas),
        size,
        &cfg.proposals,
    )?;
    if props.is_empty() {
        return Ok(Vec::new());
    }
    let boxes: Vec<BBox> = props.iter().map(|p| p.bbox).collect();
    let (rcn, kept) = model.rcn_forward(&mut g, &bp, f, &boxes)?;
    let probs = g.softmax(rcn.head.cls, 1.0)?;
    let (probs, deltas) = (g.value(probs).clone(), g.value(rcn.head.deltas).clone());
    let mut cand = Vec::new();
    let mut scores = Vec::new();
    for (r, &i) in kept.iter().enumerate() {
        let s = probs.row(r)[1];
        let b = boxes[i].apply_deltas(deltas.row(r)).clip(size, size);
        if s >= cfg.min_score && b.is_valid() {
            cand.push(b);
            scores.push(s);
        }
    }
    let keep = nms(&cand, &scores, cfg.nms_iou, cfg.max_detections);
    if keep.is_empty() {
        return Ok(Vec::new());
    }
    let final_boxes: Vec<BBox> = keep.iter().map(|&k| cand[k]).collect();
    let emb = embed_on_features(model, &mut g, &bp, f, &final_boxes)?;
    Ok(keep
        .iter()
        .zip(emb)
        .map(|(&k, embedding)| Detection {
            bbox: cand[k],
            score: scores[k],
            embedding,
        })
        .collect())
}

/// Embeddings of given boxes (e.g. query boxes) in a `[1, h, w]` image.
pub fn embed_boxes(model: &PersonSearchModel, image: &Tensor, boxes: &[BBox]) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    let bp = model.params.bind(&mut g, false);
    let img = g.constant(image.clone());
    let f = model.backbone_forward(&mut g, &bp, img)?;
    embed_on_features(model, &mut g, &bp, f, boxes)
}

fn embed_on_features(
    model: &PersonSearchModel,
    g: &mut Graph,
    bp: &crate::params::Bound,
    f: crate::numerics::Var,
    boxes: &[BBox],
) -> Result<Vec<Vec<f64>>> {
    let (rcn, kept) = model.rcn_forward(g, bp, f, boxes)?;
    if kept.len() != boxes.len() {
        return Err(crate::Error::invalid("embed_boxes", "degenerate box"));
    }
    let e = model.idnet_forward(g, bp, rcn.hidden)?;
    let e = g.value(e);
    Ok((0..boxes.len()).map(|i| e.row(i).to_vec()).collect())
}
