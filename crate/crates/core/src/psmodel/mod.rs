//! Toy two-stage person-search network.
//!
//! ```text
//! image ─ backbone ─ F ─┬─ proposal head (per-anchor logits + deltas)
//!                       └─ crop-resize(proposals) ─ shared fc ─┬─ region logits + deltas
//!                                                             └─ id head ─ L2-normalised embedding
//! ```
//!
//! The region classifier and the id head share the fc layer and the
//! backbone, which is where the detection and re-identification objectives
//! compete.

mod anchors;
mod infer;
mod targets;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use anchors::{anchor_grid, propose, Proposal, ProposalConfig};
pub use infer::{detect, embed_boxes, Detection, InferenceConfig};
pub use targets::{
    assign_targets, classification_loss, detector_gt_losses, regression_loss, DetectorLosses, Targets, NEGATIVE_IOU,
    POSITIVE_IOU,
};

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{Bound, ParamStore};
use crate::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneSize {
    Large,
    Small,
}

impl std::fmt::Display for BackboneSize {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BackboneSize::Large => "large",
            BackboneSize::Small => "small",
        })
    }
}

/// Architecture of one model size.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneSpec {
    pub size: BackboneSize,
    /// Output channels of each 3×3 conv stage.
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub rpn_hidden: usize,
    pub rcn_hidden: usize,
    pub embedding_dim: usize,
    pub pooled_size: usize,
    pub image_size: usize,
    /// Square-root anchor area in pixels.
    pub anchor_size: f64,
    /// Anchor height / width ratios.
    pub aspect_ratios: [f64; 2],
}

impl BackboneSpec {
    pub fn new(size: BackboneSize, embedding_dim: usize, image_size: usize) -> Self {
        let (channels, strides, rpn_hidden, rcn_hidden) = match size {
            BackboneSize::Large => (vec![8, 16, 24, 24], vec![2, 2, 2, 1], 16, 16),
            BackboneSize::Small => (vec![6, 12, 16], vec![2, 2, 2], 12, 12),
        };
        BackboneSpec {
            size,
            channels,
            strides,
            rpn_hidden,
            rcn_hidden,
            embedding_dim,
            pooled_size: 6,
            image_size,
            anchor_size: 27.0,
            aspect_ratios: [1.6, 2.4],
        }
    }

    pub fn feature_stride(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn feature_size(&self) -> usize {
        let mut s = self.image_size;
        for &st in &self.strides {
            s = (s + 2 - 3) / st + 1;
        }
        s
    }

    pub fn feature_channels(&self) -> usize {
        *self.channels.last().expect("at least one stage")
    }

    pub fn num_anchors(&self) -> usize {
        self.aspect_ratios.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PersonSearchModel {
    pub spec: BackboneSpec,
    pub params: ParamStore,
}

/// Outputs of a classification + box-regression head.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    /// `[n, 2]` background/person logits.
    pub cls: Var,
    /// `[n, 4]` box deltas.
    pub deltas: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct RegionOutputs {
    pub head: HeadOutputs,
    /// `[n, hidden]` shared region features.
    pub hidden: Var,
}

fn kaiming(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    gaussian(rng, shape, (2.0 / fan_in as f64).sqrt())
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

impl PersonSearchModel {
    pub fn new(spec: BackboneSpec, seed: u64) -> Self {
        let mut rng = stream(seed, "model/init", 0);
        let mut p = ParamStore::new();
        let mut cin = 1;
        for (i, &c) in spec.channels.iter().enumerate() {
            p.insert(format!("backbone.conv{i}.weight"), kaiming(&mut rng, &[c, cin, 3, 3], cin * 9));
            p.insert(format!("backbone.conv{i}.bias"), Tensor::zeros(vec![c]));
            cin = c;
        }
        let a = spec.num_anchors();
        let (fc, rh) = (spec.feature_channels(), spec.rpn_hidden);
        p.insert("rpn.conv.weight", kaiming(&mut rng, &[rh, fc, 3, 3], fc * 9));
        p.insert("rpn.conv.bias", Tensor::zeros(vec![rh]));
        p.insert("rpn.cls.weight", gaussian(&mut rng, &[2 * a, rh, 1, 1], 0.01));
        p.insert("rpn.cls.bias", Tensor::zeros(vec![2 * a]));
        p.insert("rpn.bbox.weight", gaussian(&mut rng, &[4 * a, rh, 1, 1], 0.01));
        p.insert("rpn.bbox.bias", Tensor::zeros(vec![4 * a]));
        let pooled = fc * spec.pooled_size * spec.pooled_size;
        let h = spec.rcn_hidden;
        p.insert("rcn.fc.weight", kaiming(&mut rng, &[pooled, h], pooled));
        p.insert("rcn.fc.bias", Tensor::zeros(vec![h]));
        p.insert("rcn.cls.weight", gaussian(&mut rng, &[h, 2], 0.01));
        p.insert("rcn.cls.bias", Tensor::zeros(vec![2]));
        p.insert("rcn.bbox.weight", gaussian(&mut rng, &[h, 4], 0.001));
        p.insert("rcn.bbox.bias", Tensor::zeros(vec![4]));
        p.insert("idnet.weight", gaussian(&mut rng, &[h, spec.embedding_dim], (1.0 / h as f64).sqrt()));
        p.insert("idnet.bias", Tensor::zeros(vec![spec.embedding_dim]));
        PersonSearchModel { spec, params: p }
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Base feature map `F` of a `[1, h, w]` image.
    pub fn backbone_forward(&self, g: &mut Graph, bp: &Bound, image: Var) -> Result<Var> {
        let s = g.value(image).shape();
        if s != [1, self.spec.image_size, self.spec.image_size] {
            return Err(Error::ShapeMismatch {
                op: "backbone",
                lhs: vec![1, self.spec.image_size, self.spec.image_size],
                rhs: s.to_vec(),
            });
        }
        let mut x = image;
        for (i, &stride) in self.spec.strides.iter().enumerate() {
            let w = bp.get(&format!("backbone.conv{i}.weight"));
            let b = bp.get(&format!("backbone.conv{i}.bias"));
            let y = g.conv2d(x, w, b, stride, 1)?;
            x = g.relu(y);
        }
        Ok(x)
    }

    /// Per-anchor logits `[n_anchors, 2]` and deltas `[n_anchors, 4]`, with
    /// anchors ordered by `(row, col, aspect)`.
    pub fn rpn_forward(&self, g: &mut Graph, bp: &Bound, features: Var) -> Result<HeadOutputs> {
        let h = g.conv2d(features, bp.get("rpn.conv.weight"), bp.get("rpn.conv.bias"), 1, 1)?;
        let h = g.relu(h);
        let cls = g.conv2d(h, bp.get("rpn.cls.weight"), bp.get("rpn.cls.bias"), 1, 0)?;
        let deltas = g.conv2d(h, bp.get("rpn.bbox.weight"), bp.get("rpn.bbox.bias"), 1, 0)?;
        let a = self.spec.num_anchors();
        Ok(HeadOutputs {
            cls: channels_to_rows(g, cls, a, 2)?,
            deltas: channels_to_rows(g, deltas, a, 4)?,
        })
    }

    /// Region classification and shared region features for `boxes` (image
    /// pixels). Boxes with zero area after clipping are dropped; the second
    /// return value lists the kept input indices.
    pub fn rcn_forward(
        &self,
        g: &mut Graph,
        bp: &Bound,
        features: Var,
        boxes: &[BBox],
    ) -> Result<(RegionOutputs, Vec<usize>)> {
        let size = self.spec.image_size as f64;
        let stride = self.spec.feature_stride() as f64;
        let mut kept = Vec::with_capacity(boxes.len());
        let mut regions = Vec::with_capacity(boxes.len());
        for (i, b) in boxes.iter().enumerate() {
            let c = b.clip(size, size);
            if c.is_valid() {
                kept.push(i);
                regions.push([c.x1 / stride, c.y1 / stride, c.x2 / stride, c.y2 / stride]);
            }
        }
        if regions.is_empty() {
            return Err(Error::invalid("rcn_forward", "no non-degenerate regions"));
        }
        if kept.len() < boxes.len() {
            log::debug!("rcn_forward dropped {} degenerate regions", boxes.len() - kept.len());
        }
        let pooled = g.crop_resize(features, &regions, self.spec.pooled_size)?;
        let hidden = g.linear(pooled, bp.get("rcn.fc.weight"), bp.get("rcn.fc.bias"))?;
        let hidden = g.relu(hidden);
        let cls = g.linear(hidden, bp.get("rcn.cls.weight"), bp.get("rcn.cls.bias"))?;
        let deltas = g.linear(hidden, bp.get("rcn.bbox.weight"), bp.get("rcn.bbox.bias"))?;
        Ok((
            RegionOutputs {
                head: HeadOutputs { cls, deltas },
                hidden,
            },
            kept,
        ))
    }

    /// Unit-norm identity embeddings `[n, D]` from shared region features.
    pub fn idnet_forward(&self, g: &mut Graph, bp: &Bound, hidden: Var) -> Result<Var> {
        let e = g.linear(hidden, bp.get("idnet.weight"), bp.get("idnet.bias"))?;
        Ok(g.l2_normalize(e))
    }

    /// Anchors for this architecture, in `rpn_forward` row order.
    pub fn anchors(&self) -> Vec<BBox> {
        anchor_grid(&self.spec)
    }
}

/// Rearranges a `[a * k, h, w]` conv output into `[h * w * a, k]` rows.
fn channels_to_rows(g: &mut Graph, x: Var, a: usize, k: usize) -> Result<Var> {
    let s = g.value(x).shape().to_vec();
    let (h, w) = (s[1], s[2]);
    let mut index = Vec::with_capacity(h * w * a * k);
    for y in 0..h {
        for xx in 0..w {
            for ai in 0..a {
                for j in 0..k {
                    index.push(((ai * k + j) * h + y) * w + xx);
                }
            }
        }
    }
    g.gather(x, index, vec![h * w * a, k])
}

/// Random subset of `n` items from `0..len`, returned in ascending order.
pub(crate) fn sample_indices(rng: &mut ChaCha8Rng, len: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    for i in 0..n.min(len) {
        let j = rng.random_range(i..len);
        idx.swap(i, j);
    }
    idx.truncate(n.min(len));
    idx.sort_unstable();
    idx
}
