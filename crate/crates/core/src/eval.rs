//! Detection AP/recall and person-search mAP/CMC.
//!
//! Both APs integrate the precision envelope over all recall points. Search
//! AP is normalised by the number of ground-truth instances of the query
//! identity in its gallery, so missed detections cost precision mass.

use std::fmt::Write as _;

use crate::boxes::BBox;

/// All-points AP of a ranked hit list against `num_gt` relevant items.
pub fn average_precision(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::new();
    let mut tp = 0usize;
    for (k, &h) in hits.iter().enumerate() {
        if h {
            tp += 1;
            precision.push(tp as f64 / (k + 1) as f64);
        }
    }
    // envelope: each recall level takes the best precision at or beyond it
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    precision.iter().fold(0.0, |a, p| a + p) / num_gt as f64
}

/// Greedy matching of ranked boxes to ground truth: each box takes the
/// highest-IoU still-unmatched ground truth at or above `iou_thresh`.
fn match_ranked<'a>(ranked: impl Iterator<Item = (&'a BBox, usize)>, gt: &[Vec<BBox>], iou_thresh: f64) -> Vec<bool> {
    let mut used: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
    ranked
        .map(|(b, scene)| {
            let mut best: Option<(f64, usize)> = None;
            for (j, t) in gt[scene].iter().enumerate() {
                let iou = b.iou(t);
                if !used[scene][j] && iou >= iou_thresh && best.is_none_or(|(bi, _)| iou > bi) {
                    best = Some((iou, j));
                }
            }
            match best {
                Some((_, j)) => {
                    used[scene][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Detection AP and recall over a set of scenes. `detections[s]` holds
/// `(box, score)` pairs for scene `s`, `gt[s]` its ground truth. Returns
/// `None` when there is no ground truth at all.
pub fn detection_ap_recall(detections: &[Vec<(BBox, f64)>], gt: &[Vec<BBox>], iou_thresh: f64) -> Option<(f64, f64)> {
    assert_eq!(detections.len(), gt.len(), "one detection list per scene");
    let num_gt: usize = gt.iter().map(Vec::len).sum();
    if num_gt == 0 {
        return None;
    }
    let mut all: Vec<(f64, usize, usize)> = detections
        .iter()
        .enumerate()
        .flat_map(|(s, d)| d.iter().enumerate().map(move |(i, &(_, score))| (score, s, i)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let hits = match_ranked(all.iter().map(|&(_, s, i)| (&detections[s][i].0, s)), gt, iou_thresh);
    let tp = hits.iter().filter(|&&h| h).count();
    Some((average_precision(&hits, num_gt), tp as f64 / num_gt as f64))
}

/// One gallery scene seen by a query.
#[derive(Clone, Debug, PartialEq)]
pub struct GalleryScene {
    pub boxes: Vec<BBox>,
    pub embeddings: Vec<Vec<f64>>,
    /// Ground-truth boxes of the query identity in this scene.
    pub targets: Vec<BBox>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryCase {
    pub identity: usize,
    pub embedding: Vec<f64>,
    pub gallery: Vec<GalleryScene>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryResult {
    pub identity: usize,
    pub ap: f64,
    pub top_k_hit: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchMetrics {
    pub map: f64,
    pub cmc: f64,
    pub per_query: Vec<QueryResult>,
    /// Queries whose identity never appears in their gallery.
    pub skipped: usize,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Ranks each query's gallery detections by cosine similarity and scores
/// the ranking. Ties keep gallery order.
pub fn search_map_cmc(queries: &[QueryCase], iou_thresh: f64, k: usize) -> SearchMetrics {
    let mut per_query = Vec::new();
    let mut skipped = 0;
    for q in queries {
        let num_gt: usize = q.gallery.iter().map(|s| s.targets.len()).sum();
        if num_gt == 0 {
            skipped += 1;
            continue;
        }
        let mut ranked: Vec<(f64, usize, usize)> = q
            .gallery
            .iter()
            .enumerate()
            .flat_map(|(s, sc)| sc.embeddings.iter().enumerate().map(move |(i, e)| (cosine(&q.embedding, e), s, i)))
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
        let targets: Vec<Vec<BBox>> = q.gallery.iter().map(|s| s.targets.clone()).collect();
        let hits = match_ranked(ranked.iter().map(|&(_, s, i)| (&q.gallery[s].boxes[i], s)), &targets, iou_thresh);
        per_query.push(QueryResult {
            identity: q.identity,
            ap: average_precision(&hits, num_gt),
            top_k_hit: hits.iter().take(k).any(|&h| h),
        });
    }
    if skipped > 0 {
        log::warn!("{skipped} queries skipped: identity absent from gallery");
    }
    let n = per_query.len().max(1) as f64;
    SearchMetrics {
        map: per_query.iter().map(|r| r.ap).sum::<f64>() / n,
        cmc: per_query.iter().filter(|r| r.top_k_hit).count() as f64 / n,
        per_query,
        skipped,
    }
}

/// Evaluation results of one model.
///
/// CSV schema (`to_csv`): a header line `metric,value` followed by
/// `det_map`, `det_recall`, `search_map`, `cmc_top1`, `queries` and
/// `skipped_queries` rows, then a blank line and the per-query table
/// `query,identity,ap,top1`. Reals use six decimals.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub det_map: f64,
    pub det_recall: f64,
    pub search_map: f64,
    pub cmc_top1: f64,
    pub per_query: Vec<QueryResult>,
    pub skipped_queries: usize,
}

impl MetricsReport {
    pub fn new(det: Option<(f64, f64)>, search: SearchMetrics) -> Self {
        let (det_map, det_recall) = det.unwrap_or((0.0, 0.0));
        MetricsReport {
            det_map,
            det_recall,
            search_map: search.map,
            cmc_top1: search.cmc,
            per_query: search.per_query,
            skipped_queries: search.skipped,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in [
            ("det_map", self.det_map),
            ("det_recall", self.det_recall),
            ("search_map", self.search_map),
            ("cmc_top1", self.cmc_top1),
        ] {
            let _ = writeln!(s, "{k},{v:.6}");
        }
        let _ = writeln!(s, "queries,{}", self.per_query.len());
        let _ = writeln!(s, "skipped_queries,{}", self.skipped_queries);
        s.push_str("\nquery,identity,ap,top1\n");
        for (i, q) in self.per_query.iter().enumerate() {
            let _ = writeln!(s, "{i},{},{:.6},{}", q.identity, q.ap, u8::from(q.top_k_hit));
        }
        s
    }
}
