use rayon::prelude::*;

use super::EvalConfig;
use crate::error::Result;
use crate::eval::{detection_ap_recall, search_map_cmc, GalleryScene, MetricsReport, QueryCase};
use crate::psmodel::{detect, embed_boxes, Detection, InferenceConfig, PersonSearchModel};
use crate::synthscene::DatasetSplit;

/// Detection metrics on the gallery scenes and search metrics on the
/// queries.
pub fn evaluate(
    model: &PersonSearchModel,
    data: &DatasetSplit,
    inference: &InferenceConfig,
    eval: &EvalConfig,
) -> Result<MetricsReport> {
    let detections: Vec<Vec<Detection>> = data
        .gallery
        .par_iter()
        .map(|s| detect(model, &s.tensor(), inference))
        .collect::<Result<_>>()?;
    let det = detection_ap_recall(
        &detections
            .iter()
            .map(|d| d.iter().map(|d| (d.bbox, d.score)).collect())
            .collect::<Vec<_>>(),
        &data.gallery.iter().map(|s| s.gt_boxes()).collect::<Vec<_>>(),
        eval.iou,
    );
    let queries: Vec<QueryCase> = data
        .queries
        .par_iter()
        .map(|q| -> Result<QueryCase> {
            let embedding = embed_boxes(model, &q.scene.tensor(), &[q.bbox])?.remove(0);
            let gallery = q
                .gallery
                .iter()
                .map(|&gi| {
                    let kept: Vec<&Detection> =
                        detections[gi].iter().filter(|d| d.score >= eval.search_min_score).collect();
                    GalleryScene {
                        boxes: kept.iter().map(|d| d.bbox).collect(),
                        embeddings: kept.iter().map(|d| d.embedding.clone()).collect(),
                        targets: data.gallery[gi]
                            .persons
                            .iter()
                            .filter(|p| p.identity == q.identity)
                            .map(|p| p.bbox)
                            .collect(),
                    }
                })
                .collect();
            Ok(QueryCase {
                identity: q.identity,
                embedding,
                gallery,
            })
        })
        .collect::<Result<_>>()?;
    Ok(MetricsReport::new(det, search_map_cmc(&queries, eval.iou, eval.top_k)))
}
