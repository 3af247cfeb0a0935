use pskd::boxes::BBox;
use pskd::eval::{average_precision, detection_ap_recall, search_map_cmc, GalleryScene, QueryCase};
use proptest::prelude::*;

/// AP as the mean over relevant items of the best precision reached at or
/// below each hit's rank; unretrieved relevant items contribute zero.
fn ap_oracle(hits: &[bool], num_gt: usize) -> f64 {
    let prec: Vec<f64> = (1..=hits.len())
        .map(|k| hits[..k].iter().filter(|&&h| h).count() as f64 / k as f64)
        .collect();
    let mut total = 0.0;
    for (r, &h) in hits.iter().enumerate() {
        if h {
            total += prec[r..].iter().cloned().fold(0.0, f64::max);
        }
    }
    total / num_gt as f64
}

fn boxes_at(n: usize) -> Vec<BBox> {
    (0..n).map(|i| BBox::new(i as f64 * 20.0, 0.0, i as f64 * 20.0 + 10.0, 20.0)).collect()
}

/// One-dimensional embeddings on the unit circle, so cosine similarity is
/// `cos(angle)`; `angles` in `[0, π)` rank in ascending order.
fn emb(angle: f64) -> Vec<f64> {
    vec![angle.cos(), angle.sin()]
}

/// Query against a single gallery scene with one detection per angle;
/// `matches[i]` says whether detection `i` sits on a target box.
fn single_scene(angles: &[f64], matches: &[bool]) -> QueryCase {
    let boxes = boxes_at(angles.len());
    let targets = boxes.iter().zip(matches).filter(|(_, &m)| m).map(|(b, _)| *b).collect();
    QueryCase {
        identity: 0,
        embedding: emb(0.0),
        gallery: vec![GalleryScene {
            boxes,
            embeddings: angles.iter().map(|&a| emb(a)).collect(),
            targets,
        }],
    }
}

/// Search AP by brute force: each detection's rank is the number of
/// detections ahead of it, then hits are read off in rank order.
fn search_oracle(angles: &[f64], matches: &[bool]) -> (f64, bool) {
    let sims: Vec<f64> = angles.iter().map(|a| a.cos()).collect();
    let n = sims.len();
    let mut by_rank = vec![None; n];
    for i in 0..n {
        let ahead = (0..n).filter(|&j| sims[j] > sims[i] || (sims[j] == sims[i] && j < i)).count();
        by_rank[ahead] = Some(matches[i]);
    }
    let hits: Vec<bool> = by_rank.into_iter().map(Option::unwrap).collect();
    let num_gt = matches.iter().filter(|&&m| m).count();
    (ap_oracle(&hits, num_gt), hits.first().copied().unwrap_or(false))
}

#[test]
fn ranked_list_examples() {
    assert!((average_precision(&[true, false, true], 2) - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    assert!((average_precision(&[true, false, true], 2) - 0.8333).abs() < 1e-4);
    assert_eq!(average_precision(&[], 3), 0.0);
    assert_eq!(average_precision(&[true], 0), 0.0);

    let m = search_map_cmc(&[single_scene(&[0.5, 1.0], &[false, true])], 0.5, 1);
    assert!((m.map - 0.5).abs() < 1e-12);
    assert_eq!(m.cmc, 0.0);
}

#[test]
fn every_short_hit_pattern_matches_the_oracle() {
    for len in 0..=5usize {
        for mask in 0..(1u32 << len) {
            let hits: Vec<bool> = (0..len).map(|i| mask >> i & 1 == 1).collect();
            let tp = hits.iter().filter(|&&h| h).count();
            for num_gt in tp.max(1)..=tp + 2 {
                let got = average_precision(&hits, num_gt);
                assert!((got - ap_oracle(&hits, num_gt)).abs() < 1e-9, "{hits:?} / {num_gt}");
            }
        }
    }
}

#[test]
fn every_short_search_ranking_matches_the_oracle() {
    // all orderings of up to five distinct similarities, with every match pattern
    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }
    for n in 1..=5usize {
        for perm in permutations(n) {
            let angles: Vec<f64> = perm.iter().map(|&r| 0.3 * r as f64).collect();
            for mask in 1..(1u32 << n) {
                let matches: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
                let m = search_map_cmc(&[single_scene(&angles, &matches)], 0.5, 1);
                let (ap, top1) = search_oracle(&angles, &matches);
                assert!((m.map - ap).abs() < 1e-9);
                assert_eq!(m.cmc, if top1 { 1.0 } else { 0.0 });
            }
        }
    }
}

#[test]
fn missed_targets_cost_precision_mass() {
    // one target detected and ranked first, a second target never detected
    let mut q = single_scene(&[0.1, 0.9], &[true, false]);
    q.gallery[0].targets.push(BBox::new(200.0, 0.0, 210.0, 20.0));
    let m = search_map_cmc(&[q], 0.5, 1);
    assert!((m.map - 0.5).abs() < 1e-12);
    assert_eq!(m.cmc, 1.0);

    let mut absent = single_scene(&[0.1], &[false]);
    absent.gallery[0].targets.clear();
    let m = search_map_cmc(&[absent], 0.5, 1);
    assert_eq!((m.skipped, m.per_query.len()), (1, 0));
}

#[test]
fn detection_ap_and_recall() {
    let gt = vec![boxes_at(2), vec![]];
    let perfect = vec![gt[0].iter().map(|b| (*b, 0.9)).collect(), vec![]];
    assert_eq!(detection_ap_recall(&perfect, &gt, 0.5), Some((1.0, 1.0)));

    // a duplicate is a false positive, a shifted box misses
    let dets = vec![
        vec![(gt[0][0], 0.9), (gt[0][0], 0.8), (BBox::new(100.0, 50.0, 110.0, 70.0), 0.7)],
        vec![(BBox::new(0.0, 0.0, 5.0, 5.0), 0.95)],
    ];
    let (ap, recall) = detection_ap_recall(&dets, &gt, 0.5).unwrap();
    assert!((ap - ap_oracle(&[false, true, false, false], 2)).abs() < 1e-12);
    assert_eq!(recall, 0.5);
    assert_eq!(detection_ap_recall(&[vec![]], &[vec![]], 0.5), None);
}

proptest! {
    #[test]
    fn search_ap_is_invariant_to_gallery_order(
        angles in prop::collection::vec(0.0f64..3.0, 1..6),
        mask in 1u32..32,
        rot in 0usize..5,
    ) {
        let n = angles.len();
        let matches: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
        prop_assume!(matches.iter().any(|&m| m));
        let mut dedup = angles.clone();
        dedup.sort_by(f64::total_cmp);
        dedup.dedup();
        prop_assume!(dedup.len() == n);
        let a = search_map_cmc(&[single_scene(&angles, &matches)], 0.5, 1);
        let (mut ra, mut rm) = (angles.clone(), matches.clone());
        ra.rotate_left(rot % n);
        rm.rotate_left(rot % n);
        let b = search_map_cmc(&[single_scene(&ra, &rm)], 0.5, 1);
        prop_assert!((a.map - b.map).abs() < 1e-12);
        prop_assert_eq!(a.cmc, b.cmc);
    }

    #[test]
    fn promoting_a_true_match_never_lowers_ap(
        angles in prop::collection::vec(0.0f64..3.0, 1..6),
        mask in 1u32..32,
        pick in 0usize..5,
        shrink in 0.0f64..1.0,
    ) {
        let n = angles.len();
        let matches: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
        let hits: Vec<usize> = (0..n).filter(|&i| matches[i]).collect();
        prop_assume!(!hits.is_empty());
        let i = hits[pick % hits.len()];
        let before = search_map_cmc(&[single_scene(&angles, &matches)], 0.5, 1);
        let mut better = angles.clone();
        better[i] *= shrink;
        let after = search_map_cmc(&[single_scene(&better, &matches)], 0.5, 1);
        prop_assert!(after.map >= before.map - 1e-12);
        prop_assert!(after.cmc >= before.cmc);
    }

    #[test]
    fn ap_matches_oracle_on_random_lists(hits in prop::collection::vec(any::<bool>(), 0..40), extra in 0usize..4) {
        let num_gt = hits.iter().filter(|&&h| h).count() + extra;
        prop_assume!(num_gt > 0);
        prop_assert!((average_precision(&hits, num_gt) - ap_oracle(&hits, num_gt)).abs() < 1e-9);
    }
}
