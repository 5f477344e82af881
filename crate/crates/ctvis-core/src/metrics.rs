//! Evaluation: tube IoU, track-level AP/AR, ID switches, association
//! accuracy, and embedding-discriminability margins.

use crate::assignment::{hungarian, CostMatrix};
use crate::embedding::{cosine_similarity, Embedding};
use crate::mask::BinaryMask;
use crate::matrix::Matrix;
use crate::memory::TrackId;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// COCO-style IoU thresholds 0.50..0.95 step 0.05.
pub fn default_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("raster mismatch between track tubes")]
    RasterMismatch,
    #[error("need at least two identities, got {0}")]
    NotEnoughIdentities(usize),
}

/// A spatio-temporal mask track. Frames without an entry count as empty.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackTube {
    pub raster: (usize, usize),
    pub masks: BTreeMap<u64, BinaryMask>,
}

impl TrackTube {
    pub fn new(width: usize, height: usize) -> Self {
        Self { raster: (width, height), masks: BTreeMap::new() }
    }

    pub fn insert(&mut self, frame: u64, mask: BinaryMask) {
        debug_assert_eq!((mask.width(), mask.height()), self.raster);
        self.masks.insert(frame, mask);
    }
}

/// Tube IoU: `Σ_t |pred_t ∩ gt_t| / Σ_t |pred_t ∪ gt_t|` with `0/0 = 0`.
pub fn tube_iou(pred: &TrackTube, gt: &TrackTube) -> Result<f64, MetricsError> {
    if pred.raster != gt.raster {
        return Err(MetricsError::RasterMismatch);
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (frame, mask) in &pred.masks {
        match gt.masks.get(frame) {
            Some(gt_mask) => {
                inter += mask
                    .intersection_area(gt_mask)
                    .map_err(|_| MetricsError::RasterMismatch)?;
                union += mask
                    .union_area(gt_mask)
                    .map_err(|_| MetricsError::RasterMismatch)?;
            }
            None => union += mask.area(),
        }
    }
    for (frame, gt_mask) in &gt.masks {
        if !pred.masks.contains_key(frame) {
            union += gt_mask.area();
        }
    }
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

/// One scored track prediction, pooled across videos by `video` index.
#[derive(Debug, Clone)]
pub struct ScoredTrack {
    pub video: usize,
    pub class_label: usize,
    pub score: f64,
    pub tube: TrackTube,
}

#[derive(Debug, Clone)]
pub struct GtTrack {
    pub video: usize,
    pub class_label: usize,
    pub tube: TrackTube,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApSummary {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ar1: f64,
    pub ar10: f64,
}

/// Greedy matching of one class at one threshold: predictions in descending
/// score order take the highest-IoU unmatched GT of the same video. Returns
/// per-prediction TP flags in that order, plus the number of GT tracks.
fn match_class(
    preds: &[&ScoredTrack],
    gts: &[&GtTrack],
    threshold: f64,
    max_per_video: Option<usize>,
) -> (Vec<bool>, usize) {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .score
            .partial_cmp(&preds[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    if let Some(k) = max_per_video {
        let mut taken: BTreeMap<usize, usize> = BTreeMap::new();
        order.retain(|&i| {
            let n = taken.entry(preds[i].video).or_insert(0);
            *n += 1;
            *n <= k
        });
    }

    let mut gt_used = vec![false; gts.len()];
    let mut tp_flags = Vec::with_capacity(order.len());
    for &i in &order {
        let pred = preds[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, gt) in gts.iter().enumerate() {
            if gt_used[j] || gt.video != pred.video {
                continue;
            }
            let iou = tube_iou(&pred.tube, &gt.tube).unwrap_or(0.0);
            if iou >= threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        match best {
            Some((j, _)) => {
                gt_used[j] = true;
                tp_flags.push(true);
            }
            None => tp_flags.push(false),
        }
    }
    (tp_flags, gts.len())
}

/// 101-point interpolated average precision from ordered TP flags.
fn interpolated_ap(tp_flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(tp_flags.len());
    for (i, &is_tp) in tp_flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        let recall = tp as f64 / num_gt as f64;
        let precision = tp as f64 / (i + 1) as f64;
        points.push((recall, precision));
    }
    let mut ap = 0.0;
    for step in 0..=100 {
        let r = step as f64 / 100.0;
        let p = points
            .iter()
            .filter(|(recall, _)| *recall >= r - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        ap += p;
    }
    ap / 101.0
}

/// VIS-style AP/AR over spatio-temporal tracks, averaged over classes that
/// have at least one GT track and over the IoU thresholds.
pub fn vis_ap(preds: &[ScoredTrack], gts: &[GtTrack], thresholds: &[f64]) -> ApSummary {
    let mut classes: Vec<usize> = gts.iter().map(|g| g.class_label).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return ApSummary { ap: 0.0, ap50: 0.0, ap75: 0.0, ar1: 0.0, ar10: 0.0 };
    }

    let mut ap_sum = 0.0;
    let mut ap50_sum = 0.0;
    let mut ap75_sum = 0.0;
    let mut ar1_sum = 0.0;
    let mut ar10_sum = 0.0;
    for &class in &classes {
        let class_preds: Vec<&ScoredTrack> =
            preds.iter().filter(|p| p.class_label == class).collect();
        let class_gts: Vec<&GtTrack> = gts.iter().filter(|g| g.class_label == class).collect();

        let mut class_ap = 0.0;
        for &t in thresholds {
            let (flags, num_gt) = match_class(&class_preds, &class_gts, t, None);
            let ap = interpolated_ap(&flags, num_gt);
            class_ap += ap;
            if (t - 0.5).abs() < 1e-9 {
                ap50_sum += ap;
            }
            if (t - 0.75).abs() < 1e-9 {
                ap75_sum += ap;
            }
            for (limit, sum) in [(1usize, &mut ar1_sum), (10, &mut ar10_sum)] {
                let (flags, num_gt) = match_class(&class_preds, &class_gts, t, Some(limit));
                let tp = flags.iter().filter(|&&f| f).count();
                *sum += if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 };
            }
        }
        ap_sum += class_ap / thresholds.len() as f64;
    }

    let nc = classes.len() as f64;
    let nt = thresholds.len() as f64;
    ApSummary {
        ap: ap_sum / nc,
        ap50: ap50_sum / nc,
        ap75: ap75_sum / nc,
        ar1: ar1_sum / (nc * nt),
        ar10: ar10_sum / (nc * nt),
    }
}

/// One matched detection in an association trace, tagged with the GT identity
/// it actually came from (None for clutter).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub frame: u64,
    pub track: TrackId,
    pub gt: Option<u64>,
}

/// MOT-style ID switches plus association accuracy under majority-vote
/// track↔GT correspondence. An empty trace scores `(0, 1.0)` by convention.
///
/// The correspondence is the vote-maximizing bijection between predicted
/// tracks and GT identities (each side used at most once), so identity
/// fragmentation and track impurity both cost accuracy. A detection counts
/// as correct when its (track, gt) pair is part of the correspondence.
pub fn tracking_quality(events: &[TraceEvent]) -> (usize, f64) {
    let labelled: Vec<&TraceEvent> = events.iter().filter(|e| e.gt.is_some()).collect();
    if labelled.is_empty() {
        return (0, 1.0);
    }

    let mut votes: BTreeMap<(TrackId, u64), usize> = BTreeMap::new();
    for e in &labelled {
        *votes.entry((e.track, e.gt.unwrap())).or_insert(0) += 1;
    }
    let tracks: Vec<TrackId> = {
        let mut t: Vec<TrackId> = votes.keys().map(|(track, _)| *track).collect();
        t.sort_unstable();
        t.dedup();
        t
    };
    let gts: Vec<u64> = {
        let mut g: Vec<u64> = votes.keys().map(|(_, gt)| *gt).collect();
        g.sort_unstable();
        g.dedup();
        g
    };
    // Max-agreement bijection via min-cost assignment on a padded square
    // matrix: entry = (max_vote − votes), padding rows/cols carry zero votes.
    let n = tracks.len().max(gts.len());
    let max_vote = *votes.values().max().unwrap() as f64;
    let cost = Matrix::from_fn(n, n, |r, c| {
        let v = if r < tracks.len() && c < gts.len() {
            votes.get(&(tracks[r], gts[c])).copied().unwrap_or(0)
        } else {
            0
        };
        max_vote - v as f64
    });
    let pairs = hungarian(&CostMatrix::new(cost).expect("finite vote costs"))
        .expect("square matrix is feasible");
    let agreed: usize = pairs
        .iter()
        .filter(|(r, c)| *r < tracks.len() && *c < gts.len())
        .map(|(r, c)| votes.get(&(tracks[*r], gts[*c])).copied().unwrap_or(0))
        .sum();
    let accuracy = agreed as f64 / labelled.len() as f64;

    // Per GT identity, count frames where the assigned track id changed.
    let mut per_gt: BTreeMap<u64, Vec<(u64, TrackId)>> = BTreeMap::new();
    for e in &labelled {
        per_gt.entry(e.gt.unwrap()).or_default().push((e.frame, e.track));
    }
    let mut switches = 0usize;
    for (_, mut seq) in per_gt {
        seq.sort_by_key(|(frame, _)| *frame);
        for pair in seq.windows(2) {
            if pair[0].1 != pair[1].1 {
                switches += 1;
            }
        }
    }
    (switches, accuracy)
}

/// Mean cosine similarity within identities vs across identities.
///
/// `groups` maps each identity to its embeddings (collected over frames).
pub fn embedding_margins(
    groups: &BTreeMap<u64, Vec<Embedding>>,
) -> Result<(f64, f64), MetricsError> {
    if groups.len() < 2 {
        return Err(MetricsError::NotEnoughIdentities(groups.len()));
    }
    let mut intra_sum = 0.0;
    let mut intra_n = 0usize;
    for embs in groups.values() {
        for i in 0..embs.len() {
            for j in (i + 1)..embs.len() {
                if let Ok(c) = cosine_similarity(&embs[i], &embs[j]) {
                    intra_sum += c;
                    intra_n += 1;
                }
            }
        }
    }
    let ids: Vec<&u64> = groups.keys().collect();
    let mut inter_sum = 0.0;
    let mut inter_n = 0usize;
    for i in 0..ids.len() {
        for j in (i + 1)..ids.len() {
            for a in &groups[ids[i]] {
                for b in &groups[ids[j]] {
                    if let Ok(c) = cosine_similarity(a, b) {
                        inter_sum += c;
                        inter_n += 1;
                    }
                }
            }
        }
    }
    let intra = if intra_n == 0 { 1.0 } else { intra_sum / intra_n as f64 };
    let inter = if inter_n == 0 { 0.0 } else { inter_sum / inter_n as f64 };
    Ok((intra, inter))
}

/// Full evaluation summary for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ar1: f64,
    pub ar10: f64,
    pub id_switches: usize,
    pub assoc_accuracy: f64,
    pub intra_margin: f64,
    pub inter_margin: f64,
}

impl EvalReport {
    pub fn from_parts(
        ap: ApSummary,
        id_switches: usize,
        assoc_accuracy: f64,
        intra_margin: f64,
        inter_margin: f64,
    ) -> Self {
        Self {
            ap: ap.ap,
            ap50: ap.ap50,
            ap75: ap.ap75,
            ar1: ap.ar1,
            ar10: ap.ar10,
            id_switches,
            assoc_accuracy,
            intra_margin,
            inter_margin,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn tube(frames: &[(u64, BinaryMask)]) -> TrackTube {
        let raster = frames
            .first()
            .map(|(_, m)| (m.width(), m.height()))
            .unwrap_or((8, 8));
        let mut t = TrackTube::new(raster.0, raster.1);
        for (f, m) in frames {
            t.insert(*f, m.clone());
        }
        t
    }

    #[test]
    fn tube_iou_identical_is_one() {
        let m = BinaryMask::rect(8, 8, 1, 1, 4, 4);
        let t = tube(&[(0, m.clone()), (1, m)]);
        assert_eq!(tube_iou(&t, &t).unwrap(), 1.0);
    }

    #[test]
    fn tube_iou_disjoint_is_zero() {
        let a = tube(&[(0, BinaryMask::rect(8, 8, 0, 0, 2, 2))]);
        let b = tube(&[(0, BinaryMask::rect(8, 8, 4, 4, 2, 2))]);
        assert_eq!(tube_iou(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn tube_iou_half_overlap_is_one_third() {
        // Per frame: |∩| = A/2, |∪| = 3A/2 → 1/3 exactly.
        let mut a = TrackTube::new(16, 8);
        let mut b = TrackTube::new(16, 8);
        for f in 0..5u64 {
            a.insert(f, BinaryMask::rect(16, 8, 0, 0, 8, 4));
            b.insert(f, BinaryMask::rect(16, 8, 4, 0, 8, 4));
        }
        assert_eq!(tube_iou(&a, &b).unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn tube_iou_counts_absent_frames_as_empty() {
        let m = BinaryMask::rect(8, 8, 0, 0, 4, 4);
        let a = tube(&[(0, m.clone()), (1, m.clone())]);
        let b = tube(&[(0, m)]);
        // Frame 1: pred has 16 px, gt empty → union only.
        assert_eq!(tube_iou(&a, &b).unwrap(), 0.5);
    }

    #[test]
    fn tube_iou_raster_mismatch() {
        let a = TrackTube::new(8, 8);
        let b = TrackTube::new(8, 9);
        assert_eq!(tube_iou(&a, &b), Err(MetricsError::RasterMismatch));
    }

    fn perfect_fixture() -> (Vec<ScoredTrack>, Vec<GtTrack>) {
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        for (i, class) in [0usize, 1, 1].iter().enumerate() {
            let mask = BinaryMask::rect(16, 16, 2 * i as i64, 0, 4, 4);
            let t = tube(&[(0, mask.clone()), (1, mask)]);
            preds.push(ScoredTrack {
                video: 0,
                class_label: *class,
                score: 0.9 - 0.1 * i as f64,
                tube: t.clone(),
            });
            gts.push(GtTrack { video: 0, class_label: *class, tube: t });
        }
        (preds, gts)
    }

    #[test]
    fn ap_perfect_predictions() {
        let (preds, gts) = perfect_fixture();
        let s = vis_ap(&preds, &gts, &default_iou_thresholds());
        assert!((s.ap - 1.0).abs() < 1e-9, "{s:?}");
        assert!((s.ap50 - 1.0).abs() < 1e-9);
        // AR1 caps at one prediction per video: class 1 has two GT tracks.
        assert!(s.ar1 < 1.0);
        assert!((s.ar10 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ap_no_predictions_is_zero() {
        let (_, gts) = perfect_fixture();
        let s = vis_ap(&[], &gts, &default_iou_thresholds());
        assert_eq!(s.ap, 0.0);
    }

    #[test]
    fn ap_hand_computed_misclassification_fixture() {
        // Three GT tracks of class 0; predictions: two perfect (scores 0.9,
        // 0.8), one misclassified as class 1 (score 0.7). Class 0 PR points:
        // (1/3, 1), (2/3, 1) → AP_0 = (34 + 33)/101 interpolation over
        // recall grid 0..=1: max precision 1.0 for r ≤ 2/3 (67 points of the
        // 101 grid: r = 0.00..0.66), 0 beyond → AP_0 = 67/101.
        // Class 1 has no GT → skipped. AP = 67/101.
        let mask = BinaryMask::rect(16, 16, 0, 0, 4, 4);
        let t = tube(&[(0, mask)]);
        let gts: Vec<GtTrack> = (0..3)
            .map(|i| GtTrack {
                video: i,
                class_label: 0,
                tube: t.clone(),
            })
            .collect();
        let preds = vec![
            ScoredTrack { video: 0, class_label: 0, score: 0.9, tube: t.clone() },
            ScoredTrack { video: 1, class_label: 0, score: 0.8, tube: t.clone() },
            ScoredTrack { video: 2, class_label: 1, score: 0.7, tube: t.clone() },
        ];
        let s = vis_ap(&preds, &gts, &default_iou_thresholds());
        let want = 67.0 / 101.0;
        assert!((s.ap - want).abs() < 1e-9, "ap {} want {want}", s.ap);
        assert!((s.ap50 - want).abs() < 1e-9);
    }

    #[test]
    fn ap_removing_false_positive_never_decreases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let mask = BinaryMask::rect(16, 16, 0, 0, 6, 6);
            let t = tube(&[(0, mask)]);
            let gts = vec![GtTrack { video: 0, class_label: 0, tube: t.clone() }];
            let mut preds = vec![ScoredTrack {
                video: 0,
                class_label: 0,
                score: rng.random_range(0.1..1.0),
                tube: t.clone(),
            }];
            // A false positive with an empty tube.
            preds.push(ScoredTrack {
                video: 0,
                class_label: 0,
                score: rng.random_range(0.1..1.0),
                tube: TrackTube::new(16, 16),
            });
            let with_fp = vis_ap(&preds, &gts, &default_iou_thresholds());
            preds.pop();
            let without_fp = vis_ap(&preds, &gts, &default_iou_thresholds());
            assert!(without_fp.ap >= with_fp.ap - 1e-12);
        }
    }

    fn ev(frame: u64, track: u64, gt: u64) -> TraceEvent {
        TraceEvent { frame, track: TrackId(track), gt: Some(gt) }
    }

    #[test]
    fn tracking_perfect() {
        let events = vec![ev(0, 10, 1), ev(0, 11, 2), ev(1, 10, 1), ev(1, 11, 2)];
        assert_eq!(tracking_quality(&events), (0, 1.0));
    }

    #[test]
    fn tracking_empty_video_convention() {
        assert_eq!(tracking_quality(&[]), (0, 1.0));
    }

    #[test]
    fn tracking_permanent_swap_at_frame_k() {
        // Two GT identities tracked for 4 frames; predicted ids swap at
        // frame 2 and stay swapped: one switch per identity. Every
        // (track, gt) pair carries 2 votes, so any bijection agrees with
        // 4 of the 8 events.
        let events = vec![
            ev(0, 10, 1), ev(0, 11, 2),
            ev(1, 10, 1), ev(1, 11, 2),
            ev(2, 10, 2), ev(2, 11, 1),
            ev(3, 10, 2), ev(3, 11, 1),
        ];
        let (switches, acc) = tracking_quality(&events);
        assert_eq!(switches, 2);
        assert!((acc - 0.5).abs() < 1e-12);
    }

    #[test]
    fn tracking_fragmentation_costs_accuracy() {
        // One GT identity split across two predicted tracks 3/2: the
        // correspondence keeps the larger fragment only.
        let events = vec![ev(0, 10, 1), ev(1, 10, 1), ev(2, 10, 1), ev(3, 11, 1), ev(4, 11, 1)];
        let (switches, acc) = tracking_quality(&events);
        assert_eq!(switches, 1);
        assert!((acc - 0.6).abs() < 1e-12);
    }

    #[test]
    fn tracking_relabeled_ids_have_zero_switches() {
        let events = vec![ev(0, 99, 1), ev(1, 99, 1), ev(2, 99, 1), ev(0, 42, 2), ev(1, 42, 2)];
        assert_eq!(tracking_quality(&events), (0, 1.0));
    }

    fn emb(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec())
    }

    #[test]
    fn margins_identity_features() {
        let groups = BTreeMap::from([
            (1u64, vec![emb(&[1.0, 0.0]), emb(&[1.0, 0.0])]),
            (2u64, vec![emb(&[0.0, 1.0]), emb(&[0.0, 1.0])]),
        ]);
        let (intra, inter) = embedding_margins(&groups).unwrap();
        assert_eq!(intra, 1.0);
        assert_eq!(inter, 0.0);
    }

    #[test]
    fn margins_match_independent_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut groups: BTreeMap<u64, Vec<Embedding>> = BTreeMap::new();
        for id in 0..3u64 {
            groups.insert(
                id,
                (0..4)
                    .map(|_| {
                        Embedding::new((0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
                    })
                    .collect(),
            );
        }
        let (intra, inter) = embedding_margins(&groups).unwrap();

        // Flat recomputation.
        let mut intra_vals = Vec::new();
        let mut inter_vals = Vec::new();
        let items: Vec<(u64, &Embedding)> = groups
            .iter()
            .flat_map(|(id, v)| v.iter().map(move |e| (*id, e)))
            .collect();
        for i in 0..items.len() {
            for j in (i + 1)..items.len() {
                let c = cosine_similarity(items[i].1, items[j].1).unwrap();
                if items[i].0 == items[j].0 {
                    intra_vals.push(c);
                } else {
                    inter_vals.push(c);
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!((intra - mean(&intra_vals)).abs() < 1e-12);
        assert!((inter - mean(&inter_vals)).abs() < 1e-12);
    }

    #[test]
    fn margins_require_two_identities() {
        let groups = BTreeMap::from([(1u64, vec![emb(&[1.0, 0.0])])]);
        assert_eq!(
            embedding_margins(&groups),
            Err(MetricsError::NotEnoughIdentities(1))
        );
    }

    #[test]
    fn tube_iou_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..30 {
            let mk = |rng: &mut ChaCha8Rng| {
                let mut t = TrackTube::new(12, 12);
                for f in 0..4u64 {
                    if rng.random::<f64>() < 0.8 {
                        t.insert(
                            f,
                            BinaryMask::rect(
                                12,
                                12,
                                rng.random_range(0..8),
                                rng.random_range(0..8),
                                rng.random_range(1..6),
                                rng.random_range(1..6),
                            ),
                        );
                    }
                }
                t
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            assert_eq!(tube_iou(&a, &b).unwrap(), tube_iou(&b, &a).unwrap());
        }
    }
}
