//! Inference-time matching of detections to memory-bank tracks.
//!
//! Detections are scored against stored MA embeddings with the bi-softmax
//! similarity, then greedily claimed in descending confidence order; scores
//! above the match threshold join the existing track, the rest initiate new
//! ids. Associations use embeddings only — no motion model, no IoU gating.

use crate::embedding::{stable_softmax, Embedding, EmbeddingError};
use crate::mask::BinaryMask;
use crate::matrix::Matrix;
use crate::memory::{MemoryBank, MemoryError, TrackId};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Match threshold on the bi-softmax score.
pub const MATCH_THRESHOLD_DEFAULT: f64 = 0.5;

/// Confidence below which detections are dropped before matching.
pub const CONF_THRESHOLD_DEFAULT: f64 = 0.3;

#[derive(Debug, Error, PartialEq)]
pub enum AssociationError {
    #[error("no detections to match")]
    EmptyDetections,
    #[error("no memories to match against")]
    EmptyMemories,
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

/// One frame-level detection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceObservation {
    pub embedding: Embedding,
    pub class_scores: Vec<f64>,
    pub mask: Option<BinaryMask>,
    /// Detection confidence in `[0, 1]`.
    pub confidence: f64,
}

/// All detections of one frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameDetections {
    pub frame_index: u64,
    pub detections: Vec<InstanceObservation>,
}

/// Outcome for one surviving detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// Index into the frame's original detection list.
    pub detection_index: usize,
    pub track_id: TrackId,
    /// Bi-softmax score of the chosen memory (0 when the bank was empty).
    pub score: f64,
    pub is_new: bool,
}

#[derive(Debug, Clone)]
pub struct AssociationResult {
    pub assignments: Vec<Assignment>,
    /// Bi-softmax matrix over surviving detections x memories at frame start.
    pub similarity_matrix: Matrix,
    /// Memory track ids labelling the matrix columns.
    pub memory_ids: Vec<TrackId>,
}

/// One line of an association trace (JSON-lines friendly).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRecord {
    pub frame: u64,
    pub detection_index: usize,
    pub track_id: TrackId,
    pub score: f64,
    pub is_new: bool,
}

/// The two halves of the bi-softmax similarity.
///
/// `detection_to_memory[i][j]` softmax-normalizes `ê_k · d_i` over memories k;
/// its rows sum to 1. `memory_to_detection[i][j]` softmax-normalizes
/// `ê_j · d_l` over detections l; its columns sum to 1.
pub fn bi_softmax_components(
    detections: &[Embedding],
    memories: &[Embedding],
) -> Result<(Matrix, Matrix), AssociationError> {
    if detections.is_empty() {
        return Err(AssociationError::EmptyDetections);
    }
    if memories.is_empty() {
        return Err(AssociationError::EmptyMemories);
    }
    let n = detections.len();
    let m = memories.len();
    let mut dots = Matrix::zeros(n, m);
    for (i, d) in detections.iter().enumerate() {
        for (j, e) in memories.iter().enumerate() {
            dots.set(i, j, e.dot(d)?);
        }
    }

    let mut det_to_mem = Matrix::zeros(n, m);
    for i in 0..n {
        let row = stable_softmax(dots.row(i))?;
        for (j, v) in row.into_iter().enumerate() {
            det_to_mem.set(i, j, v);
        }
    }

    let mut mem_to_det = Matrix::zeros(n, m);
    for j in 0..m {
        let col: Vec<f64> = (0..n).map(|i| dots.get(i, j)).collect();
        let soft = stable_softmax(&col)?;
        for (i, v) in soft.into_iter().enumerate() {
            mem_to_det.set(i, j, v);
        }
    }
    Ok((det_to_mem, mem_to_det))
}

/// Bi-softmax similarity: `f = 0.5 * (detection→memory + memory→detection)`.
/// All entries lie in `(0, 1]`.
pub fn bi_softmax_matrix(
    detections: &[Embedding],
    memories: &[Embedding],
) -> Result<Matrix, AssociationError> {
    let (a, b) = bi_softmax_components(detections, memories)?;
    Ok(Matrix::from_fn(a.rows(), a.cols(), |i, j| {
        0.5 * (a.get(i, j) + b.get(i, j))
    }))
}

/// Match one frame's detections against the bank and update it.
///
/// Detections below `conf_threshold` are dropped. Survivors are processed in
/// descending confidence; each takes the argmax over still-unclaimed memories
/// and joins that track when the score exceeds `match_threshold`, otherwise a
/// fresh id is initiated. Argmax ties break toward the lowest track id. The
/// bank is then extended with every surviving detection's embedding, class
/// scores and mask.
pub fn associate_frame(
    bank: &mut MemoryBank,
    frame: &FrameDetections,
    match_threshold: f64,
    conf_threshold: f64,
) -> Result<AssociationResult, AssociationError> {
    let surviving: Vec<usize> = (0..frame.detections.len())
        .filter(|&i| frame.detections[i].confidence >= conf_threshold)
        .collect();

    let memory_ids: Vec<TrackId> = bank.track_ids().collect();
    let memories: Vec<Embedding> = memory_ids
        .iter()
        .map(|id| bank.track(*id).unwrap().ma_embedding.clone())
        .collect();

    let similarity = if surviving.is_empty() || memories.is_empty() {
        Matrix::zeros(surviving.len(), memories.len())
    } else {
        let det_embs: Vec<Embedding> = surviving
            .iter()
            .map(|&i| frame.detections[i].embedding.clone())
            .collect();
        bi_softmax_matrix(&det_embs, &memories)?
    };

    // Descending confidence; equal confidences keep original detection order.
    let mut order: Vec<usize> = (0..surviving.len()).collect();
    order.sort_by(|&a, &b| {
        let ca = frame.detections[surviving[a]].confidence;
        let cb = frame.detections[surviving[b]].confidence;
        cb.partial_cmp(&ca)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(surviving[a].cmp(&surviving[b]))
    });

    let mut claimed = vec![false; memory_ids.len()];
    let mut assignments = Vec::with_capacity(order.len());
    for &row in &order {
        let det_index = surviving[row];
        let mut best: Option<(usize, f64)> = None;
        for (col, &done) in claimed.iter().enumerate() {
            if done {
                continue;
            }
            let f = similarity.get(row, col);
            // Strict > keeps the lowest track id on ties (columns ascend by id).
            if best.map_or(true, |(_, bf)| f > bf) {
                best = Some((col, f));
            }
        }
        match best {
            Some((col, f)) if f > match_threshold => {
                claimed[col] = true;
                assignments.push(Assignment {
                    detection_index: det_index,
                    track_id: memory_ids[col],
                    score: f,
                    is_new: false,
                });
            }
            other => {
                let id = bank.new_track();
                assignments.push(Assignment {
                    detection_index: det_index,
                    track_id: id,
                    score: other.map_or(0.0, |(_, f)| f),
                    is_new: true,
                });
            }
        }
    }

    for a in &assignments {
        let det = &frame.detections[a.detection_index];
        bank.append_detection(
            a.track_id,
            frame.frame_index,
            det.embedding.clone(),
            Some(det.class_scores.clone()),
            det.mask.clone(),
        )?;
    }

    // Report assignments in original detection order.
    assignments.sort_by_key(|a| a.detection_index);
    Ok(AssociationResult { assignments, similarity_matrix: similarity, memory_ids })
}

/// Trace lines for an association result.
pub fn trace_records(frame: u64, result: &AssociationResult) -> Vec<TraceRecord> {
    result
        .assignments
        .iter()
        .map(|a| TraceRecord {
            frame,
            detection_index: a.detection_index,
            track_id: a.track_id,
            score: a.score,
            is_new: a.is_new,
        })
        .collect()
}

/// Per-track arithmetic mean of class score vectors over the frames in which
/// the track has scores recorded.
pub fn video_level_scores(
    bank: &MemoryBank,
    _num_frames: u64,
) -> Result<BTreeMap<TrackId, Vec<f64>>, AssociationError> {
    let mut out = BTreeMap::new();
    for track in bank.tracks() {
        if track.class_scores.is_empty() {
            return Err(MemoryError::EmptyTrack(track.track_id).into());
        }
        let k = track.class_scores[0].1.len();
        let mut mean = vec![0.0; k];
        for (_, scores) in &track.class_scores {
            for (m, s) in mean.iter_mut().zip(scores) {
                *m += s;
            }
        }
        for m in &mut mean {
            *m /= track.class_scores.len() as f64;
        }
        out.insert(track.track_id, mean);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn emb(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec())
    }

    fn det(embedding: Embedding, confidence: f64) -> InstanceObservation {
        InstanceObservation {
            embedding,
            class_scores: vec![1.0],
            mask: None,
            confidence,
        }
    }

    #[test]
    fn single_pair_scores_exactly_one() {
        let f = bi_softmax_matrix(&[emb(&[1.0, 0.0])], &[emb(&[0.3, 0.2])]).unwrap();
        assert_eq!(f.get(0, 0), 1.0);
    }

    #[test]
    fn bi_softmax_hand_value() {
        // memories (1,0) and (0,1), detection (1,0):
        // f = 0.5 * (e/(e+1) + 1) ≈ 0.86553.
        let f = bi_softmax_matrix(
            &[emb(&[1.0, 0.0])],
            &[emb(&[1.0, 0.0]), emb(&[0.0, 1.0])],
        )
        .unwrap();
        assert!((f.get(0, 0) - 0.86553).abs() < 1e-5, "{}", f.get(0, 0));
    }

    #[test]
    fn components_are_half_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let n = rng.random_range(1..6);
            let m = rng.random_range(1..6);
            let dim = rng.random_range(2..8);
            let dets: Vec<Embedding> = (0..n)
                .map(|_| Embedding::new((0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()))
                .collect();
            let mems: Vec<Embedding> = (0..m)
                .map(|_| Embedding::new((0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()))
                .collect();
            let (a, b) = bi_softmax_components(&dets, &mems).unwrap();
            for i in 0..n {
                let row_sum: f64 = (0..m).map(|j| a.get(i, j)).sum();
                assert!((row_sum - 1.0).abs() < 1e-9);
            }
            for j in 0..m {
                let col_sum: f64 = (0..n).map(|i| b.get(i, j)).sum();
                assert!((col_sum - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn score_monotone_in_target_dot_product() {
        // Raising ê_j · d_i with everything else fixed raises f_{i,j}.
        let mems = vec![emb(&[1.0, 0.0]), emb(&[0.0, 1.0])];
        let weak = bi_softmax_matrix(&[emb(&[0.5, 0.1])], &mems).unwrap();
        let strong = bi_softmax_matrix(&[emb(&[1.5, 0.1])], &mems).unwrap();
        assert!(strong.get(0, 0) > weak.get(0, 0));
    }

    #[test]
    fn empty_bank_creates_distinct_new_tracks() {
        let mut bank = MemoryBank::new(2);
        let frame = FrameDetections {
            frame_index: 0,
            detections: vec![
                det(emb(&[1.0, 0.0]), 0.9),
                det(emb(&[0.0, 1.0]), 0.8),
                det(emb(&[1.0, 1.0]), 0.7),
            ],
        };
        let result = associate_frame(&mut bank, &frame, 0.5, 0.3).unwrap();
        assert_eq!(result.assignments.len(), 3);
        assert!(result.assignments.iter().all(|a| a.is_new));
        let mut ids: Vec<_> = result.assignments.iter().map(|a| a.track_id).collect();
        ids.dedup();
        assert_eq!(ids.len(), 3);
        assert_eq!(bank.len(), 3);
    }

    #[test]
    fn single_match_joins_existing_track() {
        let mut bank = MemoryBank::new(2);
        let id = bank.new_track();
        bank.append_observation(id, 0, emb(&[1.0, 0.0])).unwrap();
        let frame = FrameDetections {
            frame_index: 1,
            detections: vec![det(emb(&[1.0, 0.0]), 0.9)],
        };
        let result = associate_frame(&mut bank, &frame, 0.5, 0.3).unwrap();
        assert_eq!(result.assignments.len(), 1);
        assert_eq!(result.assignments[0].track_id, id);
        assert!(!result.assignments[0].is_new);
        assert_eq!(result.assignments[0].score, 1.0);
        assert_eq!(bank.track(id).unwrap().history.len(), 2);
    }

    #[test]
    fn low_confidence_detections_are_dropped() {
        let mut bank = MemoryBank::new(2);
        let frame = FrameDetections {
            frame_index: 0,
            detections: vec![det(emb(&[1.0, 0.0]), 0.1), det(emb(&[0.0, 1.0]), 0.9)],
        };
        let result = associate_frame(&mut bank, &frame, 0.5, 0.3).unwrap();
        assert_eq!(result.assignments.len(), 1);
        assert_eq!(result.assignments[0].detection_index, 1);
    }

    #[test]
    fn no_track_claimed_twice_within_a_frame() {
        let mut bank = MemoryBank::new(2);
        let id = bank.new_track();
        bank.append_observation(id, 0, emb(&[1.0, 0.0])).unwrap();
        // Two detections both closest to the single memory.
        let frame = FrameDetections {
            frame_index: 1,
            detections: vec![det(emb(&[1.0, 0.0]), 0.9), det(emb(&[0.9, 0.1]), 0.8)],
        };
        let result = associate_frame(&mut bank, &frame, 0.4, 0.3).unwrap();
        let to_existing: Vec<_> = result.assignments.iter().filter(|a| !a.is_new).collect();
        assert_eq!(to_existing.len(), 1);
        // Highest confidence detection gets the claim.
        assert_eq!(to_existing[0].detection_index, 0);
    }

    #[test]
    fn video_scores_single_frame() {
        let mut bank = MemoryBank::new(2);
        let id = bank.new_track();
        bank.append_detection(id, 0, emb(&[1.0, 0.0]), Some(vec![0.2, 0.8]), None)
            .unwrap();
        let scores = video_level_scores(&bank, 1).unwrap();
        assert_eq!(scores[&id], vec![0.2, 0.8]);
    }

    #[test]
    fn video_scores_mean_of_two_frames() {
        let mut bank = MemoryBank::new(2);
        let id = bank.new_track();
        bank.append_detection(id, 0, emb(&[1.0, 0.0]), Some(vec![1.0, 0.0]), None)
            .unwrap();
        bank.append_detection(id, 1, emb(&[1.0, 0.0]), Some(vec![0.0, 1.0]), None)
            .unwrap();
        let scores = video_level_scores(&bank, 2).unwrap();
        assert_eq!(scores[&id], vec![0.5, 0.5]);
    }

    #[test]
    fn video_scores_match_independent_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut bank = MemoryBank::new(2);
        let id = bank.new_track();
        let mut all: Vec<Vec<f64>> = Vec::new();
        for frame in 0..10u64 {
            let s: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
            all.push(s.clone());
            bank.append_detection(id, frame, emb(&[1.0, 0.0]), Some(s), None)
                .unwrap();
        }
        let want: Vec<f64> = (0..3)
            .map(|k| all.iter().map(|s| s[k]).sum::<f64>() / all.len() as f64)
            .collect();
        let got = &video_level_scores(&bank, 10).unwrap()[&id];
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn video_scores_error_on_scoreless_track() {
        let mut bank = MemoryBank::new(2);
        let id = bank.new_track();
        bank.append_observation(id, 0, emb(&[1.0, 0.0])).unwrap();
        assert_eq!(
            video_level_scores(&bank, 1),
            Err(AssociationError::Memory(MemoryError::EmptyTrack(id)))
        );
    }

    #[test]
    fn associate_is_deterministic() {
        let run = || {
            let mut bank = MemoryBank::new(3);
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let mut all = Vec::new();
            for frame in 0..6u64 {
                let dets: Vec<InstanceObservation> = (0..4)
                    .map(|_| {
                        det(
                            Embedding::new(
                                (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                            ),
                            rng.random_range(0.2..1.0),
                        )
                    })
                    .collect();
                let fd = FrameDetections { frame_index: frame, detections: dets };
                let res = associate_frame(&mut bank, &fd, 0.5, 0.3).unwrap();
                all.push(res.assignments);
            }
            all
        };
        assert_eq!(run(), run());
    }
}
