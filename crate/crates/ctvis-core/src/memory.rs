//! Per-track embedding histories and momentum-averaged embeddings.
//!
//! Each track stores its raw embedding history plus a momentum-averaged (MA)
//! embedding maintained by similarity-guided fusion: the new MA is a convex
//! blend of the previous MA and the incoming embedding, weighted by the
//! clamped mean cosine similarity of the incoming embedding to the history.
//!
//! A bank is single-writer: one logical owner mutates it per video. Snapshots
//! are immutable and freely shareable.

use crate::embedding::{cosine_similarity, Embedding, EmbeddingError};
use crate::mask::BinaryMask;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

/// Default probability that a disappeared track receives a noise embedding.
pub const NOISE_PROB_DEFAULT: f64 = 0.05;

/// Default per-frame cap on stored background embeddings.
pub const BACKGROUND_CAP_DEFAULT: usize = 16;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct TrackId(pub u64);

impl std::fmt::Display for TrackId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "t{}", self.0)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MemoryError {
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("unknown track {0}")]
    UnknownTrack(TrackId),
    #[error("non-monotonic frame for {track}: last {last}, got {got}")]
    NonMonotonicFrame { track: TrackId, last: u64, got: u64 },
    #[error("track {0} listed as both present and disappeared")]
    Overlap(TrackId),
    #[error("track {0} has no class scores")]
    EmptyTrack(TrackId),
}

/// One track's state: raw history, MA embedding, per-frame scores and masks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackMemory {
    pub track_id: TrackId,
    /// `(frame_index, embedding)`, strictly increasing in frame index.
    pub history: Vec<(u64, Embedding)>,
    pub ma_embedding: Embedding,
    /// Per-frame class score vectors (inference bookkeeping).
    pub class_scores: Vec<(u64, Vec<f64>)>,
    /// Per-frame masks (inference bookkeeping).
    pub masks: Vec<(u64, BinaryMask)>,
}

impl TrackMemory {
    fn new(track_id: TrackId, dim: usize) -> Self {
        Self {
            track_id,
            history: Vec::new(),
            ma_embedding: Embedding::zeros(dim),
            class_scores: Vec::new(),
            masks: Vec::new(),
        }
    }

    pub fn last_frame(&self) -> Option<u64> {
        self.history.last().map(|(f, _)| *f)
    }

    /// Most recent raw embedding (the no-momentum reference).
    pub fn latest_embedding(&self) -> Option<&Embedding> {
        self.history.last().map(|(_, e)| e)
    }
}

/// Similarity-guided fusion of a new embedding into a track.
///
/// With an empty history the result is `(new_embedding, 1.0)`. Otherwise
/// `beta = max(0, mean_k cos(new, history_k))` over the raw history and the
/// result is `(1 - beta) * ma + beta * new`. Does not mutate the track.
pub fn fuse_ma(
    track: &TrackMemory,
    new_embedding: &Embedding,
) -> Result<(Embedding, f64), MemoryError> {
    if track.history.is_empty() {
        return Ok((new_embedding.clone(), 1.0));
    }
    let mut sum = 0.0;
    for (_, past) in &track.history {
        sum += cosine_similarity(new_embedding, past)?;
    }
    let beta = (sum / track.history.len() as f64).max(0.0);
    let mut fused = track.ma_embedding.scaled(1.0 - beta);
    fused.add_scaled(new_embedding, beta);
    Ok((fused, beta))
}

/// Which tracks received noise this frame and from whom.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub injections: Vec<NoiseInjection>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseInjection {
    pub track: TrackId,
    pub donor: TrackId,
}

/// Maps track ids to their memories; issues fresh ids; stores the per-frame
/// background pool used for supplementary negatives during training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemoryBank {
    dim: usize,
    tracks: BTreeMap<TrackId, TrackMemory>,
    next_id: u64,
    background_pool: BTreeMap<u64, Vec<Embedding>>,
    background_cap: usize,
}

impl MemoryBank {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            tracks: BTreeMap::new(),
            next_id: 0,
            background_pool: BTreeMap::new(),
            background_cap: BACKGROUND_CAP_DEFAULT,
        }
    }

    pub fn with_background_cap(mut self, cap: usize) -> Self {
        self.background_cap = cap;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    pub fn track_ids(&self) -> impl Iterator<Item = TrackId> + '_ {
        self.tracks.keys().copied()
    }

    pub fn track(&self, id: TrackId) -> Option<&TrackMemory> {
        self.tracks.get(&id)
    }

    pub fn tracks(&self) -> impl Iterator<Item = &TrackMemory> {
        self.tracks.values()
    }

    /// Issue a fresh track id. Ids are never reused within a bank.
    pub fn new_track(&mut self) -> TrackId {
        let id = TrackId(self.next_id);
        self.next_id += 1;
        self.tracks.insert(id, TrackMemory::new(id, self.dim));
        id
    }

    /// Extend a track's history and refresh its MA embedding.
    pub fn append_observation(
        &mut self,
        id: TrackId,
        frame: u64,
        embedding: Embedding,
    ) -> Result<(), MemoryError> {
        self.append_detection(id, frame, embedding, None, None)
    }

    /// As [`MemoryBank::append_observation`] but also records the frame's
    /// class scores and mask when available (inference path).
    pub fn append_detection(
        &mut self,
        id: TrackId,
        frame: u64,
        embedding: Embedding,
        class_scores: Option<Vec<f64>>,
        mask: Option<BinaryMask>,
    ) -> Result<(), MemoryError> {
        if embedding.dim() != self.dim {
            return Err(EmbeddingError::DimensionMismatch {
                left: embedding.dim(),
                right: self.dim,
            }
            .into());
        }
        let track = self
            .tracks
            .get_mut(&id)
            .ok_or(MemoryError::UnknownTrack(id))?;
        if let Some(last) = track.last_frame() {
            if frame <= last {
                return Err(MemoryError::NonMonotonicFrame { track: id, last, got: frame });
            }
        }
        let (fused, _beta) = fuse_ma(track, &embedding)?;
        track.history.push((frame, embedding));
        track.ma_embedding = fused;
        if let Some(scores) = class_scores {
            track.class_scores.push((frame, scores));
        }
        if let Some(mask) = mask {
            track.masks.push((frame, mask));
        }
        Ok(())
    }

    /// Training-time update: present tracks receive their ground-truth
    /// embeddings; each disappeared track independently receives, with
    /// probability `noise_prob`, the embedding of one uniformly random
    /// present instance of the same frame. Disappeared tracks without an
    /// injection get no history entry this frame (their MA is frozen).
    pub fn noisy_training_update<R: Rng>(
        &mut self,
        frame: u64,
        present: &BTreeMap<TrackId, Embedding>,
        disappeared: &BTreeSet<TrackId>,
        noise_prob: f64,
        rng: &mut R,
    ) -> Result<NoiseReport, MemoryError> {
        if let Some(id) = present.keys().find(|id| disappeared.contains(id)) {
            return Err(MemoryError::Overlap(*id));
        }
        for id in present.keys().chain(disappeared.iter()) {
            if !self.tracks.contains_key(id) {
                return Err(MemoryError::UnknownTrack(*id));
            }
        }

        for (id, embedding) in present {
            self.append_observation(*id, frame, embedding.clone())?;
        }

        let mut report = NoiseReport::default();
        if present.is_empty() {
            // No donors this frame; nothing can be injected.
            return Ok(report);
        }
        let donors: Vec<(&TrackId, &Embedding)> = present.iter().collect();
        for id in disappeared {
            if rng.random::<f64>() < noise_prob {
                let (donor_id, donor_emb) = donors[rng.random_range(0..donors.len())];
                self.append_observation(*id, frame, donor_emb.clone())?;
                report
                    .injections
                    .push(NoiseInjection { track: *id, donor: *donor_id });
            }
        }
        Ok(report)
    }

    /// Immutable copy of all current MA embeddings.
    pub fn ma_snapshot(&self) -> BTreeMap<TrackId, Embedding> {
        self.tracks
            .iter()
            .map(|(id, t)| (*id, t.ma_embedding.clone()))
            .collect()
    }

    /// Store this frame's background embeddings, uniformly subsampled down to
    /// the per-frame cap when there are too many.
    pub fn add_background<R: Rng>(&mut self, frame: u64, mut embeddings: Vec<Embedding>, rng: &mut R) {
        if embeddings.len() > self.background_cap {
            // Partial Fisher-Yates: the first `cap` slots end up a uniform sample.
            for i in 0..self.background_cap {
                let j = rng.random_range(i..embeddings.len());
                embeddings.swap(i, j);
            }
            embeddings.truncate(self.background_cap);
        }
        self.background_pool.entry(frame).or_default().extend(embeddings);
    }

    /// Background embeddings recorded exactly at `frame`.
    pub fn background_at(&self, frame: u64) -> &[Embedding] {
        self.background_pool.get(&frame).map_or(&[], Vec::as_slice)
    }

    /// Background embeddings from all frames strictly before `frame`.
    pub fn background_before(&self, frame: u64) -> Vec<&Embedding> {
        self.background_pool
            .range(..frame)
            .flat_map(|(_, v)| v.iter())
            .collect()
    }

    pub fn background_cap(&self) -> usize {
        self.background_cap
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(json: &str) -> serde_json::Result<Self> {
        serde_json::from_str(json)
    }
}
