//! Trains a linear embedding head on synthetic observation streams.
//!
//! Consistent training processes each sampled clip frame by frame: embed the
//! frame's observations, assign them to ground truth, build contrastive
//! items against the memory bank, then update the bank (optionally with
//! noise injection) before moving to the next frame. One gradient step on
//! the clip-mean embedding loss follows each clip. The single-reference
//! baseline builds items between adjacent frames only, with no bank.
//!
//! Gradients stop at the bank: only anchors (current-frame head outputs)
//! propagate into the head parameters.

use crate::assignment::{hungarian, CostMatrix, GtInstance, W_CLS_DEFAULT, W_MASK_DEFAULT};
use crate::association::InstanceObservation;
use crate::contrastive::{
    build_cis, emb_loss, emb_loss_grad, mean_clip_loss, ContrastiveItem, NegativeMode,
    ReferenceKind,
};
use crate::embedding::Embedding;
use crate::mask::BinaryMask;
use crate::memory::{MemoryBank, MemoryError, TrackId, BACKGROUND_CAP_DEFAULT, NOISE_PROB_DEFAULT};
use crate::pseudo_video::{ObservedFrame, PseudoVideo};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss diverged at iteration {iteration}")]
    Divergence { iteration: usize },
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Assignment(#[from] crate::assignment::AssignmentError),
}

// ─────────────────────────────────────────────────────────────────────────────
// Embedding head
// ─────────────────────────────────────────────────────────────────────────────

/// One affine layer `v = W x + b` mapping raw features to embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingHead {
    pub weight: Vec<Vec<f64>>, // c_out rows of c_in
    pub bias: Vec<f64>,
}

impl EmbeddingHead {
    /// Seeded init, weights and biases uniform in [−0.1, 0.1].
    pub fn init<R: Rng>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let weight = (0..c_out)
            .map(|_| (0..c_in).map(|_| rng.random_range(-0.1..0.1)).collect())
            .collect();
        let bias = (0..c_out).map(|_| rng.random_range(-0.1..0.1)).collect();
        Self { weight, bias }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.first().map_or(0, Vec::len)
    }

    pub fn output_dim(&self) -> usize {
        self.weight.len()
    }

    pub fn embed_raw(&self, features: &[f64]) -> Vec<f64> {
        debug_assert_eq!(features.len(), self.input_dim());
        self.weight
            .iter()
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(features).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect()
    }

    /// Head output as an embedding, optionally L2-normalized.
    pub fn embed(&self, features: &[f64], normalize: bool) -> Embedding {
        let raw = self.embed_raw(features);
        if normalize {
            let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            Embedding::new(raw.into_iter().map(|v| v / n).collect())
        } else {
            Embedding::new(raw)
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().flatten().all(|v| v.is_finite())
            && self.bias.iter().all(|v| v.is_finite())
    }
}

// ─────────────────────────────────────────────────────────────────────────────
// Configuration
// ─────────────────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub memory_bank: bool,
    pub momentum: bool,
    pub noise: bool,
}

impl AblationFlags {
    pub fn full() -> Self {
        Self { memory_bank: true, momentum: true, noise: true }
    }

    pub fn off() -> Self {
        Self { memory_bank: false, momentum: false, noise: false }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub clip_length: usize,
    pub emb_dim: usize,
    pub lr: f64,
    pub iterations: usize,
    pub lambda_emb: f64,
    pub lambda_cls: f64,
    pub lambda_ce: f64,
    pub lambda_dice: f64,
    pub noise_prob: f64,
    pub negative_mode: NegativeMode,
    pub seed: u64,
    /// L2-normalize head outputs inside the loss (off by default, matching
    /// the raw dot-product formulation).
    pub normalize_embeddings: bool,
    /// Withhold observation→GT correspondence and recover it by Hungarian
    /// matching on class scores and masks.
    pub use_hungarian_assignment: bool,
    pub background_cap: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            clip_length: 8,
            emb_dim: 12,
            lr: 0.05,
            iterations: 200,
            lambda_emb: 2.0,
            lambda_cls: 2.0,
            lambda_ce: 5.0,
            lambda_dice: 5.0,
            noise_prob: NOISE_PROB_DEFAULT,
            negative_mode: NegativeMode::MajorPlusLocal,
            seed: 0,
            normalize_embeddings: false,
            use_hungarian_assignment: false,
            background_cap: BACKGROUND_CAP_DEFAULT,
        }
    }
}

/// Eq. (6) with only the embedding term live: the segmentation terms are
/// carried structurally but bound to zero (no segmentor in this engine).
pub fn total_loss(emb: f64, config: &TrainerConfig) -> f64 {
    let (l_cls, l_ce, l_dice) = (0.0, 0.0, 0.0);
    config.lambda_emb * emb
        + config.lambda_cls * l_cls
        + config.lambda_ce * l_ce
        + config.lambda_dice * l_dice
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCurve(pub Vec<f64>);

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss\n");
        for (i, l) in self.0.iter().enumerate() {
            out.push_str(&format!("{i},{l}\n"));
        }
        out
    }
}

// ─────────────────────────────────────────────────────────────────────────────
// Synthetic observation streams
// ─────────────────────────────────────────────────────────────────────────────

/// Stream of synthetic observation clips standing in for per-frame query
/// features: per-instance latent identity vectors, per-frame drift plus
/// Gaussian noise, an occlusion/reappearance presence schedule, and a drifting
/// background feature distribution.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamConfig {
    pub feature_dim: usize,
    pub num_identities: (usize, usize),
    pub num_classes: usize,
    pub latent_scale: f64,
    /// How strongly identity latents share a common direction (0 = spread,
    /// →1 = nearly identical). Crowded latents force the head to amplify
    /// inter-identity differences rather than rely on raw separation.
    pub latent_crowding: f64,
    /// Strength of the per-frame nuisance added to every observation of the
    /// frame on a fixed set of leading feature channels (shared context:
    /// exposure, global motion). A good head learns to null those channels;
    /// the total nuisance norm is `nuisance_std * sqrt(feature_dim)`
    /// regardless of the channel count.
    pub nuisance_std: f64,
    /// Number of leading channels carrying the nuisance.
    pub nuisance_channels: usize,
    /// Std-dev of the per-frame random-walk drift on identity latents.
    pub drift_std: f64,
    /// Std-dev of per-observation feature noise.
    pub noise_std: f64,
    /// Probability that an identity takes one occlusion gap in the clip.
    pub occlusion_prob: f64,
    pub occlusion_len: (usize, usize),
    /// Per-observation probability of transient corruption (blur, partial
    /// occlusion): the feature is blended toward background clutter.
    /// Similarity-guided fusion exists to downweight exactly these.
    pub corruption_prob: f64,
    /// Blend weight of the clutter component in a corrupted observation.
    pub corruption_strength: f64,
    pub background_count: (usize, usize),
    pub background_scale: f64,
    /// How strongly background features align with the clip's common object
    /// direction (0 = unrelated clutter, 1 = a full "generic object").
    /// Aligned clutter is what supplementary negatives teach the head to
    /// reject.
    pub background_alignment: f64,
    /// The background distribution center drifts this much per frame.
    pub background_drift_std: f64,
    pub score_noise_std: f64,
    pub instance_confidence: (f64, f64),
    pub clutter_confidence: (f64, f64),
    /// Attach grid-slot masks (needed for the Hungarian assignment path).
    pub emit_masks: bool,
    pub mask_canvas: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            feature_dim: 20,
            num_identities: (5, 10),
            num_classes: 3,
            latent_scale: 1.5,
            latent_crowding: 0.5,
            nuisance_std: 0.25,
            nuisance_channels: 5,
            drift_std: 0.02,
            noise_std: 0.15,
            occlusion_prob: 0.5,
            occlusion_len: (2, 4),
            corruption_prob: 0.15,
            corruption_strength: 0.7,
            background_count: (2, 6),
            background_scale: 0.6,
            background_alignment: 0.8,
            background_drift_std: 0.1,
            score_noise_std: 0.05,
            instance_confidence: (0.7, 1.0),
            clutter_confidence: (0.1, 0.6),
            emit_masks: false,
            mask_canvas: 48,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClipObservation {
    pub gt_id: u64,
    pub class_label: usize,
    pub features: Vec<f64>,
    pub class_scores: Vec<f64>,
    pub mask: Option<BinaryMask>,
    pub confidence: f64,
}

#[derive(Debug, Clone)]
pub struct BackgroundObservation {
    pub features: Vec<f64>,
    pub class_scores: Vec<f64>,
    pub confidence: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ClipFrame {
    pub instances: Vec<ClipObservation>,
    pub background: Vec<BackgroundObservation>,
}

#[derive(Debug, Clone)]
pub struct Clip {
    pub frames: Vec<ClipFrame>,
    /// Whether any identity disappears and reappears within the clip.
    pub has_reappearance: bool,
}

#[derive(Debug, Clone)]
pub struct SyntheticStream {
    pub config: StreamConfig,
}

impl SyntheticStream {
    pub fn new(config: StreamConfig) -> Self {
        Self { config }
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    /// Sample one clip. Pure function of the rng state.
    pub fn sample_clip<R: Rng>(&self, clip_length: usize, rng: &mut R) -> Clip {
        let cfg = &self.config;
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let n_ids = rng.random_range(cfg.num_identities.0..=cfg.num_identities.1);

        // Identity latents: unit directions blended with a clip-level common
        // direction (crowding), then scaled.
        let unit = |rng: &mut R| -> Vec<f64> {
            let mut v: Vec<f64> = (0..cfg.feature_dim).map(|_| normal.sample(rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            v.iter_mut().for_each(|x| *x /= n);
            v
        };
        let common = unit(rng);
        let latents: Vec<Vec<f64>> = (0..n_ids)
            .map(|_| {
                let own = unit(rng);
                let mut v: Vec<f64> = common
                    .iter()
                    .zip(&own)
                    .map(|(c, o)| cfg.latent_crowding * c + (1.0 - cfg.latent_crowding) * o)
                    .collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
                v.iter_mut().for_each(|x| *x *= cfg.latent_scale / n);
                v
            })
            .collect();
        let classes: Vec<usize> = (0..n_ids)
            .map(|_| rng.random_range(0..cfg.num_classes))
            .collect();

        // Presence schedule: optionally one gap strictly inside the clip so
        // the identity is seen, disappears, and reappears.
        let mut has_reappearance = false;
        let gaps: Vec<Option<(usize, usize)>> = (0..n_ids)
            .map(|_| {
                if clip_length < 4 || rng.random::<f64>() >= cfg.occlusion_prob {
                    return None;
                }
                let max_len = cfg.occlusion_len.1.min(clip_length.saturating_sub(2));
                let min_len = cfg.occlusion_len.0.min(max_len);
                if min_len == 0 {
                    return None;
                }
                let len = rng.random_range(min_len..=max_len);
                let start = rng.random_range(1..=clip_length - len - 1);
                has_reappearance = true;
                Some((start, start + len))
            })
            .collect();

        // Grid slots for optional masks.
        let grid = (n_ids as f64).sqrt().ceil() as usize;
        let cell = (cfg.mask_canvas / grid.max(1)).max(4);

        let mut drift = vec![vec![0.0f64; cfg.feature_dim]; n_ids];
        // Background clutter sits near the clip's common object direction
        // and random-walks away from it over time.
        let mut bg_center: Vec<f64> = common
            .iter()
            .map(|c| c * cfg.latent_scale * cfg.background_alignment)
            .collect();
        let mut frames = Vec::with_capacity(clip_length);
        let n_ch = cfg.nuisance_channels.min(cfg.feature_dim).max(1);
        let channel_std =
            cfg.nuisance_std * (cfg.feature_dim as f64 / n_ch as f64).sqrt();
        for t in 0..clip_length {
            let mut frame = ClipFrame::default();
            // Shared per-frame context on the fixed nuisance channels,
            // identical for every observation of the frame.
            let mut nuisance = vec![0.0f64; cfg.feature_dim];
            for slot in nuisance.iter_mut().take(n_ch) {
                *slot = channel_std * normal.sample(rng);
            }
            for id in 0..n_ids {
                for d in drift[id].iter_mut() {
                    *d += cfg.drift_std * normal.sample(rng);
                }
                let present = gaps[id].map_or(true, |(a, b)| t < a || t >= b);
                if !present {
                    continue;
                }
                let mut features: Vec<f64> = (0..cfg.feature_dim)
                    .map(|d| {
                        latents[id][d]
                            + drift[id][d]
                            + nuisance[d]
                            + cfg.noise_std * normal.sample(rng)
                    })
                    .collect();
                let corrupted = rng.random::<f64>() < cfg.corruption_prob;
                if corrupted {
                    let s = cfg.corruption_strength;
                    for (d, f) in features.iter_mut().enumerate() {
                        let junk = bg_center[d] + cfg.background_scale * normal.sample(rng);
                        *f = (1.0 - s) * *f + s * junk;
                    }
                }
                let mut scores = vec![0.05; cfg.num_classes];
                scores[classes[id]] = 0.9;
                for s in &mut scores {
                    *s = (*s + cfg.score_noise_std * normal.sample(rng)).clamp(0.0, 1.0);
                }
                let mask = cfg.emit_masks.then(|| {
                    let gx = (id % grid) * cell;
                    let gy = (id / grid) * cell;
                    let pad = cell / 5;
                    BinaryMask::rect(
                        cfg.mask_canvas,
                        cfg.mask_canvas,
                        (gx + pad) as i64,
                        (gy + pad) as i64,
                        cell - 2 * pad,
                        cell - 2 * pad,
                    )
                });
                // A corrupted observation also reads as a weak detection.
                let conf_range = if corrupted {
                    cfg.clutter_confidence
                } else {
                    cfg.instance_confidence
                };
                frame.instances.push(ClipObservation {
                    gt_id: id as u64,
                    class_label: classes[id],
                    features,
                    class_scores: scores,
                    mask,
                    confidence: rng.random_range(conf_range.0..=conf_range.1),
                });
            }
            for c in bg_center.iter_mut() {
                *c += cfg.background_drift_std * normal.sample(rng);
            }
            let n_bg = rng.random_range(cfg.background_count.0..=cfg.background_count.1);
            for _ in 0..n_bg {
                frame.background.push(BackgroundObservation {
                    features: (0..cfg.feature_dim)
                        .map(|d| {
                            bg_center[d]
                                + nuisance[d]
                                + cfg.background_scale * normal.sample(rng)
                        })
                        .collect(),
                    class_scores: (0..cfg.num_classes)
                        .map(|_| rng.random_range(0.0..0.3))
                        .collect(),
                    confidence: rng
                        .random_range(cfg.clutter_confidence.0..=cfg.clutter_confidence.1),
                });
            }
            frames.push(frame);
        }
        Clip { frames, has_reappearance }
    }
}

impl Clip {
    /// Bridge observed pseudo-video frames into a trainer clip. GT classes
    /// come from the video's track map; clutter detections become background
    /// observations.
    pub fn from_observed(frames: &[ObservedFrame], video: &PseudoVideo) -> Clip {
        let classes = video.track_classes();
        let mut out = Vec::with_capacity(frames.len());
        let mut any_gap = false;
        let mut seen: BTreeMap<u64, u64> = BTreeMap::new();
        for (t, of) in frames.iter().enumerate() {
            let mut frame = ClipFrame::default();
            for (det, gt) in of.detections.detections.iter().zip(&of.gt_ids) {
                match gt {
                    Some(id) => {
                        if let Some(last) = seen.get(id) {
                            if t as u64 > last + 1 {
                                any_gap = true;
                            }
                        }
                        seen.insert(*id, t as u64);
                        frame.instances.push(ClipObservation {
                            gt_id: *id,
                            class_label: classes.get(id).copied().unwrap_or(0),
                            features: det.embedding.values().to_vec(),
                            class_scores: det.class_scores.clone(),
                            mask: det.mask.clone(),
                            confidence: det.confidence,
                        });
                    }
                    None => frame.background.push(BackgroundObservation {
                        features: det.embedding.values().to_vec(),
                        class_scores: det.class_scores.clone(),
                        confidence: det.confidence,
                    }),
                }
            }
            out.push(frame);
        }
        Clip { frames: out, has_reappearance: any_gap }
    }
}

// ─────────────────────────────────────────────────────────────────────────────
// Clip processing
// ─────────────────────────────────────────────────────────────────────────────

/// One contrastive item with everything needed to backpropagate its anchor
/// into the head.
#[derive(Debug, Clone)]
pub struct CiRecord {
    pub ci: ContrastiveItem,
    pub features: Vec<f64>,
    /// Norm of the raw head output (used when embeddings are normalized).
    pub raw_norm: f64,
}

#[derive(Debug, Default)]
pub struct ClipOutcome {
    pub records: Vec<CiRecord>,
    pub losses: Vec<f64>,
}

impl ClipOutcome {
    pub fn mean_loss(&self) -> f64 {
        mean_clip_loss(&self.losses)
    }
}

fn embed_tracked(head: &EmbeddingHead, features: &[f64], normalize: bool) -> (Embedding, f64) {
    let raw = head.embed_raw(features);
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    if normalize {
        (Embedding::new(raw.iter().map(|v| v / norm).collect()), norm)
    } else {
        (Embedding::new(raw), norm)
    }
}

/// Recover observation→GT correspondence. By construction the generator
/// labels every observation; with the Hungarian switch on, the labels are
/// withheld and re-derived from class scores and masks.
fn assign_to_gt(
    frame: &ClipFrame,
    use_hungarian: bool,
) -> Result<Vec<(usize, u64)>, TrainError> {
    if !use_hungarian || frame.instances.is_empty() {
        return Ok(frame
            .instances
            .iter()
            .enumerate()
            .map(|(i, o)| (i, o.gt_id))
            .collect());
    }
    let preds: Vec<InstanceObservation> = frame
        .instances
        .iter()
        .map(|o| InstanceObservation {
            embedding: Embedding::new(o.features.clone()),
            class_scores: o.class_scores.clone(),
            mask: o.mask.clone(),
            confidence: o.confidence,
        })
        .collect();
    let gts: Vec<GtInstance> = frame
        .instances
        .iter()
        .map(|o| GtInstance {
            id: o.gt_id,
            class_label: o.class_label,
            mask: o.mask.clone().unwrap_or_else(|| BinaryMask::empty(1, 1)),
        })
        .collect();
    let costs = CostMatrix::build(&preds, &gts, W_CLS_DEFAULT, W_MASK_DEFAULT)?;
    let pairs = hungarian(&costs)?;
    Ok(pairs.into_iter().map(|(row, col)| (row, gts[col].id)).collect())
}

/// Consistent-training pass over one clip: build CIs against the bank and
/// update it frame by frame. Returns the CI records for the gradient step.
pub fn process_clip_consistent<R: Rng>(
    head: &EmbeddingHead,
    clip: &Clip,
    config: &TrainerConfig,
    flags: AblationFlags,
    gt_to_track: Option<&mut BTreeMap<u64, TrackId>>,
    rng: &mut R,
) -> Result<(ClipOutcome, MemoryBank), TrainError> {
    let mut bank = MemoryBank::new(config.emb_dim).with_background_cap(config.background_cap);
    let mut local_map = BTreeMap::new();
    let map = gt_to_track.unwrap_or(&mut local_map);
    let reference = if flags.momentum {
        ReferenceKind::MomentumAverage
    } else {
        ReferenceKind::Latest
    };
    let mut outcome = ClipOutcome::default();

    for (t, frame) in clip.frames.iter().enumerate() {
        let t = t as u64;
        let assigned = assign_to_gt(frame, config.use_hungarian_assignment)?;

        // Anchor embeddings keyed by bank track, in ascending-track order to
        // stay aligned with build_cis output.
        let mut anchors: BTreeMap<TrackId, (Embedding, Vec<f64>, f64)> = BTreeMap::new();
        for (obs_idx, gt_id) in &assigned {
            let obs = &frame.instances[*obs_idx];
            let (emb, raw_norm) =
                embed_tracked(head, &obs.features, config.normalize_embeddings);
            let track = map.get(gt_id).copied();
            match track {
                Some(track) => {
                    anchors.insert(track, (emb, obs.features.clone(), raw_norm));
                }
                None => {
                    let track = bank.new_track();
                    map.insert(*gt_id, track);
                    anchors.insert(track, (emb, obs.features.clone(), raw_norm));
                }
            }
        }

        let frame_assignments: BTreeMap<TrackId, Embedding> = anchors
            .iter()
            .map(|(id, (e, _, _))| (*id, e.clone()))
            .collect();
        let cis = build_cis(&bank, &frame_assignments, t, config.negative_mode, reference, rng);
        // build_cis walks the assignment map in ascending track order and
        // skips tracks without history; mirror that to pair CIs with features.
        let with_history: Vec<&TrackId> = anchors
            .keys()
            .filter(|id| bank.track(**id).is_some_and(|tr| !tr.history.is_empty()))
            .collect();
        debug_assert_eq!(with_history.len(), cis.len());
        for (ci, id) in cis.into_iter().zip(with_history) {
            let (_, features, raw_norm) = &anchors[id];
            outcome.losses.push(emb_loss(&ci));
            outcome.records.push(CiRecord {
                ci,
                features: features.clone(),
                raw_norm: *raw_norm,
            });
        }

        // Bank update: present tracks take their assigned embeddings; the
        // rest are eligible for noise injection.
        let present: BTreeMap<TrackId, Embedding> = frame_assignments;
        let disappeared: BTreeSet<TrackId> = bank
            .track_ids()
            .filter(|id| !present.contains_key(id))
            .collect();
        let noise_prob = if flags.noise { config.noise_prob } else { 0.0 };
        bank.noisy_training_update(t, &present, &disappeared, noise_prob, rng)?;

        let bg: Vec<Embedding> = frame
            .background
            .iter()
            .map(|b| head.embed(&b.features, config.normalize_embeddings))
            .collect();
        bank.add_background(t, bg, rng);
    }
    Ok((outcome, bank))
}

/// Single-reference baseline pass: for each frame `t ≥ 1`, items are built
/// between frame `t` (anchors) and frame `t − 1` (instantaneous positives
/// and negatives). No bank, no momentum, no noise. The global supplementary
/// mode samples down to the same cap the bank path uses.
pub fn process_clip_baseline<R: Rng>(
    head: &EmbeddingHead,
    clip: &Clip,
    config: &TrainerConfig,
    rng: &mut R,
) -> Result<ClipOutcome, TrainError> {
    let mut outcome = ClipOutcome::default();
    // Background embeddings per frame, for the supplementary modes.
    let bg_embs: Vec<Vec<Embedding>> = clip
        .frames
        .iter()
        .map(|f| {
            f.background
                .iter()
                .map(|b| head.embed(&b.features, config.normalize_embeddings))
                .collect()
        })
        .collect();

    for t in 1..clip.frames.len() {
        let prev = &clip.frames[t - 1];
        let cur = &clip.frames[t];
        let prev_embs: BTreeMap<u64, Embedding> = prev
            .instances
            .iter()
            .map(|o| (o.gt_id, head.embed(&o.features, config.normalize_embeddings)))
            .collect();
        let supplementary: Vec<&Embedding> = match config.negative_mode {
            NegativeMode::MajorOnly => Vec::new(),
            NegativeMode::MajorPlusLocal | NegativeMode::SupplementaryOnly => {
                bg_embs[t - 1].iter().collect()
            }
            NegativeMode::MajorPlusGlobal => {
                let mut pool: Vec<&Embedding> = bg_embs[..t].iter().flatten().collect();
                if pool.len() > config.background_cap {
                    for i in 0..config.background_cap {
                        let j = rng.random_range(i..pool.len());
                        pool.swap(i, j);
                    }
                    pool.truncate(config.background_cap);
                }
                pool
            }
        };
        for obs in &cur.instances {
            let Some(positive) = prev_embs.get(&obs.gt_id) else {
                continue;
            };
            let (anchor, raw_norm) =
                embed_tracked(head, &obs.features, config.normalize_embeddings);
            let mut negatives = Vec::new();
            if config.negative_mode != NegativeMode::SupplementaryOnly {
                for (id, emb) in &prev_embs {
                    if *id != obs.gt_id {
                        negatives.push((emb.clone(), crate::contrastive::NegativeKind::Major));
                    }
                }
            }
            negatives.extend(
                supplementary
                    .iter()
                    .map(|e| ((*e).clone(), crate::contrastive::NegativeKind::Supplementary)),
            );
            let ci = ContrastiveItem { anchor, positive: positive.clone(), negatives };
            outcome.losses.push(emb_loss(&ci));
            outcome.records.push(CiRecord {
                ci,
                features: obs.features.clone(),
                raw_norm,
            });
        }
    }
    Ok(outcome)
}

/// One gradient-descent step on `λ_emb · mean_clip_loss`, anchors only.
pub fn apply_gradient_step(head: &mut EmbeddingHead, outcome: &ClipOutcome, config: &TrainerConfig) {
    if outcome.records.is_empty() {
        return;
    }
    let scale = config.lr * config.lambda_emb / outcome.records.len() as f64;
    for rec in &outcome.records {
        let grad = emb_loss_grad(&rec.ci);
        let g_v = grad.wrt_anchor.values();
        // With normalized embeddings the anchor is v = u/‖u‖; pull the
        // gradient back through the normalization Jacobian.
        let g_u: Vec<f64> = if config.normalize_embeddings {
            let v_hat = rec.ci.anchor.values();
            let dot: f64 = g_v.iter().zip(v_hat).map(|(g, v)| g * v).sum();
            g_v.iter()
                .zip(v_hat)
                .map(|(g, v)| (g - dot * v) / rec.raw_norm)
                .collect()
        } else {
            g_v.to_vec()
        };
        for (row, g) in head.weight.iter_mut().zip(&g_u) {
            for (w, x) in row.iter_mut().zip(&rec.features) {
                *w -= scale * g * x;
            }
        }
        for (b, g) in head.bias.iter_mut().zip(&g_u) {
            *b -= scale * g;
        }
    }
}

// ─────────────────────────────────────────────────────────────────────────────
// Training loops
// ─────────────────────────────────────────────────────────────────────────────

/// Consistent training (the full pipeline, modulated by ablation flags).
/// With the memory bank disabled the pass degrades to the single-reference
/// baseline construction.
///
/// Clip sampling and bank-side randomness run on decoupled rng streams, so
/// configurations sharing a seed train on identical clip sequences.
pub fn train_consistent(
    config: &TrainerConfig,
    stream: &SyntheticStream,
    flags: AblationFlags,
) -> Result<(EmbeddingHead, LossCurve), TrainError> {
    let mut clip_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut process_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5D5D_1EAF_0F0F_A0A0);
    let mut head = EmbeddingHead::init(stream.feature_dim(), config.emb_dim, &mut clip_rng);
    let mut curve = Vec::with_capacity(config.iterations);
    for iteration in 0..config.iterations {
        let clip = stream.sample_clip(config.clip_length, &mut clip_rng);
        let outcome = if flags.memory_bank {
            process_clip_consistent(&head, &clip, config, flags, None, &mut process_rng)?.0
        } else {
            process_clip_baseline(&head, &clip, config, &mut process_rng)?
        };
        let loss = outcome.mean_loss();
        if !loss.is_finite() {
            return Err(TrainError::Divergence { iteration });
        }
        curve.push(loss);
        apply_gradient_step(&mut head, &outcome, config);
        if !head.is_finite() {
            return Err(TrainError::Divergence { iteration });
        }
    }
    Ok((head, LossCurve(curve)))
}

/// Single-reference baseline training.
pub fn train_baseline(
    config: &TrainerConfig,
    stream: &SyntheticStream,
) -> Result<(EmbeddingHead, LossCurve), TrainError> {
    train_consistent(config, stream, AblationFlags::off())
}

use rand::SeedableRng;

#[cfg(test)]
mod tests {
    use super::*;

    fn small_stream() -> SyntheticStream {
        SyntheticStream::new(StreamConfig {
            feature_dim: 8,
            num_identities: (3, 4),
            noise_std: 0.2,
            ..Default::default()
        })
    }

    fn small_config() -> TrainerConfig {
        TrainerConfig {
            emb_dim: 6,
            iterations: 5,
            lr: 0.01,
            seed: 42,
            ..Default::default()
        }
    }

    #[test]
    fn zero_iterations_leaves_head_at_init() {
        let stream = small_stream();
        let config = TrainerConfig { iterations: 0, ..small_config() };
        let (head, curve) = train_consistent(&config, &stream, AblationFlags::full()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let want = EmbeddingHead::init(stream.feature_dim(), config.emb_dim, &mut rng);
        assert_eq!(head, want);
        assert!(curve.0.is_empty());
    }

    #[test]
    fn identical_seeds_give_bit_identical_curves() {
        let stream = small_stream();
        let config = small_config();
        let (_, c1) = train_consistent(&config, &stream, AblationFlags::full()).unwrap();
        let (_, c2) = train_consistent(&config, &stream, AblationFlags::full()).unwrap();
        assert_eq!(c1, c2);
        let (_, b1) = train_baseline(&config, &stream).unwrap();
        let (_, b2) = train_baseline(&config, &stream).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn different_seeds_differ() {
        let stream = small_stream();
        let c1 = small_config();
        let c2 = TrainerConfig { seed: 43, ..small_config() };
        let (_, a) = train_consistent(&c1, &stream, AblationFlags::full()).unwrap();
        let (_, b) = train_consistent(&c2, &stream, AblationFlags::full()).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn total_loss_scales_by_lambda_emb() {
        let config = TrainerConfig { lambda_emb: 2.0, ..Default::default() };
        assert_eq!(total_loss(1.0, &config), 2.0);
        assert_eq!(total_loss(0.0, &config), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let v: f64 = rng.random_range(0.0..5.0);
            assert_eq!(total_loss(v, &config), 2.0 * v);
        }
    }

    #[test]
    fn gradient_step_decreases_loss_on_frozen_clip() {
        // lr = 1e-3 on a fixed fixture: re-processing the same clip after
        // one step must give a lower mean loss.
        let stream = small_stream();
        let config = TrainerConfig { lr: 1e-3, ..small_config() };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut head = EmbeddingHead::init(stream.feature_dim(), config.emb_dim, &mut rng);
        let clip = stream.sample_clip(config.clip_length, &mut rng);

        let mut bank_rng = ChaCha8Rng::seed_from_u64(11);
        let (before, _) = process_clip_consistent(
            &head,
            &clip,
            &config,
            AblationFlags::full(),
            None,
            &mut bank_rng,
        )
        .unwrap();
        apply_gradient_step(&mut head, &before, &config);
        let mut bank_rng = ChaCha8Rng::seed_from_u64(11);
        let (after, _) = process_clip_consistent(
            &head,
            &clip,
            &config,
            AblationFlags::full(),
            None,
            &mut bank_rng,
        )
        .unwrap();
        assert!(
            after.mean_loss() < before.mean_loss(),
            "{} vs {}",
            after.mean_loss(),
            before.mean_loss()
        );
    }

    #[test]
    fn baseline_equals_bank_path_on_two_frame_clips() {
        // On a 2-frame clip the consistent pass (bank on, momentum on, no
        // noise) must produce the same CI multiset as the baseline: after a
        // single observation the MA embedding is that observation.
        let stream = SyntheticStream::new(StreamConfig {
            feature_dim: 8,
            num_identities: (4, 4),
            occlusion_prob: 0.0,
            background_count: (2, 2),
            ..Default::default()
        });
        let config = TrainerConfig { clip_length: 2, ..small_config() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let head = EmbeddingHead::init(stream.feature_dim(), config.emb_dim, &mut rng);
        let clip = stream.sample_clip(2, &mut rng);

        let mut bank_rng = ChaCha8Rng::seed_from_u64(1);
        let (consistent, _) = process_clip_consistent(
            &head,
            &clip,
            &config,
            AblationFlags { memory_bank: true, momentum: true, noise: false },
            None,
            &mut bank_rng,
        )
        .unwrap();
        let mut base_rng = ChaCha8Rng::seed_from_u64(2);
        let baseline = process_clip_baseline(&head, &clip, &config, &mut base_rng).unwrap();

        assert_eq!(consistent.records.len(), baseline.records.len());
        let key = |r: &CiRecord| {
            let mut parts: Vec<String> = r
                .ci
                .negatives
                .iter()
                .map(|(e, k)| format!("{:?}{:?}", e.values(), k))
                .collect();
            parts.sort();
            format!("{:?}|{:?}|{}", r.ci.anchor.values(), r.ci.positive.values(), parts.join(","))
        };
        let mut a: Vec<String> = consistent.records.iter().map(key).collect();
        let mut b: Vec<String> = baseline.records.iter().map(key).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn hungarian_assignment_recovers_identity_mapping() {
        let stream = SyntheticStream::new(StreamConfig {
            feature_dim: 8,
            num_identities: (4, 4),
            emit_masks: true,
            ..Default::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let clip = stream.sample_clip(4, &mut rng);
        for frame in &clip.frames {
            let assigned = assign_to_gt(frame, true).unwrap();
            for (obs_idx, gt) in assigned {
                assert_eq!(frame.instances[obs_idx].gt_id, gt);
            }
        }
    }

    #[test]
    fn noise_injection_is_reported_through_training() {
        // With noise forced on and occlusions guaranteed, injections happen.
        let stream = SyntheticStream::new(StreamConfig {
            feature_dim: 8,
            num_identities: (4, 4),
            occlusion_prob: 1.0,
            ..Default::default()
        });
        let config = TrainerConfig { noise_prob: 1.0, ..small_config() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = EmbeddingHead::init(stream.feature_dim(), config.emb_dim, &mut rng);
        let clip = stream.sample_clip(8, &mut rng);
        assert!(clip.has_reappearance);
        let (_, bank) = process_clip_consistent(
            &head,
            &clip,
            &config,
            AblationFlags::full(),
            None,
            &mut rng,
        )
        .unwrap();
        // With noise_prob 1 every disappeared track is injected whenever the
        // frame has at least one present donor, so each track has an entry
        // for every frame that anyone was present in.
        let frames_with_donors: Vec<u64> = clip
            .frames
            .iter()
            .enumerate()
            .filter(|(_, f)| !f.instances.is_empty())
            .map(|(t, _)| t as u64)
            .collect();
        for track in bank.tracks() {
            let have: Vec<u64> = track.history.iter().map(|(f, _)| *f).collect();
            assert_eq!(have, frames_with_donors);
        }
    }

    #[test]
    fn normalized_embeddings_step_decreases_loss() {
        let stream = small_stream();
        let config = TrainerConfig {
            lr: 1e-3,
            normalize_embeddings: true,
            ..small_config()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut head = EmbeddingHead::init(stream.feature_dim(), config.emb_dim, &mut rng);
        let clip = stream.sample_clip(config.clip_length, &mut rng);
        let mut r1 = ChaCha8Rng::seed_from_u64(2);
        let (before, _) = process_clip_consistent(
            &head, &clip, &config, AblationFlags::full(), None, &mut r1,
        )
        .unwrap();
        apply_gradient_step(&mut head, &before, &config);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        let (after, _) = process_clip_consistent(
            &head, &clip, &config, AblationFlags::full(), None, &mut r2,
        )
        .unwrap();
        assert!(after.mean_loss() < before.mean_loss());
    }

    #[test]
    fn training_reduces_loss_on_average() {
        let stream = small_stream();
        let config = TrainerConfig { iterations: 120, lr: 0.05, ..small_config() };
        let (_, curve) = train_consistent(&config, &stream, AblationFlags::full()).unwrap();
        let head_mean: f64 = curve.0[..20].iter().sum::<f64>() / 20.0;
        let tail_mean: f64 = curve.0[curve.0.len() - 20..].iter().sum::<f64>() / 20.0;
        assert!(tail_mean < head_mean, "tail {tail_mean} vs head {head_mean}");
    }

    #[test]
    fn loss_curve_csv_format() {
        let curve = LossCurve(vec![0.5, 0.25]);
        assert_eq!(curve.to_csv(), "iteration,loss\n0,0.5\n1,0.25\n");
    }
}
