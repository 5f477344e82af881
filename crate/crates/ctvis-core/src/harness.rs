//! Seeded benchmark and ablation-grid machinery.
//!
//! A benchmark cell trains one head variant and evaluates it on a fixed set
//! of held-out synthetic videos: half with forced occlusion gaps (the
//! re-identification-heavy subset), half without. Cells of one grid share
//! the training and evaluation seeds so comparisons are paired. Grid cells
//! share nothing else and can run in parallel.

use crate::association::{associate_frame, FrameDetections, InstanceObservation};
use crate::contrastive::NegativeMode;
use crate::embedding::Embedding;
use crate::memory::MemoryBank;
use crate::metrics::{embedding_margins, tracking_quality, TraceEvent};
use crate::trainer::{
    train_baseline, train_consistent, AblationFlags, Clip, EmbeddingHead, StreamConfig,
    SyntheticStream, TrainError, TrainerConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Benchmark shape: held-out videos, their length range, and how the
/// re-identification-heavy subset is generated.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub stream: StreamConfig,
    pub trainer: TrainerConfig,
    pub eval_videos: usize,
    pub eval_frames: (usize, usize),
    /// Fraction of eval videos with forced occlusion + reappearance.
    pub reid_fraction: f64,
    pub reid_occlusion_len: (usize, usize),
    pub match_threshold: f64,
    pub conf_threshold: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            stream: StreamConfig::default(),
            trainer: TrainerConfig::default(),
            eval_videos: 20,
            eval_frames: (8, 10),
            reid_fraction: 0.5,
            reid_occlusion_len: (2, 4),
            match_threshold: crate::association::MATCH_THRESHOLD_DEFAULT,
            conf_threshold: crate::association::CONF_THRESHOLD_DEFAULT,
        }
    }
}

/// Metrics of one trained head on the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub assoc_accuracy: f64,
    /// Mean ID switches per video.
    pub id_switches: f64,
    /// Accuracy restricted to the re-identification-heavy subset.
    pub reid_accuracy: f64,
    pub reid_id_switches: f64,
    pub intra_margin: f64,
    pub inter_margin: f64,
}

/// Run the online tracker over one clip with the given head. Returns one
/// trace event per matched detection, tagged with its GT identity.
pub fn track_clip(
    head: &EmbeddingHead,
    clip: &Clip,
    match_threshold: f64,
    conf_threshold: f64,
    normalize: bool,
) -> (Vec<TraceEvent>, MemoryBank) {
    let mut bank = MemoryBank::new(head.output_dim());
    let mut events = Vec::new();
    for (t, frame) in clip.frames.iter().enumerate() {
        let mut detections = Vec::new();
        let mut gt_of = Vec::new();
        for obs in &frame.instances {
            detections.push(InstanceObservation {
                embedding: head.embed(&obs.features, normalize),
                class_scores: obs.class_scores.clone(),
                mask: obs.mask.clone(),
                confidence: obs.confidence,
            });
            gt_of.push(Some(obs.gt_id));
        }
        for bg in &frame.background {
            detections.push(InstanceObservation {
                embedding: head.embed(&bg.features, normalize),
                class_scores: bg.class_scores.clone(),
                mask: None,
                confidence: bg.confidence,
            });
            gt_of.push(None);
        }
        let fd = FrameDetections { frame_index: t as u64, detections };
        let result = associate_frame(&mut bank, &fd, match_threshold, conf_threshold)
            .expect("tracking a well-formed clip");
        for a in &result.assignments {
            events.push(TraceEvent {
                frame: t as u64,
                track: a.track_id,
                gt: gt_of[a.detection_index],
            });
        }
    }
    (events, bank)
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 step over seed ^ salt.
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The held-out eval set for one seed: `(clip, is_reid_heavy)` pairs.
/// Deterministic in the seed and independent of any training rng.
pub fn eval_videos(cfg: &BenchmarkConfig, seed: u64) -> Vec<(Clip, bool)> {
    let heavy_count = (cfg.eval_videos as f64 * cfg.reid_fraction).round() as usize;
    let mut heavy_cfg = cfg.stream.clone();
    heavy_cfg.occlusion_prob = 1.0;
    heavy_cfg.occlusion_len = cfg.reid_occlusion_len;
    let normal_stream = SyntheticStream::new(cfg.stream.clone());
    let heavy_stream = SyntheticStream::new(heavy_cfg);

    (0..cfg.eval_videos)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xE7A1 + i as u64));
            let frames = if cfg.eval_frames.0 == cfg.eval_frames.1 {
                cfg.eval_frames.0
            } else {
                use rand::Rng;
                rng.random_range(cfg.eval_frames.0..=cfg.eval_frames.1)
            };
            let heavy = i < heavy_count;
            let stream = if heavy { &heavy_stream } else { &normal_stream };
            (stream.sample_clip(frames, &mut rng), heavy)
        })
        .collect()
}

/// Track every eval video with `head` and aggregate the benchmark metrics.
pub fn evaluate_head(head: &EmbeddingHead, cfg: &BenchmarkConfig, seed: u64) -> CellMetrics {
    let videos = eval_videos(cfg, seed);
    let normalize = cfg.trainer.normalize_embeddings;
    let mut acc_all = Vec::new();
    let mut idsw_all = Vec::new();
    let mut acc_reid = Vec::new();
    let mut idsw_reid = Vec::new();
    let mut groups: BTreeMap<u64, Vec<Embedding>> = BTreeMap::new();
    for (v, (clip, heavy)) in videos.iter().enumerate() {
        let (events, _) = track_clip(
            head,
            clip,
            cfg.match_threshold,
            cfg.conf_threshold,
            normalize,
        );
        let (switches, accuracy) = tracking_quality(&events);
        acc_all.push(accuracy);
        idsw_all.push(switches as f64);
        if *heavy {
            acc_reid.push(accuracy);
            idsw_reid.push(switches as f64);
        }
        // Identity-grouped embeddings for the margin statistics; identities
        // are per-video, so the group key folds the video index in.
        for frame in &clip.frames {
            for obs in &frame.instances {
                groups
                    .entry((v as u64) << 32 | obs.gt_id)
                    .or_default()
                    .push(head.embed(&obs.features, normalize));
            }
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let (intra, inter) = embedding_margins(&groups).unwrap_or((0.0, 0.0));
    CellMetrics {
        assoc_accuracy: mean(&acc_all),
        id_switches: mean(&idsw_all),
        reid_accuracy: mean(&acc_reid),
        reid_id_switches: mean(&idsw_reid),
        intra_margin: intra,
        inter_margin: inter,
    }
}

// ─────────────────────────────────────────────────────────────────────────────
// Grid cells
// ─────────────────────────────────────────────────────────────────────────────

/// One trainable variant. The rows of the two ablation grids plus clip-length
/// cells all reduce to this.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Single-reference baseline.
    Baseline,
    /// Consistent training with the given component flags.
    Consistent(AblationFlags),
}

impl Variant {
    pub fn train(
        self,
        config: &TrainerConfig,
        stream: &SyntheticStream,
    ) -> Result<EmbeddingHead, TrainError> {
        let (head, _) = match self {
            Variant::Baseline => train_baseline(config, stream)?,
            Variant::Consistent(flags) => train_consistent(config, stream, flags)?,
        };
        Ok(head)
    }
}

/// A labelled grid cell: variant plus any config overrides.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridCell {
    pub label: String,
    pub variant: Variant,
    pub negative_mode: Option<NegativeMode>,
    pub clip_length: Option<usize>,
}

impl GridCell {
    fn apply(&self, base: &TrainerConfig) -> TrainerConfig {
        let mut cfg = base.clone();
        if let Some(mode) = self.negative_mode {
            cfg.negative_mode = mode;
        }
        if let Some(len) = self.clip_length {
            cfg.clip_length = len;
        }
        cfg
    }
}

/// Component ablation rows mirroring the four training configurations:
/// baseline, +memory bank (latest embeddings), +momentum, +noise.
pub fn table3_cells() -> Vec<GridCell> {
    let rows = [
        ("baseline", Variant::Baseline),
        (
            "+memory_bank",
            Variant::Consistent(AblationFlags { memory_bank: true, momentum: false, noise: false }),
        ),
        (
            "+momentum",
            Variant::Consistent(AblationFlags { memory_bank: true, momentum: true, noise: false }),
        ),
        ("+noise", Variant::Consistent(AblationFlags::full())),
    ];
    rows.into_iter()
        .map(|(label, variant)| GridCell {
            label: label.to_string(),
            variant,
            negative_mode: None,
            clip_length: None,
        })
        .collect()
}

/// Negative-sampling rows: supplementary only, major only, major+global,
/// major+local — all with the full consistent pipeline.
pub fn table4_cells() -> Vec<GridCell> {
    NegativeMode::all()
        .into_iter()
        .map(|mode| GridCell {
            label: match mode {
                NegativeMode::SupplementaryOnly => "supplementary_only",
                NegativeMode::MajorOnly => "major_only",
                NegativeMode::MajorPlusGlobal => "major_plus_global",
                NegativeMode::MajorPlusLocal => "major_plus_local",
            }
            .to_string(),
            variant: Variant::Consistent(AblationFlags::full()),
            negative_mode: Some(mode),
            clip_length: None,
        })
        .collect()
}

/// Clip-length trend rows: consistent training and the multi-reference
/// baseline at clip lengths 2 and 8.
pub fn clip_length_cells() -> Vec<GridCell> {
    vec![
        GridCell {
            label: "consistent_len2".into(),
            variant: Variant::Consistent(AblationFlags::full()),
            negative_mode: None,
            clip_length: Some(2),
        },
        GridCell {
            label: "consistent_len8".into(),
            variant: Variant::Consistent(AblationFlags::full()),
            negative_mode: None,
            clip_length: Some(8),
        },
        GridCell {
            label: "baseline_mr_len2".into(),
            variant: Variant::Baseline,
            negative_mode: None,
            clip_length: Some(2),
        },
        GridCell {
            label: "baseline_mr_len8".into(),
            variant: Variant::Baseline,
            negative_mode: None,
            clip_length: Some(8),
        },
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RowSummary {
    pub label: String,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_id_switches: f64,
    pub std_id_switches: f64,
    pub mean_reid_accuracy: f64,
    pub mean_reid_id_switches: f64,
    pub mean_intra_margin: f64,
    pub mean_inter_margin: f64,
    pub per_seed: Vec<CellMetrics>,
}

fn summarize(label: &str, cells: Vec<CellMetrics>) -> RowSummary {
    let n = cells.len() as f64;
    let mean = |f: &dyn Fn(&CellMetrics) -> f64| cells.iter().map(|c| f(c)).sum::<f64>() / n;
    let std = |f: &dyn Fn(&CellMetrics) -> f64, m: f64| {
        if cells.len() < 2 {
            0.0
        } else {
            (cells.iter().map(|c| (f(c) - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        }
    };
    let acc = mean(&|c: &CellMetrics| c.assoc_accuracy);
    let idsw = mean(&|c: &CellMetrics| c.id_switches);
    RowSummary {
        label: label.to_string(),
        mean_accuracy: acc,
        std_accuracy: std(&|c: &CellMetrics| c.assoc_accuracy, acc),
        mean_id_switches: idsw,
        std_id_switches: std(&|c: &CellMetrics| c.id_switches, idsw),
        mean_reid_accuracy: mean(&|c: &CellMetrics| c.reid_accuracy),
        mean_reid_id_switches: mean(&|c: &CellMetrics| c.reid_id_switches),
        mean_intra_margin: mean(&|c: &CellMetrics| c.intra_margin),
        mean_inter_margin: mean(&|c: &CellMetrics| c.inter_margin),
        per_seed: cells,
    }
}

/// Train and evaluate one cell for one seed. Cells of a grid share seeds, so
/// comparisons are paired; training and evaluation rngs are decoupled.
pub fn run_cell(cfg: &BenchmarkConfig, cell: &GridCell, seed: u64) -> Result<CellMetrics, TrainError> {
    let mut trainer_cfg = cell.apply(&cfg.trainer);
    trainer_cfg.seed = mix_seed(seed, 0x7261_696E); // train-side stream
    let stream = SyntheticStream::new(cfg.stream.clone());
    let head = cell.variant.train(&trainer_cfg, &stream)?;
    Ok(evaluate_head(&head, cfg, seed))
}

/// Run a whole grid over the given seeds, cells × seeds in parallel.
pub fn run_grid(
    cfg: &BenchmarkConfig,
    cells: &[GridCell],
    seeds: &[u64],
) -> Result<Vec<RowSummary>, TrainError> {
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let results: Result<Vec<((usize, u64), CellMetrics)>, TrainError> = jobs
        .par_iter()
        .map(|&(c, s)| run_cell(cfg, &cells[c], s).map(|m| ((c, s), m)))
        .collect();
    let mut by_cell: BTreeMap<usize, Vec<(u64, CellMetrics)>> = BTreeMap::new();
    for ((c, s), m) in results? {
        by_cell.entry(c).or_default().push((s, m));
    }
    Ok(by_cell
        .into_iter()
        .map(|(c, mut ms)| {
            ms.sort_by_key(|(s, _)| *s);
            summarize(&cells[c].label, ms.into_iter().map(|(_, m)| m).collect())
        })
        .collect())
}
