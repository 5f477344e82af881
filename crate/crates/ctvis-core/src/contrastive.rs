//! Contrastive-item construction against the memory bank, and the embedding
//! loss with analytic gradients.
//!
//! A contrastive item pairs one anchor (the instance's current-frame
//! embedding) with one positive (its reference embedding in the bank) and a
//! set of negatives: "major" negatives are the reference embeddings of every
//! other track; "supplementary" negatives are background embeddings from
//! previous frames. Gradients stop at the bank — only the anchor's gradient
//! is propagated into the embedding head.

use crate::embedding::{log_sum_exp, Embedding};
use crate::memory::{MemoryBank, TrackId};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NegativeKind {
    /// Reference embedding of another track in the bank.
    Major,
    /// Background embedding from a previous frame.
    Supplementary,
}

/// Which negatives a contrastive item carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeMode {
    MajorOnly,
    /// Major negatives plus background embeddings of the preceding frame.
    MajorPlusLocal,
    /// Major negatives plus background embeddings of all previous frames.
    MajorPlusGlobal,
    SupplementaryOnly,
}

impl NegativeMode {
    pub fn all() -> [NegativeMode; 4] {
        [
            NegativeMode::SupplementaryOnly,
            NegativeMode::MajorOnly,
            NegativeMode::MajorPlusGlobal,
            NegativeMode::MajorPlusLocal,
        ]
    }

    fn wants_major(self) -> bool {
        !matches!(self, NegativeMode::SupplementaryOnly)
    }

    fn wants_supplementary(self) -> bool {
        !matches!(self, NegativeMode::MajorOnly)
    }
}

/// Which bank embedding serves as positive / major negative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    /// Momentum-averaged embedding (similarity-guided fusion).
    MomentumAverage,
    /// Most recent raw embedding (the no-momentum ablation).
    Latest,
}

/// Anchor, one positive, tagged negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveItem {
    pub anchor: Embedding,
    pub positive: Embedding,
    pub negatives: Vec<(Embedding, NegativeKind)>,
}

impl ContrastiveItem {
    pub fn major_count(&self) -> usize {
        self.negatives
            .iter()
            .filter(|(_, k)| *k == NegativeKind::Major)
            .count()
    }

    pub fn supplementary_count(&self) -> usize {
        self.negatives.len() - self.major_count()
    }
}

/// Build one contrastive item per instance present both in the frame and in
/// the bank. First-appearance instances yield no item (no positive exists),
/// so frame 0 always yields an empty list.
///
/// Local supplementary negatives are the preceding frame's background pool;
/// global ones are sampled uniformly from all previous frames' pools, capped
/// at the bank's per-frame background capacity so the negative mix stays
/// comparable across modes.
pub fn build_cis<R: Rng>(
    bank: &MemoryBank,
    frame_assignments: &BTreeMap<TrackId, Embedding>,
    frame_index: u64,
    mode: NegativeMode,
    reference: ReferenceKind,
    rng: &mut R,
) -> Vec<ContrastiveItem> {
    let reference_of = |id: TrackId| -> Option<Embedding> {
        let track = bank.track(id)?;
        if track.history.is_empty() {
            return None;
        }
        Some(match reference {
            ReferenceKind::MomentumAverage => track.ma_embedding.clone(),
            ReferenceKind::Latest => track.latest_embedding().cloned()?,
        })
    };

    let supplementary: Vec<Embedding> = if mode.wants_supplementary() {
        match mode {
            NegativeMode::MajorPlusGlobal | NegativeMode::SupplementaryOnly => {
                let mut pool = bank.background_before(frame_index);
                let cap = bank.background_cap();
                if pool.len() > cap {
                    for i in 0..cap {
                        let j = rng.random_range(i..pool.len());
                        pool.swap(i, j);
                    }
                    pool.truncate(cap);
                }
                pool.into_iter().cloned().collect()
            }
            NegativeMode::MajorPlusLocal => frame_index
                .checked_sub(1)
                .map(|prev| bank.background_at(prev).to_vec())
                .unwrap_or_default(),
            NegativeMode::MajorOnly => unreachable!(),
        }
    } else {
        Vec::new()
    };

    let mut items = Vec::new();
    for (&id, anchor) in frame_assignments {
        let Some(positive) = reference_of(id) else {
            continue;
        };
        let mut negatives = Vec::new();
        if mode.wants_major() {
            for other in bank.track_ids() {
                if other == id {
                    continue;
                }
                if let Some(reference) = reference_of(other) {
                    negatives.push((reference, NegativeKind::Major));
                }
            }
        }
        negatives.extend(
            supplementary
                .iter()
                .cloned()
                .map(|e| (e, NegativeKind::Supplementary)),
        );
        items.push(ContrastiveItem { anchor: anchor.clone(), positive, negatives });
    }
    items
}

/// `L = log(1 + Σ_k exp(v·k⁻ − v·k⁺))`, evaluated through log-sum-exp so
/// large logits cannot overflow. Zero when the negative set is empty.
pub fn emb_loss(ci: &ContrastiveItem) -> f64 {
    if ci.negatives.is_empty() {
        return 0.0;
    }
    let pos = ci.anchor.dot(&ci.positive).expect("CI dims consistent");
    let mut logits = Vec::with_capacity(ci.negatives.len() + 1);
    logits.push(0.0);
    for (neg, _) in &ci.negatives {
        logits.push(ci.anchor.dot(neg).expect("CI dims consistent") - pos);
    }
    log_sum_exp(&logits).expect("non-empty logits")
}

/// Analytic gradients of [`emb_loss`].
#[derive(Debug, Clone)]
pub struct LossGradient {
    pub wrt_anchor: Embedding,
    pub wrt_positive: Embedding,
    pub wrt_negatives: Vec<Embedding>,
}

/// `∂L/∂v = Σ_k w_k (k⁻_k − k⁺)` with `w_k = exp(δ_k) / (1 + Σ exp(δ))`,
/// `δ_k = v·k⁻_k − v·k⁺`. Gradients w.r.t. the positive and negatives are
/// returned too, but the trainer keeps the stop-gradient at the bank and
/// only propagates the anchor term.
pub fn emb_loss_grad(ci: &ContrastiveItem) -> LossGradient {
    let dim = ci.anchor.dim();
    if ci.negatives.is_empty() {
        return LossGradient {
            wrt_anchor: Embedding::zeros(dim),
            wrt_positive: Embedding::zeros(dim),
            wrt_negatives: Vec::new(),
        };
    }
    let pos = ci.anchor.dot(&ci.positive).expect("CI dims consistent");
    let deltas: Vec<f64> = ci
        .negatives
        .iter()
        .map(|(neg, _)| ci.anchor.dot(neg).expect("CI dims consistent") - pos)
        .collect();
    // Softmax over {0, δ_1..δ_K}; dropping the leading term leaves w_k.
    let max = deltas.iter().cloned().fold(0.0f64, f64::max);
    let denom = (0.0 - max).exp() + deltas.iter().map(|d| (d - max).exp()).sum::<f64>();
    let weights: Vec<f64> = deltas.iter().map(|d| (d - max).exp() / denom).collect();
    let total_weight: f64 = weights.iter().sum();

    let mut wrt_anchor = Embedding::zeros(dim);
    let mut wrt_negatives = Vec::with_capacity(ci.negatives.len());
    for ((neg, _), w) in ci.negatives.iter().zip(&weights) {
        wrt_anchor.add_scaled(neg, *w);
        wrt_negatives.push(ci.anchor.scaled(*w));
    }
    wrt_anchor.add_scaled(&ci.positive, -total_weight);
    let wrt_positive = ci.anchor.scaled(-total_weight);
    LossGradient { wrt_anchor, wrt_positive, wrt_negatives }
}

/// Arithmetic mean of loss values over all contrastive items; 0 when empty.
pub fn mean_clip_loss(losses: &[f64]) -> f64 {
    if losses.is_empty() {
        return 0.0;
    }
    losses.iter().sum::<f64>() / losses.len() as f64
}
