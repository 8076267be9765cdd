//! Sequence-level loss weights from item rarity and history length.

use crate::corpus::{CorpusStats, FrequencyTable, ItemId};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReweightConfig {
    /// Exponent; zero makes every weight exactly one.
    pub beta: f64,
    /// Optional `[min, max]` clamp on the weight.
    pub clip: Option<(f64, f64)>,
    /// Divide weights by their batch mean. Off by default.
    pub normalize_batch: bool,
}

impl Default for ReweightConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            clip: Some((0.1, 10.0)),
            normalize_batch: false,
        }
    }
}

/// Mean training frequency over the positions of `seq`.
pub fn sequence_avg_frequency(seq: &[ItemId], freq: &FrequencyTable) -> f64 {
    if seq.is_empty() {
        return 0.0;
    }
    seq.iter().map(|&v| freq.f(v)).sum::<f64>() / seq.len() as f64
}

/// `((f̄ / f̄(S)) · (l̄ / |S|))^β`, optionally clipped.
pub fn sequence_weight(
    seq: &[ItemId],
    freq: &FrequencyTable,
    stats: &CorpusStats,
    cfg: &ReweightConfig,
) -> f64 {
    let base = weight_base(sequence_avg_frequency(seq, freq), seq.len(), stats);
    let w = base.powf(cfg.beta);
    match cfg.clip {
        Some((lo, hi)) => w.clamp(lo, hi),
        None => w,
    }
}

/// The quantity raised to β.
pub fn weight_base(seq_avg_freq: f64, seq_len: usize, stats: &CorpusStats) -> f64 {
    assert!(
        seq_avg_freq > 0.0 && seq_len > 0,
        "weight of an empty or unseen sequence"
    );
    (stats.global_avg_frequency / seq_avg_freq) * (stats.global_avg_length / seq_len as f64)
}

/// Divides by the mean so the batch average is one.
pub fn normalize_weights(weights: &mut [f64]) {
    let mean = weights.iter().sum::<f64>() / weights.len().max(1) as f64;
    if mean > 0.0 {
        weights.iter_mut().for_each(|w| *w /= mean);
    }
}
