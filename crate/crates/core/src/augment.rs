//! Frequency-adaptive sequence augmentation.
//!
//! Item-oriented operators (drop, substitute, insert) perturb each position
//! with probability `ρ(v) = min(γ·f(v)/f̄_S, cap·γ)`, where `f̄_S` is the mean
//! training frequency of the sequence being perturbed. Subsequence-oriented
//! operators (crop, reorder) act on a contiguous span of length `⌈η·n⌉` that
//! is accepted with probability `min(f_min(span)/f̄, 1)` against the global
//! mean frequency `f̄`, re-sampling on rejection.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::corpus::{Corpus, CorpusStats, FrequencyTable, ItemId};
use crate::error::{FaclError, Result};
use crate::reweight::sequence_avg_frequency;

/// How perturbation and acceptance probabilities are derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentPolicy {
    /// Frequency-scaled ρ and frequency-gated span acceptance.
    Adaptive,
    /// ρ = γ for every item, every span accepted.
    Uniform,
    /// Adaptive, additionally scaled by `|S| / l̄`.
    LenAware,
}

impl std::str::FromStr for AugmentPolicy {
    type Err = FaclError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(Self::Adaptive),
            "uniform" => Ok(Self::Uniform),
            "len_aware" | "len-aware" => Ok(Self::LenAware),
            _ => Err(FaclError::Config(format!(
                "unknown augmentation policy `{s}`"
            ))),
        }
    }
}

impl AugmentPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Adaptive => "adaptive",
            Self::Uniform => "uniform",
            Self::LenAware => "len_aware",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationConfig {
    /// Target augmentation ratio γ.
    pub gamma: f64,
    /// Span length ratio η.
    pub eta: f64,
    /// ρ is capped at `cap_multiplier · γ`.
    pub cap_multiplier: f64,
    /// Upper bound on span draws before falling back to the best span seen.
    pub max_resamples: usize,
    pub correlation_top_k: usize,
    pub correlation_window: usize,
    /// Inserted views are suffix-truncated to this length.
    pub max_len: usize,
    pub policy: AugmentPolicy,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            gamma: 0.3,
            eta: 0.3,
            cap_multiplier: 2.0,
            max_resamples: 20,
            correlation_top_k: 20,
            correlation_window: 5,
            max_len: 50,
            policy: AugmentPolicy::Adaptive,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FaclError::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return bad("eta must lie in (0, 1]");
        }
        if self.cap_multiplier < 1.0 {
            return bad("cap_multiplier must be at least 1");
        }
        if self.max_resamples == 0 || self.correlation_top_k == 0 {
            return bad("max_resamples and correlation_top_k must be positive");
        }
        if self.correlation_window < 2 {
            return bad("correlation_window must be at least 2");
        }
        if self.max_len < 2 {
            return bad("max_len must be at least 2");
        }
        Ok(())
    }
}

/// `min(γ·f(v)/f̄_S, cap·γ)` clamped to `[0, 1]`.
pub fn item_perturb_prob(
    item: ItemId,
    freq: &FrequencyTable,
    seq_avg_freq: f64,
    cfg: &AugmentationConfig,
) -> f64 {
    let ratio = if seq_avg_freq > 0.0 {
        freq.f(item) / seq_avg_freq
    } else {
        1.0
    };
    (cfg.gamma * ratio)
        .min(cfg.cap_multiplier * cfg.gamma)
        .clamp(0.0, 1.0)
}

/// The capped ρ scaled by `|S| / l̄`, clamped to `[0, 1]`.
pub fn len_aware_item_perturb_prob(
    item: ItemId,
    freq: &FrequencyTable,
    seq_avg_freq: f64,
    seq_len: usize,
    stats: &CorpusStats,
    cfg: &AugmentationConfig,
) -> f64 {
    let rho = item_perturb_prob(item, freq, seq_avg_freq, cfg);
    (rho * seq_len as f64 / stats.global_avg_length).clamp(0.0, 1.0)
}

/// Everything view generation reads; all of it is immutable and shareable.
#[derive(Debug, Clone, Copy)]
pub struct AugmentContext<'a> {
    pub cfg: &'a AugmentationConfig,
    pub freq: &'a FrequencyTable,
    pub stats: &'a CorpusStats,
    pub corr: &'a CorrelationIndex,
}

/// Per-position probabilities for `seq` under the configured policy.
/// `user_len` is the length of the user's sequence before any
/// subsequence operator ran; only the length-aware policy reads it.
pub fn perturb_probs(seq: &[ItemId], user_len: usize, ctx: &AugmentContext<'_>) -> Vec<f64> {
    let cfg = ctx.cfg;
    match cfg.policy {
        AugmentPolicy::Uniform => vec![cfg.gamma.clamp(0.0, 1.0); seq.len()],
        AugmentPolicy::Adaptive => {
            let avg = sequence_avg_frequency(seq, ctx.freq);
            seq.iter()
                .map(|&v| item_perturb_prob(v, ctx.freq, avg, cfg))
                .collect()
        }
        AugmentPolicy::LenAware => {
            let avg = sequence_avg_frequency(seq, ctx.freq);
            seq.iter()
                .map(|&v| len_aware_item_perturb_prob(v, ctx.freq, avg, user_len, ctx.stats, cfg))
                .collect()
        }
    }
}

/// Output of an item-oriented operator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemOpOutcome {
    pub items: Vec<ItemId>,
    /// Input positions that were dropped, substituted, or followed by an insertion.
    pub positions: Vec<usize>,
}

/// Drops item `i` iff its uniform draw falls below `probs[i]`. If nothing
/// survives the last item is kept.
pub fn op_drop<R: Rng + ?Sized>(seq: &[ItemId], probs: &[f64], rng: &mut R) -> ItemOpOutcome {
    debug_assert_eq!(seq.len(), probs.len());
    let mut items = Vec::with_capacity(seq.len());
    let mut positions = Vec::new();
    for (i, (&v, &p)) in seq.iter().zip(probs).enumerate() {
        let z: f64 = rng.random();
        if z < p {
            positions.push(i);
        } else {
            items.push(v);
        }
    }
    if items.is_empty() {
        if let Some(&last) = seq.last() {
            items.push(last);
            positions.pop();
        }
    }
    ItemOpOutcome { items, positions }
}

/// Replaces item `i` by a uniformly chosen correlated neighbour iff its draw
/// falls below `probs[i]`. Items without neighbours are left alone.
pub fn op_substitute<R: Rng + ?Sized>(
    seq: &[ItemId],
    probs: &[f64],
    corr: &CorrelationIndex,
    rng: &mut R,
) -> ItemOpOutcome {
    let mut items = Vec::with_capacity(seq.len());
    let mut positions = Vec::new();
    for (i, (&v, &p)) in seq.iter().zip(probs).enumerate() {
        let z: f64 = rng.random();
        match (z < p).then(|| corr.sample_neighbor(v, rng)).flatten() {
            Some(n) => {
                items.push(n);
                positions.push(i);
            }
            None => items.push(v),
        }
    }
    ItemOpOutcome { items, positions }
}

/// Inserts a correlated neighbour right after item `i` iff its draw falls
/// below `probs[i]`; the result keeps its last `max_len` items.
pub fn op_insert<R: Rng + ?Sized>(
    seq: &[ItemId],
    probs: &[f64],
    corr: &CorrelationIndex,
    max_len: usize,
    rng: &mut R,
) -> ItemOpOutcome {
    let mut items = Vec::with_capacity(seq.len() * 2);
    let mut positions = Vec::new();
    for (i, (&v, &p)) in seq.iter().zip(probs).enumerate() {
        items.push(v);
        let z: f64 = rng.random();
        if let Some(n) = (z < p).then(|| corr.sample_neighbor(v, rng)).flatten() {
            items.push(n);
            positions.push(i);
        }
    }
    if items.len() > max_len {
        items.drain(..items.len() - max_len);
    }
    ItemOpOutcome { items, positions }
}

/// A contiguous span `[start, start + len)` (0-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// `⌈η·n⌉`, at least one and at most `n`.
pub fn span_length(n: usize, eta: f64) -> usize {
    // The small offset keeps products like 0.3 * 10 from rounding up to 4.
    ((eta * n as f64 - 1e-9).ceil() as usize).clamp(1, n.max(1))
}

/// Uniform start over all positions that fit a span of `⌈η·n⌉`.
pub fn sample_subsequence<R: Rng + ?Sized>(n: usize, eta: f64, rng: &mut R) -> Span {
    assert!(n >= 1, "cannot sample a span from an empty sequence");
    let len = span_length(n, eta);
    let start = rng.random_range(0..=n - len);
    Span { start, len }
}

/// `min(f_min(span) / f̄, 1)` with the global mean frequency.
pub fn subsequence_accept_prob(span: &[ItemId], freq: &FrequencyTable, stats: &CorpusStats) -> f64 {
    let fmin = span
        .iter()
        .map(|&v| freq.f(v))
        .fold(f64::INFINITY, f64::min);
    (fmin / stats.global_avg_frequency).min(1.0)
}

/// Acceptance scaled by `|S| / l̄`, clamped to `[0, 1]`.
pub fn len_aware_accept_prob(
    span: &[ItemId],
    freq: &FrequencyTable,
    stats: &CorpusStats,
    seq_len: usize,
) -> f64 {
    let a = subsequence_accept_prob(span, freq, stats);
    (a * seq_len as f64 / stats.global_avg_length).clamp(0.0, 1.0)
}

fn accept_prob(span: &[ItemId], user_len: usize, ctx: &AugmentContext<'_>) -> f64 {
    match ctx.cfg.policy {
        AugmentPolicy::Uniform => 1.0,
        AugmentPolicy::Adaptive => subsequence_accept_prob(span, ctx.freq, ctx.stats),
        AugmentPolicy::LenAware => len_aware_accept_prob(span, ctx.freq, ctx.stats, user_len),
    }
}

/// Rejection-samples a span. After `max_resamples` rejections the span with
/// the highest acceptance probability seen so far is returned.
pub fn accepted_subsequence<R: Rng + ?Sized>(
    seq: &[ItemId],
    ctx: &AugmentContext<'_>,
    rng: &mut R,
) -> Span {
    let mut best: Option<(f64, Span)> = None;
    for _ in 0..ctx.cfg.max_resamples {
        let span = sample_subsequence(seq.len(), ctx.cfg.eta, rng);
        let alpha = accept_prob(&seq[span.range()], seq.len(), ctx);
        let z: f64 = rng.random();
        if z < alpha {
            return span;
        }
        if best.is_none_or(|(a, _)| alpha > a) {
            best = Some((alpha, span));
        }
    }
    best.expect("max_resamples is at least one").1
}

pub fn op_crop(seq: &[ItemId], span: Span) -> Vec<ItemId> {
    seq[span.range()].to_vec()
}

/// Uniformly permutes the span, leaving the rest in place.
pub fn op_reorder<R: Rng + ?Sized>(seq: &[ItemId], span: Span, rng: &mut R) -> Vec<ItemId> {
    let mut out = seq.to_vec();
    out[span.range()].shuffle(rng);
    out
}

/// Top-k correlated items per item.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrelationIndex {
    neighbors: Vec<Vec<(ItemId, f64)>>,
}

const INDEX_HEADER: &str = "facl-correlation-index v1";

impl CorrelationIndex {
    pub fn from_neighbors(neighbors: Vec<Vec<(ItemId, f64)>>) -> Self {
        Self { neighbors }
    }

    pub fn neighbors(&self, item: ItemId) -> &[(ItemId, f64)] {
        self.neighbors.get(item.index()).map_or(&[], Vec::as_slice)
    }

    pub fn num_items(&self) -> usize {
        self.neighbors.len()
    }

    fn sample_neighbor<R: Rng + ?Sized>(&self, item: ItemId, rng: &mut R) -> Option<ItemId> {
        let list = self.neighbors(item);
        if list.is_empty() {
            None
        } else {
            Some(list[rng.random_range(0..list.len())].0)
        }
    }

    /// Text sidecar: a version header, then one `item<TAB>n:score ...` line
    /// per item using dense indices.
    pub fn to_text(&self) -> String {
        let mut out = format!("{INDEX_HEADER}\t{}\n", self.neighbors.len());
        for (i, list) in self.neighbors.iter().enumerate() {
            let _ = write!(out, "{i}\t");
            for (k, (n, s)) in list.iter().enumerate() {
                if k > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{}:{s:e}", n.0);
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let err = |line: usize, m: &str| FaclError::Parse {
            line,
            message: m.to_string(),
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| err(1, "missing header"))?;
        let (tag, count) = header
            .split_once('\t')
            .ok_or_else(|| err(1, "malformed header"))?;
        if tag != INDEX_HEADER {
            return Err(err(1, &format!("unsupported header `{tag}`")));
        }
        let count: usize = count.parse().map_err(|_| err(1, "bad item count"))?;
        let mut neighbors = vec![Vec::new(); count];
        for (k, line) in lines.enumerate() {
            let lineno = k + 2;
            let (item, rest) = line
                .split_once('\t')
                .ok_or_else(|| err(lineno, "missing tab"))?;
            let item: usize = item.parse().map_err(|_| err(lineno, "bad item index"))?;
            if item >= count {
                return Err(err(lineno, "item index out of range"));
            }
            for tok in rest.split_whitespace() {
                let (n, s) = tok
                    .split_once(':')
                    .ok_or_else(|| err(lineno, "bad neighbour"))?;
                let n: u32 = n.parse().map_err(|_| err(lineno, "bad neighbour index"))?;
                let s: f64 = s.parse().map_err(|_| err(lineno, "bad score"))?;
                neighbors[item].push((ItemId(n), s));
            }
        }
        Ok(Self { neighbors })
    }
}

/// Windowed co-occurrence counts normalized by `sqrt(f(a)·f(b))`.
/// Two positions co-occur when they are fewer than `window` apart.
pub fn build_correlation_index(
    train: &Corpus,
    freq: &FrequencyTable,
    window: usize,
    top_k: usize,
) -> CorrelationIndex {
    let num_items = train.vocab.len();
    let mut co: Vec<HashMap<u32, u64>> = vec![HashMap::new(); num_items];
    for s in &train.sequences {
        let items = &s.items;
        for i in 0..items.len() {
            for j in i + 1..items.len().min(i + window) {
                let (a, b) = (items[i], items[j]);
                if a != b {
                    *co[a.index()].entry(b.0).or_default() += 1;
                    *co[b.index()].entry(a.0).or_default() += 1;
                }
            }
        }
    }
    let neighbors = co
        .into_iter()
        .enumerate()
        .map(|(a, row)| {
            let fa = freq.f(ItemId(a as u32));
            let mut list: Vec<(ItemId, f64)> = row
                .into_iter()
                .map(|(b, c)| {
                    let fb = freq.f(ItemId(b));
                    (ItemId(b), c as f64 / (fa * fb).sqrt())
                })
                .collect();
            list.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
            list.truncate(top_k);
            list
        })
        .collect();
    CorrelationIndex { neighbors }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsequenceOp {
    Crop,
    Reorder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemOp {
    Drop,
    Substitute,
    Insert,
}

impl ItemOp {
    pub fn as_str(self) -> &'static str {
        match self {
            ItemOp::Drop => "drop",
            ItemOp::Substitute => "substitute",
            ItemOp::Insert => "insert",
        }
    }
}

impl std::str::FromStr for ItemOp {
    type Err = FaclError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drop" => Ok(Self::Drop),
            "substitute" => Ok(Self::Substitute),
            "insert" => Ok(Self::Insert),
            _ => Err(FaclError::Config(format!("unknown item operator `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ViewProvenance {
    pub subsequence_op: SubsequenceOp,
    pub span: Span,
    pub item_op: ItemOp,
    /// Positions in the intermediate (post-span-operator) sequence.
    pub positions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AugmentedViewPair {
    pub view1: Vec<ItemId>,
    pub view2: Vec<ItemId>,
    pub provenance: [ViewProvenance; 2],
}

/// One view: a span operator, then an item operator whose probabilities are
/// recomputed on the span operator's output.
pub fn generate_view<R: Rng + ?Sized>(
    seq: &[ItemId],
    ctx: &AugmentContext<'_>,
    rng: &mut R,
) -> (Vec<ItemId>, ViewProvenance) {
    assert!(!seq.is_empty(), "cannot augment an empty sequence");
    let subsequence_op = if rng.random_range(0..2) == 0 {
        SubsequenceOp::Crop
    } else {
        SubsequenceOp::Reorder
    };
    let item_op = match rng.random_range(0..3) {
        0 => ItemOp::Drop,
        1 => ItemOp::Substitute,
        _ => ItemOp::Insert,
    };
    let span = accepted_subsequence(seq, ctx, rng);
    let mid = match subsequence_op {
        SubsequenceOp::Crop => op_crop(seq, span),
        SubsequenceOp::Reorder => op_reorder(seq, span, rng),
    };
    let probs = perturb_probs(&mid, seq.len(), ctx);
    let out = match item_op {
        ItemOp::Drop => op_drop(&mid, &probs, rng),
        ItemOp::Substitute => op_substitute(&mid, &probs, ctx.corr, rng),
        ItemOp::Insert => op_insert(&mid, &probs, ctx.corr, ctx.cfg.max_len, rng),
    };
    (
        out.items,
        ViewProvenance {
            subsequence_op,
            span,
            item_op,
            positions: out.positions,
        },
    )
}

/// Two independently drawn views of `seq`.
pub fn generate_views<R: Rng + ?Sized>(
    seq: &[ItemId],
    ctx: &AugmentContext<'_>,
    rng1: &mut R,
    rng2: &mut R,
) -> AugmentedViewPair {
    let (view1, p1) = generate_view(seq, ctx, rng1);
    let (view2, p2) = generate_view(seq, ctx, rng2);
    AugmentedViewPair {
        view1,
        view2,
        provenance: [p1, p2],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use proptest::prelude::*;

    fn ids(v: &[u32]) -> Vec<ItemId> {
        v.iter().map(|&i| ItemId(i)).collect()
    }

    fn cfg(gamma: f64) -> AugmentationConfig {
        AugmentationConfig {
            gamma,
            ..Default::default()
        }
    }

    fn rng(k: u64) -> crate::rng::StreamRng {
        RngStream::new(17, k, 0, 0).rng()
    }

    #[test]
    fn rho_examples() {
        let f = FrequencyTable::from_counts(vec![5, 100, 10]);
        let c = cfg(0.3);
        assert!((item_perturb_prob(ItemId(0), &f, 10.0, &c) - 0.15).abs() < 1e-15);
        assert!((item_perturb_prob(ItemId(1), &f, 10.0, &c) - 0.6).abs() < 1e-15);
        assert_eq!(item_perturb_prob(ItemId(2), &f, 10.0, &c), 0.3);
    }

    #[test]
    fn rho_clamped_to_one() {
        let f = FrequencyTable::from_counts(vec![100]);
        let c = AugmentationConfig {
            gamma: 0.8,
            ..Default::default()
        };
        assert_eq!(item_perturb_prob(ItemId(0), &f, 10.0, &c), 1.0);
    }

    #[test]
    fn len_aware_rho_examples() {
        let f = FrequencyTable::from_counts(vec![10, 10]);
        let c = cfg(0.3);
        let st = CorpusStats {
            global_avg_frequency: 10.0,
            global_avg_length: 8.0,
        };
        assert_eq!(
            len_aware_item_perturb_prob(ItemId(0), &f, 10.0, 8, &st, &c),
            item_perturb_prob(ItemId(0), &f, 10.0, &c)
        );
        assert!(
            (len_aware_item_perturb_prob(ItemId(0), &f, 10.0, 4, &st, &c) - 0.15).abs() < 1e-15
        );
        let c2 = cfg(0.2);
        assert_eq!(
            len_aware_item_perturb_prob(ItemId(0), &f, 10.0, 80, &st, &c2),
            1.0
        );
    }

    #[test]
    fn accept_prob_examples() {
        let f = FrequencyTable::from_counts(vec![10, 5, 30, 40]);
        let st = CorpusStats {
            global_avg_frequency: 10.0,
            global_avg_length: 6.0,
        };
        assert_eq!(subsequence_accept_prob(&ids(&[0, 2]), &f, &st), 1.0);
        assert_eq!(subsequence_accept_prob(&ids(&[2, 1, 3]), &f, &st), 0.5);
        assert_eq!(subsequence_accept_prob(&ids(&[2]), &f, &st), 1.0);
        // len-aware: α = 0.5, |S| = l̄/2 → 0.25; α = 0.8, |S| = 2 l̄ → 1
        assert_eq!(len_aware_accept_prob(&ids(&[1]), &f, &st, 6), 0.5);
        assert_eq!(len_aware_accept_prob(&ids(&[1]), &f, &st, 3), 0.25);
        let f8 = FrequencyTable::from_counts(vec![8]);
        assert_eq!(len_aware_accept_prob(&ids(&[0]), &f8, &st, 12), 1.0);
    }

    #[test]
    fn drop_examples() {
        let seq = ids(&[1, 2, 3]);
        let mut r = rng(0);
        assert_eq!(op_drop(&seq, &[0.0; 3], &mut r).items, seq);
        let all = op_drop(&seq, &[1.0; 3], &mut r);
        assert_eq!(all.items, ids(&[3]));
        assert_eq!(all.positions, vec![0, 1]);
    }

    #[test]
    fn drop_survivor_count_is_binomial() {
        // E[survivors] = 700 per trial, so the mean over many trials should be tight.
        let seq: Vec<ItemId> = (0..1000).map(ItemId).collect();
        let probs = vec![0.3; 1000];
        let mut r = rng(1);
        let trials = 2_000;
        let total: usize = (0..trials)
            .map(|_| op_drop(&seq, &probs, &mut r).items.len())
            .sum();
        let mean = total as f64 / trials as f64;
        assert!((mean - 700.0).abs() < 0.03 * 700.0, "{mean}");
    }

    fn chain_index(n: u32) -> CorrelationIndex {
        CorrelationIndex::from_neighbors((0..n).map(|i| vec![(ItemId((i + 1) % n), 1.0)]).collect())
    }

    #[test]
    fn substitute_examples() {
        let seq = ids(&[0, 1, 2]);
        let idx = chain_index(3);
        let mut r = rng(2);
        assert_eq!(op_substitute(&seq, &[0.0; 3], &idx, &mut r).items, seq);
        assert_eq!(
            op_substitute(&seq, &[1.0; 3], &idx, &mut r).items,
            ids(&[1, 2, 0])
        );
        let empty = CorrelationIndex::from_neighbors(vec![vec![]; 3]);
        assert_eq!(op_substitute(&seq, &[1.0; 3], &empty, &mut r).items, seq);
    }

    #[test]
    fn substitute_count_is_binomial() {
        let n = 10_000u32;
        let seq: Vec<ItemId> = (0..n).map(ItemId).collect();
        let idx = chain_index(n);
        let out = op_substitute(&seq, &vec![0.5; n as usize], &idx, &mut rng(3));
        let k = out.positions.len() as f64;
        assert!((k - 5000.0).abs() < 150.0, "{k}");
        assert_eq!(out.items.len(), seq.len());
    }

    #[test]
    fn insert_examples() {
        let idx = CorrelationIndex::from_neighbors(vec![vec![], vec![(ItemId(2), 1.0)], vec![]]);
        let mut r = rng(4);
        assert_eq!(
            op_insert(&ids(&[1]), &[0.0], &idx, 50, &mut r).items,
            ids(&[1])
        );
        assert_eq!(
            op_insert(&ids(&[1]), &[1.0], &idx, 50, &mut r).items,
            ids(&[1, 2])
        );
        assert_eq!(
            op_insert(&ids(&[1, 1]), &[1.0; 2], &idx, 3, &mut r).items,
            ids(&[2, 1, 2])
        );
    }

    #[test]
    fn insert_inflation_is_binomial() {
        let n = 10_000u32;
        let seq: Vec<ItemId> = (0..n).map(ItemId).collect();
        let out = op_insert(
            &seq,
            &vec![0.3; n as usize],
            &chain_index(n),
            usize::MAX,
            &mut rng(5),
        );
        let len = out.items.len() as f64;
        assert!((len - 13_000.0).abs() < 0.03 * 13_000.0, "{len}");
    }

    #[test]
    fn span_lengths() {
        assert_eq!(span_length(10, 0.3), 3);
        assert_eq!(span_length(1, 0.3), 1);
        assert_eq!(span_length(10, 1.0), 10);
        assert_eq!(span_length(7, 0.5), 4);
        assert_eq!(span_length(20, 0.1), 2);
    }

    #[test]
    fn span_start_is_uniform() {
        let mut r = rng(6);
        let trials = 100_000;
        let mut hist = [0usize; 8];
        for _ in 0..trials {
            let s = sample_subsequence(10, 0.3, &mut r);
            assert_eq!(s.len, 3);
            hist[s.start] += 1;
        }
        for h in hist {
            let p = h as f64 / trials as f64;
            assert!((p - 0.125).abs() < 0.02, "{p}");
        }
        assert_eq!(
            sample_subsequence(1, 0.7, &mut r),
            Span { start: 0, len: 1 }
        );
        assert_eq!(
            sample_subsequence(10, 1.0, &mut r),
            Span { start: 0, len: 10 }
        );
    }

    fn ctx_parts(counts: Vec<u64>, avg: f64) -> (FrequencyTable, CorpusStats, CorrelationIndex) {
        let n = counts.len() as u32;
        (
            FrequencyTable::from_counts(counts),
            CorpusStats {
                global_avg_frequency: avg,
                global_avg_length: 6.0,
            },
            chain_index(n),
        )
    }

    #[test]
    fn uniform_frequency_accepts_first_span() {
        let (f, st, corr) = ctx_parts(vec![4; 6], 4.0);
        let c = AugmentationConfig {
            max_resamples: 1,
            ..cfg(0.3)
        };
        let ctx = AugmentContext {
            cfg: &c,
            freq: &f,
            stats: &st,
            corr: &corr,
        };
        let seq = ids(&[0, 1, 2, 3, 4, 5]);
        for k in 0..50 {
            let mut a = rng(100 + k);
            let mut b = rng(100 + k);
            let span = accepted_subsequence(&seq, &ctx, &mut a);
            assert_eq!(span, sample_subsequence(6, c.eta, &mut b));
        }
    }

    #[test]
    fn single_resample_returns_the_draw() {
        let (f, st, corr) = ctx_parts(vec![1, 100, 100, 100, 100, 100], 100.0);
        let c = AugmentationConfig {
            max_resamples: 1,
            ..cfg(0.3)
        };
        let ctx = AugmentContext {
            cfg: &c,
            freq: &f,
            stats: &st,
            corr: &corr,
        };
        let seq = ids(&[0, 1, 2, 3, 4, 5]);
        for k in 0..50 {
            let mut a = rng(200 + k);
            let mut b = rng(200 + k);
            assert_eq!(
                accepted_subsequence(&seq, &ctx, &mut a),
                sample_subsequence(6, c.eta, &mut b)
            );
        }
    }

    #[test]
    fn crop_and_reorder_examples() {
        let seq = ids(&[1, 2, 3, 4]);
        assert_eq!(op_crop(&seq, Span { start: 0, len: 4 }), seq);
        assert_eq!(op_crop(&seq, Span { start: 1, len: 2 }), ids(&[2, 3]));
        let mut r = rng(7);
        assert_eq!(op_reorder(&seq, Span { start: 2, len: 1 }, &mut r), seq);
        let trials = 100_000;
        let swapped = (0..trials)
            .filter(|_| op_reorder(&seq, Span { start: 1, len: 2 }, &mut r) == ids(&[1, 3, 2, 4]))
            .count();
        let p = swapped as f64 / trials as f64;
        assert!((p - 0.5).abs() < 0.02 * 0.5, "{p}");
    }

    fn brute_force_scores(train: &Corpus, freq: &FrequencyTable, window: usize) -> Vec<Vec<f64>> {
        let n = train.vocab.len();
        let mut m = vec![vec![0.0; n]; n];
        for a in 0..n {
            for b in 0..n {
                if a == b {
                    continue;
                }
                let mut c = 0u64;
                for s in &train.sequences {
                    for i in 0..s.len() {
                        for j in 0..s.len() {
                            let close = i != j && i.abs_diff(j) < window;
                            if close && i < j {
                                let (x, y) = (s.items[i].index(), s.items[j].index());
                                if (x == a && y == b) || (x == b && y == a) {
                                    c += 1;
                                }
                            }
                        }
                    }
                }
                let fa = freq.f(ItemId(a as u32));
                let fb = freq.f(ItemId(b as u32));
                m[a][b] = if c == 0 {
                    0.0
                } else {
                    c as f64 / (fa * fb).sqrt()
                };
            }
        }
        m
    }

    #[test]
    fn correlation_two_items() {
        let train = Corpus::from_raw(vec![("u".into(), vec![1, 2])]);
        let f = crate::corpus::build_frequency_table(&train);
        let idx = build_correlation_index(&train, &f, 2, 20);
        assert_eq!(idx.neighbors(ItemId(0)), &[(ItemId(1), 1.0)]);
        assert_eq!(idx.neighbors(ItemId(1)), &[(ItemId(0), 1.0)]);
    }

    #[test]
    fn isolated_item_has_no_neighbors() {
        let train = Corpus::from_raw(vec![("u".into(), vec![1, 2]), ("v".into(), vec![3, 3])]);
        let f = crate::corpus::build_frequency_table(&train);
        let idx = build_correlation_index(&train, &f, 5, 20);
        assert!(idx.neighbors(ItemId(2)).is_empty());
    }

    #[test]
    fn correlation_matches_brute_force() {
        let train = Corpus::from_raw(vec![
            ("a".into(), vec![1, 2, 3, 1, 4, 5, 2]),
            ("b".into(), vec![5, 4, 4, 3, 2, 1]),
            ("c".into(), vec![2, 2, 5, 1]),
            ("d".into(), vec![3, 5, 3, 5, 3, 1, 1, 4]),
        ]);
        let f = crate::corpus::build_frequency_table(&train);
        for window in [2, 3, 5] {
            let oracle = brute_force_scores(&train, &f, window);
            for top_k in [1, 2, 4] {
                let idx = build_correlation_index(&train, &f, window, top_k);
                for a in 0..5usize {
                    let mut expected: Vec<(ItemId, f64)> = (0..5)
                        .filter(|&b| oracle[a][b] > 0.0)
                        .map(|b| (ItemId(b as u32), oracle[a][b]))
                        .collect();
                    expected.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
                    expected.truncate(top_k);
                    let got = idx.neighbors(ItemId(a as u32));
                    assert_eq!(got.len(), expected.len());
                    for (g, e) in got.iter().zip(&expected) {
                        assert_eq!(g.0, e.0);
                        assert!((g.1 - e.1).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn index_sidecar_round_trip() {
        let train = Corpus::from_raw(vec![
            ("a".into(), vec![1, 2, 3, 1, 4]),
            ("b".into(), vec![9]),
        ]);
        let f = crate::corpus::build_frequency_table(&train);
        let idx = build_correlation_index(&train, &f, 3, 2);
        let back = CorrelationIndex::from_text(&idx.to_text()).unwrap();
        assert_eq!(back, idx);
        assert!(CorrelationIndex::from_text("something else\t3\n").is_err());
    }

    #[test]
    fn degenerate_config_leaves_views_unchanged() {
        let (f, st, corr) = ctx_parts(vec![3, 9, 1, 4, 4, 4], 4.0);
        let c = AugmentationConfig {
            gamma: 0.0,
            eta: 1.0,
            ..Default::default()
        };
        let ctx = AugmentContext {
            cfg: &c,
            freq: &f,
            stats: &st,
            corr: &corr,
        };
        let seq = ids(&[2]);
        let pair = generate_views(&seq, &ctx, &mut rng(8), &mut rng(9));
        assert_eq!(pair.view1, seq);
        assert_eq!(pair.view2, seq);
    }

    #[test]
    fn views_are_deterministic() {
        let (f, st, corr) = ctx_parts(vec![3, 9, 1, 4, 4, 4], 4.0);
        let c = cfg(0.5);
        let ctx = AugmentContext {
            cfg: &c,
            freq: &f,
            stats: &st,
            corr: &corr,
        };
        let seq = ids(&[0, 1, 2, 3, 4, 5, 1, 0]);
        let run = || {
            let mut a = RngStream::new(5, 3, 2, crate::rng::view::AUG_FIRST).rng();
            let mut b = RngStream::new(5, 3, 2, crate::rng::view::AUG_SECOND).rng();
            generate_views(&seq, &ctx, &mut a, &mut b)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn operator_choice_is_uniform() {
        let (f, st, corr) = ctx_parts(vec![3, 9, 1, 4, 4, 4], 4.0);
        let c = cfg(0.3);
        let ctx = AugmentContext {
            cfg: &c,
            freq: &f,
            stats: &st,
            corr: &corr,
        };
        let seq = ids(&[0, 1, 2, 3, 4, 5]);
        let mut r = rng(10);
        let trials = 10_000;
        let mut crop = 0;
        let mut items = [0usize; 3];
        for _ in 0..trials {
            let (_, p) = generate_view(&seq, &ctx, &mut r);
            crop += (p.subsequence_op == SubsequenceOp::Crop) as usize;
            items[p.item_op as usize] += 1;
        }
        assert!((crop as f64 / trials as f64 - 0.5).abs() < 0.03);
        for k in items {
            assert!((k as f64 / trials as f64 - 1.0 / 3.0).abs() < 0.03);
        }
    }

    proptest! {
        #[test]
        fn rho_cap_monotone_protect(
            gamma in 0.0f64..1.0, cap in 1.0f64..4.0,
            fv in 1u64..1000, favg in 1.0f64..1000.0, bump in 1u64..100,
        ) {
            let c = AugmentationConfig { gamma, cap_multiplier: cap, ..Default::default() };
            let f = FrequencyTable::from_counts(vec![fv, fv + bump]);
            let r0 = item_perturb_prob(ItemId(0), &f, favg, &c);
            let r1 = item_perturb_prob(ItemId(1), &f, favg, &c);
            prop_assert!(r0 <= (cap * gamma).min(1.0));
            prop_assert!(r0 <= r1);
            if (fv as f64) < favg && gamma > 0.0 {
                prop_assert!(r0 < gamma);
            }
        }

        #[test]
        fn operator_structure(
            raw in proptest::collection::vec(0u32..6, 1..20),
            p in 0.0f64..1.0, seed in 0u64..1000, eta in 0.05f64..1.0,
        ) {
            let seq = ids(&raw);
            let probs = vec![p; seq.len()];
            let corr = chain_index(6);
            let mut r = rng(seed);

            let d = op_drop(&seq, &probs, &mut r).items;
            prop_assert!(!d.is_empty());
            prop_assert!(is_subsequence(&d, &seq));

            let s = op_substitute(&seq, &probs, &corr, &mut r);
            prop_assert_eq!(s.items.len(), seq.len());
            for (k, (a, b)) in s.items.iter().zip(&seq).enumerate() {
                prop_assert_eq!(a == b, !s.positions.contains(&k));
            }

            let ins = op_insert(&seq, &probs, &corr, usize::MAX, &mut r).items;
            prop_assert!(is_subsequence(&seq, &ins));

            let span = sample_subsequence(seq.len(), eta, &mut r);
            let crop = op_crop(&seq, span);
            prop_assert!(seq.windows(crop.len()).any(|w| w == crop.as_slice()));

            let mut re = op_reorder(&seq, span, &mut r);
            let mut orig = seq.clone();
            prop_assert_eq!(&re[..span.start], &orig[..span.start]);
            prop_assert_eq!(&re[span.start + span.len..], &orig[span.start + span.len..]);
            re.sort();
            orig.sort();
            prop_assert_eq!(re, orig);
        }
    }

    fn is_subsequence(needle: &[ItemId], hay: &[ItemId]) -> bool {
        let mut it = hay.iter();
        needle.iter().all(|x| it.any(|y| y == x))
    }
}
