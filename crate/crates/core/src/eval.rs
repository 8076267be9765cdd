//! Full-catalog ranking metrics, frequency-binned breakdowns, and the
//! augmentation perturbation audit.

use serde::Serialize;

use crate::augment::{op_drop, op_insert, op_substitute, perturb_probs, AugmentContext, ItemOp};
use crate::corpus::{Corpus, FrequencyBins, FrequencyTable, ItemId, LabeledPair};
use crate::error::{FaclError, Result};
use crate::model::{encode, item_logits, Mode, ModelParams};
use crate::rng::{view, RngStream, StreamRng};

/// 1 + the number of items scoring strictly higher, plus the number of
/// equal-scoring items with a smaller index.
pub fn rank_in_scores(scores: &[f64], target: ItemId) -> usize {
    let t = target.index();
    let s = scores[t];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &x)| x > s || (x == s && i < t))
        .count()
}

/// Rank of `target` among all items scored against `h`.
pub fn rank_target(h: &[f64], params: &ModelParams, target: ItemId) -> Result<usize> {
    if target.index() >= params.num_items() {
        return Err(FaclError::OutOfVocabulary {
            item: target.0,
            vocab_size: params.num_items(),
        });
    }
    Ok(rank_in_scores(&item_logits(h, params), target))
}

pub fn hr_at_k(ranks: &[usize], k: usize) -> f64 {
    assert!(k >= 1, "K must be at least 1");
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

pub fn ndcg_at_k(ranks: &[usize], k: usize) -> f64 {
    assert!(k >= 1, "K must be at least 1");
    if ranks.is_empty() {
        return 0.0;
    }
    ranks
        .iter()
        .map(|&r| {
            if r <= k {
                1.0 / ((r + 1) as f64).log2()
            } else {
                0.0
            }
        })
        .sum::<f64>()
        / ranks.len() as f64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RankedResult {
    pub user: String,
    pub target: ItemId,
    pub rank: usize,
}

/// Ranks each pair's target given its input, keeping the last `max_len`
/// input items. Output order follows `pairs`.
pub fn rank_pairs(params: &ModelParams, pairs: &[LabeledPair]) -> Result<Vec<RankedResult>> {
    let max_len = params.config.max_len;
    let run = |p: &LabeledPair| -> Result<RankedResult> {
        let start = p.input.len().saturating_sub(max_len);
        let h = encode::<StreamRng>(&p.input[start..], params, Mode::Eval, None)?;
        Ok(RankedResult {
            user: p.user.clone(),
            target: p.target,
            rank: rank_target(&h, params, p.target)?,
        })
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        pairs.par_iter().map(run).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        pairs.iter().map(run).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BinKind {
    Item,
    User,
}

impl BinKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BinKind::Item => "item",
            BinKind::User => "user",
        }
    }
}

/// Metrics inside one bin; `None` when the bin is empty.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinMetrics {
    pub kind: BinKind,
    pub label: String,
    pub count: usize,
    pub hr10: Option<f64>,
    pub ndcg10: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub num_instances: usize,
    /// `(K, HR@K, NDCG@K)`.
    pub overall: Vec<(usize, f64, f64)>,
    pub item_bins: Vec<BinMetrics>,
    pub user_bins: Vec<BinMetrics>,
}

impl EvalReport {
    pub fn hr(&self, k: usize) -> Option<f64> {
        self.overall.iter().find(|o| o.0 == k).map(|o| o.1)
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.overall.iter().find(|o| o.0 == k).map(|o| o.2)
    }

    /// Rows `(bin_kind, bin_label, metric, value, count)`; empty bins are left out.
    pub fn bin_rows(&self) -> Vec<(String, String, String, f64, usize)> {
        let mut rows = Vec::new();
        for b in self.item_bins.iter().chain(&self.user_bins) {
            for (name, v) in [("hr@10", b.hr10), ("ndcg@10", b.ndcg10)] {
                if let Some(v) = v {
                    rows.push((
                        b.kind.as_str().into(),
                        b.label.clone(),
                        name.into(),
                        v,
                        b.count,
                    ));
                }
            }
        }
        rows
    }
}

fn per_bin(
    kind: BinKind,
    bins: &FrequencyBins,
    assignment: &[usize],
    ranks: &[usize],
) -> Vec<BinMetrics> {
    (0..bins.len())
        .map(|b| {
            let inside: Vec<usize> = assignment
                .iter()
                .zip(ranks)
                .filter(|(&a, _)| a == b)
                .map(|(_, &r)| r)
                .collect();
            let some = !inside.is_empty();
            BinMetrics {
                kind,
                label: bins.label(b).to_string(),
                count: inside.len(),
                hr10: some.then(|| hr_at_k(&inside, 10)),
                ndcg10: some.then(|| ndcg_at_k(&inside, 10)),
            }
        })
        .collect()
}

/// Overall metrics at each K, HR@10/NDCG@10 per training-frequency bin of
/// the target item, and per bin of the user's training length.
/// `user_lengths` is aligned with `results`.
pub fn binned_metrics(
    results: &[RankedResult],
    freq: &FrequencyTable,
    item_bins: &FrequencyBins,
    user_lengths: &[usize],
    user_bins: &FrequencyBins,
    ks: &[usize],
) -> EvalReport {
    assert_eq!(
        results.len(),
        user_lengths.len(),
        "user lengths must align with results"
    );
    let ranks: Vec<usize> = results.iter().map(|r| r.rank).collect();
    let item_assign: Vec<usize> = results
        .iter()
        .map(|r| item_bins.bin_of(freq.count(r.target)))
        .collect();
    let user_assign: Vec<usize> = user_lengths
        .iter()
        .map(|&l| user_bins.bin_of(l as u64))
        .collect();
    EvalReport {
        num_instances: results.len(),
        overall: ks
            .iter()
            .map(|&k| (k, hr_at_k(&ranks, k), ndcg_at_k(&ranks, k)))
            .collect(),
        item_bins: per_bin(BinKind::Item, item_bins, &item_assign, &ranks),
        user_bins: per_bin(BinKind::User, user_bins, &user_assign, &ranks),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditRow {
    pub bin_label: String,
    pub operator: String,
    /// Mean perturbation probability over the bin's occurrences.
    pub expected_perturb_rate: f64,
    pub observed_perturb_rate: f64,
    pub trials: u64,
    #[serde(skip)]
    pub occurrences: u64,
}

/// Applies `op` to training sequences `trials` times (cycling through the
/// corpus) and reports, per item-frequency bin, the fraction of item
/// occurrences the operator perturbed. Span operators are not applied, so
/// probabilities come from the full sequence.
pub fn perturbation_audit(
    train: &Corpus,
    ctx: &AugmentContext<'_>,
    bins: &FrequencyBins,
    op: ItemOp,
    trials: u64,
    seed: u64,
) -> Vec<AuditRow> {
    let k = bins.len();
    let mut expected = vec![0.0; k];
    let mut hits = vec![0u64; k];
    let mut seen = vec![0u64; k];
    let seqs: Vec<&[ItemId]> = train
        .sequences
        .iter()
        .map(|s| s.items.as_slice())
        .filter(|s| !s.is_empty())
        .collect();
    if seqs.is_empty() {
        return Vec::new();
    }
    let bin_of = |v: ItemId| bins.bin_of(ctx.freq.count(v));
    let probs: Vec<Vec<f64>> = seqs
        .iter()
        .map(|s| perturb_probs(s, s.len(), ctx))
        .collect();
    for t in 0..trials {
        let u = (t % seqs.len() as u64) as usize;
        let seq = seqs[u];
        let p = &probs[u];
        let mut rng = RngStream::new(seed, u as u64, t, view::AUDIT).rng();
        let out = match op {
            ItemOp::Drop => op_drop(seq, p, &mut rng),
            ItemOp::Substitute => op_substitute(seq, p, ctx.corr, &mut rng),
            ItemOp::Insert => op_insert(seq, p, ctx.corr, usize::MAX, &mut rng),
        };
        for (&v, &pv) in seq.iter().zip(p) {
            let b = bin_of(v);
            seen[b] += 1;
            expected[b] += pv;
        }
        for &i in &out.positions {
            hits[bin_of(seq[i])] += 1;
        }
    }
    (0..k)
        .map(|b| {
            let n = seen[b].max(1) as f64;
            AuditRow {
                bin_label: bins.label(b).to_string(),
                operator: op.as_str().to_string(),
                expected_perturb_rate: expected[b] / n,
                observed_perturb_rate: hits[b] as f64 / n,
                trials,
                occurrences: seen[b],
            }
        })
        .collect()
}

/// [`perturbation_audit`] for the drop operator.
pub fn drop_audit(
    train: &Corpus,
    ctx: &AugmentContext<'_>,
    bins: &FrequencyBins,
    trials: u64,
    seed: u64,
) -> Vec<AuditRow> {
    perturbation_audit(train, ctx, bins, ItemOp::Drop, trials, seed)
}
