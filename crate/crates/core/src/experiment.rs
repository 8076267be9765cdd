//! End-to-end pipeline shared by the command line and the tests: filter,
//! truncate, split, count, index, train, evaluate.

use std::collections::HashMap;

use crate::augment::{build_correlation_index, CorrelationIndex};
use crate::config::{BinEdges, RunConfig};
use crate::corpus::{
    apply_five_core_filter, build_frequency_table, corpus_stats, leave_one_out_split,
    tercile_edges, truncate_sequences, Corpus, CorpusStats, FrequencyBins, FrequencyTable,
    LabeledPair, Split,
};
use crate::error::Result;
use crate::eval::{binned_metrics, rank_pairs, EvalReport, RankedResult};
use crate::model::{init_params, ModelParams};
use crate::rng::{view, RngStream};
use crate::trainer::{
    build_examples, fit, EpochRecord, FitOutcome, TrainData, TrainingExample, Variant,
};

/// A corpus after preprocessing, with everything derived from its training split.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub corpus: Corpus,
    pub split: Split,
    pub freq: FrequencyTable,
    pub stats: CorpusStats,
    pub corr: CorrelationIndex,
}

/// `min_count`-core filter, suffix truncation to the model's `max_len`,
/// leave-one-out split, then training-split frequencies and the
/// correlation index.
pub fn prepare(raw: &Corpus, cfg: &RunConfig) -> Result<Prepared> {
    let filtered = apply_five_core_filter(raw, cfg.min_count)?;
    let corpus = truncate_sequences(&filtered, cfg.model.max_len);
    let split = leave_one_out_split(&corpus);
    let freq = build_frequency_table(&split.train);
    let stats = corpus_stats(&split.train, &freq)?;
    let corr = build_correlation_index(
        &split.train,
        &freq,
        cfg.augment.correlation_window,
        cfg.augment.correlation_top_k,
    );
    Ok(Prepared {
        corpus,
        split,
        freq,
        stats,
        corr,
    })
}

fn bins_from(edges: &BinEdges, counts: impl IntoIterator<Item = u64>) -> Result<FrequencyBins> {
    match edges {
        BinEdges::Terciles => FrequencyBins::new(tercile_edges(counts)),
        BinEdges::Fixed(e) => FrequencyBins::new(e.clone()),
    }
}

impl Prepared {
    pub fn num_items(&self) -> usize {
        self.corpus.vocab.len()
    }

    pub fn data(&self) -> TrainData<'_> {
        TrainData {
            freq: &self.freq,
            stats: &self.stats,
            corr: &self.corr,
        }
    }

    /// Item bins over training counts; terciles use items seen in training.
    pub fn item_bins(&self, edges: &BinEdges) -> Result<FrequencyBins> {
        bins_from(edges, self.freq.training_items().map(|(_, c)| c))
    }

    /// User bins over training-sequence lengths.
    pub fn user_bins(&self, edges: &BinEdges) -> Result<FrequencyBins> {
        bins_from(
            edges,
            self.split.train.sequences.iter().map(|s| s.len() as u64),
        )
    }

    pub fn train_lengths(&self) -> HashMap<&str, usize> {
        self.split
            .train
            .sequences
            .iter()
            .map(|s| (s.user.as_str(), s.len()))
            .collect()
    }

    pub fn examples(&self, cfg: &RunConfig) -> Vec<TrainingExample> {
        build_examples(
            &self.split.train,
            &self.freq,
            &self.stats,
            cfg.reweight_config(),
            cfg.model.max_len,
            cfg.train.all_positions,
        )
    }
}

/// Reweighting and augmentation as configured.
pub fn variant(cfg: &RunConfig) -> Variant<'_> {
    Variant {
        reweight: cfg.reweight_config(),
        contrastive: Some((&cfg.augment, &cfg.loss)),
    }
}

pub fn init_model(cfg: &RunConfig, num_items: usize) -> Result<ModelParams> {
    let mut rng = RngStream::new(cfg.train.seed, 0, 0, view::INIT).rng();
    init_params(&cfg.model, num_items, &mut rng)
}

/// Ranks `pairs` and breaks the metrics down by frequency bins.
pub fn evaluate(
    params: &ModelParams,
    prepared: &Prepared,
    pairs: &[LabeledPair],
    cfg: &RunConfig,
) -> Result<(Vec<RankedResult>, EvalReport)> {
    let results = rank_pairs(params, pairs)?;
    let lengths = prepared.train_lengths();
    let user_lengths: Vec<usize> = results
        .iter()
        .map(|r| lengths.get(r.user.as_str()).copied().unwrap_or(0))
        .collect();
    let report = binned_metrics(
        &results,
        &prepared.freq,
        &prepared.item_bins(&cfg.eval.item_bins)?,
        &user_lengths,
        &prepared.user_bins(&cfg.eval.user_bins)?,
        &cfg.eval.ks,
    );
    Ok((results, report))
}

pub struct RunOutcome {
    pub fit: FitOutcome,
    pub test_results: Vec<RankedResult>,
    pub test_report: EvalReport,
}

/// Trains under `cfg` with `variant`, then evaluates the best parameters on
/// the test split.
pub fn run_with(
    prepared: &Prepared,
    cfg: &RunConfig,
    variant: &Variant<'_>,
    on_epoch: impl FnMut(&EpochRecord, &ModelParams) -> Result<()>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let params = init_model(cfg, prepared.num_items())?;
    let examples = prepared.examples(cfg);
    let outcome = fit(
        params,
        &examples,
        &prepared.data(),
        variant,
        &cfg.train,
        &prepared.split.valid,
        on_epoch,
    )?;
    let (test_results, test_report) = evaluate(&outcome.best, prepared, &prepared.split.test, cfg)?;
    Ok(RunOutcome {
        fit: outcome,
        test_results,
        test_report,
    })
}

pub fn run(
    prepared: &Prepared,
    cfg: &RunConfig,
    on_epoch: impl FnMut(&EpochRecord, &ModelParams) -> Result<()>,
) -> Result<RunOutcome> {
    run_with(prepared, cfg, &variant(cfg), on_epoch)
}
