//! Epoch loop: batching, view generation, the weighted objective, Adam, and
//! validation-based early stopping.

use log::{info, warn};
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::augment::{generate_views, AugmentContext, AugmentationConfig, CorrelationIndex};
use crate::corpus::{Corpus, CorpusStats, FrequencyTable, ItemId, LabeledPair};
use crate::error::{FaclError, Result};
use crate::eval::{hr_at_k, ndcg_at_k, rank_pairs};
use crate::model::{GradientSet, Mode, ModelConfig, ModelParams, SequenceTrace};
use crate::objective::{objective_on_tape, LossConfig};
use crate::reweight::{normalize_weights, sequence_weight, ReweightConfig};
use crate::rng::{view, RngStream};
use crate::tape::Tape;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without a validation NDCG@10 improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Supervise the next item at every input position, not only the last.
    pub all_positions: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 256,
            epochs: 50,
            patience: 5,
            seed: 42,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: Some(5.0),
            all_positions: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(FaclError::Config("learning_rate must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(FaclError::Config("batch_size must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(FaclError::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(FaclError::Config("adam eps must be positive".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(FaclError::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

/// Adam moments, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Matrix> = params
            .tensors
            .iter()
            .map(|t| Matrix::zeros(t.rows, t.cols))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &GradientSet,
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.tensors.len() != params.tensors.len() || state.m.len() != params.tensors.len() {
        return Err(FaclError::Shape(
            "optimizer state does not match parameters".into(),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, g) in grads.tensors.iter().enumerate() {
        let p = &mut params.tensors[i];
        if g.shape() != p.shape() {
            return Err(FaclError::Shape(format!(
                "gradient shape mismatch for {}",
                params.names[i]
            )));
        }
        let m = &mut state.m[i].data;
        let v = &mut state.v[i].data;
        for j in 0..g.data.len() {
            let gj = g.data[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let update = cfg.learning_rate * (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.eps);
            p.data[j] -= update;
        }
        if !p.is_finite() {
            return Err(FaclError::NonFinite {
                tensor: params.names[i].clone(),
            });
        }
    }
    Ok(())
}

/// One user's next-item training instance.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    /// Stable key for the example's random streams.
    pub key: u64,
    pub input: Vec<ItemId>,
    /// Next items for the last `targets.len()` positions of `input`.
    pub targets: Vec<ItemId>,
    /// λ of the user's full training sequence.
    pub weight: f64,
}

/// Training instances from the training split, one per user with at least
/// two training items. The input is the sequence before its last item,
/// suffix-truncated to `max_len`. The target is that last item, or with
/// `all_positions` the next item after every input position.
pub fn build_examples(
    train: &Corpus,
    freq: &FrequencyTable,
    stats: &CorpusStats,
    reweight: Option<&ReweightConfig>,
    max_len: usize,
    all_positions: bool,
) -> Vec<TrainingExample> {
    let mut out = Vec::new();
    for seq in &train.sequences {
        let items = &seq.items;
        if items.len() < 2 {
            continue;
        }
        let weight = reweight.map_or(1.0, |cfg| sequence_weight(items, freq, stats, cfg));
        let end = items.len() - 1;
        let start = end.saturating_sub(max_len);
        let first_target = if all_positions { start + 1 } else { end };
        out.push(TrainingExample {
            key: out.len() as u64,
            input: items[start..end].to_vec(),
            targets: items[first_target..].to_vec(),
            weight,
        });
    }
    out
}

/// Frozen per-run data every batch reads.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub freq: &'a FrequencyTable,
    pub stats: &'a CorpusStats,
    pub corr: &'a CorrelationIndex,
}

/// The two parts of the method that can be switched off structurally.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Variant<'a> {
    /// Weights from the examples, optionally batch-normalized; `None` uses 1.
    pub reweight: Option<&'a ReweightConfig>,
    /// Augmentation and contrastive loss; `None` trains on the next-item loss only.
    pub contrastive: Option<(&'a AugmentationConfig, &'a LossConfig)>,
}

impl Variant<'_> {
    /// Next-item training with no augmentation and no weights.
    pub fn plain() -> Self {
        Self {
            reweight: None,
            contrastive: None,
        }
    }
}

/// Inputs of one objective evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchInput {
    pub inputs: Vec<Vec<ItemId>>,
    /// Next items for the trailing positions of each input.
    pub targets: Vec<Vec<ItemId>>,
    /// Keys for the dropout streams.
    pub keys: Vec<u64>,
    pub weights: Vec<f64>,
    pub views: Option<Vec<(Vec<ItemId>, Vec<ItemId>)>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct BatchLoss {
    pub total: f64,
    /// Unweighted batch means.
    pub rec_loss: f64,
    pub cl_loss: f64,
    pub mean_lambda: f64,
}

/// Where dropout masks come from. `Train` keys them by `(seed, key, epoch)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutKeys {
    Off,
    Train { seed: u64, epoch: u64 },
}

// Sequences per gradient accumulator. Fixed so the reduction order does not
// depend on the number of worker threads.
const CHUNK: usize = 16;

struct Job<'b> {
    items: &'b [ItemId],
    outputs: usize,
    key: u64,
    stream: u64,
}

fn record_traces<'p>(
    params: &'p ModelParams,
    jobs: &[Job<'_>],
    dropout: DropoutKeys,
) -> Result<Vec<SequenceTrace<'p>>> {
    let run = |job: &Job<'_>| -> Result<SequenceTrace<'p>> {
        match dropout {
            DropoutKeys::Off => SequenceTrace::record::<crate::rng::StreamRng>(
                params,
                job.items,
                job.outputs,
                Mode::Eval,
                None,
            ),
            DropoutKeys::Train { seed, epoch } => {
                let mut rng = RngStream::new(seed, job.key, epoch, job.stream).rng();
                SequenceTrace::record(params, job.items, job.outputs, Mode::Train, Some(&mut rng))
            }
        }
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        jobs.par_iter().map(run).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        jobs.iter().map(run).collect()
    }
}

fn accumulate(
    params: &ModelParams,
    traces: &[SequenceTrace<'_>],
    dh: &[Matrix],
    head: GradientSet,
) -> GradientSet {
    let run = |(ts, ds): (&[SequenceTrace<'_>], &[Matrix])| {
        let mut g = GradientSet::zeros_like(params);
        for (t, d) in ts.iter().zip(ds) {
            t.backward(d.clone(), &mut g);
        }
        g
    };
    let pairs: Vec<_> = traces.chunks(CHUNK).zip(dh.chunks(CHUNK)).collect();
    #[cfg(feature = "parallel")]
    let partial: Vec<GradientSet> = {
        use rayon::prelude::*;
        pairs.into_par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let partial: Vec<GradientSet> = pairs.into_iter().map(run).collect();
    let mut total = head;
    for g in &partial {
        total.add_assign(g);
    }
    total
}

fn forward<'p>(
    params: &'p ModelParams,
    batch: &BatchInput,
    loss: &LossConfig,
    dropout: DropoutKeys,
) -> Result<(
    Vec<SequenceTrace<'p>>,
    Tape<'p>,
    crate::objective::ObjectiveNodes,
    Vec<crate::tape::NodeId>,
)> {
    let b = batch.inputs.len();
    if batch.targets.len() != b || batch.keys.len() != b || batch.weights.len() != b {
        return Err(FaclError::Shape("misaligned batch".into()));
    }
    let mut jobs: Vec<Job<'_>> = batch
        .inputs
        .iter()
        .zip(&batch.keys)
        .zip(&batch.targets)
        .map(|((items, &key), targets)| Job {
            items,
            outputs: targets.len(),
            key,
            stream: view::DROPOUT_ORIGINAL,
        })
        .collect();
    if let Some(views) = &batch.views {
        if views.len() != b {
            return Err(FaclError::Shape("misaligned views".into()));
        }
        for (stream, pick) in [(view::DROPOUT_FIRST, 0), (view::DROPOUT_SECOND, 1)] {
            for ((v1, v2), &key) in views.iter().zip(&batch.keys) {
                jobs.push(Job {
                    items: if pick == 0 { v1 } else { v2 },
                    outputs: 1,
                    key,
                    stream,
                });
            }
        }
    }
    let traces = record_traces(params, &jobs, dropout)?;
    let mut tape = Tape::new(&params.tensors);
    let leaves: Vec<_> = traces
        .iter()
        .map(|t| tape.input(t.outputs().clone()))
        .collect();
    let views = batch
        .views
        .as_ref()
        .map(|_| (&leaves[b..2 * b], &leaves[2 * b..]));
    let nodes = objective_on_tape(
        &mut tape,
        &leaves[..b],
        views,
        &batch.targets,
        &batch.weights,
        loss,
    )?;
    Ok((traces, tape, nodes, leaves))
}

fn summarize(
    tape: &Tape<'_>,
    nodes: &crate::objective::ObjectiveNodes,
    weights: &[f64],
) -> BatchLoss {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let rows = &tape.value(nodes.rec).data;
    let mut offset = 0;
    let per_user: Vec<f64> = nodes
        .rec_rows
        .iter()
        .map(|&n| {
            offset += n;
            mean(&rows[offset - n..offset])
        })
        .collect();
    BatchLoss {
        total: tape.value(nodes.total).data[0],
        rec_loss: mean(&per_user),
        cl_loss: nodes.cl.map_or(0.0, |c| mean(&tape.value(c).data)),
        mean_lambda: mean(weights),
    }
}

/// Objective value only.
pub fn batch_loss(
    params: &ModelParams,
    batch: &BatchInput,
    loss: &LossConfig,
    dropout: DropoutKeys,
) -> Result<BatchLoss> {
    let (_, tape, nodes, _) = forward(params, batch, loss, dropout)?;
    Ok(summarize(&tape, &nodes, &batch.weights))
}

/// Objective value and its exact gradient with respect to every parameter.
pub fn batch_loss_and_grad(
    params: &ModelParams,
    batch: &BatchInput,
    loss: &LossConfig,
    dropout: DropoutKeys,
) -> Result<(BatchLoss, GradientSet)> {
    let (traces, tape, nodes, leaves) = forward(params, batch, loss, dropout)?;
    let summary = summarize(&tape, &nodes, &batch.weights);
    let mut head = GradientSet::zeros_like(params);
    let mut grads = tape.backward(
        vec![(nodes.total, Matrix::filled(1, 1, 1.0))],
        &mut head.tensors,
    );
    let dh: Vec<Matrix> = leaves
        .iter()
        .map(|&l| {
            grads.take(l).unwrap_or_else(|| {
                let (r, c) = tape.value(l).shape();
                Matrix::zeros(r, c)
            })
        })
        .collect();
    let total = accumulate(params, &traces, &dh, head);
    total.check_finite(&params.names)?;
    Ok((summary, total))
}

/// Assembles the inputs for `examples` under `variant` at `epoch`.
pub fn prepare_batch(
    examples: &[&TrainingExample],
    data: &TrainData<'_>,
    variant: &Variant<'_>,
    seed: u64,
    epoch: u64,
) -> BatchInput {
    let mut weights: Vec<f64> = match variant.reweight {
        Some(_) => examples.iter().map(|e| e.weight).collect(),
        None => vec![1.0; examples.len()],
    };
    if variant.reweight.is_some_and(|r| r.normalize_batch) {
        normalize_weights(&mut weights);
    }
    let views = variant
        .contrastive
        .filter(|(_, l)| l.contrastive())
        .map(|(aug, _)| {
            let ctx = AugmentContext {
                cfg: aug,
                freq: data.freq,
                stats: data.stats,
                corr: data.corr,
            };
            let make = |e: &&TrainingExample| {
                let mut r1 = RngStream::new(seed, e.key, epoch, view::AUG_FIRST).rng();
                let mut r2 = RngStream::new(seed, e.key, epoch, view::AUG_SECOND).rng();
                let pair = generate_views(&e.input, &ctx, &mut r1, &mut r2);
                (pair.view1, pair.view2)
            };
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                examples.par_iter().map(make).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                examples.iter().map(make).collect()
            }
        });
    BatchInput {
        inputs: examples.iter().map(|e| e.input.clone()).collect(),
        targets: examples.iter().map(|e| e.targets.clone()).collect(),
        keys: examples.iter().map(|e| e.key).collect(),
        weights,
        views,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub rec_loss: f64,
    pub cl_loss: f64,
    pub total: f64,
    pub mean_lambda: f64,
    pub batches: usize,
    pub skipped_batches: usize,
}

/// Epoch order: a seeded shuffle of example indices.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = RngStream::new(seed, 0, epoch, view::SHUFFLE).rng();
    order.shuffle(&mut rng);
    order
}

/// One pass over `examples`. Batches with fewer than two examples are
/// skipped. Loss components are averaged over the batches that ran.
pub fn train_epoch(
    examples: &[TrainingExample],
    data: &TrainData<'_>,
    variant: &Variant<'_>,
    train: &TrainConfig,
    params: &mut ModelParams,
    state: &mut OptimizerState,
    epoch: usize,
) -> Result<EpochMetrics> {
    let order = epoch_order(examples.len(), train.seed, epoch as u64);
    let loss_cfg = variant.contrastive.map_or(
        LossConfig {
            cl_weight: 0.0,
            ..LossConfig::default()
        },
        |(_, l)| *l,
    );
    let mut m = EpochMetrics {
        epoch,
        ..Default::default()
    };
    for idx in order.chunks(train.batch_size) {
        if idx.len() < 2 {
            warn!(
                "epoch {epoch}: skipping a batch with {} example(s)",
                idx.len()
            );
            m.skipped_batches += 1;
            continue;
        }
        let batch: Vec<&TrainingExample> = idx.iter().map(|&i| &examples[i]).collect();
        let input = prepare_batch(&batch, data, variant, train.seed, epoch as u64);
        let dropout = DropoutKeys::Train {
            seed: train.seed,
            epoch: epoch as u64,
        };
        let (loss, mut grads) = batch_loss_and_grad(params, &input, &loss_cfg, dropout)?;
        if let Some(c) = train.grad_clip {
            grads.clip_global_norm(c);
        }
        adam_step(params, &grads, state, train)?;
        m.batches += 1;
        m.rec_loss += loss.rec_loss;
        m.cl_loss += loss.cl_loss;
        m.total += loss.total;
        m.mean_lambda += loss.mean_lambda;
    }
    if m.batches > 0 {
        let n = m.batches as f64;
        m.rec_loss /= n;
        m.cl_loss /= n;
        m.total /= n;
        m.mean_lambda /= n;
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    #[serde(flatten)]
    pub metrics: EpochMetrics,
    pub valid_hr10: f64,
    pub valid_ndcg10: f64,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub best: ModelParams,
    pub best_epoch: usize,
    pub best_valid_ndcg10: f64,
    pub history: Vec<EpochRecord>,
}

/// Trains for up to `train.epochs`, scoring NDCG@10 on `valid` after each
/// epoch. Stops once more than `patience` consecutive epochs fail to
/// improve on the best score. `on_epoch` sees each record and the current
/// parameters.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    mut params: ModelParams,
    examples: &[TrainingExample],
    data: &TrainData<'_>,
    variant: &Variant<'_>,
    train: &TrainConfig,
    valid: &[LabeledPair],
    mut on_epoch: impl FnMut(&EpochRecord, &ModelParams) -> Result<()>,
) -> Result<FitOutcome> {
    train.validate()?;
    let mut state = OptimizerState::new(&params);
    let mut best = params.clone();
    let mut best_epoch = 0;
    let mut best_ndcg = f64::NEG_INFINITY;
    let mut bad = 0;
    let mut history = Vec::new();
    for epoch in 0..train.epochs {
        let metrics = train_epoch(
            examples,
            data,
            variant,
            train,
            &mut params,
            &mut state,
            epoch,
        )?;
        let ranks: Vec<usize> = rank_pairs(&params, valid)?.iter().map(|r| r.rank).collect();
        let ndcg = ndcg_at_k(&ranks, 10);
        let improved = ndcg > best_ndcg;
        let record = EpochRecord {
            metrics,
            valid_hr10: hr_at_k(&ranks, 10),
            valid_ndcg10: ndcg,
            improved,
        };
        info!(
            "epoch {epoch}: total {:.5} rec {:.5} cl {:.5} valid ndcg@10 {ndcg:.5}",
            metrics.total, metrics.rec_loss, metrics.cl_loss
        );
        on_epoch(&record, &params)?;
        history.push(record);
        if improved {
            best_ndcg = ndcg;
            best_epoch = epoch;
            best = params.clone();
            bad = 0;
        } else {
            bad += 1;
            if bad > train.patience {
                break;
            }
        }
    }
    Ok(FitOutcome {
        best,
        best_epoch,
        best_valid_ndcg10: best_ndcg,
        history,
    })
}

/// Checks that the model can hold every sequence the trainer will feed it.
pub fn check_lengths(model: &ModelConfig, aug: &AugmentationConfig) -> Result<()> {
    if aug.max_len > model.max_len {
        return Err(FaclError::Config(format!(
            "augmentation max_len {} exceeds model max_len {}",
            aug.max_len, model.max_len
        )));
    }
    Ok(())
}
