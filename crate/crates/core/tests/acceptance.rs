//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Pass criterion numbers as arguments to run a subset.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use facl_core::augment::{
    accepted_subsequence, item_perturb_prob, op_drop, AugmentContext, AugmentPolicy,
    AugmentationConfig, CorrelationIndex, Span,
};
use facl_core::config::{BinEdges, RunConfig};
use facl_core::corpus::{
    build_frequency_table, corpus_stats, Corpus, CorpusStats, FrequencyTable, ItemId,
};
use facl_core::eval::{drop_audit, hr_at_k, ndcg_at_k, rank_in_scores};
use facl_core::experiment::{prepare, run, run_with, variant};
use facl_core::model::{init_params, EncoderKind, ModelConfig, ModelParams};
use facl_core::objective::{infonce_loss, rec_loss, LossConfig};
use facl_core::reweight::{sequence_avg_frequency, sequence_weight, ReweightConfig};
use facl_core::rng::RngStream;
use facl_core::synth::{generate_synthetic, SyntheticSpec};
use facl_core::trainer::{
    batch_loss, batch_loss_and_grad, train_epoch, BatchInput, DropoutKeys, OptimizerState,
    TrainConfig, TrainData, Variant,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn ids(v: &[u32]) -> Vec<ItemId> {
    v.iter().map(|&i| ItemId(i)).collect()
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

// Criterion 1 ---------------------------------------------------------------

fn perturbation_fraction() -> Outcome {
    let start = Instant::now();
    // Counts chosen so that max f / mean f < 2 in every sequence below.
    let freq = FrequencyTable::from_counts(vec![3, 5, 4, 6, 2, 7, 5, 4, 3, 6, 8, 5]);
    let sequences = [
        ids(&[0, 1, 2, 3, 4, 5, 6, 7, 8, 9]),
        ids(&[1, 3, 5, 7, 9, 11, 10, 2]),
        ids(&[4, 4, 0, 8, 2, 6, 1, 3, 5, 7, 11, 9]),
    ];
    let mut details = Vec::new();
    let mut pass = true;
    for gamma in [0.1, 0.3, 0.5] {
        let cfg = AugmentationConfig {
            gamma,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let (mut perturbed, mut total) = (0u64, 0u64);
        for t in 0..100_000usize {
            let seq = &sequences[t % sequences.len()];
            let avg = sequence_avg_frequency(seq, &freq);
            let probs: Vec<f64> = seq
                .iter()
                .map(|&v| item_perturb_prob(v, &freq, avg, &cfg))
                .collect();
            if probs.iter().any(|&p| p >= cfg.cap_multiplier * gamma) {
                return outcome(false, "fixture hits the cap");
            }
            let out = op_drop(seq, &probs, &mut rng);
            perturbed += out.positions.len() as u64;
            total += seq.len() as u64;
        }
        let fraction = perturbed as f64 / total as f64;
        let rel = (fraction - gamma).abs() / gamma;
        pass &= rel <= 0.015;
        details.push(format!("γ={gamma}: {fraction:.5} (rel {rel:.4})"));
    }
    let elapsed = start.elapsed();
    pass &= elapsed < Duration::from_secs(30);
    outcome(
        pass,
        format!("{}; {:.2}s", details.join(", "), secs(elapsed)),
    )
}

// Criterion 2 ---------------------------------------------------------------

fn cap_and_protection() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut checked = 0u64;
    let mut protected = 0u64;
    for _ in 0..20_000 {
        let n_items = rng.random_range(2..40);
        let counts: Vec<u64> = (0..n_items)
            .map(|_| {
                if rng.random::<f64>() < 0.3 {
                    rng.random_range(1..10_000)
                } else {
                    rng.random_range(1..30)
                }
            })
            .collect();
        let freq = FrequencyTable::from_counts(counts);
        let len = rng.random_range(1..25);
        let seq: Vec<ItemId> = (0..len)
            .map(|_| ItemId(rng.random_range(0..n_items as u32)))
            .collect();
        let cfg = AugmentationConfig {
            gamma: rng.random_range(0.0..1.0),
            ..Default::default()
        };
        let avg = sequence_avg_frequency(&seq, &freq);
        let bound = (2.0 * cfg.gamma).min(1.0);
        for &v in &seq {
            let rho = item_perturb_prob(v, &freq, avg, &cfg);
            checked += 1;
            if rho > bound {
                return outcome(false, format!("ρ={rho} exceeds {bound} at γ={}", cfg.gamma));
            }
            if freq.f(v) < avg && cfg.gamma > 0.0 {
                protected += 1;
                if rho >= cfg.gamma {
                    return outcome(
                        false,
                        format!("ρ={rho} not below γ={} for a rare item", cfg.gamma),
                    );
                }
            }
        }
    }
    outcome(
        true,
        format!("{checked} item draws, {protected} below the sequence mean"),
    )
}

// Criterion 3 ---------------------------------------------------------------

fn drop_audit_on_zipf() -> Outcome {
    let start = Instant::now();
    let raw = match generate_synthetic(&SyntheticSpec::default()) {
        Ok(c) => c,
        Err(e) => return outcome(false, e.to_string()),
    };
    let cfg = RunConfig::default();
    let prepared = match prepare(&raw, &cfg) {
        Ok(p) => p,
        Err(e) => return outcome(false, e.to_string()),
    };
    let bins = prepared
        .item_bins(&BinEdges::Terciles)
        .expect("tercile bins");
    let rates = |policy| {
        let aug = AugmentationConfig {
            gamma: 0.3,
            policy,
            ..cfg.augment.clone()
        };
        let ctx = AugmentContext {
            cfg: &aug,
            freq: &prepared.freq,
            stats: &prepared.stats,
            corr: &prepared.corr,
        };
        drop_audit(&prepared.split.train, &ctx, &bins, 100_000, 11)
    };
    let uniform = rates(AugmentPolicy::Uniform);
    let adaptive = rates(AugmentPolicy::Adaptive);
    let (u_low, a_low) = (
        uniform[0].observed_perturb_rate,
        adaptive[0].observed_perturb_rate,
    );
    let a_high = adaptive[2].observed_perturb_rate;
    let reduction = 1.0 - a_low / u_low;
    let elapsed = start.elapsed();
    let pass = reduction >= 0.30 && a_high >= 0.3 && elapsed < Duration::from_secs(120);
    outcome(
        pass,
        format!(
            "low tercile uniform {u_low:.4} adaptive {a_low:.4} ({:.1}% lower); high tercile adaptive {a_high:.4}; {:.1}s",
            100.0 * reduction,
            secs(elapsed)
        ),
    )
}

// Criterion 4 ---------------------------------------------------------------

fn gradient_batch(
    num_items: u32,
    rng: &mut ChaCha8Rng,
) -> (BatchInput, FrequencyTable, CorpusStats) {
    let seqs: Vec<Vec<ItemId>> = (0..4)
        .map(|_| {
            let len = rng.random_range(3..=8);
            (0..len)
                .map(|_| ItemId(rng.random_range(0..num_items)))
                .collect()
        })
        .collect();
    let corpus = Corpus::from_raw(
        seqs.iter()
            .enumerate()
            .map(|(u, s)| (format!("u{u}"), s.iter().map(|i| i.0 as u64).collect()))
            .collect(),
    );
    // Frequencies from a random background so λ varies across users.
    let counts: Vec<u64> = (0..num_items).map(|_| rng.random_range(1..50)).collect();
    let freq = FrequencyTable::from_counts(counts);
    let stats = corpus_stats(&corpus, &build_frequency_table(&corpus)).expect("stats");
    let rw = ReweightConfig {
        beta: 0.7,
        clip: None,
        normalize_batch: false,
    };
    let weights = seqs
        .iter()
        .map(|s| sequence_weight(s, &freq, &stats, &rw))
        .collect();
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for (u, s) in seqs.iter().enumerate() {
        let (input, target) = s.split_at(s.len() - 1);
        inputs.push(input.to_vec());
        // Alternate between last-position and all-position supervision.
        targets.push(if u % 2 == 0 {
            target.to_vec()
        } else {
            s[1..].to_vec()
        });
    }
    let views = seqs
        .iter()
        .map(|s| {
            let a = s[..s.len() - 1].iter().rev().copied().collect();
            let b = s[1..].to_vec();
            (a, b)
        })
        .collect();
    let batch = BatchInput {
        inputs,
        targets,
        keys: vec![0, 1, 2, 3],
        weights,
        views: Some(views),
    };
    (batch, freq, stats)
}

fn finite_difference_check() -> Outcome {
    let start = Instant::now();
    let loss = LossConfig {
        cl_weight: 0.5,
        temperature: 0.7,
        symmetric: true,
    };
    let dropout = DropoutKeys::Train { seed: 5, epoch: 2 };
    let mut worst = 0.0f64;
    let mut pass = true;
    let mut details = Vec::new();
    let mut zero_tensors = 0;
    for kind in [EncoderKind::SelfAttention, EncoderKind::MeanPool] {
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        let model = ModelConfig {
            embed_dim: 8,
            num_layers: 2,
            num_heads: 2,
            max_len: 8,
            dropout_rate: 0.1,
            encoder_kind: kind,
        };
        let params = init_params(&model, 20, &mut rng).expect("params");
        let (batch, _, _) = gradient_batch(20, &mut rng);
        let (_, grads) = batch_loss_and_grad(&params, &batch, &loss, dropout).expect("gradient");
        let value = |p: &ModelParams| batch_loss(p, &batch, &loss, dropout).expect("loss").total;
        let step = 1e-5;
        let global = grads.global_norm();
        let mut probe = params.clone();
        for (ti, name) in params.names.iter().enumerate() {
            let (mut diff, mut norm) = (0.0, 0.0);
            for j in 0..params.tensors[ti].len() {
                let x = params.tensors[ti].data[j];
                probe.tensors[ti].data[j] = x + step;
                let hi = value(&probe);
                probe.tensors[ti].data[j] = x - step;
                let lo = value(&probe);
                probe.tensors[ti].data[j] = x;
                let fd = (hi - lo) / (2.0 * step);
                let an = grads.tensors[ti].data[j];
                diff += (fd - an) * (fd - an);
                norm += an * an;
            }
            let (diff, norm) = (diff.sqrt(), norm.sqrt());
            if norm <= 1e-9 * global {
                // Identically zero gradient (the key bias cancels in the
                // softmax): relative error is noise over noise, so the
                // difference quotient must vanish in absolute terms.
                zero_tensors += 1;
                if diff > 1e-6 {
                    pass = false;
                    details.push(format!("{kind:?}/{name} zero gradient but |fd| {diff:.2e}"));
                }
                continue;
            }
            let rel = diff / norm;
            if rel > 1e-4 {
                pass = false;
                details.push(format!("{kind:?}/{name} rel {rel:.2e}"));
            }
            worst = worst.max(rel);
        }
    }
    let elapsed = start.elapsed();
    pass &= elapsed < Duration::from_secs(60);
    let mut detail = format!(
        "worst per-tensor relative error {worst:.2e}; {zero_tensors} zero-gradient tensors matched; {:.1}s",
        secs(elapsed)
    );
    if !details.is_empty() {
        detail.push_str(&format!("; {}", details.join(", ")));
    }
    outcome(pass, detail)
}

// Criterion 5 ---------------------------------------------------------------

fn closed_forms() -> Outcome {
    let mut failures = Vec::new();
    let cfg = LossConfig {
        cl_weight: 1.0,
        temperature: 1.0,
        symmetric: true,
    };
    for b in [2usize, 4, 16, 64] {
        let same = vec![vec![0.3, -1.2, 0.8, 2.0]; b];
        let v = infonce_loss(&same, &same, &cfg).expect("infonce");
        if (v - (b as f64).ln()).abs() > 1e-12 {
            failures.push(format!("InfoNCE B={b}: {v}"));
        }
    }
    for n in [2usize, 20, 500] {
        let uniform = vec![1.0 / n as f64; n];
        let v = rec_loss(&uniform, ItemId(1));
        if (v - (n as f64).ln()).abs() > 1e-12 {
            failures.push(format!("rec |V|={n}: {v}"));
        }
    }
    // τ = 0 and λ = 1: the total is the mean next-item loss.
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let params = init_params(
        &ModelConfig {
            embed_dim: 8,
            num_layers: 1,
            num_heads: 2,
            max_len: 8,
            dropout_rate: 0.0,
            encoder_kind: EncoderKind::SelfAttention,
        },
        20,
        &mut rng,
    )
    .expect("params");
    let (mut batch, _, _) = gradient_batch(20, &mut rng);
    batch.weights = vec![1.0; 4];
    let zero_cl = LossConfig {
        cl_weight: 0.0,
        ..cfg
    };
    let l = batch_loss(&params, &batch, &zero_cl, DropoutKeys::Off).expect("loss");
    if (l.total - l.rec_loss).abs() > 1e-12 {
        failures.push(format!("τ=0 total {} vs rec {}", l.total, l.rec_loss));
    }
    let pass = failures.is_empty();
    outcome(
        pass,
        if pass {
            "InfoNCE = log B, rec = log |V|, τ=0 total = mean rec".to_string()
        } else {
            failures.join("; ")
        },
    )
}

// Criterion 6 ---------------------------------------------------------------

fn brute_rank(scores: &[f64], target: usize) -> usize {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
        .iter()
        .position(|&i| i == target)
        .expect("target present")
        + 1
}

fn brute_hr(ranks: &[usize], k: usize) -> f64 {
    let mut hits = 0.0;
    for &r in ranks {
        if r <= k {
            hits += 1.0;
        }
    }
    hits / ranks.len() as f64
}

fn brute_ndcg(ranks: &[usize], k: usize) -> f64 {
    let mut sum = 0.0;
    for &r in ranks {
        if r <= k {
            sum += 1.0 / (1.0 + r as f64).log2();
        }
    }
    sum / ranks.len() as f64
}

// Exact distribution of the returned span: acceptance at attempt k, or the
// first maximal-α span among `r` rejected draws.
fn span_distribution(alphas: &[f64], r: usize) -> Vec<f64> {
    let q = 1.0 / alphas.len() as f64;
    let accept: f64 = alphas.iter().map(|a| q * a).sum();
    let reject: Vec<f64> = alphas.iter().map(|a| q * (1.0 - a)).collect();
    let geometric: f64 = (0..r).map(|k| (1.0 - accept).powi(k as i32)).sum();
    alphas
        .iter()
        .enumerate()
        .map(|(s, &a)| {
            let lower: f64 = (0..alphas.len())
                .filter(|&j| alphas[j] < a)
                .map(|j| reject[j])
                .sum();
            let tied_or_lower: f64 = (0..alphas.len())
                .filter(|&j| alphas[j] <= a)
                .map(|j| reject[j])
                .sum();
            let fallback: f64 = (0..r)
                .map(|k| lower.powi(k as i32) * reject[s] * tied_or_lower.powi((r - 1 - k) as i32))
                .sum();
            q * a * geometric + fallback
        })
        .collect()
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut ranks = Vec::new();
    let mut brute = Vec::new();
    for _ in 0..1000 {
        let n = rng.random_range(1..60);
        // Coarse scores so ties are common.
        let scores: Vec<f64> = (0..n)
            .map(|_| (rng.random_range(0..8) as f64) * 0.25)
            .collect();
        let t = rng.random_range(0..n);
        let r = rank_in_scores(&scores, ItemId(t as u32));
        let b = brute_rank(&scores, t);
        if r != b {
            return outcome(false, format!("rank {r} vs brute force {b}"));
        }
        ranks.push(r);
        brute.push(b);
    }
    for k in [1, 5, 10, 20] {
        let (h, bh) = (hr_at_k(&ranks, k), brute_hr(&brute, k));
        let (n, bn) = (ndcg_at_k(&ranks, k), brute_ndcg(&brute, k));
        if (h - bh).abs() > 1e-12 || (n - bn).abs() > 1e-12 {
            return outcome(false, format!("@{k}: HR {h}/{bh} NDCG {n}/{bn}"));
        }
    }

    let corpus = Corpus::from_raw(vec![
        ("a".into(), vec![1, 1, 1, 1, 2, 2, 2, 3, 3, 4]),
        ("b".into(), vec![1, 1, 2, 5, 6, 1, 2, 1]),
        ("c".into(), vec![1, 2, 1, 3, 1, 2]),
    ]);
    let freq = build_frequency_table(&corpus);
    let stats = corpus_stats(&corpus, &freq).expect("stats");
    let corr = CorrelationIndex::default();
    let raw = |v: &[u64]| -> Vec<ItemId> {
        v.iter()
            .map(|&x| corpus.vocab.lookup(x).expect("known item"))
            .collect()
    };
    let cases = [
        (raw(&[4, 1, 5, 2, 6, 3]), 3usize, 0.3),
        (raw(&[1, 6, 2, 5, 1]), 2, 0.4),
        (raw(&[3, 4, 2, 1]), 20, 0.5),
        (raw(&[6, 5, 4, 6, 5, 4]), 1, 0.2),
    ];
    let mut worst_tv = 0.0f64;
    for (c, (seq, resamples, eta)) in cases.iter().enumerate() {
        let cfg = AugmentationConfig {
            eta: *eta,
            max_resamples: *resamples,
            ..Default::default()
        };
        let ctx = AugmentContext {
            cfg: &cfg,
            freq: &freq,
            stats: &stats,
            corr: &corr,
        };
        let len = facl_core::augment::span_length(seq.len(), *eta);
        let starts = seq.len() - len + 1;
        let alphas: Vec<f64> = (0..starts)
            .map(|s| facl_core::augment::subsequence_accept_prob(&seq[s..s + len], &freq, &stats))
            .collect();
        let exact = span_distribution(&alphas, *resamples);
        let mut counts = vec![0u64; starts];
        let draws = 100_000;
        let mut r = ChaCha8Rng::seed_from_u64(600 + c as u64);
        for _ in 0..draws {
            let Span { start, len: l } = accepted_subsequence(seq, &ctx, &mut r);
            assert_eq!(l, len);
            counts[start] += 1;
        }
        let tv: f64 = 0.5
            * counts
                .iter()
                .zip(&exact)
                .map(|(&n, p)| (n as f64 / draws as f64 - p).abs())
                .sum::<f64>();
        worst_tv = worst_tv.max(tv);
    }
    let pass = worst_tv <= 0.02;
    outcome(
        pass,
        format!(
            "1000 rank instances agree; span TV {worst_tv:.4} over {} sequences",
            cases.len()
        ),
    )
}

// Criterion 7 ---------------------------------------------------------------

fn degenerate_equivalences() -> Outcome {
    let raw = generate_synthetic(&SyntheticSpec {
        num_users: 150,
        num_items: 60,
        seed: 3,
        ..Default::default()
    })
    .expect("corpus");
    let mut cfg = RunConfig::default();
    cfg.apply_overrides(&[
        "embed_dim=8",
        "num_layers=1",
        "max_len=12",
        "batch_size=32",
        "epochs=2",
        "learning_rate=0.01",
        "gamma=0",
        "cl_weight=0",
        "beta=0",
    ])
    .expect("overrides");
    let prepared = prepare(&raw, &cfg).expect("prepare");
    let train =
        |cfg: &RunConfig, v: &Variant<'_>| run_with(&prepared, cfg, v, |_, _| Ok(())).expect("run");
    let degenerate = train(&cfg, &variant(&cfg));
    let plain = train(&cfg, &Variant::plain());
    let same_plain = degenerate.fit.best.tensors == plain.fit.best.tensors
        && degenerate.fit.history == plain.fit.history
        && degenerate.test_report == plain.test_report;

    let mut facl = cfg.clone();
    facl.apply_overrides(&["gamma=0.3", "cl_weight=0.1"])
        .expect("overrides");
    let zero_beta = train(&facl, &variant(&facl));
    let unweighted = Variant {
        reweight: None,
        ..variant(&facl)
    };
    let no_weights = train(&facl, &unweighted);
    let same_unweighted = zero_beta.fit.best.tensors == no_weights.fit.best.tensors
        && zero_beta.fit.history == no_weights.fit.history;
    outcome(
        same_plain && same_unweighted,
        format!("γ=0,τ=0,β=0 = plain: {same_plain}; β=0 = unweighted: {same_unweighted}"),
    )
}

// Criterion 8 ---------------------------------------------------------------

/// Run configuration shared by both arms.
const LONG_TAIL_OVERRIDES: &[&str] = &[
    "embed_dim=32",
    "num_layers=1",
    "num_heads=2",
    "max_len=20",
    "dropout=0.2",
    "batch_size=256",
    "learning_rate=0.005",
    "epochs=50",
    "patience=50",
    "all_positions=true",
    "gamma=0.3",
    "eta=0.3",
    "beta=0.1",
];

fn long_tail_improvement() -> Outcome {
    let start = Instant::now();
    // Each user revisits a small personal set, so rare targets are learnable.
    let raw = generate_synthetic(&SyntheticSpec {
        favored_prob: 0.4,
        favored_size: 3,
        ..Default::default()
    })
    .expect("corpus");
    let mut facl = RunConfig::default();
    facl.apply_overrides(LONG_TAIL_OVERRIDES)
        .expect("overrides");
    let mut ablation = facl.clone();
    ablation
        .apply_overrides(&["aug_policy=uniform", "reweight=false"])
        .expect("overrides");
    let prepared = prepare(&raw, &facl).expect("prepare");
    let mut per_seed = Vec::new();
    for seed in 0..5u64 {
        let mut low = [0.0; 2];
        for (arm, base) in [&facl, &ablation].into_iter().enumerate() {
            let mut cfg = base.clone();
            cfg.train.seed = seed;
            let out = run(&prepared, &cfg, |_, _| Ok(())).expect("run");
            low[arm] = out.test_report.item_bins[0].hr10.unwrap_or(0.0);
        }
        println!(
            "  seed {seed}: low-tercile HR@10 FACL {:.4} ablation {:.4}",
            low[0], low[1]
        );
        per_seed.push(low);
    }
    let mean = |i: usize| per_seed.iter().map(|l| l[i]).sum::<f64>() / per_seed.len() as f64;
    let (f, a) = (mean(0), mean(1));
    let elapsed = start.elapsed();
    let pass = f > a && elapsed < Duration::from_secs(30 * 60);
    outcome(
        pass,
        format!(
            "mean low-tercile HR@10 FACL {f:.4} vs ablation {a:.4}; {:.0}s",
            secs(elapsed)
        ),
    )
}

// Criterion 9 ---------------------------------------------------------------

fn epoch_seconds(num_users: usize) -> f64 {
    let raw = generate_synthetic(&SyntheticSpec {
        num_users,
        ..Default::default()
    })
    .expect("corpus");
    let mut cfg = RunConfig::default();
    cfg.apply_overrides(LONG_TAIL_OVERRIDES).expect("overrides");
    let prepared = prepare(&raw, &cfg).expect("prepare");
    let examples = prepared.examples(&cfg);
    let data: TrainData<'_> = prepared.data();
    let v = variant(&cfg);
    let mut params = init_params(
        &cfg.model,
        prepared.num_items(),
        &mut RngStream::new(0, 0, 0, 6).rng(),
    )
    .expect("params");
    let mut state = OptimizerState::new(&params);
    let train: TrainConfig = cfg.train;
    (0..3)
        .map(|epoch| {
            let t = Instant::now();
            train_epoch(&examples, &data, &v, &train, &mut params, &mut state, epoch)
                .expect("epoch");
            secs(t.elapsed())
        })
        .fold(f64::INFINITY, f64::min)
}

fn determinism_and_scaling() -> Outcome {
    let raw = generate_synthetic(&SyntheticSpec {
        num_users: 300,
        num_items: 100,
        ..Default::default()
    })
    .expect("corpus");
    let mut cfg = RunConfig::default();
    cfg.apply_overrides(&[
        "embed_dim=16",
        "num_layers=1",
        "max_len=20",
        "batch_size=64",
        "epochs=3",
    ])
    .expect("overrides");
    let prepared = prepare(&raw, &cfg).expect("prepare");
    let a = run(&prepared, &cfg, |_, _| Ok(())).expect("run");
    let b = run(&prepared, &cfg, |_, _| Ok(())).expect("run");
    let identical = a.test_report == b.test_report && a.fit.history == b.fit.history;

    let small = epoch_seconds(1000);
    let large = epoch_seconds(2000);
    let ratio = large / small;
    outcome(
        identical && ratio <= 2.2,
        format!("identical metrics: {identical}; epoch {small:.2}s at 1000 users, {large:.2}s at 2000 (×{ratio:.2})"),
    )
}

fn main() -> ExitCode {
    let criteria: [(u32, fn() -> Outcome); 9] = [
        (1, perturbation_fraction),
        (2, cap_and_protection),
        (3, drop_audit_on_zipf),
        (4, finite_difference_check),
        (5, closed_forms),
        (6, oracle_equivalence),
        (7, degenerate_equivalences),
        (8, long_tail_improvement),
        (9, determinism_and_scaling),
    ];
    let selected: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (n, check) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let o = check();
        println!(
            "criterion {n}: {} {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        if !o.pass {
            failed += 1;
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
