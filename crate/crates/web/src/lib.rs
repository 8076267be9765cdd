//! Browser demo: perturbation curves, a drop audit and augmented views on a
//! synthetic long-tail corpus. [`DemoCore`] is plain Rust; [`Demo`] wraps it
//! for JavaScript and returns JSON strings.

use facl_core::augment::{
    generate_views, item_perturb_prob, perturb_probs, AugmentContext, AugmentPolicy,
};
use facl_core::config::{BinEdges, RunConfig};
use facl_core::corpus::{FrequencyTable, ItemId};
use facl_core::eval::drop_audit;
use facl_core::experiment::{prepare, Prepared};
use facl_core::rng::{view, RngStream};
use facl_core::synth::{generate_synthetic, SyntheticSpec};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// A prepared synthetic corpus.
pub struct DemoCore {
    prepared: Prepared,
    cfg: RunConfig,
}

#[derive(Debug, Serialize, PartialEq)]
pub struct CurvePoint {
    /// `f(v) / f̄_S`.
    pub ratio: f64,
    pub adaptive: f64,
    pub uniform: f64,
}

#[derive(Debug, Serialize, PartialEq)]
pub struct AuditComparison {
    pub bin: String,
    pub occurrences: u64,
    pub uniform: f64,
    pub adaptive: f64,
    pub adaptive_expected: f64,
}

#[derive(Debug, Serialize)]
pub struct ViewItem {
    pub id: u64,
    pub count: u64,
    pub rho: f64,
}

#[derive(Debug, Serialize)]
pub struct ViewDemo {
    pub user: String,
    pub original: Vec<ViewItem>,
    pub views: [Vec<u64>; 2],
    pub operators: [String; 2],
}

fn config_for(
    gamma: f64,
    eta: f64,
    policy: AugmentPolicy,
    base: &RunConfig,
) -> Result<RunConfig, String> {
    let mut cfg = base.clone();
    cfg.augment.gamma = gamma;
    cfg.augment.eta = eta;
    cfg.augment.policy = policy;
    cfg.augment.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

impl DemoCore {
    pub fn new(users: usize, items: usize, zipf: f64, seed: u64) -> Result<Self, String> {
        let raw = generate_synthetic(&SyntheticSpec {
            num_users: users,
            num_items: items,
            zipf_exponent: zipf,
            seed,
            ..Default::default()
        })
        .map_err(|e| e.to_string())?;
        let cfg = RunConfig::default();
        let prepared = prepare(&raw, &cfg).map_err(|e| e.to_string())?;
        Ok(Self { prepared, cfg })
    }

    pub fn num_users(&self) -> usize {
        self.prepared.split.train.len()
    }

    /// ρ against the frequency ratio, from 0 to 4 in `points` steps.
    pub fn rho_curve(
        &self,
        gamma: f64,
        cap: f64,
        points: usize,
    ) -> Result<Vec<CurvePoint>, String> {
        let mut cfg = config_for(
            gamma,
            self.cfg.augment.eta,
            AugmentPolicy::Adaptive,
            &self.cfg,
        )?;
        cfg.augment.cap_multiplier = cap;
        cfg.augment.validate().map_err(|e| e.to_string())?;
        let points = points.max(2);
        // One item whose count is the ratio in hundredths against a mean of 100.
        Ok((0..points)
            .map(|i| {
                let ratio = 4.0 * i as f64 / (points - 1) as f64;
                let freq = FrequencyTable::from_counts(vec![(ratio * 100.0).round() as u64]);
                CurvePoint {
                    ratio,
                    adaptive: item_perturb_prob(ItemId(0), &freq, 100.0, &cfg.augment),
                    uniform: gamma,
                }
            })
            .collect())
    }

    /// Drop rates per item-frequency tercile under both policies.
    pub fn audit(
        &self,
        gamma: f64,
        trials: u64,
        seed: u64,
    ) -> Result<Vec<AuditComparison>, String> {
        let p = &self.prepared;
        let bins = p
            .item_bins(&BinEdges::Terciles)
            .map_err(|e| e.to_string())?;
        let run = |policy| -> Result<_, String> {
            let cfg = config_for(gamma, self.cfg.augment.eta, policy, &self.cfg)?;
            let ctx = AugmentContext {
                cfg: &cfg.augment,
                freq: &p.freq,
                stats: &p.stats,
                corr: &p.corr,
            };
            Ok(drop_audit(&p.split.train, &ctx, &bins, trials, seed))
        };
        let uniform = run(AugmentPolicy::Uniform)?;
        let adaptive = run(AugmentPolicy::Adaptive)?;
        Ok(uniform
            .into_iter()
            .zip(adaptive)
            .map(|(u, a)| AuditComparison {
                bin: a.bin_label,
                occurrences: a.occurrences,
                uniform: u.observed_perturb_rate,
                adaptive: a.observed_perturb_rate,
                adaptive_expected: a.expected_perturb_rate,
            })
            .collect())
    }

    /// Two augmented views of one training sequence.
    pub fn views(
        &self,
        user: usize,
        gamma: f64,
        eta: f64,
        policy: &str,
        seed: u64,
    ) -> Result<ViewDemo, String> {
        let p = &self.prepared;
        let policy: AugmentPolicy = policy
            .parse()
            .map_err(|e: facl_core::FaclError| e.to_string())?;
        let cfg = config_for(gamma, eta, policy, &self.cfg)?;
        let seqs = &p.split.train.sequences;
        if seqs.is_empty() {
            return Err("the corpus has no training sequences".into());
        }
        let u = user % seqs.len();
        let seq = &seqs[u];
        let ctx = AugmentContext {
            cfg: &cfg.augment,
            freq: &p.freq,
            stats: &p.stats,
            corr: &p.corr,
        };
        let mut r1 = RngStream::new(seed, u as u64, 0, view::AUG_FIRST).rng();
        let mut r2 = RngStream::new(seed, u as u64, 0, view::AUG_SECOND).rng();
        let pair = generate_views(&seq.items, &ctx, &mut r1, &mut r2);
        let vocab = &p.corpus.vocab;
        let raw = |v: &[ItemId]| v.iter().map(|&i| vocab.raw_id(i)).collect::<Vec<u64>>();
        let rho = perturb_probs(&seq.items, seq.len(), &ctx);
        let describe = |k: usize| {
            let pv = &pair.provenance[k];
            format!(
                "{:?} [{}, {}) then {} at {:?}",
                pv.subsequence_op,
                pv.span.start,
                pv.span.start + pv.span.len,
                pv.item_op.as_str(),
                pv.positions
            )
            .to_lowercase()
        };
        Ok(ViewDemo {
            user: seq.user.clone(),
            original: seq
                .items
                .iter()
                .zip(rho)
                .map(|(&i, rho)| ViewItem {
                    id: vocab.raw_id(i),
                    count: p.freq.count(i),
                    rho,
                })
                .collect(),
            views: [raw(&pair.view1), raw(&pair.view2)],
            operators: [describe(0), describe(1)],
        })
    }
}

fn to_json<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string()))
        .map_err(|e| JsError::new(&e))
}

/// JavaScript handle; every method returns JSON.
#[wasm_bindgen]
pub struct Demo {
    core: DemoCore,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(users: u32, items: u32, zipf: f64, seed: u32) -> Result<Demo, JsError> {
        DemoCore::new(users as usize, items as usize, zipf, seed as u64)
            .map(|core| Demo { core })
            .map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen(js_name = numUsers)]
    pub fn num_users(&self) -> u32 {
        self.core.num_users() as u32
    }

    #[wasm_bindgen(js_name = rhoCurve)]
    pub fn rho_curve(&self, gamma: f64, cap: f64, points: u32) -> Result<String, JsError> {
        to_json(self.core.rho_curve(gamma, cap, points as usize))
    }

    pub fn audit(&self, gamma: f64, trials: u32, seed: u32) -> Result<String, JsError> {
        to_json(self.core.audit(gamma, trials as u64, seed as u64))
    }

    pub fn views(
        &self,
        user: u32,
        gamma: f64,
        eta: f64,
        policy: &str,
        seed: u32,
    ) -> Result<String, JsError> {
        to_json(
            self.core
                .views(user as usize, gamma, eta, policy, seed as u64),
        )
    }
}
