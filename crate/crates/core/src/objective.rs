//! Recommendation loss, in-batch InfoNCE, and the weighted joint objective.

use log::warn;
use serde::Serialize;

use crate::corpus::ItemId;
use crate::error::{FaclError, Result};
use crate::model::ITEM_EMBEDDINGS;
use crate::tape::{NodeId, Tape};
use crate::tensor::{dot, log_sum_exp};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossConfig {
    /// Weight τ on the contrastive term; zero removes it entirely.
    pub cl_weight: f64,
    /// Softmax temperature applied to cosine similarities.
    pub temperature: f64,
    /// Average the view1→view2 and view2→view1 directions.
    pub symmetric: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            cl_weight: 0.1,
            temperature: 1.0,
            symmetric: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(FaclError::Config("temperature must be positive".into()));
        }
        if !(self.cl_weight >= 0.0) {
            return Err(FaclError::Config("cl_weight must be non-negative".into()));
        }
        Ok(())
    }

    pub fn contrastive(&self) -> bool {
        self.cl_weight > 0.0
    }
}

const MIN_PROB: f64 = 1e-300;

/// `-log p[target]`, with the probability floored at 1e-300.
pub fn rec_loss(probs: &[f64], target: ItemId) -> f64 {
    let p = probs[target.index()];
    if p < MIN_PROB {
        warn!("target probability {p:e} clamped to {MIN_PROB:e}");
    }
    -p.max(MIN_PROB).ln()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 {
        return Err(FaclError::ZeroNorm { row: 0 });
    }
    if nb == 0.0 {
        return Err(FaclError::ZeroNorm { row: 1 });
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

fn one_direction(anchors: &[Vec<f64>], candidates: &[Vec<f64>], t: f64) -> Result<Vec<f64>> {
    let normalize = |rows: &[Vec<f64>]| -> Result<Vec<Vec<f64>>> {
        rows.iter()
            .enumerate()
            .map(|(i, r)| {
                let n = dot(r, r).sqrt();
                if n == 0.0 {
                    Err(FaclError::ZeroNorm { row: i })
                } else {
                    Ok(r.iter().map(|x| x / n).collect())
                }
            })
            .collect()
    };
    let za = normalize(anchors)?;
    let zc = normalize(candidates)?;
    Ok(za
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let logits: Vec<f64> = zc.iter().map(|c| dot(a, c) / t).collect();
            log_sum_exp(&logits) - logits[i]
        })
        .collect())
}

/// Per-anchor InfoNCE: the positive for anchor `i` is `candidates[i]`, every
/// other candidate in the batch is a negative, and the positive is part of
/// the denominator.
pub fn infonce_per_anchor(
    anchors: &[Vec<f64>],
    candidates: &[Vec<f64>],
    cfg: &LossConfig,
) -> Result<Vec<f64>> {
    if anchors.len() != candidates.len() || anchors.len() < 2 {
        return Err(FaclError::Shape(
            "InfoNCE needs two aligned batches of at least two rows".into(),
        ));
    }
    let forward = one_direction(anchors, candidates, cfg.temperature)?;
    if !cfg.symmetric {
        return Ok(forward);
    }
    let backward = one_direction(candidates, anchors, cfg.temperature)?;
    Ok(forward
        .iter()
        .zip(&backward)
        .map(|(a, b)| 0.5 * a + 0.5 * b)
        .collect())
}

/// Batch-mean InfoNCE.
pub fn infonce_loss(
    anchors: &[Vec<f64>],
    candidates: &[Vec<f64>],
    cfg: &LossConfig,
) -> Result<f64> {
    let per = infonce_per_anchor(anchors, candidates, cfg)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// `Σ_u λ_u (rec_u + τ·cl_u) / B`.
pub fn total_loss(rec: &[f64], cl: &[f64], weights: &[f64], cl_weight: f64) -> f64 {
    assert!(
        rec.len() == cl.len() && rec.len() == weights.len(),
        "misaligned loss vectors"
    );
    if rec.is_empty() {
        return 0.0;
    }
    let sum: f64 = rec
        .iter()
        .zip(cl)
        .zip(weights)
        .map(|((r, c), w)| w * (r + cl_weight * c))
        .sum();
    sum / rec.len() as f64
}

/// Handles into the recorded objective.
#[derive(Debug, Clone)]
pub struct ObjectiveNodes {
    pub total: NodeId,
    /// One recommendation loss per supervised position, users in order.
    pub rec: NodeId,
    /// Positions per user in `rec`.
    pub rec_rows: Vec<usize>,
    /// `B × 1` per-user contrastive losses, when the term is active.
    pub cl: Option<NodeId>,
}

/// Records the weighted objective on `tape`.
///
/// `originals[u]` holds one representation row per supervised position of
/// user `u`, with `targets[u]` the matching next items; the user's
/// recommendation loss is the mean over those rows. Views are `1 × d`.
pub fn objective_on_tape(
    tape: &mut Tape<'_>,
    originals: &[NodeId],
    views: Option<(&[NodeId], &[NodeId])>,
    targets: &[Vec<ItemId>],
    weights: &[f64],
    cfg: &LossConfig,
) -> Result<ObjectiveNodes> {
    let b = originals.len();
    assert!(b > 0 && targets.len() == b && weights.len() == b);
    let mut rec_rows = Vec::with_capacity(b);
    for (&o, t) in originals.iter().zip(targets) {
        if t.is_empty() || tape.value(o).rows != t.len() {
            return Err(FaclError::Shape(
                "representation rows do not match targets".into(),
            ));
        }
        rec_rows.push(t.len());
    }
    let h = tape.stack(originals.to_vec());
    let m = tape.param(ITEM_EMBEDDINGS);
    let logits = tape.matmul_bt(h, m);
    let rec = tape.cross_entropy_rows(
        logits,
        targets.iter().flatten().map(|t| t.index()).collect(),
    );
    let scaled: Vec<f64> = weights.iter().map(|w| w / b as f64).collect();
    let per_row: Vec<f64> = scaled
        .iter()
        .zip(&rec_rows)
        .flat_map(|(&w, &n)| std::iter::repeat_n(w / n as f64, n))
        .collect();
    let rec_total = tape.weighted_sum(rec, per_row);

    let Some((v1, v2)) = views.filter(|_| cfg.contrastive()) else {
        return Ok(ObjectiveNodes {
            total: rec_total,
            rec,
            rec_rows,
            cl: None,
        });
    };
    if b < 2 {
        return Err(FaclError::Shape(
            "contrastive term needs a batch of at least two".into(),
        ));
    }
    let s1 = tape.stack(v1.to_vec());
    let s2 = tape.stack(v2.to_vec());
    let z1 = tape
        .normalize_rows(s1)
        .map_err(|row| FaclError::ZeroNorm { row })?;
    let z2 = tape
        .normalize_rows(s2)
        .map_err(|row| FaclError::ZeroNorm { row })?;
    let diag: Vec<usize> = (0..b).collect();
    let inv_t = 1.0 / cfg.temperature;
    let sim12 = tape.matmul_bt(z1, z2);
    let sim12 = tape.scale(sim12, inv_t);
    let forward = tape.cross_entropy_rows(sim12, diag.clone());
    let cl = if cfg.symmetric {
        let sim21 = tape.matmul_bt(z2, z1);
        let sim21 = tape.scale(sim21, inv_t);
        let backward = tape.cross_entropy_rows(sim21, diag);
        let sum = tape.add(forward, backward);
        tape.scale(sum, 0.5)
    } else {
        forward
    };
    let cl_total = tape.weighted_sum(cl, scaled.iter().map(|w| w * cfg.cl_weight).collect());
    let total = tape.add(rec_total, cl_total);
    Ok(ObjectiveNodes {
        total,
        rec,
        rec_rows,
        cl: Some(cl),
    })
}
