//! Long-tail synthetic interaction corpora.

use rand::Rng;
use rand_distr::{Distribution, Zipf};
use serde::Serialize;

use crate::corpus::Corpus;
use crate::error::{FaclError, Result};
use crate::rng::{view, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SyntheticSpec {
    pub num_users: usize,
    pub num_items: usize,
    pub zipf_exponent: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Size of each user's favored item subset.
    pub favored_size: usize,
    /// Probability that a position is drawn from the favored subset rather
    /// than the Zipf background.
    pub favored_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_users: 2000,
            num_items: 500,
            zipf_exponent: 1.2,
            min_len: 5,
            max_len: 20,
            favored_size: 5,
            favored_prob: 0.3,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FaclError::Config(m.into()));
        if !(self.zipf_exponent > 0.0) {
            return bad("zipf_exponent must be positive");
        }
        if self.num_users == 0 || self.num_items == 0 {
            return bad("num_users and num_items must be positive");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("sequence lengths need 1 <= min_len <= max_len");
        }
        if !(0.0..=1.0).contains(&self.favored_prob) {
            return bad("favored_prob must lie in [0, 1]");
        }
        if self.favored_prob > 0.0 && self.favored_size == 0 {
            return bad("favored_size must be positive when favored_prob > 0");
        }
        Ok(())
    }
}

/// Users are `u0..`, raw item ids are `1..=num_items` with id 1 the most
/// popular in the background distribution. Favored subsets are uniform
/// over the catalog.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Corpus> {
    spec.validate()?;
    let zipf = Zipf::new(spec.num_items as f64, spec.zipf_exponent)
        .map_err(|e| FaclError::Config(format!("zipf: {e}")))?;
    let mut raw = Vec::with_capacity(spec.num_users);
    for u in 0..spec.num_users {
        let mut rng = RngStream::new(spec.seed, u as u64, 0, view::SYNTH).rng();
        let favored: Vec<u64> = (0..spec.favored_size)
            .map(|_| rng.random_range(1..=spec.num_items as u64))
            .collect();
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let items = (0..len)
            .map(|_| {
                if !favored.is_empty() && rng.random::<f64>() < spec.favored_prob {
                    favored[rng.random_range(0..favored.len())]
                } else {
                    zipf.sample(&mut rng) as u64
                }
            })
            .collect();
        raw.push((format!("u{u}"), items));
    }
    Ok(Corpus::from_raw(raw))
}
