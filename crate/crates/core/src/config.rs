//! Flat `key = value` run configuration covering every module.

use std::str::FromStr;

use crate::augment::AugmentationConfig;
use crate::error::{FaclError, Result};
use crate::model::ModelConfig;
use crate::objective::LossConfig;
use crate::reweight::ReweightConfig;
use crate::trainer::TrainConfig;

/// How item-frequency bins are chosen for evaluation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BinEdges {
    Terciles,
    Fixed(Vec<u64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub item_bins: BinEdges,
    pub user_bins: BinEdges,
    pub audit_trials: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![5, 10, 20],
            item_bins: BinEdges::Terciles,
            user_bins: BinEdges::Terciles,
            audit_trials: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub augment: AugmentationConfig,
    /// `false` trains with every weight fixed at one.
    pub reweight_enabled: bool,
    pub reweight: ReweightConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub min_count: usize,
    pub data: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            augment: AugmentationConfig {
                max_len: model.max_len,
                ..Default::default()
            },
            reweight_enabled: true,
            reweight: ReweightConfig::default(),
            model,
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            min_count: 5,
            data: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| FaclError::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(FaclError::Config(format!(
            "invalid boolean {value:?} for {key}"
        ))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_edges(key: &str, value: &str) -> Result<BinEdges> {
    if value == "terciles" {
        Ok(BinEdges::Terciles)
    } else {
        Ok(BinEdges::Fixed(parse_list(key, value)?))
    }
}

fn opt_text(v: Option<f64>) -> String {
    v.map_or("none".into(), |x| x.to_string())
}

fn parse_opt(key: &str, value: &str) -> Result<Option<f64>> {
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn list_text<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn edges_text(e: &BinEdges) -> String {
    match e {
        BinEdges::Terciles => "terciles".into(),
        BinEdges::Fixed(v) => list_text(v),
    }
}

impl RunConfig {
    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let a = &self.augment;
        let r = &self.reweight;
        let m = &self.model;
        let l = &self.loss;
        let t = &self.train;
        let e = &self.eval;
        vec![
            ("seed", t.seed.to_string()),
            ("data", self.data.clone().unwrap_or_default()),
            ("min_count", self.min_count.to_string()),
            ("gamma", a.gamma.to_string()),
            ("eta", a.eta.to_string()),
            ("cap_multiplier", a.cap_multiplier.to_string()),
            ("max_resamples", a.max_resamples.to_string()),
            ("correlation_top_k", a.correlation_top_k.to_string()),
            ("correlation_window", a.correlation_window.to_string()),
            ("aug_policy", a.policy.as_str().to_string()),
            ("reweight", self.reweight_enabled.to_string()),
            ("beta", r.beta.to_string()),
            ("weight_clip_min", opt_text(r.clip.map(|c| c.0))),
            ("weight_clip_max", opt_text(r.clip.map(|c| c.1))),
            ("normalize_weights", r.normalize_batch.to_string()),
            ("embed_dim", m.embed_dim.to_string()),
            ("num_layers", m.num_layers.to_string()),
            ("num_heads", m.num_heads.to_string()),
            ("max_len", m.max_len.to_string()),
            ("dropout", m.dropout_rate.to_string()),
            ("encoder", m.encoder_kind.as_str().to_string()),
            ("cl_weight", l.cl_weight.to_string()),
            ("temperature", l.temperature.to_string()),
            ("symmetric", l.symmetric.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("epochs", t.epochs.to_string()),
            ("patience", t.patience.to_string()),
            ("adam_beta1", t.beta1.to_string()),
            ("adam_beta2", t.beta2.to_string()),
            ("adam_eps", t.eps.to_string()),
            ("grad_clip", opt_text(t.grad_clip)),
            ("all_positions", t.all_positions.to_string()),
            ("ks", list_text(&e.ks)),
            ("item_bins", edges_text(&e.item_bins)),
            ("user_bins", edges_text(&e.user_bins)),
            ("audit_trials", e.audit_trials.to_string()),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        Self::default()
            .entries()
            .into_iter()
            .map(|(k, _)| k)
            .collect()
    }

    /// Sets one key. Unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "seed" => self.train.seed = parse(key, value)?,
            "data" => self.data = (!value.is_empty()).then(|| value.to_string()),
            "min_count" => self.min_count = parse(key, value)?,
            "gamma" => self.augment.gamma = parse(key, value)?,
            "eta" => self.augment.eta = parse(key, value)?,
            "cap_multiplier" => self.augment.cap_multiplier = parse(key, value)?,
            "max_resamples" => self.augment.max_resamples = parse(key, value)?,
            "correlation_top_k" => self.augment.correlation_top_k = parse(key, value)?,
            "correlation_window" => self.augment.correlation_window = parse(key, value)?,
            "aug_policy" => self.augment.policy = parse(key, value)?,
            "reweight" => self.reweight_enabled = parse_bool(key, value)?,
            "beta" => self.reweight.beta = parse(key, value)?,
            "weight_clip_min" | "weight_clip_max" => {
                let v = parse_opt(key, value)?;
                let (lo, hi) = self.reweight.clip.unwrap_or((0.1, 10.0));
                self.reweight.clip = match (key, v) {
                    (_, None) => None,
                    ("weight_clip_min", Some(x)) => Some((x, hi)),
                    (_, Some(x)) => Some((lo, x)),
                };
            }
            "normalize_weights" => self.reweight.normalize_batch = parse_bool(key, value)?,
            "embed_dim" => self.model.embed_dim = parse(key, value)?,
            "num_layers" => self.model.num_layers = parse(key, value)?,
            "num_heads" => self.model.num_heads = parse(key, value)?,
            "max_len" => {
                self.model.max_len = parse(key, value)?;
                self.augment.max_len = self.model.max_len;
            }
            "dropout" => self.model.dropout_rate = parse(key, value)?,
            "encoder" => self.model.encoder_kind = parse(key, value)?,
            "cl_weight" => self.loss.cl_weight = parse(key, value)?,
            "temperature" => self.loss.temperature = parse(key, value)?,
            "symmetric" => self.loss.symmetric = parse_bool(key, value)?,
            "learning_rate" => self.train.learning_rate = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "epochs" => self.train.epochs = parse(key, value)?,
            "patience" => self.train.patience = parse(key, value)?,
            "adam_beta1" => self.train.beta1 = parse(key, value)?,
            "adam_beta2" => self.train.beta2 = parse(key, value)?,
            "adam_eps" => self.train.eps = parse(key, value)?,
            "grad_clip" => self.train.grad_clip = parse_opt(key, value)?,
            "all_positions" => self.train.all_positions = parse_bool(key, value)?,
            "ks" => self.eval.ks = parse_list(key, value)?,
            "item_bins" => self.eval.item_bins = parse_edges(key, value)?,
            "user_bins" => self.eval.user_bins = parse_edges(key, value)?,
            "audit_trials" => self.eval.audit_trials = parse(key, value)?,
            _ => return Err(FaclError::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| FaclError::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Parses a config file on top of the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| FaclError::Parse {
                line: n + 1,
                message: "expected key = value".into(),
            })?;
            cfg.set(k.trim(), v).map_err(|e| match e {
                FaclError::Config(m) => FaclError::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// The configuration without paths or seed. Run directories are named
    /// by its hash plus the seed.
    pub fn identity_text(&self) -> String {
        let mut c = self.clone();
        c.data = None;
        c.train.seed = 0;
        c.to_text()
    }

    pub fn validate(&self) -> Result<()> {
        self.augment.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if !(self.reweight.beta >= 0.0) {
            return Err(FaclError::Config("beta must be non-negative".into()));
        }
        if let Some((lo, hi)) = self.reweight.clip {
            if !(lo > 0.0 && lo <= hi) {
                return Err(FaclError::Config("weight clip needs 0 < min <= max".into()));
            }
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(FaclError::Config(
                "ks must be a non-empty list of positive integers".into(),
            ));
        }
        if self.min_count == 0 {
            return Err(FaclError::Config("min_count must be positive".into()));
        }
        crate::trainer::check_lengths(&self.model, &self.augment)
    }

    pub fn reweight_config(&self) -> Option<&ReweightConfig> {
        self.reweight_enabled.then_some(&self.reweight)
    }
}

impl FromStr for RunConfig {
    type Err = FaclError;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}
