//! Config resolution, run directories and output file formats.

use std::fs;
use std::path::{Path, PathBuf};

use facl_core::config::RunConfig;
use facl_core::corpus::{parse_interactions, Corpus};
use facl_core::eval::{AuditRow, EvalReport};
use facl_core::trainer::EpochRecord;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};
use crate::RunArgs;

pub const CONFIG_FILE: &str = "config.txt";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LAST_CHECKPOINT: &str = "checkpoints/last.ckpt";
pub const BEST_CHECKPOINT: &str = "checkpoints/best.ckpt";
pub const BEST_MARKER: &str = "BEST";
pub const METRICS_FILE: &str = "metrics.json";
pub const BINS_FILE: &str = "bins.csv";

pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::new("E_IO", format!("{}: {e}", path.display())))
}

/// Writes through a temporary sibling so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| CliError::new("E_IO", format!("{}: {e}", tmp.display())))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// A configuration together with the dataset it names.
pub struct Loaded {
    pub cfg: RunConfig,
    pub raw: Corpus,
    data_digest: String,
}

/// Defaults, then the config file, then `--data`/`--seed`, then `--set`.
pub fn resolve_config(args: &RunArgs) -> CliResult<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::parse(&read_text(p)?)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &args.data {
        cfg.data = Some(d.display().to_string());
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    cfg.apply_overrides(&args.sets)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_dataset(cfg: RunConfig) -> CliResult<Loaded> {
    let data_path =
        PathBuf::from(cfg.data.clone().ok_or_else(|| {
            CliError::usage("no dataset: pass --data or set `data` in the config")
        })?);
    let text = read_text(&data_path)?;
    let data_digest = format!("{:x}", Sha256::digest(text.as_bytes()));
    let raw = parse_interactions(&text)?;
    Ok(Loaded {
        cfg,
        raw,
        data_digest,
    })
}

pub fn load(args: &RunArgs) -> CliResult<Loaded> {
    load_dataset(resolve_config(args)?)
}

impl Loaded {
    /// First 12 hex digits of the hash of the seedless, pathless config and
    /// the dataset contents.
    pub fn config_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.cfg.identity_text().as_bytes());
        h.update(self.data_digest.as_bytes());
        format!("{:x}", h.finalize())[..12].to_string()
    }

    pub fn run_dir(&self, out_root: &Path, out_dir: Option<&Path>) -> PathBuf {
        match out_dir {
            Some(d) => d.to_path_buf(),
            None => out_root.join(format!("{}-s{}", self.config_hash(), self.cfg.train.seed)),
        }
    }
}

pub fn metrics_json(report: &EvalReport, split: &str, extra: &[(&str, Value)]) -> Value {
    let mut m = Map::new();
    m.insert("split".into(), json!(split));
    m.insert("num_instances".into(), json!(report.num_instances));
    for &(k, hr, ndcg) in &report.overall {
        m.insert(format!("HR@{k}"), json!(hr));
        m.insert(format!("NDCG@{k}"), json!(ndcg));
    }
    for (k, v) in extra {
        m.insert((*k).into(), v.clone());
    }
    m.insert("item_bins".into(), json!(report.item_bins));
    m.insert("user_bins".into(), json!(report.user_bins));
    Value::Object(m)
}

pub fn bins_csv(report: &EvalReport) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["bin_kind", "bin_label", "metric", "value", "count"])?;
    for (kind, label, metric, value, count) in report.bin_rows() {
        w.write_record([kind, label, metric, value.to_string(), count.to_string()])?;
    }
    into_bytes(w)
}

pub fn audit_csv(rows: &[AuditRow]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record([
            "bin_label",
            "operator",
            "expected_perturb_rate",
            "observed_perturb_rate",
            "trials",
        ])?;
    }
    into_bytes(w)
}

pub fn into_bytes(w: csv::Writer<Vec<u8>>) -> CliResult<Vec<u8>> {
    w.into_inner()
        .map_err(|e| CliError::new("E_IO", e.to_string()))
}

/// One JSON line per epoch.
pub fn log_line(r: &EpochRecord) -> String {
    let m = &r.metrics;
    json!({
        "epoch": m.epoch,
        "rec_loss": m.rec_loss,
        "cl_loss": m.cl_loss,
        "total": m.total,
        "mean_lambda": m.mean_lambda,
        "valid_hr10": r.valid_hr10,
        "valid_ndcg10": r.valid_ndcg10,
    })
    .to_string()
}

/// Bucket lower edges and counts, with empty buckets between filled ones kept.
pub fn histogram(values: &[f64], width: f64) -> Vec<(f64, u64)> {
    if values.is_empty() {
        return Vec::new();
    }
    let bucket = |v: f64| (v / width).floor() as i64;
    let lo = values.iter().map(|&v| bucket(v)).min().unwrap_or(0);
    let hi = values.iter().map(|&v| bucket(v)).max().unwrap_or(0);
    let mut counts = vec![0u64; (hi - lo + 1) as usize];
    for &v in values {
        counts[(bucket(v) - lo) as usize] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| ((lo + i as i64) as f64 * width, c))
        .collect()
}
