use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use facl_core::augment::{AugmentContext, ItemOp};
use facl_core::checkpoint::{decode_checkpoint, encode_checkpoint, tensor_summary};
use facl_core::config::RunConfig;
use facl_core::corpus::labeled_pairs_to_text;
use facl_core::eval::perturbation_audit;
use facl_core::experiment::{evaluate, prepare, run, Prepared};
use facl_core::reweight::sequence_weight;
use facl_core::synth::{generate_synthetic, SyntheticSpec};
use log::info;
use serde_json::{json, Value};

use crate::error::{CliError, CliResult};
use crate::files::*;
use crate::{CheckpointCommand, Cli, Command, EvalArgs, RunArgs, SynthArgs};

/// `println!` that ignores a closed stdout, e.g. when piped into `head`.
macro_rules! say {
    ($($t:tt)*) => {{
        let _ = writeln!(std::io::stdout().lock(), $($t)*);
    }};
}

pub fn dispatch(cli: Cli) -> CliResult<()> {
    let root = cli.out_root.as_path();
    match cli.command {
        Command::Prepare(args) => cmd_prepare(root, &args),
        Command::Stats {
            run,
            lambda_hist,
            bucket_width,
        } => cmd_stats(&run, lambda_hist.as_deref(), bucket_width),
        Command::GenSynth(args) => cmd_gen_synth(&args),
        Command::AuditAug { run, op, trials } => cmd_audit(root, &run, &op, trials),
        Command::Train(args) => cmd_train(root, &args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Sweep { run, grid, out } => cmd_sweep(root, &run, &grid, out),
        Command::Report { run } => cmd_report(&run),
        Command::Checkpoint(CheckpointCommand::Inspect { path }) => cmd_inspect(&path),
    }
}

fn stats_json(loaded: &Loaded, p: &Prepared) -> Value {
    let kept: HashSet<&str> = p
        .split
        .train
        .sequences
        .iter()
        .map(|s| s.user.as_str())
        .collect();
    let excluded: Vec<&str> = loaded
        .raw
        .sequences
        .iter()
        .map(|s| s.user.as_str())
        .filter(|u| !kept.contains(u))
        .collect();
    json!({
        "global_avg_frequency": p.stats.global_avg_frequency,
        "global_avg_length": p.stats.global_avg_length,
        "num_users": p.split.train.len(),
        "num_items": p.num_items(),
        "num_training_items": p.freq.num_training_items(),
        "num_train_interactions": p.split.train.num_interactions(),
        "excluded_users": excluded,
    })
}

fn cmd_prepare(root: &Path, args: &RunArgs) -> CliResult<()> {
    let loaded = load(args)?;
    let p = prepare(&loaded.raw, &loaded.cfg)?;
    let dir = loaded.run_dir(root, args.out_dir.as_deref());
    let vocab = &p.corpus.vocab;
    write_atomic(&dir.join("train.txt"), p.split.train.to_text().as_bytes())?;
    write_atomic(
        &dir.join("valid.txt"),
        labeled_pairs_to_text(&p.split.valid, vocab).as_bytes(),
    )?;
    write_atomic(
        &dir.join("test.txt"),
        labeled_pairs_to_text(&p.split.test, vocab).as_bytes(),
    )?;
    let stats = serde_json::to_string_pretty(&stats_json(&loaded, &p))?;
    write_atomic(&dir.join("stats.json"), stats.as_bytes())?;
    write_atomic(&dir.join("correlation.idx"), p.corr.to_text().as_bytes())?;
    write_atomic(&dir.join(CONFIG_FILE), loaded.cfg.to_text().as_bytes())?;
    say!("{}", dir.display());
    Ok(())
}

fn sequence_weights(cfg: &RunConfig, p: &Prepared) -> Vec<f64> {
    p.split
        .train
        .sequences
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| {
            cfg.reweight_config()
                .map_or(1.0, |r| sequence_weight(&s.items, &p.freq, &p.stats, r))
        })
        .collect()
}

fn cmd_stats(args: &RunArgs, lambda_hist: Option<&Path>, width: f64) -> CliResult<()> {
    if !(width > 0.0 && width.is_finite()) {
        return Err(CliError::usage("--bucket-width must be positive"));
    }
    let loaded = load(args)?;
    let p = prepare(&loaded.raw, &loaded.cfg)?;
    let weights = sequence_weights(&loaded.cfg, &p);
    let mut out = stats_json(&loaded, &p);
    let n = weights.len().max(1) as f64;
    out["lambda"] = json!({
        "mean": weights.iter().sum::<f64>() / n,
        "min": weights.iter().copied().fold(f64::INFINITY, f64::min),
        "max": weights.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    });
    if let Some(path) = lambda_hist {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["weight_bucket", "count"])?;
        for (edge, count) in histogram(&weights, width) {
            w.write_record([format!("{edge:.6}"), count.to_string()])?;
        }
        write_atomic(path, &into_bytes(w)?)?;
    }
    say!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn cmd_gen_synth(a: &SynthArgs) -> CliResult<()> {
    let spec = SyntheticSpec {
        num_users: a.users,
        num_items: a.items,
        zipf_exponent: a.zipf,
        min_len: a.min_len,
        max_len: a.max_len,
        favored_size: a.favored_size,
        favored_prob: a.favored_prob,
        seed: a.seed,
    };
    let corpus = generate_synthetic(&spec)?;
    write_atomic(&a.out, corpus.to_text().as_bytes())?;
    info!("wrote {} users to {}", corpus.len(), a.out.display());
    Ok(())
}

fn cmd_audit(root: &Path, args: &RunArgs, op: &str, trials: Option<u64>) -> CliResult<()> {
    let ops: Vec<ItemOp> = match op {
        "all" => vec![ItemOp::Drop, ItemOp::Substitute, ItemOp::Insert],
        other => vec![other
            .parse()
            .map_err(|_| CliError::usage(format!("unknown --op `{other}`")))?],
    };
    let loaded = load(args)?;
    let cfg = &loaded.cfg;
    let trials = trials.unwrap_or(cfg.eval.audit_trials);
    let p = prepare(&loaded.raw, cfg)?;
    let ctx = AugmentContext {
        cfg: &cfg.augment,
        freq: &p.freq,
        stats: &p.stats,
        corr: &p.corr,
    };
    let bins = p.item_bins(&cfg.eval.item_bins)?;
    let mut rows = Vec::new();
    for op in ops {
        rows.extend(perturbation_audit(
            &p.split.train,
            &ctx,
            &bins,
            op,
            trials,
            cfg.train.seed,
        ));
    }
    let path = loaded
        .run_dir(root, args.out_dir.as_deref())
        .join("audit.csv");
    write_atomic(&path, &audit_csv(&rows)?)?;
    for r in &rows {
        say!(
            "{:<12} {:<10} expected {:.4} observed {:.4}",
            r.bin_label,
            r.operator,
            r.expected_perturb_rate,
            r.observed_perturb_rate
        );
    }
    say!("{}", path.display());
    Ok(())
}

fn write_eval(dir: &Path, suffix: &str, metrics: &Value, bins: &[u8]) -> CliResult<()> {
    let name = |base: &str, ext: &str| dir.join(format!("{base}{suffix}.{ext}"));
    write_atomic(
        &name("metrics", "json"),
        serde_json::to_string_pretty(metrics)?.as_bytes(),
    )?;
    write_atomic(&name("bins", "csv"), bins)
}

fn cmd_train(root: &Path, args: &RunArgs) -> CliResult<()> {
    let loaded = load(args)?;
    let cfg = &loaded.cfg;
    let dir = loaded.run_dir(root, args.out_dir.as_deref());
    fs::create_dir_all(dir.join(CHECKPOINT_DIR))?;
    write_atomic(&dir.join(CONFIG_FILE), cfg.to_text().as_bytes())?;
    let p = prepare(&loaded.raw, cfg)?;
    info!(
        "{} users, {} items, run directory {}",
        p.split.train.len(),
        p.num_items(),
        dir.display()
    );
    let mut log = fs::File::create(dir.join(LOG_FILE))?;
    let outcome = run(&p, cfg, |rec, params| {
        let io = |e: std::io::Error| facl_core::FaclError::Io(e.to_string());
        writeln!(log, "{}", log_line(rec)).map_err(io)?;
        log.flush().map_err(io)?;
        let bytes = encode_checkpoint(cfg, params);
        let save = |rel: &str| {
            write_atomic(&dir.join(rel), &bytes).map_err(|e| facl_core::FaclError::Io(e.message))
        };
        save(LAST_CHECKPOINT)?;
        if rec.improved {
            save(BEST_CHECKPOINT)?;
            let marker = format!(
                "epoch = {}\nvalid_ndcg10 = {}\ncheckpoint = {BEST_CHECKPOINT}\n",
                rec.metrics.epoch, rec.valid_ndcg10
            );
            save_marker(&dir, &marker)?;
        }
        info!(
            "epoch {} total {:.4} rec {:.4} cl {:.4} valid ndcg@10 {:.4}",
            rec.metrics.epoch,
            rec.metrics.total,
            rec.metrics.rec_loss,
            rec.metrics.cl_loss,
            rec.valid_ndcg10
        );
        Ok(())
    })?;
    let extra = [
        ("best_epoch", json!(outcome.fit.best_epoch)),
        ("best_valid_ndcg10", json!(outcome.fit.best_valid_ndcg10)),
    ];
    let metrics = metrics_json(&outcome.test_report, "test", &extra);
    write_eval(&dir, "", &metrics, &bins_csv(&outcome.test_report)?)?;
    say!(
        "test HR@10 {:.4} NDCG@10 {:.4} best epoch {}",
        outcome.test_report.hr(10).unwrap_or(f64::NAN),
        outcome.test_report.ndcg(10).unwrap_or(f64::NAN),
        outcome.fit.best_epoch
    );
    say!("{}", dir.display());
    Ok(())
}

fn save_marker(dir: &Path, text: &str) -> facl_core::Result<()> {
    write_atomic(&dir.join(BEST_MARKER), text.as_bytes())
        .map_err(|e| facl_core::FaclError::Io(e.message))
}

fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let (ckpt_path, default_dir) = match (&a.run, &a.checkpoint) {
        (Some(run), _) => (run.join(BEST_CHECKPOINT), run.clone()),
        (None, Some(c)) => (
            c.clone(),
            c.parent().map(Path::to_path_buf).unwrap_or_default(),
        ),
        (None, None) => return Err(CliError::usage("pass --run or --checkpoint")),
    };
    let bytes = fs::read(&ckpt_path)
        .map_err(|e| CliError::new("E_IO", format!("{}: {e}", ckpt_path.display())))?;
    let ckpt = decode_checkpoint(&bytes)?;
    let mut cfg = ckpt.config;
    if let Some(d) = &a.data {
        cfg.data = Some(d.display().to_string());
    }
    let loaded = load_dataset(cfg)?;
    let p = prepare(&loaded.raw, &loaded.cfg)?;
    if p.num_items() != ckpt.params.num_items() {
        return Err(CliError::new(
            "E_SHAPE",
            format!(
                "checkpoint scores {} items but the dataset has {}",
                ckpt.params.num_items(),
                p.num_items()
            ),
        ));
    }
    let pairs = if a.split == "valid" {
        &p.split.valid
    } else {
        &p.split.test
    };
    let (_, report) = evaluate(&ckpt.params, &p, pairs, &loaded.cfg)?;
    let dir = a.out_dir.clone().unwrap_or(default_dir);
    let suffix = if a.split == "test" { "" } else { "_valid" };
    let metrics = metrics_json(
        &report,
        &a.split,
        &[("checkpoint", json!(ckpt_path.display().to_string()))],
    );
    write_eval(&dir, suffix, &metrics, &bins_csv(&report)?)?;
    say!(
        "{} HR@10 {:.4} NDCG@10 {:.4} over {} instances",
        a.split,
        report.hr(10).unwrap_or(f64::NAN),
        report.ndcg(10).unwrap_or(f64::NAN),
        report.num_instances
    );
    Ok(())
}

/// `(key, values)` per `--grid` flag, keys unique and valid.
fn parse_grid(grid: &[String]) -> CliResult<Vec<(String, Vec<String>)>> {
    let known = RunConfig::keys();
    let mut axes: Vec<(String, Vec<String>)> = Vec::new();
    for g in grid {
        let (k, vs) = g
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("--grid {g:?} is not key=v1,v2")))?;
        let k = k.trim().to_string();
        if !known.contains(&k.as_str()) {
            return Err(CliError::new(
                "E_CONFIG",
                format!("unknown config key {k:?} in --grid"),
            ));
        }
        if axes.iter().any(|(a, _)| *a == k) {
            return Err(CliError::usage(format!("--grid key {k:?} given twice")));
        }
        let vs: Vec<String> = vs
            .split(',')
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty())
            .collect();
        if vs.is_empty() {
            return Err(CliError::usage(format!("--grid {k:?} has no values")));
        }
        axes.push((k, vs));
    }
    Ok(axes)
}

fn cartesian(axes: &[(String, Vec<String>)]) -> Vec<Vec<String>> {
    axes.iter().fold(vec![Vec::new()], |acc, (_, vs)| {
        acc.iter()
            .flat_map(|prefix| {
                vs.iter().map(move |v| {
                    let mut c = prefix.clone();
                    c.push(v.clone());
                    c
                })
            })
            .collect()
    })
}

struct SweepRow {
    values: Vec<String>,
    hr10: String,
    ndcg10: String,
    status: String,
    message: String,
}

fn sweep_header(axes: &[(String, Vec<String>)]) -> Vec<String> {
    let mut h: Vec<String> = axes.iter().map(|(k, _)| k.clone()).collect();
    h.extend(["HR@10", "NDCG@10", "status", "message"].map(String::from));
    h
}

/// Completed cells from an earlier run of the same grid.
fn read_sweep(path: &Path, header: &[String]) -> CliResult<HashMap<Vec<String>, SweepRow>> {
    let mut done = HashMap::new();
    if !path.exists() {
        return Ok(done);
    }
    let mut r = csv::Reader::from_path(path)?;
    let found: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if found != header {
        return Err(CliError::new(
            "E_CONFIG",
            format!(
                "{} was written for a different grid; choose another --out",
                path.display()
            ),
        ));
    }
    let k = header.len() - 4;
    for rec in r.records() {
        let rec = rec?;
        let f: Vec<String> = rec.iter().map(String::from).collect();
        if f.len() != header.len() {
            continue;
        }
        let row = SweepRow {
            values: f[..k].to_vec(),
            hr10: f[k].clone(),
            ndcg10: f[k + 1].clone(),
            status: f[k + 2].clone(),
            message: f[k + 3].clone(),
        };
        done.insert(row.values.clone(), row);
    }
    Ok(done)
}

fn write_sweep(path: &Path, header: &[String], rows: &[SweepRow]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        let mut rec = r.values.clone();
        rec.extend([
            r.hr10.clone(),
            r.ndcg10.clone(),
            r.status.clone(),
            r.message.clone(),
        ]);
        w.write_record(&rec)?;
    }
    write_atomic(path, &into_bytes(w)?)
}

fn run_cell(
    loaded: &Loaded,
    axes: &[(String, Vec<String>)],
    values: &[String],
) -> CliResult<(f64, f64)> {
    let mut cfg = loaded.cfg.clone();
    for ((k, _), v) in axes.iter().zip(values) {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    let p = prepare(&loaded.raw, &cfg)?;
    let out = run(&p, &cfg, |_, _| Ok(()))?;
    let r = &out.test_report;
    Ok((r.hr(10).unwrap_or(f64::NAN), r.ndcg(10).unwrap_or(f64::NAN)))
}

fn cmd_sweep(root: &Path, args: &RunArgs, grid: &[String], out: Option<PathBuf>) -> CliResult<()> {
    let axes = parse_grid(grid)?;
    let loaded = load(args)?;
    let path = out.unwrap_or_else(|| {
        loaded
            .run_dir(root, args.out_dir.as_deref())
            .join("sweep.csv")
    });
    let header = sweep_header(&axes);
    let mut previous = read_sweep(&path, &header)?;
    let cells = cartesian(&axes);
    let mut rows: Vec<SweepRow> = Vec::with_capacity(cells.len());
    let (mut failed, mut skipped) = (0, 0);
    for (i, values) in cells.into_iter().enumerate() {
        if let Some(prev) = previous.remove(&values).filter(|r| r.status == "ok") {
            skipped += 1;
            rows.push(prev);
            continue;
        }
        let label: Vec<String> = axes
            .iter()
            .zip(&values)
            .map(|((k, _), v)| format!("{k}={v}"))
            .collect();
        info!("cell {}: {}", i + 1, label.join(" "));
        let result = catch_unwind(AssertUnwindSafe(|| run_cell(&loaded, &axes, &values)))
            .unwrap_or_else(|_| Err(CliError::new("E_PANIC", "cell panicked")));
        let row = match result {
            Ok((hr, ndcg)) => SweepRow {
                values,
                hr10: hr.to_string(),
                ndcg10: ndcg.to_string(),
                status: "ok".into(),
                message: String::new(),
            },
            Err(e) => {
                failed += 1;
                log::warn!("cell {} failed: {e}", i + 1);
                SweepRow {
                    values,
                    hr10: String::new(),
                    ndcg10: String::new(),
                    status: "failed".into(),
                    message: e.to_string(),
                }
            }
        };
        rows.push(row);
        write_sweep(&path, &header, &rows)?;
    }
    write_sweep(&path, &header, &rows)?;
    say!(
        "{} cells, {} reused, {} failed: {}",
        rows.len(),
        skipped,
        failed,
        path.display()
    );
    Ok(())
}

const REPORT_FILES: [&str; 6] = [
    CONFIG_FILE,
    LOG_FILE,
    BEST_MARKER,
    BEST_CHECKPOINT,
    METRICS_FILE,
    BINS_FILE,
];

fn cmd_report(dir: &Path) -> CliResult<()> {
    if !dir.is_dir() {
        return Err(CliError::new(
            "E_MISSING",
            format!("{} is not a directory", dir.display()),
        ));
    }
    let missing: Vec<&str> = REPORT_FILES
        .iter()
        .copied()
        .filter(|f| !dir.join(f).exists())
        .collect();
    say!("run {}", dir.display());
    if let Ok(text) = fs::read_to_string(dir.join(BEST_MARKER)) {
        for line in text.lines() {
            say!("best {line}");
        }
    }
    if let Ok(text) = fs::read_to_string(dir.join(LOG_FILE)) {
        let mut w = csv::Writer::from_writer(Vec::new());
        let cols = [
            "epoch",
            "rec_loss",
            "cl_loss",
            "total",
            "mean_lambda",
            "valid_hr10",
            "valid_ndcg10",
        ];
        w.write_record(cols)?;
        let mut last = None;
        let mut epochs = 0;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let v: Value = serde_json::from_str(line)?;
            w.write_record(cols.map(|c| v.get(c).map_or(String::new(), |x| x.to_string())))?;
            epochs += 1;
            last = Some(v);
        }
        write_atomic(&dir.join("report_curves.csv"), &into_bytes(w)?)?;
        say!("epochs logged {epochs}");
        if let Some(v) = last {
            say!(
                "last epoch total {} rec {} cl {} mean_lambda {}",
                v["total"],
                v["rec_loss"],
                v["cl_loss"],
                v["mean_lambda"]
            );
        }
    }
    if let Ok(text) = fs::read_to_string(dir.join(METRICS_FILE)) {
        let v: Value = serde_json::from_str(&text)?;
        if let Some(m) = v.as_object() {
            for (k, x) in m
                .iter()
                .filter(|(k, _)| k.starts_with("HR@") || k.starts_with("NDCG@"))
            {
                say!("{} {k} {x}", v["split"].as_str().unwrap_or("test"));
            }
        }
    }
    if dir.join(BINS_FILE).exists() {
        // Pivot to one row per bin.
        let mut r = csv::Reader::from_path(dir.join(BINS_FILE))?;
        let mut order: Vec<(String, String)> = Vec::new();
        let mut cells: HashMap<(String, String), (String, String, String)> = HashMap::new();
        for rec in r.records() {
            let rec = rec?;
            let key = (rec[0].to_string(), rec[1].to_string());
            if !cells.contains_key(&key) {
                order.push(key.clone());
            }
            let e = cells.entry(key).or_default();
            match &rec[2] {
                "hr@10" => e.0 = rec[3].to_string(),
                "ndcg@10" => e.1 = rec[3].to_string(),
                _ => {}
            }
            e.2 = rec[4].to_string();
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["bin_kind", "bin_label", "hr@10", "ndcg@10", "count"])?;
        for key in &order {
            let (hr, ndcg, count) = &cells[key];
            say!(
                "{:<5} {:<12} HR@10 {hr} NDCG@10 {ndcg} n {count}",
                key.0,
                key.1
            );
            w.write_record([&key.0, &key.1, hr, ndcg, count])?;
        }
        write_atomic(&dir.join("report_bins.csv"), &into_bytes(w)?)?;
    }
    if missing.is_empty() {
        Ok(())
    } else {
        for m in &missing {
            say!("missing {m}");
        }
        Err(CliError::new(
            "E_MISSING",
            format!("run directory lacks {}", missing.join(", ")),
        ))
    }
}

fn cmd_inspect(path: &Path) -> CliResult<()> {
    let bytes =
        fs::read(path).map_err(|e| CliError::new("E_IO", format!("{}: {e}", path.display())))?;
    let ckpt = decode_checkpoint(&bytes)?;
    let m = &ckpt.params.config;
    say!(
        "encoder {} embed_dim {} layers {} heads {} max_len {} items {} scalars {}",
        m.encoder_kind.as_str(),
        m.embed_dim,
        m.num_layers,
        m.num_heads,
        m.max_len,
        ckpt.params.num_items(),
        ckpt.params.num_scalars()
    );
    say!(
        "{:<28} {:>8} {:>6} {:>14}",
        "tensor",
        "rows",
        "cols",
        "l2_norm"
    );
    for (name, rows, cols, norm) in tensor_summary(&ckpt.params) {
        say!("{name:<28} {rows:>8} {cols:>6} {norm:>14.6e}");
    }
    Ok(())
}
