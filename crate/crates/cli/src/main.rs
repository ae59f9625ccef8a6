use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use autoloss::archive::{Archive, RecordStatus};
use autoloss::grammar::{parse, Rule, DEFAULT_T_MAX};
use autoloss::graph_data::{gen_sbm, step_imbalance, Dataset, SbmConfig, Split};
use autoloss::loss_check::{basic_check, legality, CheckVerdict, MonitorConfig};
use autoloss::loss_expr::{canonical, probe, LossConfig, DEFAULT_PROBE_SEED};
use autoloss::loss_zoo::{list_presets, resolve_loss, LossKind};
use autoloss::search::{finalize, proxy_evaluator, run_search, SearchConfig, SearchStats, ToyOracle};
use autoloss::seed::derive_seed;
use autoloss::trainer::{evaluate, train, Metrics, TrainConfig, TrainMode};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "autoloss", about = "Loss-function search for imbalanced node classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[command(subcommand)]
        kind: GenKind,
    },
    /// Train a GCN with one loss and report test metrics.
    Train(TrainArgs),
    /// Search for a loss, then finalize the best candidates.
    Search(SearchArgs),
    /// Run the pre-training checks on one expression.
    VerifyLoss(VerifyArgs),
    /// Train every preset on a dataset and compare.
    EvalZoo(ZooArgs),
}

#[derive(Subcommand)]
enum GenKind {
    /// Stochastic block model with class-shifted Gaussian features.
    Sbm(SbmArgs),
}

#[derive(Args)]
struct SbmArgs {
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 100)]
    nodes_per_class: usize,
    #[arg(long, default_value_t = 0.1)]
    p_in: f64,
    #[arg(long, default_value_t = 0.01)]
    p_out: f64,
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
    #[arg(long, default_value_t = 2.0)]
    shift: f64,
    #[arg(long, default_value_t = 20)]
    train_per_class: usize,
    #[arg(long, default_value_t = 30)]
    val_per_class: usize,
    /// Step-imbalance ratio applied to the training split.
    #[arg(long, default_value_t = 1.0)]
    rho: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    report: ReportArg,
}

#[derive(Args)]
struct ReportArg {
    /// Also write the JSON report to this file.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long, default_value_t = 2000)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    hidden: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 5e-4)]
    weight_decay: f64,
    /// Feed raw logits to expression losses instead of softmax outputs.
    #[arg(long)]
    raw_logits: bool,
}

impl ModelArgs {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            mode: TrainMode::Full,
            epochs: self.epochs,
            hidden: self.hidden,
            lr: self.lr,
            weight_decay: self.weight_decay,
            seed,
            loss: LossConfig {
                raw_logits: self.raw_logits,
                ..LossConfig::default()
            },
            ..TrainConfig::full()
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Preset name or expression text.
    #[arg(long)]
    loss: String,
    #[arg(long, default_value_t = 1)]
    repeats: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    report: ReportArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum Oracle {
    /// Proxy-train a GCN per candidate.
    Proxy,
    /// Gradient match against a target expression; no training.
    Toy,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long, required_if_eq("oracle", "proxy"))]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Oracle::Proxy)]
    oracle: Oracle,
    /// Target expression for the toy oracle.
    #[arg(long, default_value = ToyOracle::DEFAULT_TARGET)]
    target: String,
    #[arg(long, default_value_t = 1)]
    trials: usize,
    #[arg(long, default_value_t = 2000)]
    episodes: usize,
    #[arg(long, default_value_t = 10)]
    sims: usize,
    #[arg(long, default_value_t = std::f64::consts::SQRT_2)]
    c: f64,
    #[arg(long, default_value_t = DEFAULT_T_MAX)]
    tmax: usize,
    #[arg(long, default_value_t = 100)]
    proxy_epochs: usize,
    #[arg(long, default_value_t = 64)]
    proxy_hidden: usize,
    #[arg(long, default_value_t = 2000)]
    full_epochs: usize,
    #[arg(long, default_value_t = 256)]
    full_hidden: usize,
    #[arg(long, default_value_t = 10)]
    top_k: usize,
    #[arg(long, default_value_t = 0.6)]
    beta: f64,
    #[arg(long, default_value_t = 0.0)]
    mono_threshold: f64,
    #[arg(long)]
    no_basic_check: bool,
    #[arg(long)]
    no_early_rejection: bool,
    /// Stop starting episodes after this many seconds.
    #[arg(long)]
    max_wall_secs: Option<f64>,
    #[arg(long)]
    raw_logits: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for archive.jsonl and report.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    expr: String,
    /// Archive to check for duplicates.
    #[arg(long)]
    archive: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_PROBE_SEED)]
    probe_seed: u64,
    #[arg(long)]
    raw_logits: bool,
    #[command(flatten)]
    report: ReportArg,
}

#[derive(Args)]
struct ZooArgs {
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated subset of presets; all by default.
    #[arg(long, value_delimiter = ',')]
    losses: Vec<String>,
    #[arg(long, default_value_t = 1)]
    repeats: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    report: ReportArg,
}

#[derive(Serialize)]
struct Summary {
    mean: f64,
    stderr: f64,
    values: Vec<f64>,
}

impl Summary {
    fn of(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let stderr = if values.len() > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            var.sqrt() / n.sqrt()
        } else {
            0.0
        };
        Self { mean, stderr, values }
    }
}

fn emit(report: &Value, file: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    if let Some(path) = file {
        fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
    }
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn load(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn checked_loss(spec: &str) -> Result<LossKind> {
    let loss = resolve_loss(spec)?;
    if let LossKind::Tree(tree) = &loss {
        if let CheckVerdict::Reject(reason) = legality(tree) {
            let missing: Vec<String> = [Rule::Yhat, Rule::Y, Rule::N]
                .into_iter()
                .filter(|r| !tree.contains(*r))
                .map(|r| r.to_string())
                .collect();
            bail!("illegal loss `{spec}`: {reason}, missing terminal {}", missing.join(", "));
        }
    }
    Ok(loss)
}

/// Trains `repeats` times with seeds seed..seed+repeats-1; test metrics.
fn repeated(ds: &Dataset, loss: &LossKind, model: &ModelArgs, seed: u64, repeats: u64) -> Result<(Vec<u64>, Vec<Metrics>)> {
    let seeds: Vec<u64> = (seed..seed + repeats).collect();
    let metrics = seeds
        .par_iter()
        .map(|&s| {
            let cfg = model.config(derive_seed(s, "init", &[]));
            let out = train(ds, loss, &cfg, None)?;
            Ok(evaluate(&out.model, ds, Split::Test)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((seeds, metrics))
}

fn summarize(metrics: &[Metrics]) -> Value {
    json!({
        "test_bacc": Summary::of(metrics.iter().map(|m| m.balanced_accuracy).collect()),
        "test_macro_f1": Summary::of(metrics.iter().map(|m| m.macro_f1).collect()),
        "test_accuracy": Summary::of(metrics.iter().map(|m| m.accuracy).collect()),
    })
}

fn gen_data(args: SbmArgs) -> Result<()> {
    let cfg = SbmConfig {
        nodes_per_class: args.nodes_per_class,
        num_classes: args.classes,
        p_in: args.p_in,
        p_out: args.p_out,
        feature_dim: args.feature_dim,
        feature_shift: args.shift,
        train_per_class: args.train_per_class,
        val_per_class: args.val_per_class,
        seed: derive_seed(args.seed, "dataset", &[]),
    };
    let ds = gen_sbm(&cfg)?;
    let ds = step_imbalance(&ds, args.rho, derive_seed(args.seed, "imbalance", &[]))?;
    ds.save(&args.out).with_context(|| format!("writing {}", args.out.display()))?;
    let report = json!({
        "command": "gen-data",
        "config": cfg,
        "rho": args.rho,
        "seed": args.seed,
        "num_nodes": ds.num_nodes(),
        "num_edges": ds.edges().len(),
        "train_class_counts": ds.train_class_counts(),
        "artifacts": { "data": args.out },
    });
    emit(&report, args.report.report.as_deref())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    if args.repeats == 0 {
        bail!("--repeats must be at least 1");
    }
    let loss = checked_loss(&args.loss)?;
    let ds = load(&args.data)?;
    let start = Instant::now();
    let (seeds, metrics) = repeated(&ds, &loss, &args.model, args.seed, args.repeats)?;
    let report = json!({
        "command": "train",
        "loss": loss.to_string(),
        "config": args.model.config(args.seed),
        "data": args.data,
        "seed": args.seed,
        "seeds": seeds,
        "metrics": summarize(&metrics),
        "runs": metrics,
        "wall_ms": start.elapsed().as_millis() as u64,
    });
    emit(&report, args.report.report.as_deref())
}

fn cmd_search(args: SearchArgs) -> Result<()> {
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let loss_cfg = LossConfig {
        raw_logits: args.raw_logits,
        ..LossConfig::default()
    };
    let cfg = SearchConfig {
        trials: args.trials,
        episodes: args.episodes,
        simulations: args.sims,
        exploration: args.c,
        t_max: args.tmax,
        basic_check: !args.no_basic_check,
        early_rejection: !args.no_early_rejection,
        monitor: MonitorConfig {
            beta: args.beta,
            mono_threshold: args.mono_threshold,
            top_k: args.top_k,
            ..MonitorConfig::default()
        },
        loss: loss_cfg,
        seed: args.seed,
        max_wall_secs: args.max_wall_secs,
        ..SearchConfig::default()
    };
    let archive_path = args.out.join("archive.jsonl");
    let report_path = args.out.join("report.json");
    let mut archive = Archive::with_sink(&archive_path)?;
    let proxy = TrainConfig {
        epochs: args.proxy_epochs,
        hidden: args.proxy_hidden,
        seed: derive_seed(args.seed, "init", &[]),
        loss: loss_cfg,
        ..TrainConfig::proxy()
    };
    let full = TrainConfig {
        epochs: args.full_epochs,
        hidden: args.full_hidden,
        seed: derive_seed(args.seed, "init", &[]),
        loss: loss_cfg,
        ..TrainConfig::full()
    };

    let (stats, finalized): (SearchStats, Value) = match args.oracle {
        Oracle::Toy => {
            let target = parse(&args.target)?;
            let mut oracle = ToyOracle::new(&target, cfg.probe_seed, loss_cfg)?;
            let stats = run_search(&cfg, &mut oracle, &mut archive)?;
            let top: Vec<_> = archive.top_finished(args.top_k).into_iter().map(|i| &archive.records()[i]).collect();
            (stats, json!({ "top10": top, "best": top.first() }))
        }
        Oracle::Proxy => {
            let data = args.data.as_deref().expect("clap requires --data for the proxy oracle");
            let ds = load(data)?;
            let mut evaluator = proxy_evaluator(&ds, &cfg, proxy)?;
            let stats = run_search(&cfg, &mut evaluator, &mut archive)?;
            let report = finalize(&archive, &ds, &full, args.top_k)?;
            (stats, serde_json::to_value(report)?)
        }
    };
    let report = json!({
        "command": "search",
        "config": cfg,
        "proxy": proxy,
        "full": full,
        "data": args.data,
        "oracle": match args.oracle { Oracle::Toy => "toy", Oracle::Proxy => "proxy" },
        "seed": args.seed,
        "stats": stats,
        "top10": finalized["top10"],
        "best": finalized["best"],
        "artifacts": { "archive": archive_path, "report": report_path },
    });
    fs::write(&report_path, serde_json::to_string_pretty(&report)?)
        .with_context(|| format!("writing {}", report_path.display()))?;
    emit(&report, None)
}

fn cmd_verify(args: VerifyArgs) -> Result<()> {
    let tree = parse(&args.expr)?;
    let cfg = LossConfig {
        raw_logits: args.raw_logits,
        ..LossConfig::default()
    };
    let mut archive = match &args.archive {
        Some(p) => Archive::load(p).with_context(|| format!("loading archive {}", p.display()))?,
        None => Archive::new(),
    };
    for i in 0..archive.len() {
        let rec = &archive.records()[i];
        if let Ok(t) = rec.tree() {
            if matches!(rec.status, RecordStatus::Finished) {
                let hash = probe(&t, args.probe_seed, &cfg).fingerprint.hash;
                archive.index_fingerprint(i, hash);
            }
        }
    }
    let report_probe = probe(&tree, args.probe_seed, &cfg);
    let legal = legality(&tree);
    let legality_text = match &legal {
        CheckVerdict::Reject(r) => format!("reject({r})"),
        _ => "accept".to_string(),
    };
    let verdict = match legal {
        CheckVerdict::Accept => basic_check(&tree, &archive, args.probe_seed, &cfg).verdict,
        other => other,
    };
    let verdict_text = match &verdict {
        CheckVerdict::Accept => "accept".to_string(),
        CheckVerdict::Reject(r) => format!("reject({r})"),
        CheckVerdict::Cached { source, .. } => format!("cached({})", archive.records()[*source].canonical),
    };
    let report = json!({
        "command": "verify-loss",
        "expr": tree.to_string(),
        "canonical": canonical(&tree),
        "rules": tree.size(),
        "legality": legality_text,
        "probe_seed": args.probe_seed,
        "probe_values": report_probe.values,
        "fingerprint": format!("{:016x}", report_probe.fingerprint.hash),
        "non_finite": report_probe.fingerprint.non_finite,
        "zero_gradient": report_probe.fingerprint.all_zero,
        "verdict": verdict_text,
        "cached_reward": match verdict { CheckVerdict::Cached { reward, .. } => Some(reward), _ => None },
    });
    emit(&report, args.report.report.as_deref())
}

fn cmd_zoo(args: ZooArgs) -> Result<()> {
    if args.repeats == 0 {
        bail!("--repeats must be at least 1");
    }
    let ds = load(&args.data)?;
    let names: Vec<String> = if args.losses.is_empty() {
        list_presets().into_iter().map(String::from).collect()
    } else {
        args.losses.clone()
    };
    let mut rows = Vec::new();
    let mut table = format!("{:<18} {:>16} {:>16}\n", "loss", "test bAcc", "test macro-F1");
    for name in &names {
        let loss = checked_loss(name)?;
        let (_, metrics) = repeated(&ds, &loss, &args.model, args.seed, args.repeats)?;
        let bacc = Summary::of(metrics.iter().map(|m| m.balanced_accuracy * 100.0).collect());
        let f1 = Summary::of(metrics.iter().map(|m| m.macro_f1 * 100.0).collect());
        table.push_str(&format!(
            "{:<18} {:>9.2} ± {:<4.2} {:>9.2} ± {:<4.2}\n",
            name, bacc.mean, bacc.stderr, f1.mean, f1.stderr
        ));
        rows.push(json!({ "loss": name, "expr": loss.to_string(), "metrics": summarize(&metrics) }));
    }
    eprint!("{table}");
    let report = json!({
        "command": "eval-zoo",
        "config": args.model.config(args.seed),
        "data": args.data,
        "seed": args.seed,
        "repeats": args.repeats,
        "rows": rows,
        "table": table,
    });
    emit(&report, args.report.report.as_deref())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { kind: GenKind::Sbm(a) } => gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Search(a) => cmd_search(a),
        Command::VerifyLoss(a) => cmd_verify(a),
        Command::EvalZoo(a) => cmd_zoo(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
