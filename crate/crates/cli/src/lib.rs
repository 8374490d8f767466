//! The `dgat` command line: synthetic data, training, evaluation,
//! explanations and directional-bias statistics.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use thiserror::Error;

use dgat_core::data::{
    generate_synthetic, load_checkpoint_any, load_dataset, save_checkpoint, save_dataset, AnyCheckpoint,
    Checkpoint, DataError, DatasetBundle,
};
use dgat_core::explain::{
    aggregate_bias, bias_proportions, classify_edges_by_direction, default_centers, explain_node, ExplainConfig,
    ExplainError,
};
use dgat_core::layers::{count_parameters, LayerError, LayerKind, Model, ModelConfig};
use dgat_core::train::{evaluate, train, EpochMetrics, TrainConfig, TrainError};
use dgat_core::{Precision, Scalar};

pub use config::RunConfig;

pub const RESOLVED_CONFIG: &str = "config.resolved";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const SUMMARY_FILE: &str = "summary.tsv";
pub const HISTOGRAM_FILE: &str = "histogram.tsv";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] LayerError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
}

impl CliError {
    /// Short machine-readable category for the `error[...]` line.
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Io(_) => "io",
            CliError::Data(DataError::Io { .. } | DataError::MissingFile(_)) => "io",
            CliError::Data(DataError::Config(_)) => "config",
            CliError::Data(DataError::Checkpoint(_) | DataError::Version { .. } | DataError::Precision { .. }) => {
                "checkpoint"
            }
            CliError::Data(_) => "data",
            CliError::Model(_) => "model",
            CliError::Train(TrainError::Config(_)) => "config",
            CliError::Train(_) => "train",
            CliError::Explain(ExplainError::TargetOutOfRange { .. }) => "target",
            CliError::Explain(ExplainError::Config(_)) => "config",
            CliError::Explain(_) => "explain",
        }
    }

    pub fn message(&self) -> String {
        self.to_string().replace('\n', " ")
    }
}

#[derive(Debug, Parser)]
#[command(name = "dgat", version, about = "Directed graph attention experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset with a planted directional signal.
    Generate,
    /// Train one model per seed and report test AUC.
    Train,
    /// Loss and AUC of a checkpoint on every split.
    Eval,
    /// Edge-mask explanation of one node.
    Explain,
    /// Pooled in/out importance statistics over many centers.
    BiasStats,
    /// Parameter counts of every layer kind.
    ParamCount,
}

#[derive(Debug, Default, Args)]
pub struct CommonArgs {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Layer kind: gat, dgat or dedgat.
    #[arg(long, global = true)]
    pub model: Option<String>,
    /// Checkpoint to load.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Comma-separated seeds for repeated training.
    #[arg(long, global = true)]
    pub seeds: Option<String>,
    /// Maximum training epochs.
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Node to explain.
    #[arg(long, global = true)]
    pub target: Option<usize>,
    /// Override any config key, e.g. `--set model.hidden_dim=32`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

/// Defaults, then the config file, then `--set`, then the named flags.
pub fn resolve(args: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(file) = &args.config {
        cfg.apply_file(file)?;
    }
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, found `{kv}`")))?;
        cfg.set(k, v)?;
    }
    let pairs: [(&str, Option<String>); 8] = [
        ("paths.data", args.data.as_ref().map(|p| p.display().to_string())),
        ("paths.out", args.out.as_ref().map(|p| p.display().to_string())),
        ("paths.checkpoint", args.checkpoint.as_ref().map(|p| p.display().to_string())),
        ("model.kind", args.model.clone()),
        ("seed", args.seed.map(|s| s.to_string())),
        ("seeds", args.seeds.clone()),
        ("train.epochs", args.epochs.map(|e| e.to_string())),
        ("explain.target", args.target.map(|t| t.to_string())),
    ];
    for (k, v) in pairs {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    Ok(cfg)
}

/// Parses `argv` and runs the command, returning what it prints.
pub fn run(argv: &[String]) -> Result<String, CliError> {
    let cli = Cli::try_parse_from(argv).map_err(|e| CliError::Usage(e.to_string().trim().to_string()))?;
    let cfg = resolve(&cli.common)?;
    match cli.command {
        Command::Generate => cmd_generate(&cfg),
        Command::Train => cmd_train(&cfg),
        Command::Eval => cmd_eval(&cfg),
        Command::Explain => cmd_explain(&cfg),
        Command::BiasStats => cmd_bias_stats(&cfg),
        Command::ParamCount => cmd_param_count(&cfg),
    }
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    fs::write(path, text).map_err(io(path))
}

fn need<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, CliError> {
    p.as_deref()
        .ok_or_else(|| CliError::Usage(format!("missing {what} (pass --{what} or set paths.{what})")))
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    write(&dir.join(RESOLVED_CONFIG), &cfg.render())
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<String, CliError> {
    let out = need(&cfg.out, "out")?;
    let synth = dgat_core::data::SyntheticConfig {
        seed: cfg.seed,
        ..cfg.synthetic.clone()
    };
    let summary = match cfg.train.precision {
        Precision::Double => generate_into::<f64>(&synth, out)?,
        Precision::Single => generate_into::<f32>(&synth, out)?,
    };
    echo_config(cfg, out)?;
    Ok(summary)
}

fn generate_into<S: Scalar>(synth: &dgat_core::data::SyntheticConfig, out: &Path) -> Result<String, CliError> {
    let bundle: DatasetBundle<S> = generate_synthetic(synth)?;
    save_dataset(&bundle, out)?;
    Ok(bundle
        .summary()
        .into_iter()
        .map(|(k, v)| format!("{k}\t{v}\n"))
        .collect())
}

/// One seed's training result.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub best: EpochMetrics,
    pub test_auc: f64,
    pub dir: PathBuf,
}

fn metrics_table(history: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch\ttrain_loss\tval_auc\n");
    for m in history {
        let auc = m.val_auc.map_or("undefined".into(), |a| a.to_string());
        out.push_str(&format!("{}\t{}\t{auc}\n", m.epoch, m.train_loss));
    }
    out
}

fn train_seed<S: Scalar>(
    cfg: &RunConfig,
    bundle: &DatasetBundle<S>,
    seed: u64,
    out: &Path,
) -> Result<SeedRun, CliError> {
    let model_cfg = ModelConfig { seed, ..cfg.model.clone() };
    let model = Model::new(model_cfg, bundle.feature_dim())?;
    let prop = model.propagation(&bundle.graph);
    let train_cfg = TrainConfig {
        seed,
        patience: cfg.train.patience.min(cfg.train.max_epochs),
        ..cfg.train.clone()
    };
    let outcome = train(&model, &prop, &bundle.features, &bundle.labels, &bundle.split, &train_cfg)?;
    let test = evaluate(&model, &outcome.params, &prop, &bundle.features, &bundle.labels, &bundle.split.test)?;

    let dir = out.join(format!("seed-{seed}"));
    fs::create_dir_all(&dir).map_err(io(&dir))?;
    let ck = Checkpoint {
        config: outcome.model_config.clone(),
        d_in: bundle.feature_dim(),
        params: outcome.params,
    };
    save_checkpoint(&ck, &dir.join(CHECKPOINT_FILE))?;
    write(&dir.join(METRICS_FILE), &metrics_table(&outcome.history))?;
    let run_cfg = RunConfig {
        seed,
        seeds: Vec::new(),
        ..cfg.clone()
    };
    echo_config(&run_cfg, &dir)?;
    Ok(SeedRun {
        seed,
        best: outcome.best,
        test_auc: test.auc,
        dir,
    })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Trains every seed (in parallel) and returns the per-seed results.
pub fn train_runs(cfg: &RunConfig) -> Result<Vec<SeedRun>, CliError> {
    let data = need(&cfg.data, "data")?;
    let out = need(&cfg.out, "out")?;
    let seeds = cfg.run_seeds();
    match cfg.train.precision {
        Precision::Double => {
            let bundle = load_dataset::<f64>(data)?;
            seeds.par_iter().map(|&s| train_seed(cfg, &bundle, s, out)).collect()
        }
        Precision::Single => {
            let bundle = load_dataset::<f32>(data)?;
            seeds.par_iter().map(|&s| train_seed(cfg, &bundle, s, out)).collect()
        }
    }
}

pub fn cmd_train(cfg: &RunConfig) -> Result<String, CliError> {
    let out = need(&cfg.out, "out")?;
    let runs = train_runs(cfg)?;
    let mut table = String::from("seed\tbest_epoch\tval_auc\ttest_auc\n");
    for r in &runs {
        let val = r.best.val_auc.map_or("undefined".into(), |a| a.to_string());
        table.push_str(&format!("{}\t{}\t{val}\t{}\n", r.seed, r.best.epoch, r.test_auc));
    }
    let aucs: Vec<f64> = runs.iter().map(|r| r.test_auc).collect();
    let (mean, std) = mean_std(&aucs);
    table.push_str(&format!("# test_auc_mean\t{mean}\n# test_auc_std\t{std}\n"));
    write(&out.join(SUMMARY_FILE), &table)?;
    echo_config(cfg, out)?;
    let seeds: Vec<String> = runs.iter().map(|r| r.seed.to_string()).collect();
    Ok(format!(
        "{table}{}: test AUC {mean:.4} ± {std:.4} over seeds {}\n",
        cfg.model.kind,
        seeds.join(",")
    ))
}

fn load_model_data(cfg: &RunConfig) -> Result<(AnyCheckpoint, PathBuf), CliError> {
    let ck_path = need(&cfg.checkpoint, "checkpoint")?;
    let data = need(&cfg.data, "data")?;
    Ok((load_checkpoint_any(ck_path)?, data.to_path_buf()))
}

/// Runs `f` on the checkpoint and a dataset loaded in its precision.
macro_rules! with_checkpoint {
    ($cfg:expr, |$ck:ident, $bundle:ident, $model:ident| $body:expr) => {{
        let (any, data) = load_model_data($cfg)?;
        match any {
            AnyCheckpoint::Double($ck) => {
                let $bundle = load_dataset::<f64>(&data)?;
                let $model = assemble(&$ck, &$bundle)?;
                $body
            }
            AnyCheckpoint::Single($ck) => {
                let $bundle = load_dataset::<f32>(&data)?;
                let $model = assemble(&$ck, &$bundle)?;
                $body
            }
        }
    }};
}

fn assemble<S: Scalar>(ck: &Checkpoint<S>, bundle: &DatasetBundle<S>) -> Result<Model, CliError> {
    if ck.d_in != bundle.feature_dim() {
        return Err(CliError::Data(DataError::Config(format!(
            "checkpoint expects {} input features, dataset has {}",
            ck.d_in,
            bundle.feature_dim()
        ))));
    }
    let model = Model::new(ck.config.clone(), ck.d_in)?;
    model.check_params(&ck.params)?;
    Ok(model)
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<String, CliError> {
    let table = with_checkpoint!(cfg, |ck, bundle, model| {
        let prop = model.propagation(&bundle.graph);
        let mut t = String::from("split\tnodes\tloss\tauc\n");
        for (name, nodes) in [
            ("train", &bundle.split.train),
            ("val", &bundle.split.val),
            ("test", &bundle.split.test),
        ] {
            match evaluate(&model, &ck.params, &prop, &bundle.features, &bundle.labels, nodes) {
                Ok(r) => t.push_str(&format!("{name}\t{}\t{}\t{}\n", nodes.len(), r.loss, r.auc)),
                Err(TrainError::SingleClass(_) | TrainError::EmptyTrain) => {
                    t.push_str(&format!("{name}\t{}\tundefined\tundefined\n", nodes.len()))
                }
                Err(e) => return Err(e.into()),
            }
        }
        t
    });
    if let Some(out) = &cfg.out {
        write(&out.join("eval.tsv"), &table)?;
        echo_config(cfg, out)?;
    }
    Ok(table)
}

pub fn cmd_explain(cfg: &RunConfig) -> Result<String, CliError> {
    let target = cfg
        .target
        .ok_or_else(|| CliError::Usage("missing target (pass --target N)".into()))?;
    let explain = ExplainConfig { seed: cfg.seed, ..cfg.explain.clone() };
    let table = with_checkpoint!(cfg, |ck, bundle, model| {
        let mask = explain_node(&bundle.graph, &bundle.features, &model, &ck.params, target, &explain)?;
        let report = bias_proportions(&classify_edges_by_direction(&bundle.graph, &mask, target), cfg.threshold);
        report.to_table()
    });
    if let Some(out) = &cfg.out {
        write(&out.join(format!("explain-node-{target}.tsv")), &table)?;
        echo_config(cfg, out)?;
    }
    Ok(table)
}


pub fn cmd_bias_stats(cfg: &RunConfig) -> Result<String, CliError> {
    let explain = ExplainConfig { seed: cfg.seed, ..cfg.explain.clone() };
    let summary = with_checkpoint!(cfg, |ck, bundle, model| {
        let centers = if cfg.centers.is_empty() {
            default_centers(&bundle.labels, &bundle.split.test, cfg.max_centers, cfg.seed)
        } else {
            cfg.centers.clone()
        };
        aggregate_bias(&bundle.graph, &bundle.features, &model, &ck.params, &centers, &explain, cfg.threshold)?
    });
    let text = summary.summary_table();
    if let Some(out) = &cfg.out {
        write(&out.join(HISTOGRAM_FILE), &summary.histogram_table())?;
        write(&out.join(SUMMARY_FILE), &text)?;
        for r in &summary.reports {
            write(&out.join("centers").join(format!("center-{}.tsv", r.center)), &r.to_table())?;
        }
        echo_config(cfg, out)?;
    }
    Ok(text)
}

pub fn cmd_param_count(cfg: &RunConfig) -> Result<String, CliError> {
    let d_in = match &cfg.data {
        Some(dir) => load_dataset::<f64>(dir)?.feature_dim(),
        None => cfg.synthetic.feature_dim,
    };
    let mut t = String::from("model\tlayers\thead\ttotal\n");
    for kind in LayerKind::ALL {
        let mc = ModelConfig { kind, ..cfg.model.clone() };
        mc.validate()?;
        let c = count_parameters(&mc, d_in);
        t.push_str(&format!("{kind}\t{}\t{}\t{}\n", c.layers, c.head, c.total));
    }
    if let Some(out) = &cfg.out {
        write(&out.join("param-count.tsv"), &t)?;
        echo_config(cfg, out)?;
    }
    Ok(t)
}

/// Caps rayon's pool at `DGAT_THREADS` when set.
pub fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("DGAT_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| CliError::Config(format!("DGAT_THREADS must be a positive integer, found `{raw}`")))?;
    if n == 0 {
        return Err(CliError::Config("DGAT_THREADS must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("cannot size thread pool: {e}")))
}
