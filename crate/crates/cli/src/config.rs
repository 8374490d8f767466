//! Line-based run configuration:
//!
//! ```text
//! seed = 3
//! [model]
//! kind = dedgat
//! hidden_dim = 32
//! train.epochs = 100   # dotted keys work anywhere
//! ```

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dgat_core::data::{SignalDirection, SyntheticConfig};
use dgat_core::explain::ExplainConfig;
use dgat_core::layers::{DedgatAggregation, LayerKind, ModelConfig};
use dgat_core::train::TrainConfig;
use dgat_core::Precision;

use crate::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Seeds for repeated training runs; empty means just `seed`.
    pub seeds: Vec<u64>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub explain: ExplainConfig,
    /// Bias threshold for explanations.
    pub threshold: f64,
    /// Upper bound on sampled bias-stats centers.
    pub max_centers: usize,
    /// Explicit bias-stats centers; empty picks test positives.
    pub centers: Vec<usize>,
    pub target: Option<usize>,
    pub synthetic: SyntheticConfig,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: Vec::new(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            explain: ExplainConfig::default(),
            threshold: 0.5,
            max_centers: 50,
            centers: Vec::new(),
            target: None,
            synthetic: SyntheticConfig::default(),
            data: None,
            out: None,
            checkpoint: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| CliError::Config(format!("`{key}`: cannot parse `{value}`: {e}")))
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, CliError>
where
    T::Err: Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or(String::new(), T::to_string)
}

fn path(v: &Option<PathBuf>) -> String {
    v.as_ref().map_or(String::new(), |p| p.display().to_string())
}

fn non_empty(value: &str) -> Option<&str> {
    Some(value).filter(|v| !v.is_empty())
}

impl RunConfig {
    /// Sets one dotted key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let v = value.trim();
        let k = key.trim();
        match k {
            "seed" => self.seed = parse(k, v)?,
            "seeds" => self.seeds = list(k, v)?,

            "model.kind" => self.model.kind = parse::<LayerKind>(k, v)?,
            "model.num_layers" => self.model.num_layers = parse(k, v)?,
            "model.hidden_dim" => self.model.hidden_dim = parse(k, v)?,
            "model.num_classes" => self.model.num_classes = parse(k, v)?,
            "model.leaky_slope" => self.model.leaky_slope = parse(k, v)?,
            "model.self_loops" => self.model.self_loops = parse(k, v)?,
            "model.bias" => self.model.bias = parse(k, v)?,
            "model.aggregation" => self.model.aggregation = parse::<DedgatAggregation>(k, v)?,

            "train.learning_rate" => self.train.learning_rate = parse(k, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(k, v)?,
            "train.epochs" => self.train.max_epochs = parse(k, v)?,
            "train.patience" => self.train.patience = parse(k, v)?,
            "train.precision" => self.train.precision = parse::<Precision>(k, v)?,
            "train.class_weights" => {
                self.train.class_weights = non_empty(v).map(|v| list(k, v)).transpose()?;
            }

            "explain.hops" => self.explain.hops = non_empty(v).map(|v| parse(k, v)).transpose()?,
            "explain.epochs" => self.explain.epochs = parse(k, v)?,
            "explain.learning_rate" => self.explain.learning_rate = parse(k, v)?,
            "explain.sparsity_coeff" => self.explain.sparsity_coeff = parse(k, v)?,
            "explain.entropy_coeff" => self.explain.entropy_coeff = parse(k, v)?,
            "explain.threshold" => self.threshold = parse(k, v)?,
            "explain.max_centers" => self.max_centers = parse(k, v)?,
            "explain.centers" => self.centers = list(k, v)?,
            "explain.target" => self.target = non_empty(v).map(|v| parse(k, v)).transpose()?,

            "synthetic.num_nodes" => self.synthetic.num_nodes = parse(k, v)?,
            "synthetic.avg_out_degree" => self.synthetic.avg_out_degree = parse(k, v)?,
            "synthetic.feature_dim" => self.synthetic.feature_dim = parse(k, v)?,
            "synthetic.signal_direction" => self.synthetic.signal_direction = parse::<SignalDirection>(k, v)?,
            "synthetic.noise_std" => self.synthetic.noise_std = parse(k, v)?,
            "synthetic.positive_rate" => self.synthetic.positive_rate = parse(k, v)?,
            "synthetic.reciprocity" => self.synthetic.reciprocity = parse(k, v)?,
            "synthetic.train_frac" => self.synthetic.train_frac = parse(k, v)?,
            "synthetic.val_frac" => self.synthetic.val_frac = parse(k, v)?,

            "paths.data" => self.data = non_empty(v).map(PathBuf::from),
            "paths.out" => self.out = non_empty(v).map(PathBuf::from),
            "paths.checkpoint" => self.checkpoint = non_empty(v).map(PathBuf::from),

            _ => return Err(CliError::Config(format!("unknown key `{k}`"))),
        }
        Ok(())
    }

    /// Applies a config file on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Config(format!("line {}: expected `key = value`, found `{line}`", n + 1)));
            };
            let key = key.trim();
            let full = if section.is_empty() || key.contains('.') {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            self.set(&full, value)
                .map_err(|e| CliError::Config(format!("line {}: {}", n + 1, e.message())))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, file: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(file).map_err(|e| CliError::Io(format!("{}: {e}", file.display())))?;
        self.apply_text(&text)
    }

    /// The seeds a training command runs.
    pub fn run_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }

    /// Every key with its resolved value, grouped by section.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (m, t, e, s) = (&self.model, &self.train, &self.explain, &self.synthetic);
        vec![
            ("seed", self.seed.to_string()),
            ("seeds", join(&self.seeds)),
            ("model.kind", m.kind.to_string()),
            ("model.num_layers", m.num_layers.to_string()),
            ("model.hidden_dim", m.hidden_dim.to_string()),
            ("model.num_classes", m.num_classes.to_string()),
            ("model.leaky_slope", m.leaky_slope.to_string()),
            ("model.self_loops", m.self_loops.to_string()),
            ("model.bias", m.bias.to_string()),
            ("model.aggregation", m.aggregation.to_string()),
            ("train.learning_rate", t.learning_rate.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.epochs", t.max_epochs.to_string()),
            ("train.patience", t.patience.to_string()),
            ("train.precision", t.precision.to_string()),
            ("train.class_weights", t.class_weights.as_deref().map_or(String::new(), join)),
            ("explain.hops", opt(&e.hops)),
            ("explain.epochs", e.epochs.to_string()),
            ("explain.learning_rate", e.learning_rate.to_string()),
            ("explain.sparsity_coeff", e.sparsity_coeff.to_string()),
            ("explain.entropy_coeff", e.entropy_coeff.to_string()),
            ("explain.threshold", self.threshold.to_string()),
            ("explain.max_centers", self.max_centers.to_string()),
            ("explain.centers", join(&self.centers)),
            ("explain.target", opt(&self.target)),
            ("synthetic.num_nodes", s.num_nodes.to_string()),
            ("synthetic.avg_out_degree", s.avg_out_degree.to_string()),
            ("synthetic.feature_dim", s.feature_dim.to_string()),
            ("synthetic.signal_direction", s.signal_direction.to_string()),
            ("synthetic.noise_std", s.noise_std.to_string()),
            ("synthetic.positive_rate", s.positive_rate.to_string()),
            ("synthetic.reciprocity", s.reciprocity.to_string()),
            ("synthetic.train_frac", s.train_frac.to_string()),
            ("synthetic.val_frac", s.val_frac.to_string()),
            ("paths.data", path(&self.data)),
            ("paths.out", path(&self.out)),
            ("paths.checkpoint", path(&self.checkpoint)),
        ]
    }

    /// The resolved configuration in the file format, readable by
    /// [`RunConfig::apply_text`].
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (key, value) in self.entries() {
            let (sec, name) = key.split_once('.').unwrap_or(("", key));
            if sec != section {
                out.push_str(&format!("\n[{sec}]\n"));
                section = sec;
            }
            out.push_str(&format!("{name} = {value}\n"));
        }
        out
    }
}
