//! Plain-text datasets, the synthetic directional benchmark, linear probes
//! and binary checkpoints.
//!
//! A dataset directory holds four files:
//!
//! * `edges.tsv`: `src<TAB>dst` per line, 0-based node ids.
//! * `features.csv`: one comma-separated row per node; the row count fixes
//!   the number of nodes.
//! * `labels.csv`: `node_id,label` with label 0 or 1; missing nodes are
//!   unlabeled.
//! * `splits.csv`: `node_id,split` with split `train`, `val` or `test`.
//!
//! The label and split files start with a header line.

mod checkpoint;
mod probe;
mod synthetic;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_any, save_checkpoint, AnyCheckpoint,
    Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use probe::{probe_auc, ProbeInputs};
pub use synthetic::{generate_synthetic, neighbor_means, SignalDirection, SyntheticConfig};

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::autodiff::Matrix;
use crate::graph::{DirectedGraph, GraphError};
use crate::train::{Split, TrainError};
use crate::Scalar;

pub const EDGES_FILE: &str = "edges.tsv";
pub const FEATURES_FILE: &str = "features.csv";
pub const LABELS_FILE: &str = "labels.csv";
pub const SPLITS_FILE: &str = "splits.csv";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{file} references node {node} but {FEATURES_FILE} has {rows} rows")]
    NodeCount { file: &'static str, node: usize, rows: usize },
    #[error("node {node} has label {label}; labels must be 0 or 1")]
    NonBinaryLabel { node: usize, label: String },
    #[error("node {0} is labeled twice")]
    DuplicateLabel(usize),
    #[error("feature row {row} has {found} columns, expected {expected}")]
    Ragged { row: usize, expected: usize, found: usize },
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint format version {found}, this build reads {expected}")]
    Version { expected: u32, found: u32 },
    #[error("checkpoint stores {found} precision, requested {expected}")]
    Precision { expected: &'static str, found: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Split(#[from] TrainError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A graph with node features, optional binary labels and a split.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle<S: Scalar> {
    pub name: String,
    pub graph: DirectedGraph,
    pub features: Matrix<S>,
    pub labels: Vec<Option<usize>>,
    pub split: Split,
}

impl<S: Scalar> DatasetBundle<S> {
    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        2
    }

    pub fn num_labeled(&self) -> usize {
        self.labels.iter().flatten().count()
    }

    /// `(key, value)` summary rows in the style of a dataset statistics table.
    pub fn summary(&self) -> Vec<(&'static str, String)> {
        vec![
            ("name", self.name.clone()),
            ("nodes", self.num_nodes().to_string()),
            ("edges", self.graph.num_edges().to_string()),
            ("labeled_nodes", self.num_labeled().to_string()),
            ("features", self.feature_dim().to_string()),
            ("classes", self.num_classes().to_string()),
            ("train", self.split.train.len().to_string()),
            ("val", self.split.val.len().to_string()),
            ("test", self.split.test.len().to_string()),
        ]
    }
}

fn read(path: &Path) -> Result<String, DataError> {
    if !path.exists() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(io_err(path))
}

/// Non-empty lines with their 1-based numbers.
fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn parse_id(path: &Path, line: usize, s: &str) -> Result<usize, DataError> {
    s.trim().parse().map_err(|_| DataError::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("bad node id `{s}`"),
    })
}

fn two_fields<'a>(path: &Path, line: usize, text: &'a str, sep: char) -> Result<(&'a str, &'a str), DataError> {
    let mut parts = text.split(sep);
    match (parts.next(), parts.next(), parts.next()) {
        (Some(a), Some(b), None) => Ok((a.trim(), b.trim())),
        _ => Err(DataError::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("expected two `{}`-separated fields", sep.escape_default()),
        }),
    }
}

fn check_node(file: &'static str, node: usize, rows: usize) -> Result<(), DataError> {
    if node >= rows {
        return Err(DataError::NodeCount { file, node, rows });
    }
    Ok(())
}

/// Reads and validates a dataset directory.
pub fn load_dataset<S: Scalar>(dir: &Path) -> Result<DatasetBundle<S>, DataError> {
    let features_path = dir.join(FEATURES_FILE);
    let mut rows: Vec<Vec<S>> = Vec::new();
    for (line, text) in lines(&read(&features_path)?) {
        let row = text
            .split(',')
            .map(|v| {
                v.trim().parse::<S>().ok().filter(|x| x.is_finite()).ok_or_else(|| DataError::Parse {
                    path: features_path.clone(),
                    line,
                    msg: format!("bad feature value `{v}`"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(DataError::Ragged {
                    row: rows.len(),
                    expected: first.len(),
                    found: row.len(),
                });
            }
        }
        rows.push(row);
    }
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    let features = Matrix::from_vec(n, d, rows.into_iter().flatten().collect());

    let edges_path = dir.join(EDGES_FILE);
    let mut edges = Vec::new();
    for (line, text) in lines(&read(&edges_path)?) {
        let (a, b) = two_fields(&edges_path, line, text, '\t')?;
        let (s, t) = (parse_id(&edges_path, line, a)?, parse_id(&edges_path, line, b)?);
        check_node(EDGES_FILE, s.max(t), n)?;
        edges.push((s, t));
    }
    let graph = DirectedGraph::new(n, edges)?;

    let labels_path = dir.join(LABELS_FILE);
    let mut labels = vec![None; n];
    for (line, text) in lines(&read(&labels_path)?).filter(|&(i, t)| !(i == 1 && t.starts_with("node_id"))) {
        let (a, b) = two_fields(&labels_path, line, text, ',')?;
        let node = parse_id(&labels_path, line, a)?;
        check_node(LABELS_FILE, node, n)?;
        let label = match b {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(DataError::NonBinaryLabel {
                    node,
                    label: other.to_string(),
                })
            }
        };
        if labels[node].replace(label).is_some() {
            return Err(DataError::DuplicateLabel(node));
        }
    }

    let splits_path = dir.join(SPLITS_FILE);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (line, text) in lines(&read(&splits_path)?).filter(|&(i, t)| !(i == 1 && t.starts_with("node_id"))) {
        let (a, b) = two_fields(&splits_path, line, text, ',')?;
        let node = parse_id(&splits_path, line, a)?;
        check_node(SPLITS_FILE, node, n)?;
        match b {
            "train" => train.push(node),
            "val" => val.push(node),
            "test" => test.push(node),
            other => {
                return Err(DataError::Parse {
                    path: splits_path.clone(),
                    line,
                    msg: format!("unknown split `{other}` (train, val, test)"),
                })
            }
        }
    }
    let split = Split::new(train, val, test)?;
    split.validate(&labels)?;

    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    Ok(DatasetBundle {
        name,
        graph,
        features,
        labels,
        split,
    })
}

/// Writes the four dataset files into `dir`, creating it if needed.
/// Feature values use the shortest representation that parses back to the
/// same number.
pub fn save_dataset<S: Scalar>(bundle: &DatasetBundle<S>, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;

    let mut edges = String::new();
    for &(s, t) in bundle.graph.edges() {
        writeln!(edges, "{s}\t{t}").unwrap();
    }
    let mut feats = String::new();
    for r in 0..bundle.features.rows() {
        let row = bundle.features.row(r);
        for (k, v) in row.iter().enumerate() {
            if k > 0 {
                feats.push(',');
            }
            write!(feats, "{v}").unwrap();
        }
        feats.push('\n');
    }
    let mut labels = String::from("node_id,label\n");
    for (i, y) in bundle.labels.iter().enumerate() {
        if let Some(y) = y {
            writeln!(labels, "{i},{y}").unwrap();
        }
    }
    let mut splits = String::from("node_id,split\n");
    let mut tagged: Vec<(usize, &str)> = Vec::new();
    tagged.extend(bundle.split.train.iter().map(|&i| (i, "train")));
    tagged.extend(bundle.split.val.iter().map(|&i| (i, "val")));
    tagged.extend(bundle.split.test.iter().map(|&i| (i, "test")));
    tagged.sort_unstable();
    for (i, s) in tagged {
        writeln!(splits, "{i},{s}").unwrap();
    }

    for (file, body) in [
        (EDGES_FILE, edges),
        (FEATURES_FILE, feats),
        (LABELS_FILE, labels),
        (SPLITS_FILE, splits),
    ] {
        let path = dir.join(file);
        fs::write(&path, body).map_err(io_err(&path))?;
    }
    Ok(())
}
