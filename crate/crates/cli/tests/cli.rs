use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dgat_cli::{resolve, CommonArgs, RunConfig};
use dgat_core::data::{load_checkpoint, load_dataset};
use dgat_core::layers::{count_parameters, LayerKind, ModelConfig};
use proptest::prelude::*;
use tempfile::tempdir;

fn dgat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dgat")).args(args).output().unwrap()
}

fn dgat_env(args: &[&str], key: &str, value: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dgat"))
        .args(args)
        .env(key, value)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// The failure category from the single `error[...]` line.
fn category(out: &Output) -> String {
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.lines().count(), 1, "{err}");
    let rest = err.strip_prefix("error[").unwrap_or_else(|| panic!("{err}"));
    rest.split(']').next().unwrap().to_string()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_dataset(dir: &Path, seed: &str) {
    ok(&dgat(&["generate", "--out", p(dir), "--seed", seed, "--set", "synthetic.num_nodes=300", "--set", "synthetic.feature_dim=4"]));
}

#[test]
fn config_text_sections_and_dotted_keys() {
    let mut cfg = RunConfig::default();
    cfg.apply_text(
        "seed = 4   # trailing comment\n\
         [model]\n\
         kind = dgat\n\
         hidden_dim = 8\n\
         train.epochs = 12\n\
         \n\
         [synthetic]\n\
         signal_direction = both\n\
         reciprocity = 0.5\n",
    )
    .unwrap();
    assert_eq!(cfg.seed, 4);
    assert_eq!(cfg.model.kind, LayerKind::Dgat);
    assert_eq!(cfg.model.hidden_dim, 8);
    assert_eq!(cfg.train.max_epochs, 12);
    assert_eq!(cfg.synthetic.reciprocity, 0.5);
}

#[test]
fn config_errors_name_the_line() {
    for text in ["[model]\nkind = transformer\n", "bogus = 1\n", "[train]\nepochs\n"] {
        let err = RunConfig::default().apply_text(text).unwrap_err();
        assert!(err.to_string().contains("line"), "{err}");
        assert_eq!(err.category(), "config");
    }
}

#[test]
fn flags_override_set_which_overrides_the_file() {
    let dir = tempdir().unwrap();
    let file = dir.path().join("run.conf");
    fs::write(&file, "seed = 1\n[model]\nkind = gat\nhidden_dim = 3\n").unwrap();
    let args = CommonArgs {
        config: Some(file),
        model: Some("dedgat".into()),
        overrides: vec!["model.hidden_dim=7".into(), "seed=2".into()],
        seed: Some(5),
        ..CommonArgs::default()
    };
    let cfg = resolve(&args).unwrap();
    assert_eq!((cfg.model.kind, cfg.model.hidden_dim, cfg.seed), (LayerKind::Dedgat, 7, 5));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn rendered_config_reads_back(seed in any::<u64>(), hidden in 1usize..64, lr in 1e-4f64..1.0, kind in 0usize..3, hops in prop::option::of(1usize..4), seeds in prop::collection::vec(0u64..100, 0..4)) {
        let mut cfg = RunConfig { seed, seeds, ..RunConfig::default() };
        cfg.model.kind = LayerKind::ALL[kind];
        cfg.model.hidden_dim = hidden;
        cfg.train.learning_rate = lr;
        cfg.explain.hops = hops;
        cfg.train.class_weights = Some(vec![0.5, lr]);
        cfg.data = Some("some/dir".into());
        let mut back = RunConfig::default();
        back.apply_text(&cfg.render()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

#[test]
fn generate_is_byte_identical_and_loads_back() {
    let dir = tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    small_dataset(&a, "3");
    small_dataset(&b, "3");
    for file in ["edges.tsv", "features.csv", "labels.csv", "splits.csv"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
    let bundle = load_dataset::<f64>(&a).unwrap();
    assert_eq!((bundle.num_nodes(), bundle.feature_dim()), (300, 4));
}

#[test]
fn generate_rejects_bad_positive_rate() {
    let dir = tempdir().unwrap();
    let out = dgat(&["generate", "--out", p(dir.path()), "--set", "synthetic.positive_rate=1.5"]);
    assert_eq!(category(&out), "config");
}

#[test]
fn usage_errors() {
    assert_eq!(category(&dgat(&["frobnicate"])), "usage");
    assert_eq!(category(&dgat(&["train"])), "usage");
    assert_eq!(category(&dgat(&["generate", "--set", "nonsense"])), "usage");
    assert_eq!(category(&dgat(&["param-count", "--model", "mlp"])), "config");
}

#[test]
fn zero_epochs_reports_the_initialization() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("data");
    small_dataset(&data, "1");
    let out = dir.path().join("run");
    let text = ok(&dgat(&["train", "--data", p(&data), "--out", p(&out), "--epochs", "0", "--seed", "2"]));
    assert!(text.contains("test AUC"), "{text}");
    let metrics = fs::read_to_string(out.join("seed-2/metrics.tsv")).unwrap();
    assert_eq!(metrics.lines().count(), 2, "{metrics}");
    assert!(metrics.lines().nth(1).unwrap().starts_with("0\t"));
    let ck = load_checkpoint::<f64>(&out.join("seed-2/model.ckpt")).unwrap();
    assert_eq!(ck.params.steps(), 0);
    assert_eq!(ck.config.seed, 2);
}

#[test]
fn train_fans_out_over_seeds_then_eval_and_explain() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("data");
    small_dataset(&data, "1");
    let out = dir.path().join("run");
    ok(&dgat(&["train", "--data", p(&data), "--out", p(&out), "--model", "dgat", "--seeds", "1,2", "--epochs", "20"]));
    let summary = fs::read_to_string(out.join("summary.tsv")).unwrap();
    assert!(summary.starts_with("seed\tbest_epoch\tval_auc\ttest_auc\n"));
    assert!(summary.contains("# test_auc_mean"));
    for s in ["seed-1", "seed-2"] {
        for f in ["model.ckpt", "metrics.tsv", "config.resolved"] {
            assert!(out.join(s).join(f).exists(), "{s}/{f}");
        }
    }
    let resolved = fs::read_to_string(out.join("config.resolved")).unwrap();
    assert!(resolved.contains("kind = dgat"));

    let ck = out.join("seed-1/model.ckpt");
    let eval = ok(&dgat(&["eval", "--data", p(&data), "--checkpoint", p(&ck)]));
    assert_eq!(eval.lines().count(), 4, "{eval}");

    let ex_dir = dir.path().join("explain");
    let table = ok(&dgat(&["explain", "--data", p(&data), "--checkpoint", p(&ck), "--target", "5", "--out", p(&ex_dir)]));
    assert!(table.contains("edge_id\tsrc\tdst\tweight\tset"));
    assert_eq!(fs::read_to_string(ex_dir.join("explain-node-5.tsv")).unwrap(), table);

    let bias_dir = dir.path().join("bias");
    let text = ok(&dgat(&[
        "bias-stats", "--data", p(&data), "--checkpoint", p(&ck), "--out", p(&bias_dir), "--set", "explain.max_centers=4",
    ]));
    assert!(text.contains("# ratio"));
    let hist = fs::read_to_string(bias_dir.join("histogram.tsv")).unwrap();
    assert!(hist.starts_with("bin_lo\tbin_hi\tcount_in\tcount_out\n"));
    assert_eq!(hist.lines().count(), 11);
    assert_eq!(fs::read_dir(bias_dir.join("centers")).unwrap().count(), 4);
}

#[test]
fn checkpoint_and_target_errors() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("data");
    small_dataset(&data, "1");
    let missing = dir.path().join("nope.ckpt");
    assert_eq!(category(&dgat(&["explain", "--data", p(&data), "--checkpoint", p(&missing), "--target", "0"])), "io");

    let out = dir.path().join("run");
    ok(&dgat(&["train", "--data", p(&data), "--out", p(&out), "--epochs", "2", "--seed", "0"]));
    let ck = out.join("seed-0/model.ckpt");
    assert_eq!(category(&dgat(&["explain", "--data", p(&data), "--checkpoint", p(&ck), "--target", "300"])), "target");
    assert_eq!(category(&dgat(&["explain", "--data", p(&data), "--checkpoint", p(&ck)])), "usage");

    let mut bytes = fs::read(&ck).unwrap();
    bytes.truncate(bytes.len() / 2);
    fs::write(&ck, bytes).unwrap();
    assert_eq!(category(&dgat(&["eval", "--data", p(&data), "--checkpoint", p(&ck)])), "checkpoint");
}

#[test]
fn param_count_matches_the_library_and_is_stable() {
    let args = ["param-count", "--set", "model.hidden_dim=8", "--set", "synthetic.feature_dim=5"];
    let first = ok(&dgat(&args));
    assert_eq!(first, ok(&dgat(&args)));
    let lines: Vec<&str> = first.lines().collect();
    assert_eq!(lines[0], "model\tlayers\thead\ttotal");
    for (line, kind) in lines[1..].iter().zip(LayerKind::ALL) {
        let c = count_parameters(&ModelConfig { hidden_dim: 8, ..ModelConfig::new(kind) }, 5);
        assert_eq!(*line, format!("{kind}\t{}\t{}\t{}", c.layers, c.head, c.total));
    }
}

#[test]
fn thread_cap_is_respected_and_validated() {
    let a = ok(&dgat_env(&["param-count"], "DGAT_THREADS", "1"));
    assert_eq!(a, ok(&dgat(&["param-count"])));
    assert_eq!(category(&dgat_env(&["param-count"], "DGAT_THREADS", "many")), "config");
    assert_eq!(category(&dgat_env(&["param-count"], "DGAT_THREADS", "0")), "config");
}

#[test]
fn single_precision_pipeline() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&dgat(&["generate", "--out", p(&data), "--set", "synthetic.num_nodes=200", "--set", "train.precision=single"]));
    let out = dir.path().join("run");
    ok(&dgat(&["train", "--data", p(&data), "--out", p(&out), "--epochs", "3", "--set", "train.precision=single"]));
    let ck = out.join("seed-0/model.ckpt");
    assert!(load_checkpoint::<f32>(&ck).is_ok());
    ok(&dgat(&["eval", "--data", p(&data), "--checkpoint", p(&ck)]));
}
