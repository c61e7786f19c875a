//! Command-line contract, driven through the real binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use comment_mtl::data::{synth_generate, write_dataset, FormatSpec, PredictionTable, SynthSpec};
use comment_mtl::task::Task;
use comment_mtl::train::RunManifest;
use tempfile::TempDir;

const TINY_CONFIG: &str = r#"
model_name = "tiny"
vocab_min_freq = 1

[encoder]
d_model = 16
n_layers = 1
n_heads = 2
d_ff = 32
max_seq_len = 32

[train]
learning_rate = 0.005
num_epochs = 2
eval_every_batches = 5
"#;

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new(n: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = synth_generate(n, 3, &SynthSpec::default()).unwrap();
        write_dataset(&dir.path().join("data.csv"), &data, &FormatSpec::default()).unwrap();
        fs::write(dir.path().join("tiny.toml"), TINY_CONFIG).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_comment-mtl"))
            .args(args)
            .current_dir(self.dir.path())
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn train(&self, out: &str, extra: &[&str]) -> RunManifest {
        let mut args = vec!["train", "--config", "tiny.toml", "--train-data", "data.csv", "--output-dir", out];
        args.extend_from_slice(extra);
        self.ok(&args);
        RunManifest::load(&self.path(out).join("manifest.json")).unwrap()
    }
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn build_vocab_is_deterministic_and_bounded() {
    let ws = Workspace::new(200);
    let stdout = ws.ok(&["build-vocab", "--corpus", "data.csv", "--out", "a.txt", "--min-freq", "1"]);
    ws.ok(&["build-vocab", "--corpus", "data.csv", "--out", "b.txt", "--min-freq", "1"]);
    assert_eq!(read(&ws.path("a.txt")), read(&ws.path("b.txt")));
    assert!(ws.path("a.txt.meta.json").exists());

    let coverage: f64 = stdout
        .split("coverage ")
        .nth(1)
        .and_then(|s| s.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    assert!(coverage >= 0.9, "coverage {coverage}");

    ws.ok(&["build-vocab", "--corpus", "data.csv", "--out", "small.txt", "--max-size", "100"]);
    let lines = fs::read_to_string(ws.path("small.txt")).unwrap().lines().count();
    assert!(lines <= 100, "{lines} lines");
}

#[test]
fn train_writes_manifest_checkpoints_and_predictions() {
    let ws = Workspace::new(60);
    let m = ws.train("lm-mtl", &["--env", "mtl", "--lm", "--seeds", "5"]);
    assert_eq!(m.environment, "LM+MTL");
    assert_eq!(m.seeds, vec![1, 2, 3, 4, 5]);
    assert_eq!(m.checkpoints.len(), 5);
    assert_eq!(m.lm_history.len(), 5);
    for c in &m.checkpoints {
        assert!(ws.path("lm-mtl").join(&c.path).exists());
    }
    for p in &m.predictions {
        let sidecar = fs::read_to_string(ws.path("lm-mtl").join(format!("{p}.meta.json"))).unwrap();
        assert!(sidecar.contains(&m.config_hash));
    }
    for f in ["config.toml", "metrics.csv", "val_gold.csv", "vocab.txt"] {
        assert!(ws.path("lm-mtl").join(f).exists(), "{f}");
    }

    let plain = ws.train("mtl", &["--env", "mtl", "--seeds", "5"]);
    assert_eq!(plain.environment, "MTL");
    assert!(plain.lm_history.is_empty());
    let mut a = m.config.clone();
    let mut b = plain.config.clone();
    for c in [&mut a, &mut b] {
        c["train"].as_object_mut().unwrap().remove("lm_stage");
        c.as_object_mut().unwrap().remove("output_dir");
    }
    assert_eq!(a, b);

    let again = ws.train("lm-mtl-again", &["--env", "mtl", "--lm", "--seeds", "5"]);
    for p in &m.predictions {
        assert_eq!(read(&ws.path("lm-mtl").join(p)), read(&ws.path("lm-mtl-again").join(p)), "{p}");
    }
    assert_eq!(m.config_hash, again.config_hash);
}

#[test]
fn single_task_environment_trains_three_models_per_seed() {
    let ws = Workspace::new(60);
    let m = ws.train("stl", &["--env", "stl", "--seeds", "5"]);
    assert_eq!(m.environment, "STL");
    assert_eq!(m.checkpoints.len(), 15);
    assert_eq!(m.eval_history.len(), 15);
}

#[test]
fn predict_respects_checkpoint_environment() {
    let ws = Workspace::new(60);
    let stl = ws.train("stl", &["--env", "stl", "--seeds", "1"]);
    let mtl = ws.train("mtl", &["--env", "mtl", "--seeds", "1"]);
    let input_rows = synth_generate(60, 3, &SynthSpec::default()).unwrap().len();

    let toxic = stl.checkpoints.iter().find(|c| c.path.ends_with("stl-toxic.ckpt")).unwrap();
    let ckpt = format!("stl/{}", toxic.path);
    ws.ok(&["predict", "--checkpoint", &ckpt, "--vocab", "stl/vocab.txt", "--input", "data.csv", "--out", "toxic.csv"]);
    let table = PredictionTable::read(&ws.path("toxic.csv")).unwrap();
    assert_eq!(table.tasks, vec![Task::Toxic]);
    assert_eq!(table.rows.len(), input_rows);

    let all: Vec<String> = stl.checkpoints.iter().map(|c| format!("stl/{}", c.path)).collect();
    let mut args = vec!["predict", "--vocab", "stl/vocab.txt", "--input", "data.csv", "--out", "stl-all.csv"];
    for c in &all {
        args.extend(["--checkpoint", c.as_str()]);
    }
    ws.ok(&args);
    assert_eq!(PredictionTable::read(&ws.path("stl-all.csv")).unwrap().tasks, Task::ALL.to_vec());

    let dup = ws.run(&[
        "predict", "--checkpoint", &ckpt, "--checkpoint", &ckpt, "--vocab", "stl/vocab.txt", "--input", "data.csv",
        "--out", "dup.csv",
    ]);
    assert_eq!(dup.status.code(), Some(1));

    let mckpt = format!("mtl/{}", mtl.checkpoints[0].path);
    for out in ["m1.csv", "m2.csv"] {
        ws.ok(&["predict", "--checkpoint", &mckpt, "--vocab", "mtl/vocab.txt", "--input", "data.csv", "--out", out]);
    }
    assert_eq!(read(&ws.path("m1.csv")), read(&ws.path("m2.csv")));
    assert_eq!(PredictionTable::read(&ws.path("m1.csv")).unwrap().rows.len(), input_rows);

    ws.ok(&["build-vocab", "--corpus", "data.csv", "--out", "other.txt", "--max-size", "30"]);
    let refused =
        ws.run(&["predict", "--checkpoint", &mckpt, "--vocab", "other.txt", "--input", "data.csv", "--out", "x.csv"]);
    assert_eq!(refused.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&refused.stderr).contains("different vocabulary"));
    assert!(!ws.path("x.csv").exists());
}

#[test]
fn evaluate_scores_and_ensembles() {
    let ws = Workspace::new(60);
    let m = ws.train("mtl", &["--env", "mtl", "--seeds", "5"]);
    let gold = "mtl/val_gold.csv";

    let perfect = ws.ok(&["evaluate", "--gold", gold, "--pred", gold, "--out-dir", "self"]);
    assert!(!perfect.contains("ensemble"));
    let csv = fs::read_to_string(ws.path("self/metrics.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r[6].parse::<f64>().unwrap() == 1.0));

    let seed_files: Vec<String> =
        m.predictions.iter().filter(|p| !p.ends_with("ensemble.csv")).map(|p| format!("mtl/{p}")).collect();
    assert_eq!(seed_files.len(), 5);
    let mut args = vec!["evaluate", "--gold", gold, "--out-dir", "five"];
    for p in &seed_files {
        args.extend(["--pred", p.as_str()]);
    }
    let table = ws.ok(&args);
    assert!(table.contains("ensemble"));
    let csv = fs::read_to_string(ws.path("five/metrics.csv")).unwrap();
    let rows: Vec<Vec<String>> = csv.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 6 * 3);
    for task in Task::ALL {
        let cells: Vec<&Vec<String>> = rows.iter().filter(|r| r[2] == task.short_name()).collect();
        let max = cells.iter().map(|r| r[6].parse::<f64>().unwrap()).fold(f64::MIN, f64::max);
        for r in cells {
            assert_eq!(r[7] == "1", r[6].parse::<f64>().unwrap() == max, "{r:?}");
        }
    }

    let report = ws.ok(&["report", "--manifest", "mtl/manifest.json"]);
    assert!(report.contains("MTL"));
}

#[test]
fn exit_codes_follow_error_kind() {
    let ws = Workspace::new(20);
    assert_eq!(ws.run(&["train", "--bogus-flag"]).status.code(), Some(1));
    assert_eq!(ws.run(&["train", "--config", "tiny.toml", "--set", "train.nope=1"]).status.code(), Some(1));
    let missing = ws.run(&["train", "--config", "tiny.toml", "--train-data", "absent.csv", "--output-dir", "o"]);
    assert_eq!(missing.status.code(), Some(2));
    fs::write(ws.path("bad.csv"), "comment_id,comment_text,Sub1_Toxic,Sub2_Engaging,Sub3_FactClaiming\n1,x,2,0,0\n").unwrap();
    let bad = ws.run(&["train", "--config", "tiny.toml", "--train-data", "bad.csv", "--output-dir", "o"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("line 2"));
    let diverge = ws.run(&[
        "train", "--config", "tiny.toml", "--train-data", "data.csv", "--output-dir", "o", "--lr", "1e300",
        "--seeds", "1",
    ]);
    assert_eq!(diverge.status.code(), Some(3), "{}", String::from_utf8_lossy(&diverge.stderr));
    assert_eq!(ws.run(&["--help"]).status.code(), Some(0));
}

#[test]
fn shipped_config_is_valid() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/desk.toml");
    let cfg = comment_mtl::cli::ExperimentConfig::load(&path).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg.encoder.d_model, 128);
    assert_eq!(cfg.train.seeds.len(), 5);
}
