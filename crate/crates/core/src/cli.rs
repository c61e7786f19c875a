//! Command-line surface: experiment configuration and the subcommands
//! `build-vocab`, `pretrain-lm`, `train`, `predict`, `evaluate` and `report`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{self, Example, FormatSpec, PredictionTable};
use crate::error::{Error, Result};
use crate::eval::{self, results_table, Averaging, ResultRow, TaskMetrics};
use crate::model::{load_checkpoint, save_checkpoint, EncoderConfig, HeadLayout, ModelParams};
use crate::task::{Environment, Task};
use crate::tokenizer::{build_vocab, Vocab, UNK_TOKEN};
use crate::train::{
    config_hash, encode_examples, ensemble_predict, lm_finetune, predict_labels, run_experiment, sha256_hex,
    CheckpointEntry, ExperimentData, RunManifest, TrainConfig,
};

/// Everything a run needs, read from a TOML file and then overridden by
/// flags. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model_name: String,
    pub train_data: Option<PathBuf>,
    /// Held-out set; when absent the training data is split.
    pub eval_data: Option<PathBuf>,
    pub split_ratio: f64,
    pub split_seed: u64,
    pub format: FormatSpec,
    pub vocab: Option<PathBuf>,
    pub vocab_max_size: usize,
    pub vocab_min_freq: u64,
    pub output_dir: PathBuf,
    pub averaging: Averaging,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model_name: "encoder".into(),
            train_data: None,
            eval_data: None,
            split_ratio: 0.8,
            split_seed: 42,
            format: FormatSpec::default(),
            vocab: None,
            vocab_max_size: 8000,
            vocab_min_freq: 2,
            output_dir: PathBuf::from("runs"),
            averaging: Averaging::Macro,
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Config(format!("split_ratio must lie in (0, 1), got {}", self.split_ratio)));
        }
        if self.vocab_max_size <= crate::tokenizer::NUM_SPECIAL {
            return Err(Error::Config("vocab_max_size must exceed the special tokens".into()));
        }
        self.encoder.validate()?;
        self.train.validate()
    }

    /// Sets a dotted key, e.g. `train.learning_rate=2e-3`. The value is read
    /// as a TOML value, falling back to a plain string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut node = &mut root;
        let parts: Vec<&str> = key.trim().split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("{key}: {part} is not a table")))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), value.clone());
                break;
            }
            node = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        *self = root.try_into().map_err(|e: toml::de::Error| Error::Config(format!("{key}: {e}")))?;
        Ok(())
    }

    /// Hash of everything that determines results (the output location is
    /// left out).
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        config_hash(&c)
    }
}

#[derive(Debug, Parser)]
#[command(name = "comment-mtl", version, about = "Toxic, engaging and fact-claiming comment classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn a subword vocabulary from a comment file.
    BuildVocab(BuildVocabArgs),
    /// Masked-language-model fine-tuning of a fresh encoder.
    PretrainLm(PretrainArgs),
    /// Train every seed of one environment.
    Train(TrainArgs),
    /// Label comments with one MTL or up to three STL checkpoints.
    Predict(PredictArgs),
    /// Score prediction files against gold labels.
    Evaluate(EvaluateArgs),
    /// Results table across finished runs.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. `--set train.learning_rate=2e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub train_data: Option<PathBuf>,
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// `stl` or `mtl`.
    #[arg(long = "env")]
    pub environment: Option<String>,
    /// Run the LM stage before classification training.
    #[arg(long)]
    pub lm: bool,
    /// Use seeds 1..=N.
    #[arg(long)]
    pub seeds: Option<u64>,
    /// Explicit comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    pub seed_list: Option<Vec<u64>>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// `macro` or `positive_class`.
    #[arg(long)]
    pub averaging: Option<String>,
}

impl ConfigArgs {
    /// Config file, then `--set` overrides, then dedicated flags.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        if let Some(p) = &self.train_data {
            cfg.train_data = Some(p.clone());
        }
        if let Some(p) = &self.eval_data {
            cfg.eval_data = Some(p.clone());
        }
        if let Some(p) = &self.vocab {
            cfg.vocab = Some(p.clone());
        }
        if let Some(p) = &self.output_dir {
            cfg.output_dir = p.clone();
        }
        if let Some(e) = &self.environment {
            cfg.train.environment =
                Environment::parse(e).ok_or_else(|| Error::Config(format!("unknown environment {e:?}")))?;
        }
        if self.lm {
            cfg.train.lm_stage = true;
        }
        if let Some(n) = self.seeds {
            cfg.train.seeds = (1..=n).collect();
        }
        if let Some(s) = &self.seed_list {
            cfg.train.seeds = s.clone();
        }
        if let Some(v) = self.lr {
            cfg.train.learning_rate = v;
        }
        if let Some(v) = self.epochs {
            cfg.train.num_epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(a) = &self.averaging {
            cfg.averaging = Averaging::parse(a).ok_or_else(|| Error::Config(format!("unknown averaging {a:?}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
pub struct BuildVocabArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Comment file to learn from (defaults to the configured training data).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub max_size: Option<usize>,
    #[arg(long)]
    pub min_freq: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    /// One MTL checkpoint, or STL checkpoints for distinct tasks.
    #[arg(long = "checkpoint", required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Comments to label (same layout as training data; labels ignored
    /// when absent).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// When given, the checkpoint must have been trained with this config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub gold: PathBuf,
    /// Prediction files; several are also combined by majority vote.
    #[arg(long = "pred", required = true)]
    pub predictions: Vec<PathBuf>,
    #[arg(long, default_value = "encoder")]
    pub model: String,
    #[arg(long = "env", default_value = "MTL")]
    pub environment: String,
    #[arg(long, default_value = "macro")]
    pub averaging: String,
    /// Directory for metrics.csv and table.txt.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Run manifests written by `train`.
    #[arg(long = "manifest", required = true)]
    pub manifests: Vec<PathBuf>,
    #[arg(long, default_value = "macro")]
    pub averaging: String,
    /// Score the mean over seeds instead of the ensemble.
    #[arg(long)]
    pub seed_mean: bool,
    /// Write the delimited table here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildVocab(a) => cmd_build_vocab(&a).map(|_| ()),
        Command::PretrainLm(a) => cmd_pretrain_lm(&a),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Predict(a) => cmd_predict(&a),
        Command::Evaluate(a) => cmd_evaluate(&a).map(|_| ()),
        Command::Report(a) => cmd_report(&a).map(|_| ()),
    }
}

/// Provenance written next to artifacts whose format has no room for it.
fn write_sidecar(artifact: &Path, entries: &[(&str, &str)]) -> Result<()> {
    let map: BTreeMap<&str, &str> = entries.iter().copied().collect();
    let path = sidecar_path(artifact);
    let text = serde_json::to_string_pretty(&map).map_err(|e| Error::Checkpoint(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn sidecar_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    artifact.with_file_name(name)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn require<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a PathBuf> {
    p.as_ref().ok_or_else(|| Error::Config(format!("{what} is not set")))
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VocabStats {
    pub size: usize,
    /// Fraction of word pieces of the corpus that are not UNK.
    pub coverage: f64,
}

pub fn cmd_build_vocab(args: &BuildVocabArgs) -> Result<VocabStats> {
    let cfg = args.config.resolve()?;
    let corpus_path = args.corpus.as_ref().or(cfg.train_data.as_ref()).ok_or_else(|| {
        Error::Config("no corpus: pass --corpus or set train_data".into())
    })?;
    let data = data::load_dataset(corpus_path, &cfg.format)?;
    let texts: Vec<&str> = data.iter().map(|e| e.text.as_str()).collect();
    let max_size = args.max_size.unwrap_or(cfg.vocab_max_size);
    let min_freq = args.min_freq.unwrap_or(cfg.vocab_min_freq);
    let vocab = build_vocab(&texts, max_size, min_freq)?;
    vocab.save(&args.out)?;

    let (mut pieces, mut unk) = (0usize, 0usize);
    for t in &texts {
        for piece in vocab.tokenize(t) {
            pieces += 1;
            unk += usize::from(piece == UNK_TOKEN);
        }
    }
    let coverage = if pieces == 0 { 1.0 } else { 1.0 - unk as f64 / pieces as f64 };
    let hash = cfg.hash()?;
    let vocab_hash = file_hash(&args.out)?;
    write_sidecar(&args.out, &[("config_hash", &hash), ("vocab_hash", &vocab_hash)])?;
    println!(
        "vocabulary: {} tokens, coverage {:.4} ({} of {} pieces not {UNK_TOKEN})",
        vocab.len(),
        coverage,
        pieces - unk,
        pieces
    );
    Ok(VocabStats {
        size: vocab.len(),
        coverage,
    })
}

/// Training and held-out examples of a config.
pub fn load_splits(cfg: &ExperimentConfig) -> Result<(Vec<Example>, Vec<Example>)> {
    let all = data::load_dataset(require(&cfg.train_data, "train_data")?, &cfg.format)?;
    match &cfg.eval_data {
        Some(p) => Ok((all, data::load_dataset(p, &cfg.format)?)),
        None => data::split(&all, cfg.split_ratio, cfg.split_seed),
    }
}

/// The configured vocabulary, or one learned from `train` and saved under
/// the output directory.
fn obtain_vocab(cfg: &mut ExperimentConfig, train: &[Example]) -> Result<(Vocab, PathBuf)> {
    if let Some(p) = &cfg.vocab {
        return Ok((Vocab::load(p)?, p.clone()));
    }
    let texts: Vec<&str> = train.iter().map(|e| e.text.as_str()).collect();
    let vocab = build_vocab(&texts, cfg.vocab_max_size, cfg.vocab_min_freq)?;
    let path = cfg.output_dir.join("vocab.txt");
    vocab.save(&path)?;
    Ok((vocab, path))
}

fn checkpoint_meta(entries: &[(&str, String)]) -> BTreeMap<String, String> {
    entries.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

pub fn cmd_pretrain_lm(args: &PretrainArgs) -> Result<()> {
    let mut cfg = args.config.resolve()?;
    let (train_set, _) = load_splits(&cfg)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    create_dir(&cfg.output_dir)?;
    let (vocab, vocab_path) = obtain_vocab(&mut cfg, &train_set)?;
    cfg.encoder.vocab_size = vocab.len();
    cfg.encoder.validate()?;
    let hash = cfg.hash()?;
    let seed = cfg.train.seeds[0];
    let corpus: Vec<_> = train_set.iter().map(|e| vocab.encode(&e.text, cfg.encoder.max_seq_len)).collect();
    let params = ModelParams::init(&cfg.encoder, HeadLayout::None, true, seed)?;
    let (params, record) = lm_finetune(params, &corpus, &cfg.train, seed)?;
    let meta = checkpoint_meta(&[
        ("config_hash", hash),
        ("vocab_hash", file_hash(&vocab_path)?),
        ("seed", seed.to_string()),
        ("stage", "lm".into()),
    ]);
    save_checkpoint(&args.out, &params, &meta)?;
    if let (Some(first), Some(last)) = (record.step_losses.first(), record.step_losses.last()) {
        println!("LM stage: {} steps, loss {first:.4} -> {last:.4}", record.step_losses.len());
    }
    Ok(())
}

fn layout_tag(layout: HeadLayout) -> String {
    match layout {
        HeadLayout::Single(t) => format!("stl-{}", t.short_name()),
        HeadLayout::Multi => "mtl".into(),
        HeadLayout::None => "encoder".into(),
    }
}

/// Trains, then writes under the output directory: `checkpoints/`,
/// per-seed and ensemble validation predictions in `predictions/`,
/// `val_gold.csv`, `metrics.csv`, `config.toml` and `manifest.json`.
pub fn cmd_train(args: &TrainArgs) -> Result<RunManifest> {
    let mut cfg = args.config.resolve()?;
    let (train_set, val_set) = load_splits(&cfg)?;
    let out = cfg.output_dir.clone();
    for sub in ["", "checkpoints", "predictions"] {
        create_dir(&out.join(sub))?;
    }
    let (vocab, vocab_path) = obtain_vocab(&mut cfg, &train_set)?;
    cfg.encoder.vocab_size = vocab.len();
    cfg.validate()?;
    let hash = cfg.hash()?;
    let vocab_hash = file_hash(&vocab_path)?;

    let train_enc = encode_examples(&vocab, &train_set, cfg.encoder.max_seq_len);
    let val_enc = encode_examples(&vocab, &val_set, cfg.encoder.max_seq_len);
    let corpus: Vec<_> = train_enc.iter().map(|e| e.input.clone()).collect();
    let result = run_experiment(
        &cfg.encoder,
        &cfg.train,
        &ExperimentData {
            train: &train_enc,
            val: &val_enc,
            lm_corpus: &corpus,
        },
    )?;

    let env_label = result.label();
    let mut checkpoints = Vec::new();
    let mut eval_history = Vec::new();
    let mut prediction_files = Vec::new();
    for seed_result in &result.seeds {
        for model in &seed_result.models {
            let layout = model.params.layout();
            let rel = format!("checkpoints/seed{}-{}.ckpt", seed_result.seed, layout_tag(layout));
            let meta = checkpoint_meta(&[
                ("config_hash", hash.clone()),
                ("vocab_hash", vocab_hash.clone()),
                ("environment", env_label.to_string()),
                ("seed", seed_result.seed.to_string()),
            ]);
            save_checkpoint(&out.join(&rel), &model.params, &meta)?;
            checkpoints.push(CheckpointEntry {
                seed: seed_result.seed,
                layout,
                path: rel,
            });
            eval_history.push(model.record.clone());
        }
        let rel = format!("predictions/seed{}.csv", seed_result.seed);
        write_predictions(&out.join(&rel), &result.val_ids, &seed_result.predictions, &hash)?;
        prediction_files.push(rel);
    }
    let rel = "predictions/ensemble.csv".to_string();
    write_predictions(&out.join(&rel), &result.val_ids, &result.ensemble()?, &hash)?;
    prediction_files.push(rel);

    let gold = out.join("val_gold.csv");
    PredictionTable::from_examples(&val_set).write(&gold)?;
    write_sidecar(&gold, &[("config_hash", &hash)])?;
    let config_path = out.join("config.toml");
    fs::write(&config_path, cfg.to_toml()?).map_err(|e| Error::io(&config_path, e))?;

    let mut rows = Vec::new();
    for (seed_result, m) in result.seeds.iter().zip(result.seed_metrics(cfg.averaging)?) {
        rows.push(ResultRow {
            model: format!("{} seed {}", cfg.model_name, seed_result.seed),
            environment: env_label.into(),
            metrics: m.map(Some),
        });
    }
    rows.push(ResultRow {
        model: format!("{} ensemble", cfg.model_name),
        environment: env_label.into(),
        metrics: result.ensemble_metrics(cfg.averaging)?.map(Some),
    });
    let table = results_table(rows)?;
    let metrics_path = out.join("metrics.csv");
    fs::write(&metrics_path, table.to_delimited()).map_err(|e| Error::io(&metrics_path, e))?;
    write_sidecar(&metrics_path, &[("config_hash", &hash)])?;
    print!("{}", table.to_text());

    let manifest = RunManifest {
        environment: env_label.into(),
        lm_stage: cfg.train.lm_stage,
        seeds: cfg.train.seeds.clone(),
        config_hash: hash,
        vocab_hash,
        config: serde_json::to_value(&cfg).map_err(|e| Error::Config(e.to_string()))?,
        checkpoints,
        eval_history,
        lm_history: result.seeds.iter().filter_map(|s| s.lm.clone()).collect(),
        predictions: prediction_files,
    };
    manifest.save(&out.join("manifest.json"))?;
    Ok(manifest)
}

fn write_predictions(path: &Path, ids: &[String], labels: &[Vec<u8>; 3], hash: &str) -> Result<()> {
    let table = PredictionTable {
        tasks: Task::ALL.to_vec(),
        rows: ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), Task::ALL.iter().map(|t| labels[t.index()][i]).collect()))
            .collect(),
    };
    table.write(path)?;
    write_sidecar(path, &[("config_hash", hash)])
}

/// Reads comments to label. Label columns are optional here.
fn load_unlabelled(path: &Path) -> Result<Vec<(String, String)>> {
    let spec = FormatSpec::default();
    match data::load_dataset(path, &spec) {
        Ok(d) => Ok(d.into_iter().map(|e| (e.id, e.text)).collect()),
        Err(Error::Parse { .. }) => {
            let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
            let headers = rdr.headers().map_err(|e| Error::Dataset(e.to_string()))?.clone();
            let col = |name: &str| {
                headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::Parse {
                    path: path.display().to_string(),
                    line: 1,
                    message: format!("missing column {name:?}"),
                })
            };
            let (id, text) = (col(&spec.id_column)?, col(&spec.text_column)?);
            rdr.records()
                .map(|r| {
                    let r = r.map_err(|e| Error::Parse {
                        path: path.display().to_string(),
                        line: e.position().map_or(0, |p| p.line()),
                        message: e.to_string(),
                    })?;
                    Ok((r[id].to_string(), unicode_nfc(&r[text])))
                })
                .collect()
        }
        Err(e) => Err(e),
    }
}

fn unicode_nfc(s: &str) -> String {
    use unicode_normalization::UnicodeNormalization;
    s.nfc().collect()
}

pub fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let vocab = Vocab::load(&args.vocab)?;
    let vocab_hash = file_hash(&args.vocab)?;
    let expected_config = match &args.config {
        Some(p) => {
            let mut c = ExperimentConfig::load(p)?;
            c.encoder.vocab_size = vocab.len();
            Some(c.hash()?)
        }
        None => None,
    };
    let mut models = Vec::new();
    let mut covered: Vec<Task> = Vec::new();
    let mut config_hashes = Vec::new();
    for path in &args.checkpoints {
        let (params, header) = load_checkpoint(path)?;
        let meta = |k: &str| header.metadata.get(k).cloned().unwrap_or_default();
        if meta("vocab_hash") != vocab_hash {
            return Err(Error::Checkpoint(format!(
                "{} was trained with a different vocabulary (hash {} vs {} for {})",
                path.display(),
                meta("vocab_hash"),
                vocab_hash,
                args.vocab.display()
            )));
        }
        if let Some(want) = &expected_config {
            if &meta("config_hash") != want {
                return Err(Error::Checkpoint(format!(
                    "{} was trained with config hash {}, but the given config hashes to {want}",
                    path.display(),
                    meta("config_hash")
                )));
            }
        }
        if params.config.vocab_size != vocab.len() {
            return Err(Error::Checkpoint(format!(
                "{} expects {} vocabulary entries, {} has {}",
                path.display(),
                params.config.vocab_size,
                args.vocab.display(),
                vocab.len()
            )));
        }
        let tasks = params.layout().tasks();
        if tasks.is_empty() {
            return Err(Error::Environment(format!("{} has no classification heads", path.display())));
        }
        if let Some(dup) = tasks.iter().find(|t| covered.contains(t)) {
            return Err(Error::Environment(format!("task {dup} is covered by more than one checkpoint")));
        }
        covered.extend(&tasks);
        config_hashes.push(meta("config_hash"));
        models.push(params);
    }

    let comments = load_unlabelled(&args.input)?;
    let mut columns: BTreeMap<Task, Vec<u8>> = BTreeMap::new();
    for params in &models {
        let inputs: Vec<_> = comments
            .iter()
            .map(|(_, text)| vocab.encode(text, params.config.max_seq_len))
            .collect();
        for (task, labels) in predict_labels(params, &inputs, args.batch_size)? {
            columns.insert(task, labels);
        }
    }
    let tasks: Vec<Task> = columns.keys().copied().collect();
    let table = PredictionTable {
        tasks: tasks.clone(),
        rows: comments
            .iter()
            .enumerate()
            .map(|(i, (id, _))| (id.clone(), tasks.iter().map(|t| columns[t][i]).collect()))
            .collect(),
    };
    table.write(&args.out)?;
    config_hashes.dedup();
    write_sidecar(&args.out, &[("config_hash", &config_hashes.join(",")), ("vocab_hash", &vocab_hash)])?;
    println!("{} comments labelled for {:?}", table.rows.len(), tasks);
    Ok(())
}

fn score_table(gold: &PredictionTable, pred: &PredictionTable, averaging: Averaging) -> Result<[Option<TaskMetrics>; 3]> {
    let aligned = pred.aligned_to(&gold.ids())?;
    let mut out = [None; 3];
    for t in Task::ALL {
        if let (Some(p), Some(g)) = (aligned.column(t), gold.column(t)) {
            out[t.index()] = Some(eval::score(&p, &g, averaging)?);
        }
    }
    Ok(out)
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<eval::ResultsTable> {
    let averaging =
        Averaging::parse(&args.averaging).ok_or_else(|| Error::Config(format!("unknown averaging {:?}", args.averaging)))?;
    let gold = PredictionTable::read(&args.gold)?;
    let ids = gold.ids();
    let mut rows = Vec::new();
    let mut aligned = Vec::new();
    for path in &args.predictions {
        let pred = PredictionTable::read(path)?.aligned_to(&ids)?;
        let name = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
        rows.push(ResultRow {
            model: format!("{} {name}", args.model),
            environment: args.environment.clone(),
            metrics: score_table(&gold, &pred, averaging)?,
        });
        aligned.push(pred);
    }
    if aligned.len() > 1 {
        let mut tasks: Vec<Task> = Vec::new();
        let mut columns = Vec::new();
        for t in Task::ALL {
            let votes: Option<Vec<Vec<u8>>> = aligned.iter().map(|p| p.column(t)).collect();
            if let Some(votes) = votes {
                tasks.push(t);
                columns.push(ensemble_predict(&votes)?);
            }
        }
        let ens = PredictionTable {
            tasks,
            rows: ids
                .iter()
                .enumerate()
                .map(|(i, id)| (id.to_string(), columns.iter().map(|c| c[i]).collect()))
                .collect(),
        };
        rows.push(ResultRow {
            model: format!("{} ensemble", args.model),
            environment: args.environment.clone(),
            metrics: score_table(&gold, &ens, averaging)?,
        });
    }
    let table = results_table(rows)?;
    print!("{}", table.to_text());
    if let Some(dir) = &args.out_dir {
        create_dir(dir)?;
        let hash = sha256_hex(format!("{args:?}").as_bytes());
        let metrics = dir.join("metrics.csv");
        fs::write(&metrics, table.to_delimited()).map_err(|e| Error::io(&metrics, e))?;
        write_sidecar(&metrics, &[("config_hash", &hash)])?;
        let text = dir.join("table.txt");
        fs::write(&text, table.to_text()).map_err(|e| Error::io(&text, e))?;
        write_sidecar(&text, &[("config_hash", &hash)])?;
    }
    Ok(table)
}

pub fn cmd_report(args: &ReportArgs) -> Result<eval::ResultsTable> {
    let averaging =
        Averaging::parse(&args.averaging).ok_or_else(|| Error::Config(format!("unknown averaging {:?}", args.averaging)))?;
    let mut rows = Vec::new();
    for path in &args.manifests {
        let manifest = RunManifest::load(path)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let gold = PredictionTable::read(&dir.join("val_gold.csv"))?;
        let model = manifest
            .config
            .get("model_name")
            .and_then(|v| v.as_str())
            .unwrap_or("encoder")
            .to_string();
        let (seed_files, ensemble): (Vec<&String>, Vec<&String>) =
            manifest.predictions.iter().partition(|p| !p.ends_with("ensemble.csv"));
        let metrics = if args.seed_mean {
            let per_seed = seed_files
                .iter()
                .map(|p| score_table(&gold, &PredictionTable::read(&dir.join(p))?, averaging))
                .collect::<Result<Vec<_>>>()?;
            mean_metrics(&per_seed, averaging)
        } else {
            let file = ensemble
                .first()
                .ok_or_else(|| Error::Checkpoint(format!("{} lists no ensemble predictions", path.display())))?;
            score_table(&gold, &PredictionTable::read(&dir.join(file))?, averaging)?
        };
        rows.push(ResultRow {
            model,
            environment: manifest.environment.clone(),
            metrics,
        });
    }
    let table = results_table(rows)?;
    print!("{}", table.to_text());
    if let Some(out) = &args.out {
        fs::write(out, table.to_delimited()).map_err(|e| Error::io(out, e))?;
        let hashes: Vec<String> = args
            .manifests
            .iter()
            .map(|m| RunManifest::load(m).map(|r| r.config_hash))
            .collect::<Result<_>>()?;
        write_sidecar(out, &[("config_hash", &hashes.join(","))])?;
    }
    Ok(table)
}

fn mean_metrics(per_seed: &[[Option<TaskMetrics>; 3]], averaging: Averaging) -> [Option<TaskMetrics>; 3] {
    Task::ALL.map(|t| {
        let ms: Vec<TaskMetrics> = per_seed.iter().filter_map(|m| m[t.index()]).collect();
        (!ms.is_empty()).then(|| {
            let n = ms.len() as f64;
            TaskMetrics {
                precision: ms.iter().map(|m| m.precision).sum::<f64>() / n,
                recall: ms.iter().map(|m| m.recall).sum::<f64>() / n,
                f1: ms.iter().map(|m| m.f1).sum::<f64>() / n,
                averaging,
            }
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_defaults_and_unknown_keys() {
        let c = ExperimentConfig::from_toml("model_name = \"x\"\n[train]\nlearning_rate = 0.002\n").unwrap();
        assert_eq!(c.model_name, "x");
        assert_eq!(c.train.learning_rate, 2e-3);
        assert_eq!(c.train.batch_size, 8);
        assert!(matches!(ExperimentConfig::from_toml("bogus = 1\n"), Err(Error::Config(_))));
        assert!(ExperimentConfig::from_toml("[train]\nlerning_rate = 1.0\n").is_err());
        let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_by_dotted_key() {
        let mut c = ExperimentConfig::default();
        c.apply_override("train.learning_rate=3e-4").unwrap();
        c.apply_override("train.environment=stl").unwrap();
        c.apply_override("encoder.d_model=64").unwrap();
        c.apply_override("output_dir=out/run").unwrap();
        assert_eq!(c.train.learning_rate, 3e-4);
        assert_eq!(c.train.environment, Environment::Stl);
        assert_eq!(c.encoder.d_model, 64);
        assert_eq!(c.output_dir, PathBuf::from("out/run"));
        assert!(c.apply_override("train.nope=1").is_err());
        assert!(c.apply_override("no_equals").is_err());
    }

    #[test]
    fn flags_override_config() {
        let args = ConfigArgs {
            environment: Some("stl".into()),
            lm: true,
            seeds: Some(3),
            lr: Some(1e-3),
            ..ConfigArgs::default()
        };
        let c = args.resolve().unwrap();
        assert_eq!(c.train.seeds, vec![1, 2, 3]);
        assert_eq!(c.train.environment_label(), "LM+STL");
        let bad = ConfigArgs {
            batch_size: Some(0),
            ..ConfigArgs::default()
        };
        assert!(matches!(bad.resolve(), Err(Error::Config(_))));
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            output_dir: "elsewhere".into(),
            ..a.clone()
        };
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
    }
}
