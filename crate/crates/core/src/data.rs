//! Comment datasets: delimited-file ingestion, label-distribution audit,
//! seeded train/validation split, synthetic corpora and prediction files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::rng;
use crate::task::Task;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub text: String,
    pub toxic: u8,
    pub engaging: u8,
    pub fact_claiming: u8,
}

impl Example {
    pub fn new(id: impl Into<String>, text: impl Into<String>, labels: [u8; 3]) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            toxic: labels[0],
            engaging: labels[1],
            fact_claiming: labels[2],
        }
    }

    pub fn label(&self, task: Task) -> u8 {
        self.labels()[task.index()]
    }

    pub fn labels(&self) -> [u8; 3] {
        [self.toxic, self.engaging, self.fact_claiming]
    }
}

/// Column layout of a delimited dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FormatSpec {
    pub delimiter: char,
    pub id_column: String,
    pub text_column: String,
    /// Label columns in toxic, engaging, fact-claiming order.
    pub label_columns: [String; 3],
}

impl Default for FormatSpec {
    fn default() -> Self {
        Self {
            delimiter: ',',
            id_column: "comment_id".into(),
            text_column: "comment_text".into(),
            label_columns: Task::ALL.map(|t| t.column().to_string()),
        }
    }
}

impl FormatSpec {
    fn delimiter_byte(&self) -> Result<u8> {
        u8::try_from(self.delimiter)
            .ok()
            .filter(u8::is_ascii)
            .ok_or_else(|| Error::Config(format!("delimiter {:?} must be ASCII", self.delimiter)))
    }
}

fn column_index(headers: &csv::StringRecord, name: &str, source: &str) -> Result<usize> {
    headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::Parse {
        path: source.to_string(),
        line: 1,
        message: format!("missing column {name:?}"),
    })
}

fn parse_label(raw: &str, column: &str, source: &str, line: u64) -> Result<u8> {
    match raw.trim() {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(Error::Parse {
            path: source.to_string(),
            line,
            message: format!("label {column} must be 0 or 1, got {other:?}"),
        }),
    }
}

/// Parses examples from delimited text. `source` names the input in errors.
pub fn read_dataset<R: Read>(reader: R, spec: &FormatSpec, source: &str) -> Result<Vec<Example>> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(spec.delimiter_byte()?)
        .has_headers(true)
        .from_reader(reader);
    let parse_err = |e: csv::Error| {
        let line = e.position().map_or(0, |p| p.line());
        Error::Parse {
            path: source.to_string(),
            line,
            message: e.to_string(),
        }
    };
    let headers = rdr.headers().map_err(parse_err)?.clone();
    let id_idx = column_index(&headers, &spec.id_column, source)?;
    let text_idx = column_index(&headers, &spec.text_column, source)?;
    let label_idx = spec
        .label_columns
        .iter()
        .map(|c| column_index(&headers, c, source))
        .collect::<Result<Vec<_>>>()?;

    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(parse_err)?;
        let line = record.position().map_or(0, |p| p.line());
        let mut labels = [0u8; 3];
        for (slot, (&idx, col)) in labels.iter_mut().zip(label_idx.iter().zip(&spec.label_columns)) {
            *slot = parse_label(&record[idx], col, source, line)?;
        }
        out.push(Example::new(
            record[id_idx].to_string(),
            record[text_idx].nfc().collect::<String>(),
            labels,
        ));
    }
    Ok(out)
}

pub fn load_dataset(path: &Path, spec: &FormatSpec) -> Result<Vec<Example>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(file, spec, &path.display().to_string())
}

pub fn write_dataset_to<W: Write>(writer: W, examples: &[Example], spec: &FormatSpec) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(spec.delimiter_byte()?)
        .from_writer(writer);
    let to_err = |e: csv::Error| Error::Dataset(e.to_string());
    let mut header = vec![spec.id_column.as_str(), spec.text_column.as_str()];
    header.extend(spec.label_columns.iter().map(String::as_str));
    w.write_record(&header).map_err(to_err)?;
    for ex in examples {
        let labels = ex.labels().map(|l| l.to_string());
        let mut row = vec![ex.id.as_str(), ex.text.as_str()];
        row.extend(labels.iter().map(String::as_str));
        w.write_record(&row).map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::Dataset(e.to_string()))
}

pub fn write_dataset(path: &Path, examples: &[Example], spec: &FormatSpec) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_dataset_to(file, examples, spec)
}

/// Label-triple histogram of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub total: usize,
    /// Indexed by `4·toxic + 2·engaging + fact`.
    pub counts: [usize; 8],
}

/// Row order of the training-distribution table: (toxic, engaging, fact).
pub const TRIPLE_TABLE_ORDER: [[u8; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [0, 1, 0],
    [1, 1, 0],
    [0, 1, 1],
    [1, 0, 1],
    [0, 0, 1],
    [1, 1, 1],
];

impl DatasetSummary {
    pub fn count(&self, triple: [u8; 3]) -> usize {
        self.counts[triple_index(triple)]
    }

    /// Counts in [`TRIPLE_TABLE_ORDER`].
    pub fn table_counts(&self) -> [usize; 8] {
        TRIPLE_TABLE_ORDER.map(|t| self.count(t))
    }

    /// Fraction of positives per task.
    pub fn positive_rates(&self) -> [f64; 3] {
        let mut pos = [0usize; 3];
        for (i, &c) in self.counts.iter().enumerate() {
            let triple = [(i >> 2) & 1, (i >> 1) & 1, i & 1];
            for t in 0..3 {
                pos[t] += triple[t] * c;
            }
        }
        pos.map(|p| if self.total == 0 { 0.0 } else { p as f64 / self.total as f64 })
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("Toxic  Engaging  Fact-Claiming  Count\n");
        for t in TRIPLE_TABLE_ORDER {
            s.push_str(&format!("{:<6} {:<9} {:<14} {}\n", t[0], t[1], t[2], self.count(t)));
        }
        s.push_str(&format!("All                           {}\n", self.total));
        s
    }
}

fn triple_index(t: [u8; 3]) -> usize {
    4 * t[0] as usize + 2 * t[1] as usize + t[2] as usize
}

pub fn summarize(data: &[Example]) -> DatasetSummary {
    let mut s = DatasetSummary {
        total: data.len(),
        counts: [0; 8],
    };
    for ex in data {
        s.counts[triple_index(ex.labels())] += 1;
    }
    s
}

/// Seeded shuffle, then a prefix of `round(ratio · n)` examples for training
/// and the rest for validation.
pub fn split(data: &[Example], ratio: f64, seed: u64) -> Result<(Vec<Example>, Vec<Example>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let mut shuffled = data.to_vec();
    shuffled.shuffle(&mut rng::stream(seed, "split", 0));
    let cut = (ratio * data.len() as f64).round() as usize;
    let val = shuffled.split_off(cut);
    Ok((shuffled, val))
}

pub const TOXIC_MARKER: &str = "TOXMARK";
pub const ENGAGING_MARKER: &str = "ENGMARK";
pub const FACT_MARKER: &str = "FACTMARK";

pub fn marker(task: Task) -> &'static str {
    match task {
        Task::Toxic => TOXIC_MARKER,
        Task::Engaging => ENGAGING_MARKER,
        Task::FactClaiming => FACT_MARKER,
    }
}

const FILLER: [&str; 40] = [
    "die", "der", "das", "und", "nicht", "ist", "wir", "sie", "heute", "politik", "sendung",
    "meinung", "frage", "land", "zeit", "menschen", "immer", "wieder", "gerade", "schon", "aber",
    "auch", "doch", "genau", "thema", "kern", "heimat", "geschichte", "gesagt", "recht", "wahl",
    "partei", "regierung", "bitte", "danke", "leute", "hier", "jetzt", "morgen", "alle",
];

/// Parameters of the synthetic comment generator.
///
/// A latent class `z ~ Bernoulli(0.5)` drives all three labels: each label
/// copies `z` with probability `q` and is otherwise an independent fair coin,
/// with `q = sqrt(2·correlation − 1)`, so any two label columns agree with
/// probability `correlation`. A task's marker token is planted exactly when
/// its label is 1, except that with probability `noise` the marker's
/// presence is flipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    /// Pairwise label agreement in `[0.5, 1]`.
    pub correlation: f64,
    /// Probability that a marker disagrees with its label.
    pub noise: f64,
    pub min_filler: usize,
    pub max_filler: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            correlation: 0.7,
            noise: 0.0,
            min_filler: 4,
            max_filler: 10,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.5..=1.0).contains(&self.correlation) {
            return Err(Error::Config(format!(
                "correlation (pairwise agreement) must lie in [0.5, 1], got {}",
                self.correlation
            )));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Config(format!("noise must lie in [0, 1], got {}", self.noise)));
        }
        if self.min_filler > self.max_filler {
            return Err(Error::Config("min_filler exceeds max_filler".into()));
        }
        Ok(())
    }

    /// Probability that a label copies the latent class.
    pub fn copy_probability(&self) -> f64 {
        (2.0 * self.correlation - 1.0).max(0.0).sqrt()
    }

    /// Expected probability of every label triple, indexed like
    /// [`DatasetSummary::counts`].
    pub fn triple_probabilities(&self) -> [f64; 8] {
        let q = self.copy_probability();
        let same = q + (1.0 - q) / 2.0;
        let differ = (1.0 - q) / 2.0;
        let mut p = [0.0; 8];
        for (i, slot) in p.iter_mut().enumerate() {
            let triple = [(i >> 2) & 1, (i >> 1) & 1, i & 1];
            for z in 0..2 {
                let given_z: f64 = triple.iter().map(|&l| if l == z { same } else { differ }).product();
                *slot += 0.5 * given_z;
            }
        }
        p
    }
}

pub fn synth_generate(n: usize, seed: u64, spec: &SynthSpec) -> Result<Vec<Example>> {
    if n == 0 {
        return Err(Error::Config("synthetic dataset size must be at least 1".into()));
    }
    spec.validate()?;
    let q = spec.copy_probability();
    let mut rng = rng::stream(seed, "synth", 0);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let z = u8::from(rng.gen::<f64>() < 0.5);
        let mut labels = [0u8; 3];
        for l in labels.iter_mut() {
            *l = if rng.gen::<f64>() < q {
                z
            } else {
                u8::from(rng.gen::<f64>() < 0.5)
            };
        }
        let n_filler = rng.gen_range(spec.min_filler..=spec.max_filler);
        let mut words: Vec<&str> = (0..n_filler).map(|_| FILLER[rng.gen_range(0..FILLER.len())]).collect();
        for task in Task::ALL {
            let flip = rng.gen::<f64>() < spec.noise;
            if (labels[task.index()] == 1) != flip {
                let at = rng.gen_range(0..=words.len());
                words.insert(at, marker(task));
            }
        }
        out.push(Example::new(format!("synth-{i:05}"), words.join(" "), labels));
    }
    Ok(out)
}

/// Per-comment 0/1 predictions for a subset of tasks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionTable {
    pub tasks: Vec<Task>,
    /// `(comment_id, labels in `tasks` order)`
    pub rows: Vec<(String, Vec<u8>)>,
}

impl PredictionTable {
    pub fn column(&self, task: Task) -> Option<Vec<u8>> {
        let idx = self.tasks.iter().position(|&t| t == task)?;
        Some(self.rows.iter().map(|(_, l)| l[idx]).collect())
    }

    pub fn ids(&self) -> Vec<&str> {
        self.rows.iter().map(|(id, _)| id.as_str()).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("comment_id");
        for t in &self.tasks {
            s.push(',');
            s.push_str(t.column());
        }
        s.push('\n');
        for (id, labels) in &self.rows {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
            w.write_record([id.as_str()]).expect("in-memory write");
            let quoted = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8");
            s.push_str(quoted.trim_end_matches(['\r', '\n']));
            for l in labels {
                s.push(',');
                s.push_str(&l.to_string());
            }
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(file, &path.display().to_string())
    }

    pub fn read_from<R: Read>(reader: R, source: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().from_reader(reader);
        let parse_err = |e: csv::Error| Error::Parse {
            path: source.to_string(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        };
        let headers = rdr.headers().map_err(parse_err)?.clone();
        let id_idx = column_index(&headers, "comment_id", source)?;
        let mut task_cols = Vec::new();
        for (i, h) in headers.iter().enumerate() {
            if let Some(t) = Task::ALL.into_iter().find(|t| t.column() == h.trim()) {
                task_cols.push((t, i));
            }
        }
        if task_cols.is_empty() {
            return Err(Error::Parse {
                path: source.to_string(),
                line: 1,
                message: "no task columns found".into(),
            });
        }
        let mut rows = Vec::new();
        for record in rdr.records() {
            let record = record.map_err(parse_err)?;
            let line = record.position().map_or(0, |p| p.line());
            let labels = task_cols
                .iter()
                .map(|(t, i)| parse_label(&record[*i], t.column(), source, line))
                .collect::<Result<Vec<_>>>()?;
            rows.push((record[id_idx].to_string(), labels));
        }
        Ok(Self {
            tasks: task_cols.into_iter().map(|(t, _)| t).collect(),
            rows,
        })
    }

    /// Gold labels of a dataset as a prediction table over all three tasks.
    pub fn from_examples(examples: &[Example]) -> Self {
        Self {
            tasks: Task::ALL.to_vec(),
            rows: examples.iter().map(|e| (e.id.clone(), e.labels().to_vec())).collect(),
        }
    }

    /// Reorders rows to follow `ids`. Fails listing any ids missing on
    /// either side.
    pub fn aligned_to(&self, ids: &[&str]) -> Result<Self> {
        let index: BTreeMap<&str, &Vec<u8>> = self.rows.iter().map(|(id, l)| (id.as_str(), l)).collect();
        let wanted: std::collections::BTreeSet<&str> = ids.iter().copied().collect();
        let missing: Vec<&str> = ids.iter().copied().filter(|id| !index.contains_key(id)).collect();
        let extra: Vec<&str> = index.keys().copied().filter(|id| !wanted.contains(id)).collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::Eval(format!(
                "comment ids do not align; missing from predictions: {missing:?}; not in gold: {extra:?}"
            )));
        }
        Ok(Self {
            tasks: self.tasks.clone(),
            rows: ids.iter().map(|id| (id.to_string(), index[id].clone())).collect(),
        })
    }
}
