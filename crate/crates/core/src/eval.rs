//! Precision, recall and F1 per task, and the results table comparing
//! systems across training environments.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::Task;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Counts with the negative class treated as positive.
    pub fn swapped(&self) -> Self {
        Self {
            tp: self.tn,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tp,
        }
    }

    pub fn scaled(&self, k: u64) -> Self {
        Self {
            tp: self.tp * k,
            fp: self.fp * k,
            fn_: self.fn_ * k,
            tn: self.tn * k,
        }
    }
}

pub fn confusion(preds: &[u8], gold: &[u8]) -> Result<ConfusionCounts> {
    if preds.len() != gold.len() {
        return Err(Error::Eval(format!(
            "{} predictions for {} gold labels",
            preds.len(),
            gold.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Eval("no examples to score".into()));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in preds.iter().zip(gold) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            (0, 0) => c.tn += 1,
            _ => return Err(Error::Eval(format!("labels must be 0 or 1, got pred {p}, gold {g}"))),
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    PositiveClass,
    #[default]
    Macro,
}

impl Averaging {
    pub fn name(self) -> &'static str {
        match self {
            Averaging::PositiveClass => "positive_class",
            Averaging::Macro => "macro",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "positive_class" | "positive" | "binary" => Some(Averaging::PositiveClass),
            "macro" => Some(Averaging::Macro),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub averaging: Averaging,
}

fn ratio(num: u64, den: u64, what: &str) -> f64 {
    if den == 0 {
        log::debug!("{what} has a zero denominator; reported as 0");
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn positive_prf(c: &ConfusionCounts) -> (f64, f64, f64) {
    let p = ratio(c.tp, c.tp + c.fp, "precision");
    let r = ratio(c.tp, c.tp + c.fn_, "recall");
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

pub fn prf1(c: &ConfusionCounts, averaging: Averaging) -> TaskMetrics {
    let (precision, recall, f1) = match averaging {
        Averaging::PositiveClass => positive_prf(c),
        Averaging::Macro => {
            let (p1, r1, f1) = positive_prf(c);
            let (p0, r0, f0) = positive_prf(&c.swapped());
            ((p0 + p1) / 2.0, (r0 + r1) / 2.0, (f0 + f1) / 2.0)
        }
    };
    TaskMetrics {
        precision,
        recall,
        f1,
        averaging,
    }
}

/// Scores 0/1 predictions against gold labels.
pub fn score(preds: &[u8], gold: &[u8], averaging: Averaging) -> Result<TaskMetrics> {
    Ok(prf1(&confusion(preds, gold)?, averaging))
}

/// One system (model under an environment) with its three task scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub model: String,
    pub environment: String,
    /// In [`Task::ALL`] order; `None` for tasks the system does not predict.
    pub metrics: [Option<TaskMetrics>; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
    /// Per task, indices of the rows holding the highest F1.
    pub best: [Vec<usize>; 3],
}

pub fn results_table(rows: Vec<ResultRow>) -> Result<ResultsTable> {
    if rows.is_empty() {
        return Err(Error::Eval("results table needs at least one row".into()));
    }
    let best = Task::ALL.map(|t| {
        let i = t.index();
        let max = rows
            .iter()
            .filter_map(|r| r.metrics[i].map(|m| m.f1))
            .fold(f64::NEG_INFINITY, f64::max);
        rows.iter()
            .enumerate()
            .filter(|(_, r)| r.metrics[i].is_some_and(|m| m.f1 == max))
            .map(|(k, _)| k)
            .collect()
    });
    Ok(ResultsTable { rows, best })
}

impl ResultsTable {
    pub fn is_best(&self, row: usize, task: Task) -> bool {
        self.best[task.index()].contains(&row)
    }

    /// Aligned text. The best F1 of each task carries a `*`.
    pub fn to_text(&self) -> String {
        let model_w = self.rows.iter().map(|r| r.model.len()).max().unwrap_or(0).max(5);
        let env_w = self.rows.iter().map(|r| r.environment.len()).max().unwrap_or(0).max(11);
        let cell = 22;
        let mut s = String::new();
        let _ = write!(s, "{:<model_w$}  {:<env_w$}", "Model", "Environment");
        for t in Task::ALL {
            let _ = write!(s, "  {:^cell$}", t.display_name());
        }
        s.push('\n');
        let _ = write!(s, "{:<model_w$}  {:<env_w$}", "", "");
        for _ in Task::ALL {
            let _ = write!(s, "  {:>6} {:>6} {:>7} ", "P", "R", "F1");
        }
        s.push('\n');
        for (k, row) in self.rows.iter().enumerate() {
            let _ = write!(s, "{:<model_w$}  {:<env_w$}", row.model, row.environment);
            for t in Task::ALL {
                match row.metrics[t.index()] {
                    Some(m) => {
                        let flag = if self.is_best(k, t) { "*" } else { " " };
                        let _ = write!(s, "  {:>6.4} {:>6.4} {:>7.4}{flag}", m.precision, m.recall, m.f1);
                    }
                    None => {
                        let _ = write!(s, "  {:>6} {:>6} {:>7} ", "-", "-", "-");
                    }
                }
            }
            s.push('\n');
        }
        let averaging = self
            .rows
            .iter()
            .flat_map(|r| r.metrics.iter().flatten())
            .map(|m| m.averaging.name())
            .next()
            .unwrap_or(Averaging::default().name());
        let _ = writeln!(s, "averaging: {averaging}; * marks the best F1 per task");
        s
    }

    /// One line per (system, task):
    /// `model,environment,task,averaging,precision,recall,f1,best`.
    pub fn to_delimited(&self) -> String {
        let mut s = String::from("model,environment,task,averaging,precision,recall,f1,best\n");
        for (k, row) in self.rows.iter().enumerate() {
            for t in Task::ALL {
                if let Some(m) = row.metrics[t.index()] {
                    let _ = writeln!(
                        s,
                        "{},{},{},{},{},{},{},{}",
                        row.model,
                        row.environment,
                        t.short_name(),
                        m.averaging.name(),
                        m.precision,
                        m.recall,
                        m.f1,
                        u8::from(self.is_best(k, t))
                    );
                }
            }
        }
        s
    }
}
