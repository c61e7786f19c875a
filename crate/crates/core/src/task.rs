//! The three comment classification tasks and the training environments.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Toxic,
    Engaging,
    FactClaiming,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Toxic, Task::Engaging, Task::FactClaiming];

    pub fn index(self) -> usize {
        match self {
            Task::Toxic => 0,
            Task::Engaging => 1,
            Task::FactClaiming => 2,
        }
    }

    /// Short name used in parameter names and file names.
    pub fn short_name(self) -> &'static str {
        match self {
            Task::Toxic => "toxic",
            Task::Engaging => "engage",
            Task::FactClaiming => "fact",
        }
    }

    /// Column header in data and prediction files.
    pub fn column(self) -> &'static str {
        match self {
            Task::Toxic => "Sub1_Toxic",
            Task::Engaging => "Sub2_Engaging",
            Task::FactClaiming => "Sub3_FactClaiming",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Task::Toxic => "Toxic",
            Task::Engaging => "Engaging",
            Task::FactClaiming => "Fact-Claiming",
        }
    }

    pub fn from_name(name: &str) -> Option<Task> {
        Task::ALL.into_iter().find(|t| {
            name.eq_ignore_ascii_case(t.short_name())
                || name.eq_ignore_ascii_case(t.column())
                || name.eq_ignore_ascii_case(t.display_name())
                || name == format!("{t:?}").to_lowercase()
        })
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

/// Single-task (one model per task) or multitask (shared encoder, three heads).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Environment {
    Stl,
    Mtl,
}

impl Environment {
    /// Row label, e.g. `LM+MTL` when the language-model stage ran first.
    pub fn label(self, lm_stage: bool) -> &'static str {
        match (self, lm_stage) {
            (Environment::Stl, false) => "STL",
            (Environment::Stl, true) => "LM+STL",
            (Environment::Mtl, false) => "MTL",
            (Environment::Mtl, true) => "LM+MTL",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "stl" => Some(Environment::Stl),
            "mtl" => Some(Environment::Mtl),
            _ => None,
        }
    }
}

/// The four environment labels in table order.
pub const ENVIRONMENT_LABELS: [&str; 4] = ["STL", "LM+STL", "MTL", "LM+MTL"];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_roundtrip() {
        for t in Task::ALL {
            assert_eq!(Task::from_name(t.short_name()), Some(t));
            assert_eq!(Task::from_name(t.column()), Some(t));
        }
        assert_eq!(Environment::Mtl.label(true), "LM+MTL");
    }
}
