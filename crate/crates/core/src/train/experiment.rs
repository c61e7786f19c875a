//! Multi-seed runs over one environment and the majority-vote ensemble.

use super::{evaluate, lm_finetune, train_one, EncodedExample, LmRecord, RunRecord, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{self, Averaging, TaskMetrics};
use crate::model::{EncoderConfig, HeadLayout, ModelParams};
use crate::rng;
use crate::task::{Environment, Task};
use crate::tokenizer::EncodedInput;

pub struct ExperimentData<'a> {
    pub train: &'a [EncodedExample],
    pub val: &'a [EncodedExample],
    /// Texts for the LM stage; usually the training inputs.
    pub lm_corpus: &'a [EncodedInput],
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: ModelParams,
    pub record: RunRecord,
}

#[derive(Debug, Clone)]
pub struct SeedResult {
    pub seed: u64,
    pub lm: Option<LmRecord>,
    /// Three single-task models (STL) or one multitask model (MTL).
    pub models: Vec<TrainedModel>,
    /// Validation-set predictions per task in [`Task::ALL`] order.
    pub predictions: [Vec<u8>; 3],
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub environment: Environment,
    pub lm_stage: bool,
    pub seeds: Vec<SeedResult>,
    pub val_ids: Vec<String>,
    pub val_gold: [Vec<u8>; 3],
}

impl ExperimentResult {
    pub fn label(&self) -> &'static str {
        self.environment.label(self.lm_stage)
    }

    pub fn models_trained(&self) -> usize {
        self.seeds.iter().map(|s| s.models.len()).sum()
    }

    /// Majority vote over seeds, per task.
    pub fn ensemble(&self) -> Result<[Vec<u8>; 3]> {
        let mut out: [Vec<u8>; 3] = Default::default();
        for t in Task::ALL {
            let votes: Vec<Vec<u8>> = self.seeds.iter().map(|s| s.predictions[t.index()].clone()).collect();
            out[t.index()] = ensemble_predict(&votes)?;
        }
        Ok(out)
    }

    /// Validation metrics of every seed.
    pub fn seed_metrics(&self, averaging: Averaging) -> Result<Vec<[TaskMetrics; 3]>> {
        self.seeds
            .iter()
            .map(|s| score_all(&s.predictions, &self.val_gold, averaging))
            .collect()
    }

    /// Metrics averaged over seeds, per task.
    pub fn mean_metrics(&self, averaging: Averaging) -> Result<[TaskMetrics; 3]> {
        let per_seed = self.seed_metrics(averaging)?;
        let n = per_seed.len() as f64;
        Ok(Task::ALL.map(|t| {
            let i = t.index();
            TaskMetrics {
                precision: per_seed.iter().map(|m| m[i].precision).sum::<f64>() / n,
                recall: per_seed.iter().map(|m| m[i].recall).sum::<f64>() / n,
                f1: per_seed.iter().map(|m| m[i].f1).sum::<f64>() / n,
                averaging,
            }
        }))
    }

    pub fn ensemble_metrics(&self, averaging: Averaging) -> Result<[TaskMetrics; 3]> {
        score_all(&self.ensemble()?, &self.val_gold, averaging)
    }
}

fn score_all(preds: &[Vec<u8>; 3], gold: &[Vec<u8>; 3], averaging: Averaging) -> Result<[TaskMetrics; 3]> {
    let m: Vec<TaskMetrics> = Task::ALL
        .iter()
        .map(|t| eval::score(&preds[t.index()], &gold[t.index()], averaging))
        .collect::<Result<_>>()?;
    Ok([m[0], m[1], m[2]])
}

/// Encoder for one seed, after the LM stage when configured.
fn base_encoder(encoder: &EncoderConfig, cfg: &TrainConfig, data: &ExperimentData, seed: u64) -> Result<(ModelParams, Option<LmRecord>)> {
    let base = ModelParams::init(encoder, HeadLayout::None, cfg.lm_stage, seed)?;
    if !cfg.lm_stage {
        return Ok((base, None));
    }
    let (mut tuned, record) = lm_finetune(base, data.lm_corpus, cfg, seed)?;
    tuned.drop_mlm_head();
    Ok((tuned, Some(record)))
}

/// Trains every seed of `cfg` in its environment and predicts the
/// validation set with the best checkpoint of each model.
pub fn run_experiment(encoder: &EncoderConfig, cfg: &TrainConfig, data: &ExperimentData) -> Result<ExperimentResult> {
    cfg.validate()?;
    encoder.validate()?;
    if data.val.is_empty() {
        return Err(Error::Dataset("validation set is empty".into()));
    }
    let layouts: Vec<HeadLayout> = match cfg.environment {
        Environment::Stl => Task::ALL.map(HeadLayout::Single).to_vec(),
        Environment::Mtl => vec![HeadLayout::Multi],
    };
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let (base, lm) = base_encoder(encoder, cfg, data, seed)?;
        let mut models = Vec::with_capacity(layouts.len());
        let mut predictions: [Vec<u8>; 3] = Default::default();
        for &layout in &layouts {
            let mut params = base.deep_copy();
            params.reset_heads(layout, rng::derive_seed(seed, "heads", 0));
            let (best, record) = train_one(params, data.train, data.val, cfg, seed)?;
            let ev = evaluate(&best, data.val, cfg.batch_size, Averaging::Macro)?;
            for (task, p) in ev.predictions {
                predictions[task.index()] = p;
            }
            models.push(TrainedModel { params: best, record });
        }
        log::info!("{} seed {seed} done", cfg.environment_label());
        seeds.push(SeedResult {
            seed,
            lm,
            models,
            predictions,
        });
    }
    Ok(ExperimentResult {
        environment: cfg.environment,
        lm_stage: cfg.lm_stage,
        seeds,
        val_ids: data.val.iter().map(|e| e.id.clone()).collect(),
        val_gold: Task::ALL.map(|t| data.val.iter().map(|e| e.labels[t.index()]).collect()),
    })
}

/// Per-example majority vote over seeds (rows). A tie goes to 0.
pub fn ensemble_predict(per_seed: &[Vec<u8>]) -> Result<Vec<u8>> {
    let first = per_seed
        .first()
        .ok_or_else(|| Error::Eval("ensemble needs at least one seed".into()))?;
    if let Some(bad) = per_seed.iter().find(|r| r.len() != first.len()) {
        return Err(Error::Eval(format!(
            "seed predictions differ in length: {} vs {}",
            first.len(),
            bad.len()
        )));
    }
    let n = per_seed.len();
    (0..first.len())
        .map(|i| {
            let mut ones = 0;
            for row in per_seed {
                match row[i] {
                    0 => {}
                    1 => ones += 1,
                    other => return Err(Error::Eval(format!("vote must be 0 or 1, got {other}"))),
                }
            }
            Ok(u8::from(2 * ones > n))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn majority_examples() {
        let votes: Vec<Vec<u8>> = [1, 1, 0, 0, 1].iter().map(|&v| vec![v]).collect();
        assert_eq!(ensemble_predict(&votes).unwrap(), vec![1]);
        assert_eq!(ensemble_predict(&[vec![0, 1, 1]]).unwrap(), vec![0, 1, 1]);
        assert_eq!(ensemble_predict(&[vec![1], vec![0]]).unwrap(), vec![0]);
        assert!(ensemble_predict(&[vec![1], vec![0, 1]]).is_err());
        assert!(ensemble_predict(&[]).is_err());
    }
}
