//! Fine-tuning loop: batching, the optional masked-language-model stage,
//! classification training with periodic validation and early stopping.

mod experiment;
mod manifest;
mod optim;

pub use experiment::{ensemble_predict, run_experiment, ExperimentData, ExperimentResult, SeedResult, TrainedModel};
pub use manifest::{config_hash, sha256_hex, CheckpointEntry, RunManifest};
pub use optim::{adam_step, lr_at, warmup_steps, AdamState, StepStats};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::eval::{self, Averaging};
use crate::model::{self, ForwardMode, HeadLayout, ModelParams};
use crate::objectives::{self, LossBundle};
use crate::rng;
use crate::task::{Environment, Task};
use crate::tensor::{self, Tensor};
use crate::tokenizer::{mask_for_mlm, EncodedInput, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub num_epochs: usize,
    pub adam_epsilon: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub warmup_ratio: f64,
    pub warmup_steps: usize,
    pub max_grad_norm: f64,
    pub batch_size: usize,
    pub eval_every_batches: usize,
    pub early_stop_patience_evals: usize,
    pub gradient_accumulation_steps: usize,
    pub environment: Environment,
    pub lm_stage: bool,
    pub seeds: Vec<u64>,
    /// Fraction of content tokens selected for prediction in the LM stage.
    pub mask_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            num_epochs: 3,
            adam_epsilon: 1e-8,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            warmup_ratio: 0.1,
            warmup_steps: 0,
            max_grad_norm: 1.0,
            batch_size: 8,
            eval_every_batches: 100,
            early_stop_patience_evals: 10,
            gradient_accumulation_steps: 1,
            environment: Environment::Mtl,
            lm_stage: false,
            seeds: vec![1, 2, 3, 4, 5],
            mask_prob: 0.15,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        let positive = [
            ("learning_rate", self.learning_rate),
            ("adam_epsilon", self.adam_epsilon),
            ("max_grad_norm", self.max_grad_norm),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return fail("warmup_ratio must lie in [0, 1)");
        }
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return fail("mask_prob must lie in (0, 1)");
        }
        if self.num_epochs == 0 {
            return fail("num_epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if self.eval_every_batches == 0 {
            return fail("eval_every_batches must be at least 1");
        }
        if self.early_stop_patience_evals == 0 {
            return fail("early_stop_patience_evals must be at least 1");
        }
        if self.gradient_accumulation_steps == 0 {
            return fail("gradient_accumulation_steps must be at least 1");
        }
        if self.seeds.is_empty() {
            return fail("seeds must not be empty");
        }
        let mut uniq = self.seeds.clone();
        uniq.sort_unstable();
        uniq.dedup();
        if uniq.len() != self.seeds.len() {
            return fail("seeds must be distinct");
        }
        Ok(())
    }

    /// Row label of the configured environment, e.g. `LM+STL`.
    pub fn environment_label(&self) -> &'static str {
        self.environment.label(self.lm_stage)
    }
}

/// An example after tokenization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub id: String,
    pub input: EncodedInput,
    pub labels: [u8; 3],
}

pub fn encode_examples(vocab: &Vocab, examples: &[Example], max_len: usize) -> Vec<EncodedExample> {
    examples
        .iter()
        .map(|e| EncodedExample {
            id: e.id.clone(),
            input: vocab.encode(&e.text, max_len),
            labels: e.labels(),
        })
        .collect()
}

/// Inputs of a batch cut to the longest real length among them. Only PAD
/// positions are dropped, and those are masked out of attention anyway.
pub fn collate(inputs: &[&EncodedInput]) -> Vec<EncodedInput> {
    let len = inputs.iter().map(|x| x.real_len()).max().unwrap_or(0);
    inputs.iter().map(|x| x.truncated(len.max(1))).collect()
}

fn collate_examples(batch: &[&EncodedExample]) -> (Vec<EncodedInput>, [Vec<u8>; 3]) {
    let inputs = collate(&batch.iter().map(|e| &e.input).collect::<Vec<_>>());
    let labels = Task::ALL.map(|t| batch.iter().map(|e| e.labels[t.index()]).collect());
    (inputs, labels)
}

/// Training loss of one batch for the parameter layout: the task loss for
/// an STL model, the multitask average for an MTL model.
pub fn batch_loss(params: &ModelParams, batch: &[&EncodedExample], mode: ForwardMode) -> Result<Tensor> {
    let (inputs, labels) = collate_examples(batch);
    match params.layout() {
        HeadLayout::Single(task) => {
            let logits = model::stl_logits(params, &inputs, mode)?;
            objectives::task_loss(&logits, &labels[task.index()])
        }
        HeadLayout::Multi => {
            let logits = model::mtl_logits(params, &inputs, mode)?;
            let bundle = LossBundle::compute(&logits, [&labels[0], &labels[1], &labels[2]])?;
            Ok(bundle.l_multi)
        }
        HeadLayout::None => Err(Error::Environment("classification training needs heads".into())),
    }
}

/// Validation loss and per-task scores at one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    /// Number of training batches seen.
    pub step: usize,
    pub val_loss: f64,
    pub f1: Vec<(Task, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub layout: HeadLayout,
    pub eval_history: Vec<EvalPoint>,
    pub stopped_early: bool,
    pub best_checkpoint_step: usize,
    pub batches_seen: usize,
    pub optimizer_steps: usize,
}

/// What early stopping consults at each evaluation.
pub trait Validator {
    /// Validation loss and per-task F1 of `params`.
    fn validate(&mut self, params: &ModelParams) -> Result<(f64, Vec<(Task, f64)>)>;
}

/// Scores a held-out set: the training objective as loss, and F1 per task.
pub struct DatasetValidator<'a> {
    pub data: &'a [EncodedExample],
    pub batch_size: usize,
    pub averaging: Averaging,
}

impl Validator for DatasetValidator<'_> {
    fn validate(&mut self, params: &ModelParams) -> Result<(f64, Vec<(Task, f64)>)> {
        let ev = evaluate(params, self.data, self.batch_size, self.averaging)?;
        Ok((ev.loss, ev.f1))
    }
}

/// Held-out loss, predictions and scores of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub predictions: Vec<(Task, Vec<u8>)>,
    pub f1: Vec<(Task, f64)>,
}

/// Class predictions (positive when its probability is strictly larger)
/// for every task the model carries, computed in eval mode.
pub fn predict_labels(params: &ModelParams, inputs: &[EncodedInput], batch_size: usize) -> Result<Vec<(Task, Vec<u8>)>> {
    let tasks = params.layout().tasks();
    let mut out: Vec<(Task, Vec<u8>)> = tasks.iter().map(|&t| (t, Vec::with_capacity(inputs.len()))).collect();
    for chunk in inputs.chunks(batch_size.max(1)) {
        let batch = collate(&chunk.iter().collect::<Vec<_>>());
        for (k, (_, logits)) in model::task_logits(params, &batch, ForwardMode::EVAL)?.into_iter().enumerate() {
            out[k].1.extend(logits.data().chunks(2).map(|r| u8::from(r[1] > r[0])));
        }
    }
    Ok(out)
}

pub fn evaluate(params: &ModelParams, data: &[EncodedExample], batch_size: usize, averaging: Averaging) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Dataset("evaluation set is empty".into()));
    }
    let tasks = params.layout().tasks();
    if tasks.is_empty() {
        return Err(Error::Environment("evaluation needs classification heads".into()));
    }
    let mut loss_sum = 0.0;
    let mut predictions: Vec<(Task, Vec<u8>)> = tasks.iter().map(|&t| (t, Vec::with_capacity(data.len()))).collect();
    for chunk in data.chunks(batch_size.max(1)) {
        let refs: Vec<&EncodedExample> = chunk.iter().collect();
        let (inputs, labels) = collate_examples(&refs);
        let logits = model::task_logits(params, &inputs, ForwardMode::EVAL)?;
        let mut batch_losses = Vec::with_capacity(logits.len());
        for (k, (task, l)) in logits.iter().enumerate() {
            batch_losses.push(objectives::task_loss(l, &labels[task.index()])?.item());
            predictions[k].1.extend(l.data().chunks(2).map(|r| u8::from(r[1] > r[0])));
        }
        let batch_loss = batch_losses.iter().sum::<f64>() / batch_losses.len() as f64;
        loss_sum += batch_loss * chunk.len() as f64;
    }
    let loss = loss_sum / data.len() as f64;
    let f1 = predictions
        .iter()
        .map(|(t, p)| {
            let gold: Vec<u8> = data.iter().map(|e| e.labels[t.index()]).collect();
            Ok((*t, eval::score(p, &gold, averaging)?.f1))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation { loss, predictions, f1 })
}

fn check_finite(loss: &Tensor, name: &str) -> Result<()> {
    if loss.item().is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what: "loss",
            name: name.to_string(),
        })
    }
}

/// Batches of one epoch in seeded shuffled order.
fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "shuffle", epoch as u64));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Splits the batches of an epoch into optimizer steps of up to
/// `gradient_accumulation_steps` batches each.
fn step_groups(batches: usize, accumulate: usize) -> Vec<std::ops::Range<usize>> {
    (0..batches)
        .step_by(accumulate)
        .map(|s| s..(s + accumulate).min(batches))
        .collect()
}

/// Classification training with a caller-supplied validator. Evaluates
/// after every `eval_every_batches` batches and once more at the end if
/// the last batch was not an evaluation point; stops once
/// `early_stop_patience_evals` evaluations in a row fail to improve on the
/// best validation loss, and returns the parameters of the best evaluation.
pub fn train_with_validator(
    mut params: ModelParams,
    train_set: &[EncodedExample],
    cfg: &TrainConfig,
    seed: u64,
    validator: &mut dyn Validator,
) -> Result<(ModelParams, RunRecord)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let layout = params.layout();
    let batches_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let steps_per_epoch = batches_per_epoch.div_ceil(cfg.gradient_accumulation_steps);
    let total_steps = steps_per_epoch * cfg.num_epochs;

    let mut state = AdamState::new();
    let mut record = RunRecord {
        seed,
        layout,
        eval_history: Vec::new(),
        stopped_early: false,
        best_checkpoint_step: 0,
        batches_seen: 0,
        optimizer_steps: 0,
    };
    let mut best: Option<(f64, ModelParams)> = None;
    let mut since_best = 0;

    let mut run_eval = |params: &ModelParams, record: &mut RunRecord| -> Result<bool> {
        let (val_loss, f1) = validator.validate(params)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite {
                what: "validation loss",
                name: format!("{layout:?}"),
            });
        }
        log::info!("seed {seed} {layout:?} batch {}: val loss {val_loss:.6}", record.batches_seen);
        record.eval_history.push(EvalPoint {
            step: record.batches_seen,
            val_loss,
            f1,
        });
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, params.clone()));
            record.best_checkpoint_step = record.batches_seen;
            since_best = 0;
        } else {
            since_best += 1;
        }
        Ok(since_best >= cfg.early_stop_patience_evals)
    };

    'epochs: for epoch in 0..cfg.num_epochs {
        let batches = epoch_batches(train_set.len(), cfg.batch_size, seed, epoch);
        for group in step_groups(batches.len(), cfg.gradient_accumulation_steps) {
            let group_size: usize = batches[group.clone()].iter().map(Vec::len).sum();
            let mut stop = false;
            for b in group.clone() {
                let batch: Vec<&EncodedExample> = batches[b].iter().map(|&i| &train_set[i]).collect();
                let mode = ForwardMode::train(rng::derive_seed(seed, "dropout", record.batches_seen as u64));
                let loss = batch_loss(&params, &batch, mode)?;
                check_finite(&loss, "training batch")?;
                let weighted = tensor::scale(&loss, batch.len() as f64 / group_size as f64);
                weighted.backward()?;
                record.batches_seen += 1;
                if b + 1 == group.end {
                    let lr = lr_at(record.optimizer_steps, total_steps, cfg);
                    adam_step(&mut params, &mut state, lr, cfg)?;
                    record.optimizer_steps += 1;
                }
                if record.batches_seen.is_multiple_of(cfg.eval_every_batches) {
                    stop = run_eval(&params, &mut record)?;
                    if stop {
                        break;
                    }
                }
            }
            if stop {
                record.stopped_early = true;
                break 'epochs;
            }
        }
    }
    if !record.stopped_early && !record.batches_seen.is_multiple_of(cfg.eval_every_batches) {
        run_eval(&params, &mut record)?;
    }
    let (_, best_params) = best.expect("at least one evaluation ran");
    best_params.zero_grads();
    Ok((best_params, record))
}

/// [`train_with_validator`] scored on `val_set`.
pub fn train_one(
    params: ModelParams,
    train_set: &[EncodedExample],
    val_set: &[EncodedExample],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ModelParams, RunRecord)> {
    if val_set.is_empty() {
        return Err(Error::Dataset("validation set is empty".into()));
    }
    if let Some(shared) = val_set.iter().find(|v| train_set.iter().any(|t| t.id == v.id)) {
        return Err(Error::Dataset(format!(
            "comment {} appears in both training and validation data",
            shared.id
        )));
    }
    let mut validator = DatasetValidator {
        data: val_set,
        batch_size: cfg.batch_size,
        averaging: Averaging::Macro,
    };
    train_with_validator(params, train_set, cfg, seed, &mut validator)
}

/// Mean MLM loss per optimizer step of the LM stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmRecord {
    pub seed: u64,
    pub step_losses: Vec<f64>,
}

/// Masked positions of a batch: corrupted inputs, flattened row indices of
/// the selected positions and their original ids.
pub fn mask_batch(
    inputs: &[EncodedInput],
    seed: u64,
    mask_prob: f64,
    vocab_size: usize,
) -> (Vec<EncodedInput>, Vec<usize>, Vec<usize>) {
    let mut masked = Vec::with_capacity(inputs.len());
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (b, x) in inputs.iter().enumerate() {
        let (m, labels) = mask_for_mlm(x, rng::derive_seed(seed, "mask", b as u64), mask_prob, vocab_size);
        let (pos, tgt) = objectives::mlm_targets(&labels);
        rows.extend(pos.into_iter().map(|p| b * x.len() + p));
        targets.extend(tgt);
        masked.push(m);
    }
    (masked, rows, targets)
}

/// Masked-language-model fine-tuning of the encoder for `num_epochs`
/// epochs with the classification schedule and optimizer settings.
/// Classification heads receive no gradient and come back unchanged.
pub fn lm_finetune(
    mut params: ModelParams,
    corpus: &[EncodedInput],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ModelParams, LmRecord)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Dataset("language-model corpus is empty".into()));
    }
    if params.mlm.is_none() {
        return Err(Error::Model("LM stage needs an MLM head".into()));
    }
    let vocab_size = params.config.vocab_size;
    let total_steps = corpus.len().div_ceil(cfg.batch_size) * cfg.num_epochs;
    let mut state = AdamState::new();
    let mut record = LmRecord {
        seed,
        step_losses: Vec::new(),
    };
    let mut step = 0usize;
    for epoch in 0..cfg.num_epochs {
        for batch in epoch_batches(corpus.len(), cfg.batch_size, rng::derive_seed(seed, "lm", 0), epoch) {
            let inputs = collate(&batch.iter().map(|&i| &corpus[i]).collect::<Vec<_>>());
            let batch_seed = rng::derive_seed(seed, "lm-batch", step as u64);
            let (masked, rows, targets) = mask_batch(&inputs, batch_seed, cfg.mask_prob, vocab_size);
            let lr = lr_at(step, total_steps, cfg);
            step += 1;
            if rows.is_empty() {
                log::warn!("LM batch {step} has no masked positions; skipped");
                continue;
            }
            let mode = ForwardMode::train(rng::derive_seed(seed, "lm-dropout", step as u64));
            let logits = model::mlm_logits_at(&params, &masked, &rows, mode)?;
            let loss = tensor::cross_entropy(&logits, &targets)?;
            check_finite(&loss, "LM batch")?;
            loss.backward()?;
            record.step_losses.push(loss.item());
            adam_step(&mut params, &mut state, lr, cfg)?;
        }
    }
    Ok((params, record))
}

/// Masked-token top-1 accuracy and mean loss over a corpus, each input
/// masked with a seed derived from `seed`.
pub fn mlm_accuracy(params: &ModelParams, corpus: &[EncodedInput], mask_prob: f64, seed: u64) -> Result<(f64, f64)> {
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut loss_sum = 0.0;
    for (i, x) in corpus.iter().enumerate() {
        let inputs = collate(&[x]);
        let (masked, rows, targets) = mask_batch(&inputs, rng::derive_seed(seed, "probe", i as u64), mask_prob, params.config.vocab_size);
        if rows.is_empty() {
            continue;
        }
        let logits = model::mlm_logits_at(params, &masked, &rows, ForwardMode::EVAL)?;
        loss_sum += tensor::cross_entropy(&logits, &targets)?.item() * rows.len() as f64;
        let v = params.config.vocab_size;
        for (r, &t) in targets.iter().enumerate() {
            let row = &logits.data()[r * v..(r + 1) * v];
            let arg = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (k, &x)| if x > acc.1 { (k, x) } else { acc })
                .0;
            correct += usize::from(arg == t);
        }
        total += rows.len();
    }
    if total == 0 {
        return Err(Error::Dataset("no masked positions in probe corpus".into()));
    }
    Ok((correct as f64 / total as f64, loss_sum / total as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthSpec};
    use crate::model::EncoderConfig;
    use crate::tokenizer::build_vocab;

    #[test]
    fn default_config_matches_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!(c.learning_rate, 1e-5);
        assert_eq!((c.num_epochs, c.batch_size, c.eval_every_batches), (3, 8, 100));
        assert_eq!(c.early_stop_patience_evals, 10);
        assert_eq!(c.seeds.len(), 5);
        c.validate().unwrap();
        for bad in [
            TrainConfig { batch_size: 0, ..c.clone() },
            TrainConfig { early_stop_patience_evals: 0, ..c.clone() },
            TrainConfig { learning_rate: 0.0, ..c.clone() },
            TrainConfig { seeds: vec![], ..c.clone() },
            TrainConfig { seeds: vec![1, 1], ..c.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn step_groups_cover_batches() {
        assert_eq!(step_groups(5, 2), vec![0..2, 2..4, 4..5]);
        assert_eq!(step_groups(3, 1), vec![0..1, 1..2, 2..3]);
    }

    #[test]
    fn collate_trims_padding_only() {
        let a = EncodedInput {
            ids: vec![2, 7, 3, 0, 0],
            attention_mask: vec![1, 1, 1, 0, 0],
        };
        let b = EncodedInput {
            ids: vec![2, 3, 0, 0, 0],
            attention_mask: vec![1, 1, 0, 0, 0],
        };
        let c = collate(&[&a, &b]);
        assert_eq!(c[0].ids, vec![2, 7, 3]);
        assert_eq!(c[1].ids, vec![2, 3, 0]);
    }

    fn small_setup() -> (ModelParams, Vec<EncodedExample>, Vec<EncodedExample>) {
        let data = synth_generate(40, 3, &SynthSpec::default()).unwrap();
        let texts: Vec<&str> = data.iter().map(|e| e.text.as_str()).collect();
        let vocab = build_vocab(&texts, 200, 1).unwrap();
        let cfg = EncoderConfig {
            vocab_size: vocab.len(),
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 24,
            dropout: 0.1,
        };
        let enc = encode_examples(&vocab, &data, 24);
        let p = ModelParams::init(&cfg, HeadLayout::Multi, false, 5).unwrap();
        (p, enc[..30].to_vec(), enc[30..].to_vec())
    }

    #[test]
    fn training_is_deterministic() {
        let (p, train, val) = small_setup();
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            num_epochs: 1,
            eval_every_batches: 2,
            ..TrainConfig::default()
        };
        let (a, ra) = train_one(p.clone(), &train, &val, &cfg, 9).unwrap();
        let (b, rb) = train_one(p, &train, &val, &cfg, 9).unwrap();
        assert_eq!(ra, rb);
        for ((_, x), (_, y)) in a.named_params().iter().zip(b.named_params()) {
            assert_eq!(x.data(), y.data());
        }
        let steps: Vec<usize> = ra.eval_history.iter().map(|e| e.step).collect();
        assert_eq!(steps, vec![2, 4]);
        assert!(steps.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn overlapping_splits_rejected() {
        let (p, train, _) = small_setup();
        assert!(train_one(p, &train, &train[..2], &TrainConfig::default(), 1).is_err());
    }

    struct Constant(usize);

    impl Validator for Constant {
        fn validate(&mut self, _: &ModelParams) -> Result<(f64, Vec<(Task, f64)>)> {
            self.0 += 1;
            Ok((1.0, vec![]))
        }
    }

    #[test]
    fn patience_one_stops_at_second_eval() {
        let (p, train, _) = small_setup();
        let cfg = TrainConfig {
            eval_every_batches: 1,
            early_stop_patience_evals: 1,
            ..TrainConfig::default()
        };
        let mut v = Constant(0);
        let (_, rec) = train_with_validator(p, &train, &cfg, 1, &mut v).unwrap();
        assert_eq!(v.0, 2);
        assert!(rec.stopped_early);
        assert_eq!(rec.best_checkpoint_step, 1);
    }

    #[test]
    fn lm_stage_leaves_heads() {
        let (mut p, train, _) = small_setup();
        p.add_mlm_head(2);
        let heads_before: Vec<Vec<f64>> = p
            .named_params()
            .iter()
            .filter(|(n, _)| n.starts_with("heads."))
            .map(|(_, t)| t.data().to_vec())
            .collect();
        let corpus: Vec<EncodedInput> = train.iter().map(|e| e.input.clone()).collect();
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            num_epochs: 1,
            ..TrainConfig::default()
        };
        let (q, rec) = lm_finetune(p, &corpus, &cfg, 4).unwrap();
        assert!(!rec.step_losses.is_empty());
        let heads_after: Vec<Vec<f64>> = q
            .named_params()
            .iter()
            .filter(|(n, _)| n.starts_with("heads."))
            .map(|(_, t)| t.data().to_vec())
            .collect();
        assert_eq!(heads_before, heads_after);
        assert!(lm_finetune(q.clone(), &[], &cfg, 4).is_err());
        let mut no_mlm = q;
        no_mlm.drop_mlm_head();
        assert!(lm_finetune(no_mlm, &corpus, &cfg, 4).is_err());
    }
}
