//! Training objectives: per-task binary cross-entropy, the equal-weight
//! multitask loss and the masked-language-model loss.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};
use crate::tokenizer::IGNORE_INDEX;

fn check_labels(labels: &[u8], rows: usize) -> Result<Vec<usize>> {
    if labels.is_empty() {
        return Err(Error::Model("loss over an empty batch".into()));
    }
    if labels.len() != rows {
        return Err(Error::Model(format!(
            "{} labels for {rows} rows of logits",
            labels.len()
        )));
    }
    labels
        .iter()
        .map(|&l| match l {
            0 | 1 => Ok(l as usize),
            other => Err(Error::Model(format!("binary label must be 0 or 1, got {other}"))),
        })
        .collect()
}

/// Mean binary cross-entropy of `[batch, 2]` logits against 0/1 labels.
pub fn task_loss(logits: &Tensor, labels: &[u8]) -> Result<Tensor> {
    let rows = logits.shape().first().copied().unwrap_or(0);
    if logits.shape().len() != 2 || logits.shape()[1] != 2 {
        return Err(Error::Model(format!("task logits must be [batch, 2], got {:?}", logits.shape())));
    }
    let targets = check_labels(labels, rows)?;
    Ok(tensor::cross_entropy(logits, &targets)?)
}

/// `−mean_i Σ_c y_ic · ln p_ic` written out with one-hot targets, for
/// `[batch, 2]` probabilities. Used to cross-check the fused form.
pub fn task_loss_from_probs(probs: &Tensor, labels: &[u8]) -> Result<Tensor> {
    let rows = probs.shape().first().copied().unwrap_or(0);
    if probs.shape().len() != 2 || probs.shape()[1] != 2 {
        return Err(Error::Model(format!("task probabilities must be [batch, 2], got {:?}", probs.shape())));
    }
    let targets = check_labels(labels, rows)?;
    let mut onehot = vec![0.0; rows * 2];
    for (i, &t) in targets.iter().enumerate() {
        onehot[i * 2 + t] = 1.0;
    }
    let onehot = Tensor::new(onehot, &[rows, 2])?;
    let picked = tensor::sum(&tensor::mul(&onehot, &tensor::ln(probs))?);
    Ok(tensor::scale(&picked, -1.0 / rows as f64))
}

/// Equal-weight average of the three task losses. The sum is taken in
/// value order so the result is exactly invariant to argument order.
pub fn multi_loss(toxic: &Tensor, engaging: &Tensor, fact: &Tensor) -> Result<Tensor> {
    let mut parts = [toxic, engaging, fact];
    for p in parts {
        if p.numel() != 1 {
            return Err(Error::Model(format!("task loss must be a scalar, got shape {:?}", p.shape())));
        }
    }
    parts.sort_by(|a, b| a.item().total_cmp(&b.item()));
    let total = tensor::add(&tensor::add(parts[0], parts[1])?, parts[2])?;
    Ok(tensor::scale(&total, 1.0 / 3.0))
}

/// Flattened row indices whose label is not [`IGNORE_INDEX`], with the
/// matching targets.
pub fn mlm_targets(labels: &[i64]) -> (Vec<usize>, Vec<usize>) {
    labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l != IGNORE_INDEX)
        .map(|(i, &l)| (i, l as usize))
        .unzip()
}

/// Mean cross-entropy over non-ignored positions of `[batch, seq, vocab]`
/// (or already flattened `[batch·seq, vocab]`) logits. A batch with no
/// selected position contributes a constant zero.
pub fn mlm_loss(logits: &Tensor, labels: &[i64]) -> Result<Tensor> {
    let vocab = *logits.shape().last().ok_or_else(|| Error::Model("scalar MLM logits".into()))?;
    let rows = logits.numel() / vocab.max(1);
    if labels.len() != rows {
        return Err(Error::Model(format!("{} MLM labels for {rows} positions", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l != IGNORE_INDEX && (l < 0 || l as usize >= vocab)) {
        return Err(Error::Model(format!("MLM label {bad} outside vocabulary of size {vocab}")));
    }
    let (picked, targets) = mlm_targets(labels);
    if picked.is_empty() {
        log::warn!("MLM batch has no masked positions; loss is 0");
        return Ok(Tensor::scalar(0.0));
    }
    let flat = tensor::reshape(logits, &[rows, vocab])?;
    let sel = tensor::embedding_lookup(&flat, &picked)?;
    Ok(tensor::cross_entropy(&sel, &targets)?)
}

/// The three task losses of one multitask batch and their average.
#[derive(Debug, Clone)]
pub struct LossBundle {
    pub l_toxic: Tensor,
    pub l_engage: Tensor,
    pub l_fact: Tensor,
    pub l_multi: Tensor,
}

impl LossBundle {
    /// From logits and labels in toxic, engaging, fact-claiming order.
    pub fn compute(logits: &[Tensor; 3], labels: [&[u8]; 3]) -> Result<Self> {
        let l_toxic = task_loss(&logits[0], labels[0])?;
        let l_engage = task_loss(&logits[1], labels[1])?;
        let l_fact = task_loss(&logits[2], labels[2])?;
        let l_multi = multi_loss(&l_toxic, &l_engage, &l_fact)?;
        Ok(Self {
            l_toxic,
            l_engage,
            l_fact,
            l_multi,
        })
    }

    /// Task losses in [`Task::ALL`](crate::Task::ALL) order.
    pub fn task_losses(&self) -> [&Tensor; 3] {
        [&self.l_toxic, &self.l_engage, &self.l_fact]
    }

    pub fn values(&self) -> [f64; 4] {
        [self.l_toxic.item(), self.l_engage.item(), self.l_fact.item(), self.l_multi.item()]
    }
}
