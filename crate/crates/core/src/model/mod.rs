//! Post-norm transformer encoder shared by the single-task and multitask
//! classifiers, the linear-softmax classification heads read from the `[CLS]`
//! position, and the masked-language-model head.

mod checkpoint;

use std::cell::Cell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::task::Task;
use crate::tensor::{self, Tensor};
use crate::tokenizer::{EncodedInput, NUM_SPECIAL};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, CHECKPOINT_VERSION};

pub const LAYER_NORM_EPS: f64 = 1e-12;
pub const INIT_STD: f64 = 0.02;
/// Additive attention bias at padded key positions. `exp` of it underflows
/// to exactly zero.
const MASKED_SCORE: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 8000,
            d_model: 128,
            n_layers: 2,
            n_heads: 4,
            d_ff: 512,
            max_seq_len: 120,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size <= NUM_SPECIAL {
            return fail(format!("vocab_size must exceed {NUM_SPECIAL}, got {}", self.vocab_size));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.n_layers == 0 {
            return fail("d_model, n_heads, n_layers and d_ff must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.max_seq_len < 3 {
            return fail(format!("max_seq_len must be at least 3, got {}", self.max_seq_len));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Which classification heads a parameter set carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadLayout {
    /// One head for one task (STL).
    Single(Task),
    /// Three heads on a shared encoder (MTL).
    Multi,
    /// Encoder only, e.g. a standalone language-model stage.
    None,
}

impl HeadLayout {
    pub fn tasks(self) -> Vec<Task> {
        match self {
            HeadLayout::Single(t) => vec![t],
            HeadLayout::Multi => Task::ALL.to_vec(),
            HeadLayout::None => vec![],
        }
    }
}

/// `softmax(h · W + b)` over {negative, positive}.
#[derive(Debug, Clone)]
pub struct ClassificationHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub q_weight: Tensor,
    pub q_bias: Tensor,
    pub k_weight: Tensor,
    pub k_bias: Tensor,
    pub v_weight: Tensor,
    pub v_bias: Tensor,
    pub out_weight: Tensor,
    pub out_bias: Tensor,
    pub attn_ln_gamma: Tensor,
    pub attn_ln_beta: Tensor,
    pub ff1_weight: Tensor,
    pub ff1_bias: Tensor,
    pub ff2_weight: Tensor,
    pub ff2_bias: Tensor,
    pub ff_ln_gamma: Tensor,
    pub ff_ln_beta: Tensor,
}

/// Dense + GELU + layer norm, then a decoder tied to the token embeddings.
#[derive(Debug, Clone)]
pub struct MlmHead {
    pub transform_weight: Tensor,
    pub transform_bias: Tensor,
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
    pub output_bias: Tensor,
}

/// All learnable weights. Cloning shares the underlying tensors, which makes
/// a clone a free snapshot: the optimizer replaces tensors rather than
/// mutating them.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: EncoderConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub embedding_ln_gamma: Tensor,
    pub embedding_ln_beta: Tensor,
    pub layers: Vec<EncoderLayer>,
    layout: HeadLayout,
    heads: Vec<ClassificationHead>,
    pub mlm: Option<MlmHead>,
}

macro_rules! param_fields {
    ($ty:ty { $($field:ident => $name:literal),* $(,)? }) => {
        impl $ty {
            fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
                $( out.push((format!("{prefix}{}", $name), &self.$field)); )*
            }
            fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
                $( out.push((format!("{prefix}{}", $name), &mut self.$field)); )*
            }
        }
    };
}

param_fields!(ClassificationHead { weight => "weight", bias => "bias" });
param_fields!(EncoderLayer {
    q_weight => "attn.q.weight",
    q_bias => "attn.q.bias",
    k_weight => "attn.k.weight",
    k_bias => "attn.k.bias",
    v_weight => "attn.v.weight",
    v_bias => "attn.v.bias",
    out_weight => "attn.out.weight",
    out_bias => "attn.out.bias",
    attn_ln_gamma => "attn.ln.gamma",
    attn_ln_beta => "attn.ln.beta",
    ff1_weight => "ffn.in.weight",
    ff1_bias => "ffn.in.bias",
    ff2_weight => "ffn.out.weight",
    ff2_bias => "ffn.out.bias",
    ff_ln_gamma => "ffn.ln.gamma",
    ff_ln_beta => "ffn.ln.beta",
});
param_fields!(MlmHead {
    transform_weight => "transform.weight",
    transform_bias => "transform.bias",
    ln_gamma => "ln.gamma",
    ln_beta => "ln.beta",
    output_bias => "output.bias",
});

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| rng::truncated_normal(&mut self.rng, INIT_STD))
            .collect();
        Tensor::parameter(data, shape).expect("init shape")
    }

    fn constant(shape: &[usize], value: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::parameter(vec![value; n], shape).expect("init shape")
    }
}

fn new_head(d_model: usize, seed: u64, task: Task) -> ClassificationHead {
    let mut init = Init {
        rng: rng::stream(seed, "head", task.index() as u64),
    };
    ClassificationHead {
        weight: init.normal(&[d_model, 2]),
        bias: Init::constant(&[2], 0.0),
    }
}

fn new_mlm_head(config: &EncoderConfig, seed: u64) -> MlmHead {
    let d = config.d_model;
    let mut init = Init {
        rng: rng::stream(seed, "mlm", 0),
    };
    MlmHead {
        transform_weight: init.normal(&[d, d]),
        transform_bias: Init::constant(&[d], 0.0),
        ln_gamma: Init::constant(&[d], 1.0),
        ln_beta: Init::constant(&[d], 0.0),
        output_bias: Init::constant(&[config.vocab_size], 0.0),
    }
}

impl ModelParams {
    /// Fresh parameters. The encoder depends only on `(config, seed)`, so
    /// single-task models built with the same seed start from the same
    /// encoder weights, the way fine-tuning starts from one checkpoint.
    pub fn init(config: &EncoderConfig, layout: HeadLayout, with_mlm: bool, seed: u64) -> Result<Self> {
        config.validate()?;
        let (d, f) = (config.d_model, config.d_ff);
        let mut init = Init {
            rng: rng::stream(seed, "encoder", 0),
        };
        let token_embedding = init.normal(&[config.vocab_size, d]);
        let position_embedding = init.normal(&[config.max_seq_len, d]);
        let layers = (0..config.n_layers)
            .map(|_| EncoderLayer {
                q_weight: init.normal(&[d, d]),
                q_bias: Init::constant(&[d], 0.0),
                k_weight: init.normal(&[d, d]),
                k_bias: Init::constant(&[d], 0.0),
                v_weight: init.normal(&[d, d]),
                v_bias: Init::constant(&[d], 0.0),
                out_weight: init.normal(&[d, d]),
                out_bias: Init::constant(&[d], 0.0),
                attn_ln_gamma: Init::constant(&[d], 1.0),
                attn_ln_beta: Init::constant(&[d], 0.0),
                ff1_weight: init.normal(&[d, f]),
                ff1_bias: Init::constant(&[f], 0.0),
                ff2_weight: init.normal(&[f, d]),
                ff2_bias: Init::constant(&[d], 0.0),
                ff_ln_gamma: Init::constant(&[d], 1.0),
                ff_ln_beta: Init::constant(&[d], 0.0),
            })
            .collect();
        let heads = layout.tasks().into_iter().map(|t| new_head(d, seed, t)).collect();
        Ok(Self {
            config: config.clone(),
            token_embedding,
            position_embedding,
            embedding_ln_gamma: Init::constant(&[d], 1.0),
            embedding_ln_beta: Init::constant(&[d], 0.0),
            layers,
            layout,
            heads,
            mlm: with_mlm.then(|| new_mlm_head(config, seed)),
        })
    }

    pub fn layout(&self) -> HeadLayout {
        self.layout
    }

    /// Replaces the classification heads with freshly initialized ones
    /// (truncated normal, std 0.02) for `layout`.
    pub fn reset_heads(&mut self, layout: HeadLayout, seed: u64) {
        let d = self.config.d_model;
        self.layout = layout;
        self.heads = layout.tasks().into_iter().map(|t| new_head(d, seed, t)).collect();
    }

    pub fn add_mlm_head(&mut self, seed: u64) {
        self.mlm = Some(new_mlm_head(&self.config, seed));
    }

    pub fn drop_mlm_head(&mut self) {
        self.mlm = None;
    }

    /// Copy with new tensor identities; nothing is shared with `self`.
    pub fn deep_copy(&self) -> Self {
        let mut copy = self.clone();
        for (_, t) in copy.named_params_mut() {
            *t = Tensor::parameter(t.data().to_vec(), t.shape()).expect("same shape");
        }
        copy
    }

    pub fn head(&self, task: Task) -> Result<&ClassificationHead> {
        let idx = self
            .layout
            .tasks()
            .iter()
            .position(|&t| t == task)
            .ok_or_else(|| Error::Environment(format!("no {task} head in a {:?} model", self.layout)))?;
        Ok(&self.heads[idx])
    }

    pub fn head_mut(&mut self, task: Task) -> Result<&mut ClassificationHead> {
        let idx = self
            .layout
            .tasks()
            .iter()
            .position(|&t| t == task)
            .ok_or_else(|| Error::Environment(format!("no {task} head in a {:?} model", self.layout)))?;
        Ok(&mut self.heads[idx])
    }

    fn encoder_params<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        out.push(("embeddings.token".into(), &self.token_embedding));
        out.push(("embeddings.position".into(), &self.position_embedding));
        out.push(("embeddings.ln.gamma".into(), &self.embedding_ln_gamma));
        out.push(("embeddings.ln.beta".into(), &self.embedding_ln_beta));
        for (i, layer) in self.layers.iter().enumerate() {
            layer.collect(&format!("layers.{i}."), out);
        }
    }

    /// Every parameter with its stable dotted name.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.encoder_params(&mut out);
        for (task, head) in self.layout.tasks().into_iter().zip(&self.heads) {
            head.collect(&format!("heads.{}.", task.short_name()), &mut out);
        }
        if let Some(mlm) = &self.mlm {
            mlm.collect("mlm.", &mut out);
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("embeddings.token".into(), &mut self.token_embedding),
            ("embeddings.position".into(), &mut self.position_embedding),
            ("embeddings.ln.gamma".into(), &mut self.embedding_ln_gamma),
            ("embeddings.ln.beta".into(), &mut self.embedding_ln_beta),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.collect_mut(&format!("layers.{i}."), &mut out);
        }
        for (task, head) in self.layout.tasks().into_iter().zip(self.heads.iter_mut()) {
            head.collect_mut(&format!("heads.{}.", task.short_name()), &mut out);
        }
        if let Some(mlm) = self.mlm.as_mut() {
            mlm.collect_mut("mlm.", &mut out);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn encoder_num_params(&self) -> usize {
        let mut out = Vec::new();
        self.encoder_params(&mut out);
        out.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn mlm_num_params(&self) -> usize {
        let mut out = Vec::new();
        if let Some(mlm) = &self.mlm {
            mlm.collect("", &mut out);
        }
        out.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for (_, t) in self.named_params() {
            t.zero_grad();
        }
    }
}

/// Whether dropout is active, and the seed of its masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardMode {
    pub train: bool,
    pub seed: u64,
}

impl ForwardMode {
    pub const EVAL: ForwardMode = ForwardMode { train: false, seed: 0 };

    pub fn train(seed: u64) -> Self {
        Self { train: true, seed }
    }
}

thread_local! {
    static ENCODER_PASSES: Cell<usize> = const { Cell::new(0) };
}

/// Number of encoder passes run on the current thread.
pub fn encoder_pass_count() -> usize {
    ENCODER_PASSES.with(Cell::get)
}

fn dropout(x: &Tensor, p: f64, mode: ForwardMode, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if !mode.train || p == 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..x.numel())
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect();
    Ok(tensor::mul(x, &Tensor::new(mask, x.shape())?)?)
}

fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(tensor::add(&tensor::matmul(x, w)?, b)?)
}

/// Hidden states of a batch, flattened to `[batch·seq, d_model]`.
pub(crate) struct EncoderOutput {
    pub hidden: Tensor,
    pub batch: usize,
    pub seq_len: usize,
    pub attention: Vec<Tensor>,
}

fn check_batch(config: &EncoderConfig, batch: &[EncodedInput]) -> Result<usize> {
    let first = batch
        .first()
        .ok_or_else(|| Error::Model("encoder called with an empty batch".into()))?;
    let seq_len = first.len();
    if batch.iter().any(|b| b.len() != seq_len || b.attention_mask.len() != seq_len) {
        return Err(Error::Model("sequence lengths in a batch must be uniform".into()));
    }
    if seq_len == 0 {
        return Err(Error::Model("empty sequences".into()));
    }
    if seq_len > config.max_seq_len {
        return Err(Error::Model(format!(
            "sequence length {seq_len} exceeds max_seq_len {}",
            config.max_seq_len
        )));
    }
    if let Some(bad) = batch.iter().flat_map(|b| &b.ids).find(|&&id| id >= config.vocab_size) {
        return Err(Error::Model(format!(
            "token id {bad} outside vocabulary of size {}",
            config.vocab_size
        )));
    }
    Ok(seq_len)
}

pub(crate) fn run_encoder(p: &ModelParams, batch: &[EncodedInput], mode: ForwardMode) -> Result<EncoderOutput> {
    let cfg = &p.config;
    let seq_len = check_batch(cfg, batch)?;
    ENCODER_PASSES.with(|c| c.set(c.get() + 1));
    let b = batch.len();
    let (d, h) = (cfg.d_model, cfg.n_heads);
    let dh = cfg.head_dim();
    let n = b * seq_len;
    let mut rng = rng::stream(mode.seed, "dropout", 0);

    let ids: Vec<usize> = batch.iter().flat_map(|x| x.ids.iter().copied()).collect();
    let positions: Vec<usize> = (0..b).flat_map(|_| 0..seq_len).collect();
    let tok = tensor::embedding_lookup(&p.token_embedding, &ids)?;
    let pos = tensor::embedding_lookup(&p.position_embedding, &positions)?;
    let x = tensor::add(&tok, &pos)?;
    let x = tensor::layer_norm(&x, &p.embedding_ln_gamma, &p.embedding_ln_beta, LAYER_NORM_EPS)?;
    let mut x = dropout(&x, cfg.dropout, mode, &mut rng)?;

    // [b·h, L, L] additive bias hiding padded keys
    let mut bias = vec![0.0; b * h * seq_len * seq_len];
    for (bi, item) in batch.iter().enumerate() {
        for hi in 0..h {
            let base = (bi * h + hi) * seq_len * seq_len;
            for q in 0..seq_len {
                for (k, &m) in item.attention_mask.iter().enumerate() {
                    if m == 0 {
                        bias[base + q * seq_len + k] = MASKED_SCORE;
                    }
                }
            }
        }
    }
    let bias = Tensor::new(bias, &[b * h, seq_len, seq_len])?;
    let split = |t: &Tensor| -> Result<Tensor> {
        let t = tensor::reshape(t, &[b, seq_len, h, dh])?;
        let t = tensor::permute(&t, &[0, 2, 1, 3])?;
        Ok(tensor::reshape(&t, &[b * h, seq_len, dh])?)
    };
    let scale = 1.0 / (dh as f64).sqrt();

    let mut attention = Vec::with_capacity(p.layers.len());
    for layer in &p.layers {
        let q = split(&linear(&x, &layer.q_weight, &layer.q_bias)?)?;
        let k = split(&linear(&x, &layer.k_weight, &layer.k_bias)?)?;
        let v = split(&linear(&x, &layer.v_weight, &layer.v_bias)?)?;
        let scores = tensor::scale(&tensor::bmm(&q, &k, true)?, scale);
        let probs = tensor::softmax_rows(&tensor::add(&scores, &bias)?)?;
        attention.push(probs.clone());
        let probs = dropout(&probs, cfg.dropout, mode, &mut rng)?;
        let ctx = tensor::bmm(&probs, &v, false)?;
        let ctx = tensor::reshape(&ctx, &[b, h, seq_len, dh])?;
        let ctx = tensor::permute(&ctx, &[0, 2, 1, 3])?;
        let ctx = tensor::reshape(&ctx, &[n, d])?;
        let attn_out = dropout(&linear(&ctx, &layer.out_weight, &layer.out_bias)?, cfg.dropout, mode, &mut rng)?;
        x = tensor::layer_norm(
            &tensor::add(&x, &attn_out)?,
            &layer.attn_ln_gamma,
            &layer.attn_ln_beta,
            LAYER_NORM_EPS,
        )?;
        let ff = tensor::gelu(&linear(&x, &layer.ff1_weight, &layer.ff1_bias)?);
        let ff = dropout(&linear(&ff, &layer.ff2_weight, &layer.ff2_bias)?, cfg.dropout, mode, &mut rng)?;
        x = tensor::layer_norm(&tensor::add(&x, &ff)?, &layer.ff_ln_gamma, &layer.ff_ln_beta, LAYER_NORM_EPS)?;
    }
    Ok(EncoderOutput {
        hidden: x,
        batch: b,
        seq_len,
        attention,
    })
}

/// Final hidden states, `[batch, seq, d_model]`.
pub fn encoder_forward(p: &ModelParams, batch: &[EncodedInput], mode: ForwardMode) -> Result<Tensor> {
    let out = run_encoder(p, batch, mode)?;
    Ok(tensor::reshape(&out.hidden, &[out.batch, out.seq_len, p.config.d_model])?)
}

/// Hidden states plus each layer's attention probabilities
/// (`[batch·heads, seq, seq]`, before dropout).
pub fn encoder_forward_traced(
    p: &ModelParams,
    batch: &[EncodedInput],
    mode: ForwardMode,
) -> Result<(Tensor, Vec<Tensor>)> {
    let out = run_encoder(p, batch, mode)?;
    let hidden = tensor::reshape(&out.hidden, &[out.batch, out.seq_len, p.config.d_model])?;
    Ok((hidden, out.attention))
}

/// `[batch, d_model]` hidden states at position 0.
pub(crate) fn cls_states(out: &EncoderOutput) -> Result<Tensor> {
    let rows: Vec<usize> = (0..out.batch).map(|b| b * out.seq_len).collect();
    Ok(tensor::embedding_lookup(&out.hidden, &rows)?)
}

/// Unnormalized scores `h · W + b`, `[batch, 2]`.
pub fn head_logits(head: &ClassificationHead, h_cls: &Tensor) -> Result<Tensor> {
    if h_cls.shape().len() != 2 || h_cls.shape()[1] != head.weight.shape()[0] {
        return Err(Error::Model(format!(
            "head expects [batch, {}] input, got {:?}",
            head.weight.shape()[0],
            h_cls.shape()
        )));
    }
    linear(h_cls, &head.weight, &head.bias)
}

/// Class probabilities `softmax(h · W + b)`, `[batch, 2]`.
pub fn classify(head: &ClassificationHead, h_cls: &Tensor) -> Result<Tensor> {
    Ok(tensor::softmax_rows(&head_logits(head, h_cls)?)?)
}

fn require_single(p: &ModelParams) -> Result<Task> {
    match p.layout {
        HeadLayout::Single(t) => Ok(t),
        other => Err(Error::Environment(format!(
            "single-task forward needs an STL model, got {other:?}"
        ))),
    }
}

fn require_multi(p: &ModelParams) -> Result<()> {
    match p.layout {
        HeadLayout::Multi => Ok(()),
        other => Err(Error::Environment(format!(
            "multitask forward needs an MTL model, got {other:?}"
        ))),
    }
}

/// Logits of the single head of an STL model.
pub fn stl_logits(p: &ModelParams, batch: &[EncodedInput], mode: ForwardMode) -> Result<Tensor> {
    let task = require_single(p)?;
    let out = run_encoder(p, batch, mode)?;
    head_logits(p.head(task)?, &cls_states(&out)?)
}

pub fn stl_forward(p: &ModelParams, batch: &[EncodedInput], mode: ForwardMode) -> Result<Tensor> {
    Ok(tensor::softmax_rows(&stl_logits(p, batch, mode)?)?)
}

/// Logits of all three heads from one shared encoder pass, in
/// [`Task::ALL`] order.
pub fn mtl_logits(p: &ModelParams, batch: &[EncodedInput], mode: ForwardMode) -> Result<[Tensor; 3]> {
    require_multi(p)?;
    let out = run_encoder(p, batch, mode)?;
    let cls = cls_states(&out)?;
    Ok([
        head_logits(p.head(Task::Toxic)?, &cls)?,
        head_logits(p.head(Task::Engaging)?, &cls)?,
        head_logits(p.head(Task::FactClaiming)?, &cls)?,
    ])
}

pub fn mtl_forward(p: &ModelParams, batch: &[EncodedInput], mode: ForwardMode) -> Result<[Tensor; 3]> {
    let [a, b, c] = mtl_logits(p, batch, mode)?;
    Ok([
        tensor::softmax_rows(&a)?,
        tensor::softmax_rows(&b)?,
        tensor::softmax_rows(&c)?,
    ])
}

/// Logits for every task the model carries, from one encoder pass.
pub fn task_logits(p: &ModelParams, batch: &[EncodedInput], mode: ForwardMode) -> Result<Vec<(Task, Tensor)>> {
    let out = run_encoder(p, batch, mode)?;
    let cls = cls_states(&out)?;
    p.layout
        .tasks()
        .into_iter()
        .map(|t| Ok((t, head_logits(p.head(t)?, &cls)?)))
        .collect()
}

fn mlm_head_logits(p: &ModelParams, hidden_rows: &Tensor) -> Result<Tensor> {
    let mlm = p
        .mlm
        .as_ref()
        .ok_or_else(|| Error::Model("model has no MLM head".into()))?;
    let t = tensor::gelu(&linear(hidden_rows, &mlm.transform_weight, &mlm.transform_bias)?);
    let t = tensor::layer_norm(&t, &mlm.ln_gamma, &mlm.ln_beta, LAYER_NORM_EPS)?;
    let decoder = tensor::transpose(&p.token_embedding)?;
    linear(&t, &decoder, &mlm.output_bias)
}

/// Vocabulary logits at every position, `[batch, seq, vocab]`.
pub fn mlm_forward(p: &ModelParams, batch: &[EncodedInput], mode: ForwardMode) -> Result<Tensor> {
    if p.mlm.is_none() {
        return Err(Error::Model("model has no MLM head".into()));
    }
    let out = run_encoder(p, batch, mode)?;
    let logits = mlm_head_logits(p, &out.hidden)?;
    Ok(tensor::reshape(&logits, &[out.batch, out.seq_len, p.config.vocab_size])?)
}

/// Vocabulary logits only at the flattened positions `rows`
/// (`batch_index · seq + position`), `[rows, vocab]`. Equal to the matching
/// rows of [`mlm_forward`] but skips the decoder everywhere else.
pub fn mlm_logits_at(p: &ModelParams, batch: &[EncodedInput], rows: &[usize], mode: ForwardMode) -> Result<Tensor> {
    if p.mlm.is_none() {
        return Err(Error::Model("model has no MLM head".into()));
    }
    let out = run_encoder(p, batch, mode)?;
    let picked = tensor::embedding_lookup(&out.hidden, rows)?;
    mlm_head_logits(p, &picked)
}
