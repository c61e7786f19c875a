#![allow(dead_code)]

use comment_mtl::data::{split, synth_generate, Example, SynthSpec};
use comment_mtl::model::EncoderConfig;
use comment_mtl::tokenizer::{build_vocab, Vocab};
use comment_mtl::train::{encode_examples, EncodedExample, TrainConfig};

/// Desk-scale encoder sized to a vocabulary.
pub fn desk_encoder(vocab: &Vocab) -> EncoderConfig {
    EncoderConfig {
        vocab_size: vocab.len(),
        ..EncoderConfig::default()
    }
}

pub fn tiny_encoder(vocab: &Vocab) -> EncoderConfig {
    EncoderConfig {
        vocab_size: vocab.len(),
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 24,
        dropout: 0.1,
    }
}

/// Default training settings with a learning rate suited to training from scratch.
pub fn desk_train_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 2e-3,
        eval_every_batches: 10,
        ..TrainConfig::default()
    }
}

pub struct Synthetic {
    pub vocab: Vocab,
    pub train_examples: Vec<Example>,
    pub val_examples: Vec<Example>,
    pub train: Vec<EncodedExample>,
    pub val: Vec<EncodedExample>,
}

/// `n` synthetic comments split 0.8/0.2, with a vocabulary learned from the
/// training part.
pub fn synthetic(n: usize, seed: u64, spec: &SynthSpec, max_len: usize) -> Synthetic {
    let data = synth_generate(n, seed, spec).unwrap();
    let (train_examples, val_examples) = split(&data, 0.8, seed).unwrap();
    let texts: Vec<&str> = train_examples.iter().map(|e| e.text.as_str()).collect();
    let vocab = build_vocab(&texts, 8000, 1).unwrap();
    let train = encode_examples(&vocab, &train_examples, max_len);
    let val = encode_examples(&vocab, &val_examples, max_len);
    Synthetic {
        vocab,
        train_examples,
        val_examples,
        train,
        val,
    }
}
