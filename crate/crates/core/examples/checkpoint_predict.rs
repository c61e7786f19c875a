//! Trains one multitask model, saves it as a checkpoint, reloads it and
//! writes a prediction file for unseen comments.
//!
//! ```bash
//! cargo run --release --example checkpoint_predict
//! ```

use std::collections::BTreeMap;

use comment_mtl::data::{split, synth_generate, PredictionTable, SynthSpec};
use comment_mtl::model::{load_checkpoint, save_checkpoint, EncoderConfig, HeadLayout, ModelParams};
use comment_mtl::tokenizer::build_vocab;
use comment_mtl::train::{encode_examples, predict_labels, train_one, TrainConfig};

fn main() -> comment_mtl::Result<()> {
    let spec = SynthSpec { noise: 0.05, ..SynthSpec::default() };
    let (train, val) = split(&synth_generate(240, 8, &spec)?, 0.8, 8)?;
    let texts: Vec<&str> = train.iter().map(|e| e.text.as_str()).collect();
    let vocab = build_vocab(&texts, 8000, 1)?;
    let encoder = EncoderConfig {
        vocab_size: vocab.len(),
        max_seq_len: 32,
        ..EncoderConfig::default()
    };
    let cfg = TrainConfig {
        learning_rate: 2e-3,
        num_epochs: 5,
        eval_every_batches: 10,
        ..TrainConfig::default()
    };
    let train_enc = encode_examples(&vocab, &train, encoder.max_seq_len);
    let val_enc = encode_examples(&vocab, &val, encoder.max_seq_len);
    let params = ModelParams::init(&encoder, HeadLayout::Multi, false, 1)?;
    let (best, _) = train_one(params, &train_enc, &val_enc, &cfg, 1)?;

    let dir = std::env::temp_dir().join("comment-mtl-checkpoint");
    std::fs::create_dir_all(&dir).map_err(|e| comment_mtl::Error::io(&dir, e))?;
    let path = dir.join("mtl.ckpt");
    let meta = BTreeMap::from([("note".to_string(), "example run".to_string())]);
    save_checkpoint(&path, &best, &meta)?;
    let (restored, header) = load_checkpoint(&path)?;
    println!("checkpoint {} ({} tensors, {:?})", path.display(), header.tensors.len(), restored.layout());

    let fresh = synth_generate(12, 99, &spec)?;
    let inputs: Vec<_> = fresh.iter().map(|e| vocab.encode(&e.text, encoder.max_seq_len)).collect();
    let columns = predict_labels(&restored, &inputs, 8)?;
    let table = PredictionTable {
        tasks: columns.iter().map(|(t, _)| *t).collect(),
        rows: fresh
            .iter()
            .enumerate()
            .map(|(i, e)| (e.id.clone(), columns.iter().map(|(_, c)| c[i]).collect()))
            .collect(),
    };
    print!("{}", table.to_csv());
    let correct: usize = fresh
        .iter()
        .enumerate()
        .map(|(i, e)| columns.iter().filter(|(t, c)| c[i] == e.label(*t)).count())
        .sum();
    println!("{correct} of {} labels match the generator", fresh.len() * 3);
    Ok(())
}
