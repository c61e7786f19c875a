//! Masked-language-model fine-tuning of a fresh encoder on a small corpus,
//! followed by multitask classification training on top of it.
//!
//! ```bash
//! cargo run --release --example lm_stage
//! ```

use comment_mtl::data::{split, synth_generate, SynthSpec};
use comment_mtl::eval::Averaging;
use comment_mtl::model::{EncoderConfig, HeadLayout, ModelParams};
use comment_mtl::tokenizer::{build_vocab, EncodedInput};
use comment_mtl::train::{encode_examples, evaluate, lm_finetune, mlm_accuracy, train_one, TrainConfig};

fn main() -> comment_mtl::Result<()> {
    let (train, val) = split(&synth_generate(300, 5, &SynthSpec::default())?, 0.8, 5)?;
    let texts: Vec<&str> = train.iter().map(|e| e.text.as_str()).collect();
    let vocab = build_vocab(&texts, 8000, 1)?;
    let encoder = EncoderConfig {
        vocab_size: vocab.len(),
        d_model: 64,
        d_ff: 256,
        max_seq_len: 32,
        ..EncoderConfig::default()
    };
    let train = encode_examples(&vocab, &train, encoder.max_seq_len);
    let val = encode_examples(&vocab, &val, encoder.max_seq_len);
    let corpus: Vec<EncodedInput> = train.iter().map(|e| e.input.clone()).collect();
    let cfg = TrainConfig {
        learning_rate: 2e-3,
        eval_every_batches: 10,
        ..TrainConfig::default()
    };

    let fresh = ModelParams::init(&encoder, HeadLayout::None, true, 1)?;
    let (acc, loss) = mlm_accuracy(&fresh, &corpus, 0.15, 9)?;
    println!("before LM stage: masked top-1 {acc:.3}, loss {loss:.3}");
    let (mut tuned, record) = lm_finetune(fresh, &corpus, &cfg, 1)?;
    let (acc, loss) = mlm_accuracy(&tuned, &corpus, 0.15, 9)?;
    println!("after {} LM steps: masked top-1 {acc:.3}, loss {loss:.3}", record.step_losses.len());

    tuned.drop_mlm_head();
    tuned.reset_heads(HeadLayout::Multi, 11);
    let (best, run) = train_one(tuned, &train, &val, &cfg, 1)?;
    let scores = evaluate(&best, &val, cfg.batch_size, Averaging::Macro)?;
    println!(
        "multitask fine-tuning: best checkpoint at batch {} of {}, validation loss {:.4}",
        run.best_checkpoint_step, run.batches_seen, scores.loss
    );
    for (task, f1) in scores.f1 {
        println!("  {:<14} macro F1 {f1:.4}", task.display_name());
    }
    Ok(())
}
