//! Trains the four environments (STL, LM+STL, MTL, LM+MTL) on synthetic
//! comments and prints seed-averaged and ensemble validation scores.
//!
//! ```bash
//! cargo run --release --example stl_vs_mtl -- 500 3
//! ```

use std::time::Instant;

use comment_mtl::data::{split, synth_generate, SynthSpec};
use comment_mtl::eval::{results_table, Averaging, ResultRow};
use comment_mtl::model::EncoderConfig;
use comment_mtl::tokenizer::{build_vocab, EncodedInput};
use comment_mtl::train::{encode_examples, run_experiment, ExperimentData, TrainConfig};
use comment_mtl::Environment;

fn main() -> comment_mtl::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map_or(500, |s| s.parse().expect("size"));
    let seeds: u64 = args.next().map_or(3, |s| s.parse().expect("seed count"));

    let spec = SynthSpec {
        correlation: 0.7,
        noise: 0.1,
        ..SynthSpec::default()
    };
    let (train, val) = split(&synth_generate(n, 21, &spec)?, 0.8, 21)?;
    let texts: Vec<&str> = train.iter().map(|e| e.text.as_str()).collect();
    let vocab = build_vocab(&texts, 8000, 1)?;
    let encoder = EncoderConfig {
        vocab_size: vocab.len(),
        ..EncoderConfig::default()
    };
    let train = encode_examples(&vocab, &train, encoder.max_seq_len);
    let val = encode_examples(&vocab, &val, encoder.max_seq_len);
    let corpus: Vec<EncodedInput> = train.iter().map(|e| e.input.clone()).collect();
    let data = ExperimentData {
        train: &train,
        val: &val,
        lm_corpus: &corpus,
    };

    let mut mean_rows = Vec::new();
    let mut ensemble_rows = Vec::new();
    for (environment, lm_stage) in [
        (Environment::Stl, false),
        (Environment::Stl, true),
        (Environment::Mtl, false),
        (Environment::Mtl, true),
    ] {
        let cfg = TrainConfig {
            learning_rate: 2e-3,
            eval_every_batches: 10,
            environment,
            lm_stage,
            seeds: (1..=seeds).collect(),
            ..TrainConfig::default()
        };
        let start = Instant::now();
        let result = run_experiment(&encoder, &cfg, &data)?;
        eprintln!(
            "{:<7} {} models in {:.1}s",
            result.label(),
            result.models_trained(),
            start.elapsed().as_secs_f64()
        );
        mean_rows.push(ResultRow {
            model: "desk-encoder".into(),
            environment: result.label().into(),
            metrics: result.mean_metrics(Averaging::Macro)?.map(Some),
        });
        ensemble_rows.push(ResultRow {
            model: "desk-encoder".into(),
            environment: result.label().into(),
            metrics: result.ensemble_metrics(Averaging::Macro)?.map(Some),
        });
    }
    println!("\nmean over {seeds} seeds");
    print!("{}", results_table(mean_rows)?.to_text());
    println!("\nmajority-vote ensemble");
    print!("{}", results_table(ensemble_rows)?.to_text());
    Ok(())
}
