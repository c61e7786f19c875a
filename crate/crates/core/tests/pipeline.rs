//! End-to-end checks across tokenizer, model, objectives and training.

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use comment_mtl::data::{synth_generate, Example, SynthSpec};
use comment_mtl::eval::Averaging;
use comment_mtl::model::{self, ClassificationHead, EncoderConfig, ForwardMode, HeadLayout, ModelParams};
use comment_mtl::objectives::{mlm_loss, LossBundle};
use comment_mtl::task::Task;
use comment_mtl::tensor::{relative_error, Tensor};
use comment_mtl::tokenizer::{build_vocab, mask_for_mlm, EncodedInput, IGNORE_INDEX, UNK_ID};
use comment_mtl::train::{
    encode_examples, evaluate, lm_finetune, mlm_accuracy, predict_labels, run_experiment, train_one,
    train_with_validator, ExperimentData, TrainConfig, Validator,
};
use comment_mtl::{Environment, Result};

use common::{desk_encoder, desk_train_config, synthetic, tiny_encoder};

const ANNOTATED: [&str; 4] = [
    "Die AfD sind genau so neoliberal und kapitalistische Zerstörer unserer Heimat, wie die CDU, CSU, FDP, SPD und Grüne auch.",
    "Sarazin ist ein rechtsradikaler Mensch. Ein Menschenhasser. Sie kennen nur Zerstörung. Die Geschichte hat es gezeigt.",
    "@USER, du hast das Thema im Kern nicht verstanden",
    "Ich frage dich, verlassen Menschen gerne ihre Heimat?",
];

/// Reports a strictly falling validation loss, so the final parameters
/// are always the best.
struct AlwaysImproving(f64);

impl Validator for AlwaysImproving {
    fn validate(&mut self, _: &ModelParams) -> Result<(f64, Vec<(Task, f64)>)> {
        self.0 -= 1.0;
        Ok((self.0, vec![]))
    }
}

fn flat(p: &ModelParams) -> Vec<(String, Vec<f64>)> {
    p.named_params().into_iter().map(|(n, t)| (n, t.data().to_vec())).collect()
}

#[test]
fn annotated_comment_keeps_content_ids() {
    let vocab = build_vocab(&ANNOTATED, 8000, 1).unwrap();
    let enc = vocab.encode(ANNOTATED[2], 120);
    let content = &enc.ids[1..enc.real_len() - 1];
    assert!(content.iter().filter(|&&id| id != UNK_ID).count() >= 1);
    assert_eq!(vocab.decode(content).join(" ").replace(" ##", ""), "@ USER , du hast das Thema im Kern nicht verstanden");
}

#[test]
fn gradient_accumulation_matches_one_large_batch() {
    let syn = synthetic(40, 4, &SynthSpec::default(), 24);
    let enc = EncoderConfig {
        dropout: 0.0,
        ..tiny_encoder(&syn.vocab)
    };
    let train = &syn.train[..32];
    let run = |batch_size, accumulate| {
        let cfg = TrainConfig {
            learning_rate: 5e-3,
            batch_size,
            gradient_accumulation_steps: accumulate,
            num_epochs: 2,
            eval_every_batches: 1000,
            ..TrainConfig::default()
        };
        let p = ModelParams::init(&enc, HeadLayout::Multi, false, 6).unwrap();
        let (out, rec) = train_with_validator(p, train, &cfg, 6, &mut AlwaysImproving(0.0)).unwrap();
        assert_eq!(rec.optimizer_steps, 8);
        flat(&out)
    };
    let (one, split) = (run(8, 1), run(4, 2));
    let start = flat(&ModelParams::init(&enc, HeadLayout::Multi, false, 6).unwrap());
    assert_ne!(one, start);
    let mut worst: f64 = 0.0;
    for ((name, a), (_, b)) in one.iter().zip(&split) {
        for (x, y) in a.iter().zip(b) {
            worst = worst.max((x - y).abs());
        }
        assert!(worst <= 1e-9, "{name}: {worst:e}");
    }
}

#[test]
fn stl_model_overfits_sixteen_examples() {
    let syn = synthetic(20, 12, &SynthSpec::default(), 24);
    let train = &syn.train[..16];
    let enc = tiny_encoder(&syn.vocab);
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        batch_size: 16,
        num_epochs: 200,
        eval_every_batches: 1000,
        ..TrainConfig::default()
    };
    let p = ModelParams::init(&enc, HeadLayout::Single(Task::Toxic), false, 2).unwrap();
    let (best, rec) = train_with_validator(p, train, &cfg, 2, &mut AlwaysImproving(0.0)).unwrap();
    assert_eq!(rec.optimizer_steps, 200);
    let inputs: Vec<EncodedInput> = train.iter().map(|e| e.input.clone()).collect();
    let preds = predict_labels(&best, &inputs, 16).unwrap();
    assert_eq!(preds.len(), 1);
    let gold: Vec<u8> = train.iter().map(|e| e.labels[0]).collect();
    assert_eq!(preds[0].1, gold);
}

fn toy_corpus() -> (Vec<EncodedInput>, usize) {
    let sentences = [
        "die sendung heute war gut",
        "wir sehen uns morgen wieder",
        "das thema ist wichtig für alle",
        "ich frage dich noch einmal",
        "die partei hat die wahl verloren",
        "danke für die klare antwort",
        "der kern der sache bleibt",
        "menschen lieben ihre heimat sehr",
    ];
    let vocab = build_vocab(&sentences, 200, 1).unwrap();
    (sentences.iter().map(|s| vocab.encode(s, 10)).collect(), vocab.len())
}

#[test]
fn lm_stage_memorizes_toy_corpus() {
    let (corpus, vocab_size) = toy_corpus();
    let enc = EncoderConfig {
        vocab_size,
        d_model: 64,
        n_layers: 2,
        n_heads: 4,
        d_ff: 128,
        max_seq_len: 10,
        dropout: 0.0,
    };
    let cfg = TrainConfig {
        learning_rate: 5e-3,
        batch_size: 8,
        num_epochs: 300,
        warmup_ratio: 0.05,
        ..TrainConfig::default()
    };
    let p = ModelParams::init(&enc, HeadLayout::Multi, true, 3).unwrap();
    let heads_before: Vec<Vec<f64>> = flat(&p).into_iter().filter(|(n, _)| n.starts_with("heads.")).map(|x| x.1).collect();
    let (_, before) = mlm_accuracy(&p, &corpus, 0.15, 99).unwrap();
    let (tuned, record) = lm_finetune(p, &corpus, &cfg, 3).unwrap();
    assert_eq!(record.step_losses.len(), 300);
    let (_, after) = mlm_accuracy(&tuned, &corpus, 0.15, 99).unwrap();
    assert!(after < before, "loss {before} -> {after}");
    // one masking draw selects only a handful of tokens, so average over many
    let top1 = (0..20).map(|s| mlm_accuracy(&tuned, &corpus, 0.15, 1000 + s).unwrap().0).sum::<f64>() / 20.0;
    assert!(top1 >= 0.9, "masked top-1 accuracy {top1}");
    let heads_after: Vec<Vec<f64>> =
        flat(&tuned).into_iter().filter(|(n, _)| n.starts_with("heads.")).map(|x| x.1).collect();
    assert_eq!(heads_before, heads_after);
}

#[test]
fn parameter_counts_follow_head_layout() {
    let enc = EncoderConfig {
        vocab_size: 50,
        ..EncoderConfig::default()
    };
    let d = enc.d_model;
    let head = 2 * d + 2;
    let mtl = ModelParams::init(&enc, HeadLayout::Multi, false, 1).unwrap();
    let encoder = mtl.encoder_num_params();
    assert_eq!(mtl.num_params(), encoder + 3 * head);
    let mtl_lm = ModelParams::init(&enc, HeadLayout::Multi, true, 1).unwrap();
    let mlm = d * d + d + 2 * d + enc.vocab_size;
    assert_eq!(mtl_lm.mlm_num_params(), mlm);
    assert_eq!(mtl_lm.num_params(), encoder + 3 * head + mlm);
    let stl_total: usize = Task::ALL
        .iter()
        .map(|&t| ModelParams::init(&enc, HeadLayout::Single(t), false, 1).unwrap().num_params())
        .sum();
    assert_eq!(stl_total, 3 * encoder + 3 * head);
}

#[test]
fn environments_train_expected_model_counts() {
    let syn = synthetic(30, 5, &SynthSpec::default(), 24);
    let enc = tiny_encoder(&syn.vocab);
    let corpus: Vec<EncodedInput> = syn.train.iter().map(|e| e.input.clone()).collect();
    let data = ExperimentData {
        train: &syn.train,
        val: &syn.val,
        lm_corpus: &corpus,
    };
    let cfg = |environment| TrainConfig {
        environment,
        num_epochs: 1,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let stl = run_experiment(&enc, &cfg(Environment::Stl), &data).unwrap();
    assert_eq!(stl.models_trained(), 15);
    let mtl = run_experiment(&enc, &cfg(Environment::Mtl), &data).unwrap();
    assert_eq!(mtl.models_trained(), 5);

    // the three single-task models of a seed share no tensors
    let models = &stl.seeds[0].models;
    for (i, a) in models.iter().enumerate() {
        for b in &models[i + 1..] {
            for (_, x) in a.params.named_params() {
                assert!(b.params.named_params().iter().all(|(_, y)| !x.same_node(y)));
            }
        }
    }
}

#[test]
fn early_stopping_returns_the_best_evaluated_checkpoint() {
    let syn = synthetic(120, 13, &SynthSpec { noise: 0.2, ..SynthSpec::default() }, 24);
    let enc = tiny_encoder(&syn.vocab);
    for patience in [1, 2, 4] {
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            eval_every_batches: 2,
            early_stop_patience_evals: patience,
            ..TrainConfig::default()
        };
        let p = ModelParams::init(&enc, HeadLayout::Multi, false, 8).unwrap();
        let (best, rec) = train_one(p, &syn.train, &syn.val, &cfg, 8).unwrap();
        let steps: Vec<usize> = rec.eval_history.iter().map(|e| e.step).collect();
        assert!(steps.windows(2).all(|w| w[0] < w[1]));
        let at_best = rec.eval_history.iter().find(|e| e.step == rec.best_checkpoint_step).unwrap();
        let min = rec.eval_history.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(at_best.val_loss, min);
        let earlier = rec.eval_history.iter().take_while(|e| e.step < rec.best_checkpoint_step);
        assert!(earlier.clone().all(|e| e.val_loss > at_best.val_loss));
        let again = evaluate(&best, &syn.val, cfg.batch_size, Averaging::Macro).unwrap();
        assert_eq!(again.loss, at_best.val_loss);
    }
}

#[test]
fn training_lowers_validation_loss() {
    let syn = synthetic(200, 14, &SynthSpec::default(), 120);
    let enc = desk_encoder(&syn.vocab);
    let p = ModelParams::init(&enc, HeadLayout::Multi, false, 1).unwrap();
    let (_, rec) = train_one(p, &syn.train, &syn.val, &desk_train_config(), 1).unwrap();
    let first = rec.eval_history[0].val_loss;
    let best = rec.eval_history.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
    assert!(best < first, "{best} vs first {first}");
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    let data: Vec<Example> = synth_generate(6, 31, &SynthSpec::default()).unwrap();
    let texts: Vec<&str> = data.iter().map(|e| e.text.as_str()).collect();
    let vocab = build_vocab(&texts, 200, 1).unwrap();
    let enc = EncoderConfig {
        vocab_size: vocab.len(),
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 16,
        dropout: 0.1,
    };
    let encoded = encode_examples(&vocab, &data, 16);
    let batch: Vec<EncodedInput> = encoded.iter().map(|e| e.input.clone()).collect();
    let labels: [Vec<u8>; 3] = Task::ALL.map(|t| encoded.iter().map(|e| e.labels[t.index()]).collect());
    let mode = ForwardMode::train(5);
    let mut rng = ChaCha8Rng::seed_from_u64(77);

    let mut p = ModelParams::init(&enc, HeadLayout::Multi, false, 4).unwrap();
    for (_, t) in p.named_params_mut() {
        let jittered: Vec<f64> = t.data().iter().map(|v| v + rng.gen_range(-0.3..0.3)).collect();
        *t = Tensor::parameter(jittered, t.shape()).unwrap();
    }
    let loss = |p: &ModelParams| {
        let logits = model::mtl_logits(p, &batch, mode).unwrap();
        LossBundle::compute(&logits, [&labels[0], &labels[1], &labels[2]]).unwrap().l_multi
    };
    loss(&p).backward().unwrap();
    let analytic: Vec<Vec<f64>> = p.named_params().iter().map(|(_, t)| t.grad().unwrap()).collect();

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let which = rng.gen_range(0..analytic.len());
        let at = rng.gen_range(0..analytic[which].len());
        let probe = |delta: f64| {
            let mut q = p.clone();
            let (_, t) = q.named_params_mut().into_iter().nth(which).unwrap();
            let mut data = t.data().to_vec();
            data[at] += delta;
            *t = Tensor::new(data, t.shape()).unwrap();
            loss(&q).item()
        };
        let numeric = (probe(h) - probe(-h)) / (2.0 * h);
        worst = worst.max(relative_error(analytic[which][at], numeric));
    }
    assert!(worst <= 1e-4, "max relative error {worst:e}");
}

#[test]
fn multitask_forward_runs_the_encoder_once() {
    let syn = synthetic(10, 3, &SynthSpec::default(), 24);
    let p = ModelParams::init(&tiny_encoder(&syn.vocab), HeadLayout::Multi, false, 1).unwrap();
    let batch: Vec<EncodedInput> = syn.train.iter().map(|e| e.input.clone()).collect();
    let before = model::encoder_pass_count();
    let logits = model::mtl_logits(&p, &batch, ForwardMode::EVAL).unwrap();
    assert_eq!(model::encoder_pass_count(), before + 1);
    for l in &logits {
        assert_eq!(l.shape(), &[batch.len(), 2]);
    }
}

#[test]
fn heads_are_isolated() {
    let syn = synthetic(10, 3, &SynthSpec::default(), 24);
    let mut p = ModelParams::init(&tiny_encoder(&syn.vocab), HeadLayout::Multi, false, 1).unwrap();
    let batch: Vec<EncodedInput> = syn.train.iter().map(|e| e.input.clone()).collect();
    let before = model::mtl_logits(&p, &batch, ForwardMode::EVAL).unwrap();
    let head = p.head_mut(Task::Toxic).unwrap();
    head.bias = Tensor::parameter(vec![0.3, -0.4], &[2]).unwrap();
    let after = model::mtl_logits(&p, &batch, ForwardMode::EVAL).unwrap();
    assert_ne!(before[0].data(), after[0].data());
    assert_eq!(before[1].data(), after[1].data());
    assert_eq!(before[2].data(), after[2].data());
}

#[test]
fn classifier_probabilities() {
    let h = Tensor::new((0..12).map(|i| i as f64 * 0.1 - 0.5).collect(), &[3, 4]).unwrap();
    let head = |b: [f64; 2]| ClassificationHead {
        weight: Tensor::zeros(&[4, 2]),
        bias: Tensor::new(b.to_vec(), &[2]).unwrap(),
    };
    let flat_probs = model::classify(&head([0.0, 0.0]), &h).unwrap();
    assert!(flat_probs.data().iter().all(|&v| v == 0.5));
    let skewed = model::classify(&head([0.0, 5.0]), &h).unwrap();
    for row in skewed.data().chunks(2) {
        assert!((row[1] - 0.9933).abs() < 1e-4);
        assert!((row[0] + row[1] - 1.0).abs() <= 1e-9);
    }
}

#[test]
fn attention_ignores_padding() {
    let syn = synthetic(10, 3, &SynthSpec::default(), 24);
    let p = ModelParams::init(&tiny_encoder(&syn.vocab), HeadLayout::Multi, false, 1).unwrap();
    let batch: Vec<EncodedInput> = syn.train.iter().map(|e| e.input.clone()).collect();
    let (hidden, attention) = model::encoder_forward_traced(&p, &batch, ForwardMode::EVAL).unwrap();
    assert_eq!(hidden.shape(), &[batch.len(), 24, 16]);
    let heads = p.config.n_heads;
    for layer in &attention {
        for (row_idx, row) in layer.data().chunks(24).enumerate() {
            let example = &batch[row_idx / 24 / heads];
            for (key, &w) in row.iter().enumerate() {
                if example.attention_mask[key] == 0 {
                    assert_eq!(w, 0.0);
                }
            }
        }
    }
    let again = model::encoder_forward(&p, &batch, ForwardMode::EVAL).unwrap();
    assert_eq!(hidden.data(), again.data());
}

#[test]
fn mlm_loss_ignores_unselected_labels() {
    let (corpus, vocab_size) = toy_corpus();
    let enc = EncoderConfig {
        vocab_size,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 10,
        dropout: 0.0,
    };
    let p = ModelParams::init(&enc, HeadLayout::None, true, 1).unwrap();
    let (masked, labels) = mask_for_mlm(&corpus[0], 4, 0.5, vocab_size);
    let logits = model::mlm_forward(&p, &[masked], ForwardMode::EVAL).unwrap();
    assert_eq!(logits.shape(), &[1, 10, vocab_size]);
    let base = mlm_loss(&logits, &labels).unwrap().item();
    let mut scrambled = logits.data().to_vec();
    for (pos, _) in labels.iter().enumerate().filter(|(_, &l)| l == IGNORE_INDEX) {
        for v in &mut scrambled[pos * vocab_size..(pos + 1) * vocab_size] {
            *v = -*v * 3.0 + 1.0;
        }
    }
    let scrambled = Tensor::new(scrambled, logits.shape()).unwrap();
    assert_eq!(mlm_loss(&scrambled, &labels).unwrap().item(), base);
}
