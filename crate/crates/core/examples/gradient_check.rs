//! Checks reverse-mode gradients against central finite differences, first
//! for a handful of ops and then for the full multitask loss of a small
//! encoder.
//!
//! ```bash
//! cargo run --example gradient_check
//! ```

use comment_mtl::model::{self, EncoderConfig, ForwardMode, HeadLayout, ModelParams};
use comment_mtl::objectives::LossBundle;
use comment_mtl::tensor::{self, check_gradients, Tensor};
use comment_mtl::tokenizer::EncodedInput;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), shape).unwrap()
}

fn main() -> comment_mtl::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let x = random(&mut rng, &[4, 6]);
    let gamma = random(&mut rng, &[6]);
    let beta = random(&mut rng, &[6]);
    let w = random(&mut rng, &[6, 3]);
    let report = check_gradients(
        "layer_norm -> gelu -> matmul -> cross_entropy",
        |t| {
            let h = tensor::gelu(&tensor::layer_norm(&t[0], &t[1], &t[2], 1e-12)?);
            tensor::cross_entropy(&tensor::matmul(&h, &t[3])?, &[0, 2, 1, 1])
        },
        &[x, gamma, beta, w],
        1e-5,
        1e-4,
    )?;
    println!("{:<48} max rel error {:.2e}  passed {}", report.op_name, report.max_rel_error, report.passed);

    let a = random(&mut rng, &[2, 3, 4]);
    let b = random(&mut rng, &[2, 5, 4]);
    let report = check_gradients(
        "bmm(a, b^T) -> softmax_rows",
        |t| {
            let s = tensor::bmm(&t[0], &t[1], true)?;
            let p = tensor::softmax_rows(&tensor::reshape(&s, &[6, 5])?)?;
            Ok(tensor::sum(&tensor::mul(&p, &p)?))
        },
        &[a, b],
        1e-5,
        1e-4,
    )?;
    println!("{:<48} max rel error {:.2e}  passed {}", report.op_name, report.max_rel_error, report.passed);

    // A two-layer encoder with three heads, dropout active at a fixed seed.
    let config = EncoderConfig {
        vocab_size: 12,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 6,
        dropout: 0.1,
    };
    let params = ModelParams::init(&config, HeadLayout::Multi, false, 7)?;
    let batch = vec![
        EncodedInput { ids: vec![2, 5, 6, 7, 3, 0], attention_mask: vec![1, 1, 1, 1, 1, 0] },
        EncodedInput { ids: vec![2, 9, 3, 0, 0, 0], attention_mask: vec![1, 1, 1, 0, 0, 0] },
    ];
    let labels = [vec![1u8, 0], vec![0, 0], vec![1, 1]];
    let inputs: Vec<Tensor> = params
        .named_params()
        .into_iter()
        .map(|(_, t)| {
            let jitter = random(&mut rng, t.shape());
            tensor::add(&t.detach(), &tensor::scale(&jitter, 0.3)).unwrap().detach()
        })
        .collect();
    let mode = ForwardMode::train(3);
    let report = check_gradients(
        "encoder + three heads, mean task loss",
        |xs| {
            let mut p = params.clone();
            for ((_, slot), x) in p.named_params_mut().into_iter().zip(xs) {
                *slot = x.clone();
            }
            let logits = model::mtl_logits(&p, &batch, mode).expect("forward");
            let losses = LossBundle::compute(&logits, [&labels[0], &labels[1], &labels[2]]).expect("losses");
            Ok(losses.l_multi)
        },
        &inputs,
        1e-5,
        1e-4,
    )?;
    let n: usize = inputs.iter().map(Tensor::numel).sum();
    println!(
        "{:<48} max rel error {:.2e}  passed {}  ({n} coordinates)",
        report.op_name, report.max_rel_error, report.passed
    );
    Ok(())
}
