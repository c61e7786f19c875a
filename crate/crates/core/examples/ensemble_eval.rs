//! Scores several noisy "seed" predictions, their majority vote, and shows
//! how macro and positive-class averaging differ on imbalanced labels.
//!
//! ```bash
//! cargo run --example ensemble_eval
//! ```

use comment_mtl::eval::{confusion, prf1, results_table, score, Averaging, ResultRow};
use comment_mtl::train::ensemble_predict;
use comment_mtl::Task;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> comment_mtl::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let gold: [Vec<u8>; 3] = [0.35, 0.25, 0.35].map(|rate| (0..400).map(|_| u8::from(rng.gen::<f64>() < rate)).collect());

    // each seed flips about a fifth of the gold labels
    let seeds: Vec<[Vec<u8>; 3]> = (0..5)
        .map(|_| gold.clone().map(|col| col.iter().map(|&g| if rng.gen::<f64>() < 0.2 { 1 - g } else { g }).collect()))
        .collect();

    let mut rows = Vec::new();
    for (i, preds) in seeds.iter().enumerate() {
        rows.push(ResultRow {
            model: format!("seed {}", i + 1),
            environment: "MTL".into(),
            metrics: Task::ALL.map(|t| score(&preds[t.index()], &gold[t.index()], Averaging::Macro).ok()),
        });
    }
    let ensemble: Vec<Vec<u8>> = Task::ALL
        .iter()
        .map(|t| ensemble_predict(&seeds.iter().map(|s| s[t.index()].clone()).collect::<Vec<_>>()))
        .collect::<comment_mtl::Result<_>>()?;
    rows.push(ResultRow {
        model: "ensemble".into(),
        environment: "MTL".into(),
        metrics: Task::ALL.map(|t| score(&ensemble[t.index()], &gold[t.index()], Averaging::Macro).ok()),
    });
    let table = results_table(rows)?;
    print!("{}", table.to_text());

    let c = confusion(&ensemble[1], &gold[1])?;
    println!("\n{} ensemble: {c:?}", Task::Engaging.display_name());
    for averaging in [Averaging::PositiveClass, Averaging::Macro] {
        let m = prf1(&c, averaging);
        println!("  {:<15} P {:.4} R {:.4} F1 {:.4}", averaging.name(), m.precision, m.recall, m.f1);
    }
    Ok(())
}
