//! Generates a synthetic comment set with correlated labels, writes it as
//! CSV, reads it back and prints the label-combination table and split.
//!
//! ```bash
//! cargo run --example dataset_audit -- 3244 0.7
//! ```

use comment_mtl::data::{load_dataset, split, summarize, synth_generate, write_dataset, FormatSpec, SynthSpec};
use comment_mtl::Task;

fn main() -> comment_mtl::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map_or(3244, |s| s.parse().expect("size"));
    let correlation: f64 = args.next().map_or(0.7, |s| s.parse().expect("correlation"));
    let spec = SynthSpec {
        correlation,
        noise: 0.05,
        ..SynthSpec::default()
    };

    let data = synth_generate(n, 1, &spec)?;
    let dir = std::env::temp_dir().join("comment-mtl-audit");
    std::fs::create_dir_all(&dir).map_err(|e| comment_mtl::Error::io(&dir, e))?;
    let path = dir.join("synthetic.csv");
    write_dataset(&path, &data, &FormatSpec::default())?;
    let loaded = load_dataset(&path, &FormatSpec::default())?;
    assert_eq!(loaded, data);
    println!("wrote and reloaded {} comments from {}", loaded.len(), path.display());
    println!("first: {:?}", loaded[0].text);

    let summary = summarize(&loaded);
    print!("{}", summary.to_table());
    for (task, rate) in Task::ALL.iter().zip(summary.positive_rates()) {
        println!("{:<14} positive rate {rate:.3}", task.display_name());
    }
    let expected = spec.triple_probabilities();
    println!("expected share of (0,0,0): {:.3}, observed {:.3}", expected[0], summary.count([0, 0, 0]) as f64 / n as f64);

    let (train, val) = split(&loaded, 0.8, 42)?;
    println!("split 0.8: {} train / {} validation", train.len(), val.len());
    Ok(())
}
