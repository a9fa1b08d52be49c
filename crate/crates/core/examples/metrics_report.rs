//! Five-class evaluation report from class probabilities: confusion matrix,
//! macro metrics, one-vs-rest ROC curves and the files written to disk.
//!
//! `cargo run --example metrics_report -- [OUT_DIR]`

use std::env;
use std::path::PathBuf;

use drfuse::dataset::Grade;
use drfuse::nn::{softmax_rows, Tensor};
use drfuse::train_eval::report_from_scores;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> drfuse::Result<()> {
    let out = PathBuf::from(env::args().nth(1).unwrap_or_else(|| "metrics_out".into()));
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 300;
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..5)).collect();
    let logits: Vec<f32> = labels
        .iter()
        .flat_map(|&l| {
            let mut row: Vec<f32> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            row[l] += 1.5;
            row
        })
        .collect();
    let probs = softmax_rows(&Tensor::new(vec![n, 5], logits));
    let rep = report_from_scores(&probs, &labels)?;
    let names: Vec<&str> = Grade::ALL.iter().map(|g| g.canonical_name()).collect();
    print!("{}", rep.confusion.to_csv(&names));
    println!(
        "accuracy {:.4}  precision {:.4}  recall {:.4}  f1 {:.4}  macro AUC {:.4}",
        rep.accuracy, rep.precision, rep.recall, rep.f1, rep.auc
    );
    for (g, a) in Grade::ALL.iter().zip(&rep.per_class_auc) {
        println!("  AUC {:<17} {:.4}", g.canonical_name(), a.unwrap_or(f64::NAN));
    }
    for p in rep.write(&out)? {
        println!("{}", p.display());
    }
    Ok(())
}
