//! Trains VR-FuseNet from scratch on the synthetic fundus corpus at reduced
//! width and resolution, then reports test metrics.
//!
//! `cargo run --release --example desk_training -- [per_class] [epochs] [divisor] [size] [lr] [batch] [dropout]`

use std::env;

use drfuse::dataset::{scan_corpus, split, CorpusId, ScanOptions, Split, SplitRatios};
use drfuse::models::{FusionModelSpec, ModelSpec, TrainedModel};
use drfuse::synth::{generate_synthetic_corpus, SynthSpec};
use drfuse::train_eval::{evaluate, train, LabeledSet, TrainConfig};

fn arg(i: usize, default: usize) -> usize {
    env::args().nth(i).and_then(|a| a.parse().ok()).unwrap_or(default)
}

fn main() -> drfuse::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (per_class, epochs, divisor, size) = (arg(1, 200), arg(2, 10), arg(3, 8), arg(4, 64));
    let lr: f32 = env::args().nth(5).and_then(|a| a.parse().ok()).unwrap_or(1e-3);
    let batch = arg(6, 16);
    let dropout: f32 = env::args().nth(7).and_then(|a| a.parse().ok()).unwrap_or(0.2);
    let dir = tempfile::tempdir().expect("temp dir");
    generate_synthetic_corpus(dir.path(), &SynthSpec::balanced(per_class, size as u32, 7))?;
    let scanned = scan_corpus(dir.path(), CorpusId::Synthetic, &ScanOptions::default())?;
    let manifest = split(&scanned.manifest, &SplitRatios::default(), 7)?;
    let train_set = LabeledSet::from_manifest(&manifest, Split::Train, size)?;
    let val_set = LabeledSet::from_manifest(&manifest, Split::Val, size)?;
    let test_set = LabeledSet::from_manifest(&manifest, Split::Test, size)?;
    let spec = FusionModelSpec {
        dropout_rates: (dropout, dropout),
        ..FusionModelSpec::scaled(divisor)
    };
    let model = TrainedModel::build(ModelSpec::fusion(spec).with_input_size(size).with_seed(7))?;
    println!("{} parameters, {} training images", model.param_count(), train_set.len());
    let cfg = TrainConfig {
        batch_size: batch,
        learning_rate: lr,
        epochs,
        seed: 7,
        ..TrainConfig::default()
    };
    let (model, history) = train(model, &train_set, &val_set, &cfg, None)?;
    for e in &history.epochs {
        println!(
            "epoch {:2}  loss {:.4}  acc {:.3}  val_loss {:.4}  val_acc {:.3}  {:.1}s",
            e.epoch, e.train_loss, e.train_accuracy, e.val_loss, e.val_accuracy, e.seconds
        );
    }
    let report = evaluate(&model, &test_set, 64)?;
    println!("test accuracy {:.4}  macro AUC {:.4}", report.accuracy, report.auc);
    Ok(())
}
