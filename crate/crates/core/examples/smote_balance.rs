//! SMOTE on an imbalanced synthetic corpus: per-class targets, generated
//! images on disk, and the geometry of one synthetic sample.
//!
//! `cargo run --release --example smote_balance -- [OUT_DIR]`

use std::env;
use std::path::PathBuf;

use drfuse::balance::{balance_class, balance_manifest, class_rng, FeatureVector, Intensity, PixelSpace, SmoteConfig, TargetOverrides};
use drfuse::dataset::{scan_corpus, CorpusId, Grade, ScanOptions};
use drfuse::synth::{generate_synthetic_corpus, SynthSpec};

fn main() -> drfuse::Result<()> {
    let out = PathBuf::from(env::args().nth(1).unwrap_or_else(|| "smote_out".into()));
    generate_synthetic_corpus(&out.join("data"), &SynthSpec::new([20, 8, 40, 7, 10], 64, 3))?;
    let scanned = scan_corpus(&out.join("data"), CorpusId::Synthetic, &ScanOptions::default())?;
    let cfg = SmoteConfig {
        k: 5,
        seed: 11,
        ..SmoteConfig::default()
    };
    let (balanced, summaries) = balance_manifest(
        &scanned.manifest,
        &TargetOverrides::default(),
        &cfg,
        &PixelSpace { size: 64 },
        &out.join("smote"),
    )?;
    for s in &summaries {
        println!("{}: {:?} -> {:?}", s.corpus, s.before.counts(), s.after.counts());
    }
    balanced.save(&out.join("balanced.txt"))?;
    println!("{} records, synthetic images under {}", balanced.len(), out.join("smote").display());

    let members: Vec<FeatureVector> = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.5, 2.0], [2.0, 0.5], [1.5, 1.5]]
        .into_iter()
        .map(|p| FeatureVector::new(p.to_vec(), Intensity::Raw))
        .collect();
    let samples = balance_class(&members, 10, &SmoteConfig { k: 3, ..cfg }, &mut class_rng(1, Grade::Mild, 0))?;
    for s in &samples {
        println!(
            "x{} + {:.3} * (x{} - x{}) = {:?}",
            s.base, s.delta, s.neighbor, s.base, s.vector.values
        );
    }
    Ok(())
}
