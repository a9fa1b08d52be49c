//! Scans two corpus trees (one with numeric grade folders), merges and
//! splits them, and checks the published five-corpus counts after balancing.
//!
//! `cargo run --example dataset_manifest`

use std::collections::BTreeMap;
use std::fs;

use drfuse::balance::{compute_targets, TargetPolicy, TargetOverrides};
use drfuse::dataset::{
    check_hybrid, merge, scan_corpus, split, ClassDistribution, CorpusId, Grade, ScanOptions, Split, SplitRatios,
};
use drfuse::synth::{generate_synthetic_corpus, SynthSpec};

fn main() -> drfuse::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    generate_synthetic_corpus(&a, &SynthSpec::new([12, 20, 30, 6, 8], 48, 1))?;
    generate_synthetic_corpus(&b, &SynthSpec::new([5, 9, 15, 4, 4], 48, 2))?;

    // corpus b uses severity digits as folder names
    let mut aliases = BTreeMap::new();
    for g in Grade::ALL {
        let digit = g.severity().to_string();
        fs::rename(b.join(g.canonical_name()), b.join(&digit)).expect("rename");
        aliases.insert(digit, g);
    }
    let first = scan_corpus(&a, CorpusId::Idrid, &ScanOptions::default())?;
    let second = scan_corpus(&b, CorpusId::Retino, &ScanOptions { aliases, exclude: Vec::new() })?;
    let merged = merge(&[first.manifest, second.manifest])?;
    let m = split(&merged, &SplitRatios::default(), 42)?;
    for s in [Split::Train, Split::Val, Split::Test] {
        println!("{s:?}: {:?}", m.split_distribution(s).counts());
    }
    let text = m.to_text()?;
    println!("manifest header and first record:");
    for line in text.lines().take(5) {
        println!("  {line}");
    }

    let overrides = TargetOverrides::parse(include_str!("../config/targets.toml"))?;
    let mut hybrid = ClassDistribution::default();
    println!("\ncorpus      before -> after ({:?})", Grade::ALL.map(|g| g.canonical_name()));
    for id in CorpusId::HYBRID_DEFAULT {
        let before = id.published_counts().expect("published");
        let policy = match overrides.policy_for(id) {
            TargetPolicy::Mean => TargetPolicy::Mean,
            explicit => explicit,
        };
        let after = compute_targets(&before, &policy)?;
        println!("{:<11} {:?} -> {:?}", id.as_str(), before.counts(), after.counts());
        hybrid = hybrid + after;
    }
    let check = check_hybrid(&hybrid);
    println!("hybrid {:?} (total {})", hybrid.counts(), hybrid.total());
    for note in check.notes() {
        println!("  {note}");
    }
    Ok(())
}
