//! The whole workflow from one config: synthetic corpus, SMOTE, CLAHE,
//! split, training, evaluation and explanations, then a rerun that resumes.
//!
//! `cargo run --release --example pipeline_run -- [WORK_DIR]`

use std::env;
use std::fs;
use std::path::PathBuf;

use drfuse::pipeline::{run_pipeline, PipelineConfig};
use drfuse::synth::{generate_synthetic_corpus, SynthSpec};

fn main() -> drfuse::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let work = PathBuf::from(env::args().nth(1).unwrap_or_else(|| "pipeline_out".into()));
    generate_synthetic_corpus(&work.join("data"), &SynthSpec::new([60, 30, 80, 25, 20], 64, 1))?;
    let cfg = PipelineConfig::parse(include_str!("../config/desk.toml"), &work)?;
    let record = run_pipeline(&cfg)?;
    if let Some(f) = &record.failure {
        println!("failed in {}: {}", f.stage, f.message);
        return Ok(());
    }
    print!("{}", fs::read_to_string(record.layout().summary()).expect("summary"));
    let again = run_pipeline(&cfg)?;
    println!("rerun resumed {} recorded stages; manifests unchanged: {}", again.stages.len(), again.manifest_hashes == record.manifest_hashes);
    Ok(())
}
