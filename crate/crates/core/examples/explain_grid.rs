//! Trains a small VGG16 on the synthetic corpus, then explains one image per
//! grade with all five CAM methods and writes overlays and a comparison grid.
//!
//! `cargo run --release --example explain_grid -- [OUT_DIR]`

use std::env;
use std::path::PathBuf;

use drfuse::dataset::{scan_corpus, split, CorpusId, Grade, ScanOptions, Split, SplitRatios};
use drfuse::imageio;
use drfuse::models::{BackboneKind, BackboneSpec, ModelSpec, TrainedModel, TransferHeadSpec};
use drfuse::synth::{generate_synthetic_corpus, SynthSpec};
use drfuse::train_eval::{train, LabeledSet, TrainConfig};
use drfuse::xai::{comparison_grid, write_explanation, CamMethod, CamRequest, Explainer, GridRow};

fn main() -> drfuse::Result<()> {
    let out = PathBuf::from(env::args().nth(1).unwrap_or_else(|| "xai_out".into()));
    let size = 64;
    generate_synthetic_corpus(&out.join("data"), &SynthSpec::balanced(40, size as u32, 5))?;
    let scanned = scan_corpus(&out.join("data"), CorpusId::Synthetic, &ScanOptions::default())?;
    let m = split(&scanned.manifest, &SplitRatios::default(), 5)?;
    let tr = LabeledSet::from_manifest(&m, Split::Train, size)?;
    let va = LabeledSet::from_manifest(&m, Split::Val, size)?;
    let te = LabeledSet::from_manifest(&m, Split::Test, size)?;
    let head = TransferHeadSpec {
        dense_widths: (64, 32),
        dropout_rates: (0.2, 0.2),
        ..TransferHeadSpec::default()
    };
    let spec = ModelSpec::transfer(BackboneSpec::new(BackboneKind::Vgg16).with_divisor(8), head)
        .with_input_size(size)
        .with_seed(5);
    let cfg = TrainConfig {
        batch_size: 16,
        learning_rate: 1e-3,
        epochs: 12,
        seed: 5,
        ..TrainConfig::default()
    };
    let (model, history) = train(TrainedModel::build(spec)?, &tr, &va, &cfg, None)?;
    println!("best val accuracy {:.3}", history.best().map(|e| e.val_accuracy).unwrap_or(0.0));

    let ex = Explainer::for_model(&model)?;
    println!("layers: {}", ex.layers().join(", "));
    let mut rows = Vec::new();
    for g in Grade::ALL {
        let i = (0..te.len()).find(|&i| te.labels[i] == g.index()).expect("every grade in test");
        let img = te.image(i);
        let x = ex.input(&img)?;
        for m in CamMethod::ALL {
            let e = ex.explain(&CamRequest::new(x.clone(), m).faster_channels(10))?;
            write_explanation(&out.join("maps"), g.canonical_name(), &e, &img.to_image(), 0.5)?;
        }
        let d = ex.deletion_check(&x, g.index(), 0.2)?;
        println!("{:<17} score {:.3} -> {:.3} after deleting the top 20%", g.canonical_name(), d.score_before, d.score_after);
        rows.push(GridRow {
            label: g.canonical_name().to_string(),
            explainer: &ex,
            image: img,
            class: Some(g.index()),
            layer: None,
        });
    }
    let grid = comparison_grid(&rows, &CamMethod::ALL, 0.5)?;
    imageio::save_rgb(&grid.image, &out.join("grid.png"))?;
    imageio::write_text(&out.join("grid.json"), &grid.manifest())?;
    println!("{}x{} grid -> {}", grid.rows, grid.columns, out.join("grid.png").display());
    Ok(())
}
