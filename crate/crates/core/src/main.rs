use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use drfuse::balance::{balance_manifest, PixelSpace, SmoteConfig, TargetOverrides};
use drfuse::dataset::{merge, scan_corpus, split, CorpusId, DatasetManifest, Grade, ScanOptions, Split, SplitRatios};
use drfuse::enhance::clahe::{ClipSpec, TileGrid, DEFAULT_S_MAX};
use drfuse::enhance::{contrast_report_text, enhance_image, enhance_manifest, normalize_resize_to, EnhanceOptions, Interpolation};
use drfuse::imageio;
use drfuse::models::TrainedModel;
use drfuse::pipeline::{run_until, ModelChoice, PipelineConfig, RunRecord, Stage};
use drfuse::train_eval::{evaluate, train, write_history, LabeledSet, TrainConfig};
use drfuse::synth::{generate_synthetic_corpus, SynthSpec};
use drfuse::xai::{comparison_grid, write_explanation, CamMethod, CamRequest, Explainer, GridRow};
use drfuse::Error;

#[derive(Parser)]
#[command(name = "drfuse", version, about = "Diabetic-retinopathy grading pipeline")]
struct Cli {
    /// Pipeline config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

/// Each stage verb runs the config pipeline up to that stage, or acts on
/// the given files alone when its input flags are present.
#[derive(Subcommand)]
enum Command {
    /// Scan a corpus tree into a manifest.
    Prepare(PrepareArgs),
    /// Merge manifests.
    Merge(MergeArgs),
    /// SMOTE-balance each corpus in a manifest.
    Balance(BalanceArgs),
    /// CLAHE and resize every image of a manifest.
    Enhance(EnhanceArgs),
    /// Stratified train/val/test split.
    Split(SplitArgs),
    /// Train a model on a split manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Evaluate(EvaluateArgs),
    /// Explain one image with a saved checkpoint.
    Explain(ExplainArgs),
    /// Run every stage.
    Run,
    /// Write a synthetic five-grade corpus.
    Synth(SynthArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Corpus root with one directory per grade.
    #[arg(long)]
    root: Option<PathBuf>,
    #[arg(long, requires = "root")]
    corpus: Option<String>,
    /// Directory alias such as `0=No_DR`; repeatable.
    #[arg(long = "alias", requires = "root")]
    aliases: Vec<String>,
    /// File name to skip; repeatable.
    #[arg(long, requires = "root")]
    exclude: Vec<String>,
}

#[derive(Args)]
struct MergeArgs {
    /// Manifests to merge; `--out` names the result.
    manifests: Vec<PathBuf>,
}

#[derive(Args)]
struct BalanceArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// `mean` or a targets file.
    #[arg(long, default_value = "mean")]
    policy: String,
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Side length of the pixel space SMOTE works in.
    #[arg(long, default_value_t = 64)]
    feature_size: u32,
}

#[derive(Args)]
struct EnhanceArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "8x8")]
    grid: String,
    #[arg(long, default_value_t = 0.5)]
    clip: f64,
    #[arg(long, default_value_t = DEFAULT_S_MAX)]
    s_max: f64,
    #[arg(long, default_value_t = 128)]
    size: u32,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "0.8,0.1,0.1")]
    ratios: String,
}

#[derive(Args)]
struct TrainArgs {
    /// Split manifest; `--config` then only supplies its `[train]` table.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "vrfusenet", requires = "manifest")]
    model: String,
    #[arg(long, default_value_t = 1)]
    width_divisor: usize,
    /// Input side length; images are resized to it.
    #[arg(long, default_value_t = 128)]
    size: u32,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, requires = "checkpoint")]
    manifest: Option<PathBuf>,
    /// Report directory.
    #[arg(long, requires = "checkpoint")]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// `all` or one of gradcam, gradcampp, layercam, scorecam, faster_scorecam.
    #[arg(long, default_value = "all")]
    method: String,
    /// `auto` (predicted class) or a grade name.
    #[arg(long, default_value = "auto")]
    class: String,
    #[arg(long)]
    layer: Option<String>,
    #[arg(long, default_value_t = 0.5)]
    opacity: f32,
    #[arg(long, default_value_t = drfuse::xai::DEFAULT_FASTER_CHANNELS)]
    faster_channels: usize,
    /// Apply CLAHE (default settings) before resizing.
    #[arg(long)]
    clahe: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// Images per grade.
    #[arg(long, default_value_t = 200, conflicts_with = "counts")]
    per_class: usize,
    /// Per-grade counts in label order (Mild,Moderate,No_DR,Proliferative_DR,Severe).
    #[arg(long, value_delimiter = ',')]
    counts: Option<Vec<usize>>,
    #[arg(long, default_value_t = 128)]
    size: u32,
}

enum Failure {
    Validation(String),
    Stage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e.exit_code() {
            2 => Failure::Stage(e.to_string()),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, Failure> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Failure::Validation("--config is required for this command".into()))?;
    let mut cfg = PipelineConfig::load(path).map_err(|e| Failure::Validation(e.to_string()))?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output = o.clone();
    }
    Ok(cfg)
}

fn run_stage(cli: &Cli, last: Stage) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    let record = run_until(&cfg, last)?;
    print_record(&record);
    match &record.failure {
        Some(f) => Err(Failure::Stage(format!("stage {} failed: {}", f.stage, f.message))),
        None => Ok(()),
    }
}

fn out_path(cli: &Cli) -> Result<PathBuf, Failure> {
    cli.out.clone().ok_or_else(|| Failure::Validation("--out is required".into()))
}

fn existing(p: &Path) -> Result<(), Failure> {
    if p.exists() {
        Ok(())
    } else {
        Err(Failure::Validation(format!("{} does not exist", p.display())))
    }
}

fn load_manifest(p: &Path) -> Result<DatasetManifest, Failure> {
    existing(p)?;
    DatasetManifest::load(p).map_err(|e| Failure::Validation(e.to_string()))
}

fn save_manifest(m: &DatasetManifest, p: &Path) -> Result<(), Failure> {
    m.save(p)?;
    println!("{} records -> {}  {:?}", m.len(), p.display(), m.distribution().counts());
    Ok(())
}

fn prepare(cli: &Cli, a: &PrepareArgs) -> Result<(), Failure> {
    let root = a.root.as_ref().expect("checked by caller");
    existing(root)?;
    let id: CorpusId = a.corpus.as_deref().unwrap_or("synthetic").parse()?;
    let mut aliases = BTreeMap::new();
    for entry in &a.aliases {
        let (dir, grade) = entry
            .split_once('=')
            .ok_or_else(|| Failure::Validation(format!("alias {entry:?} is not DIR=GRADE")))?;
        aliases.insert(dir.to_string(), grade.parse::<Grade>()?);
    }
    let opts = ScanOptions {
        aliases,
        exclude: a.exclude.clone(),
    };
    let rep = scan_corpus(root, id, &opts)?;
    for g in &rep.missing_grades {
        eprintln!("warning: no directory for grade {g}");
    }
    for (p, why) in &rep.unreadable {
        eprintln!("warning: skipped {p}: {why}");
    }
    save_manifest(&rep.manifest, &out_path(cli)?)
}

fn merge_files(cli: &Cli, a: &MergeArgs) -> Result<(), Failure> {
    let parts = a.manifests.iter().map(|p| load_manifest(p)).collect::<Result<Vec<_>, _>>()?;
    let mut merged = merge(&parts)?;
    if let Some(s) = cli.seed {
        merged.seed = s;
    }
    save_manifest(&merged, &out_path(cli)?)
}

fn balance(cli: &Cli, a: &BalanceArgs, manifest: &Path) -> Result<(), Failure> {
    let m = load_manifest(manifest)?;
    let overrides = match a.policy.as_str() {
        "mean" => TargetOverrides::default(),
        file => {
            existing(Path::new(file))?;
            TargetOverrides::load(Path::new(file)).map_err(|e| Failure::Validation(e.to_string()))?
        }
    };
    let cfg = SmoteConfig {
        k: a.k,
        seed: cli.seed.unwrap_or(0),
        ..SmoteConfig::default()
    };
    let out = out_path(cli)?;
    let space = PixelSpace { size: a.feature_size };
    let (balanced, summaries) = balance_manifest(&m, &overrides, &cfg, &space, &out.join("images"))?;
    for s in &summaries {
        println!("{}: {:?} -> {:?}", s.corpus, s.before.counts(), s.after.counts());
    }
    save_manifest(&balanced, &out.join("balanced.txt"))
}

fn enhance(cli: &Cli, a: &EnhanceArgs, manifest: &Path) -> Result<(), Failure> {
    let m = load_manifest(manifest)?;
    let opts = EnhanceOptions {
        grid: a.grid.parse::<TileGrid>()?,
        clip: ClipSpec::from_normalized(a.clip, a.s_max)?,
        size: a.size,
        interpolation: Interpolation::Bilinear,
    };
    let out = out_path(cli)?;
    let (enhanced, rows) = enhance_manifest(&m, &opts, &out.join("images"))?;
    imageio::write_text(&out.join("contrast.csv"), &contrast_report_text(&rows))?;
    save_manifest(&enhanced, &out.join("enhanced.txt"))
}

fn split_file(cli: &Cli, a: &SplitArgs, manifest: &Path) -> Result<(), Failure> {
    let m = load_manifest(manifest)?;
    let ratios: SplitRatios = a.ratios.parse()?;
    let s = split(&m, &ratios, cli.seed.unwrap_or(0))?;
    for part in [Split::Train, Split::Val, Split::Test] {
        println!("{part:?}: {:?}", s.split_distribution(part).counts());
    }
    save_manifest(&s, &out_path(cli)?)
}

/// The `[train]` table of a config file, or the defaults.
fn train_section(cli: &Cli) -> Result<TrainConfig, Failure> {
    let Some(path) = &cli.config else {
        return Ok(TrainConfig::default());
    };
    existing(path)?;
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?;
    let doc: toml::Table = toml::from_str(&text).map_err(|e| Failure::Validation(e.to_string()))?;
    match doc.get("train") {
        Some(t) => t.clone().try_into().map_err(|e: toml::de::Error| Failure::Validation(e.to_string())),
        None => Ok(TrainConfig::default()),
    }
}

fn train_file(cli: &Cli, a: &TrainArgs, manifest: &Path) -> Result<(), Failure> {
    let m = load_manifest(manifest)?;
    let mut tc = train_section(cli)?;
    tc.validate()?;
    if let Some(s) = cli.seed {
        tc.seed = s;
    }
    let spec = ModelChoice::named(&a.model)
        .with_divisor(a.width_divisor)
        .spec(a.size as usize, tc.seed)?;
    let size = a.size as usize;
    let train_set = LabeledSet::from_manifest(&m, Split::Train, size)?;
    let val_set = LabeledSet::from_manifest(&m, Split::Val, size)?;
    let model = TrainedModel::build(spec)?;
    println!("{} parameters, {} training images", model.param_count(), train_set.len());
    let out = out_path(cli)?;
    let tag = drfuse::pipeline::file_hash(manifest)?;
    let (_, history) = train(model, &train_set, &val_set, &tc, Some((&out, &tag)))?;
    write_history(&history, &out)?;
    for e in &history.epochs {
        println!(
            "epoch {:3}  loss {:.4}  acc {:.4}  val_loss {:.4}  val_acc {:.4}",
            e.epoch, e.train_loss, e.train_accuracy, e.val_loss, e.val_accuracy
        );
    }
    println!("best epoch {} -> {}", history.best_epoch, out.display());
    Ok(())
}

fn evaluate_file(cli: &Cli, a: &EvaluateArgs, checkpoint: &Path) -> Result<(), Failure> {
    let manifest = a
        .manifest
        .as_ref()
        .ok_or_else(|| Failure::Validation("--manifest is required with --checkpoint".into()))?;
    let m = load_manifest(manifest)?;
    existing(checkpoint)?;
    let model = TrainedModel::load(checkpoint).map_err(|e| Failure::Validation(e.to_string()))?;
    let test = LabeledSet::from_manifest(&m, Split::Test, model.input_size())?;
    let rep = evaluate(&model, &test, 64)?;
    let dir = a.report.clone().or_else(|| cli.out.clone()).unwrap_or_else(|| PathBuf::from("report"));
    rep.write(&dir)?;
    println!(
        "accuracy {:.4} precision {:.4} recall {:.4} f1 {:.4} auc {:.4} -> {}",
        rep.accuracy,
        rep.precision,
        rep.recall,
        rep.f1,
        rep.auc,
        dir.display()
    );
    Ok(())
}

fn print_record(r: &RunRecord) {
    for s in &r.stages {
        println!("{:<9} {:>8.1}s", s.stage.as_str(), s.seconds);
    }
    for m in &r.models {
        if let Some(t) = &m.test {
            println!(
                "{}: accuracy {:.4} precision {:.4} recall {:.4} f1 {:.4} auc {:.4}",
                m.label, t.accuracy, t.precision, t.recall, t.f1, t.auc
            );
        }
    }
    println!("summary: {}", r.layout().summary().display());
}

fn synth(cli: &Cli, a: &SynthArgs) -> Result<(), Failure> {
    let out = cli
        .out
        .clone()
        .ok_or_else(|| Failure::Validation("synth needs --out".into()))?;
    let seed = cli.seed.unwrap_or(0);
    let spec = match &a.counts {
        Some(c) if c.len() != 5 => return Err(Failure::Validation(format!("--counts needs 5 values, got {}", c.len()))),
        Some(c) => SynthSpec::new([c[0], c[1], c[2], c[3], c[4]], a.size, seed),
        None => SynthSpec::balanced(a.per_class, a.size, seed),
    };
    let paths = generate_synthetic_corpus(&out, &spec)?;
    println!("wrote {} images under {}", paths.len(), out.display());
    Ok(())
}

fn explain(cli: &Cli, a: &ExplainArgs) -> Result<(), Failure> {
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    let methods = match a.method.as_str() {
        "all" => CamMethod::ALL.to_vec(),
        m => vec![m.parse::<CamMethod>()?],
    };
    let class = match a.class.as_str() {
        "auto" => None,
        g => Some(g.parse::<Grade>()?.index()),
    };
    if !(0.0..=1.0).contains(&a.opacity) {
        return Err(Failure::Validation(format!("--opacity must lie in [0, 1], got {}", a.opacity)));
    }
    let model = TrainedModel::load(&a.checkpoint).map_err(|e| Failure::Validation(e.to_string()))?;
    let img = imageio::load_rgb(&a.image).map_err(|e| Failure::Validation(e.to_string()))?;
    let img = if a.clahe {
        enhance_image(&img, &EnhanceOptions::default())?
    } else {
        img
    };
    let size = model.input_size() as u32;
    let t = normalize_resize_to(&img, size, Interpolation::Bilinear);
    let ex = Explainer::for_model(&model)?;
    if let Some(l) = &a.layer {
        if !ex.layers().contains(l) {
            return Err(Failure::Validation(format!(
                "unknown layer {l:?}; available: {}",
                ex.layers().join(", ")
            )));
        }
    }
    let x = ex.input(&t)?;
    let probs = ex.probabilities(&x);
    let probs = probs.item(0);
    let predicted = drfuse::train_eval::argmax(probs);
    println!("predicted {} ({:.4})", Grade::ALL[predicted], probs[predicted]);
    let stem = a
        .image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let base = t.to_image();
    for &m in &methods {
        let mut req = CamRequest::new(x.clone(), m).faster_channels(a.faster_channels);
        if let Some(c) = class {
            req = req.class(c);
        }
        if let Some(l) = &a.layer {
            req = req.layer(l.clone());
        }
        let e = ex.explain(&req)?;
        for p in write_explanation(&out, &stem, &e, &base, a.opacity)? {
            println!("{}", p.display());
        }
    }
    let row = GridRow {
        label: model.spec.label(),
        explainer: &ex,
        image: t,
        class,
        layer: a.layer.clone(),
    };
    let grid = comparison_grid(&[row], &methods, a.opacity)?;
    let png = out.join(format!("{stem}_grid.png"));
    imageio::save_rgb(&grid.image, &png)?;
    imageio::write_text(&out.join(format!("{stem}_grid.json")), &grid.manifest())?;
    println!("{}", png.display());
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    match &cli.cmd {
        Command::Prepare(a) if a.root.is_some() => prepare(cli, a),
        Command::Prepare(_) => run_stage(cli, Stage::Prepare),
        Command::Merge(a) if !a.manifests.is_empty() => merge_files(cli, a),
        Command::Merge(_) => run_stage(cli, Stage::Merge),
        Command::Balance(a) => match &a.manifest {
            Some(m) => balance(cli, a, m),
            None => run_stage(cli, Stage::Balance),
        },
        Command::Enhance(a) => match &a.manifest {
            Some(m) => enhance(cli, a, m),
            None => run_stage(cli, Stage::Enhance),
        },
        Command::Split(a) => match &a.manifest {
            Some(m) => split_file(cli, a, m),
            None => run_stage(cli, Stage::Split),
        },
        Command::Train(a) => match &a.manifest {
            Some(m) => train_file(cli, a, m),
            None => run_stage(cli, Stage::Train),
        },
        Command::Evaluate(a) => match &a.checkpoint {
            Some(c) => evaluate_file(cli, a, c),
            None => run_stage(cli, Stage::Evaluate),
        },
        Command::Run => run_stage(cli, Stage::Explain),
        Command::Explain(a) => explain(cli, a),
        Command::Synth(a) => synth(cli, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Stage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
