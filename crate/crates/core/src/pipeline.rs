//! Config-driven orchestration: prepare → merge → balance → enhance → split
//! → train → evaluate → explain, persisted under one run directory.
//!
//! ```text
//! <output>/
//!   config/config.toml     snapshot of the effective config
//!   manifests/             one manifest per stage
//!   images/smote/          synthetic images
//!   images/enhanced/       CLAHE + resized copies of every record
//!   checkpoints/<model>/   model.toml + weights.bin
//!   reports/               run.json, summary.md, contrast.csv, <model>/…
//!   xai/                   heatmaps, overlays, grids
//! ```
//!
//! A rerun with the same config skips stages already recorded in
//! `reports/run.json` and reloads their artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::balance::{balance_manifest, BalanceSummary, PixelSpace, SmoteConfig, TargetOverrides};
use crate::dataset::{
    check_hybrid, merge, scan_corpus, split, CorpusId, DatasetManifest, Grade, HybridCheck, ScanOptions, Split,
    SplitRatios,
};
use crate::enhance::{contrast_report_text, enhance_manifest, ClipSpec, EnhanceOptions, Interpolation, TileGrid};
use crate::error::{Error, Result};
use crate::imageio;
use crate::models::{BackboneKind, BackboneSpec, FusionModelSpec, ModelSpec, TrainedModel, TransferHeadSpec};
use crate::train_eval::{evaluate, train, write_history, LabeledSet, MetricsReport, TrainConfig};
use crate::xai::{comparison_grid, write_explanation, CamMethod, CamRequest, Explainer, GridRow, DEFAULT_FASTER_CHANNELS};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Prepare,
    Merge,
    Balance,
    Enhance,
    Split,
    Train,
    Evaluate,
    Explain,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Prepare,
        Stage::Merge,
        Stage::Balance,
        Stage::Enhance,
        Stage::Split,
        Stage::Train,
        Stage::Evaluate,
        Stage::Explain,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Prepare => "prepare",
            Stage::Merge => "merge",
            Stage::Balance => "balance",
            Stage::Enhance => "enhance",
            Stage::Split => "split",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Explain => "explain",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub id: CorpusId,
    pub root: PathBuf,
    /// Directory name → grade, for trees that do not use canonical names.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub aliases: BTreeMap<String, Grade>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exclude: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoteSection {
    pub enabled: bool,
    pub k: usize,
    /// Side length of the pixel space SMOTE interpolates in.
    pub feature_size: u32,
    /// TOML file of per-corpus explicit targets; other corpora use the mean policy.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub overrides: Option<PathBuf>,
}

impl Default for SmoteSection {
    fn default() -> Self {
        Self {
            enabled: true,
            k: 5,
            feature_size: 64,
            overrides: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClaheSection {
    /// Tile grid such as `8x8`.
    pub grid: String,
    /// Normalised clip limit in [0, 1].
    pub clip: f64,
    pub s_max: f64,
    /// Output side length, also the model input size.
    pub size: u32,
    pub interpolation: Interpolation,
}

impl Default for ClaheSection {
    fn default() -> Self {
        Self {
            grid: "8x8".into(),
            clip: 0.5,
            s_max: crate::enhance::clahe::DEFAULT_S_MAX,
            size: crate::enhance::MODEL_INPUT_SIZE,
            interpolation: Interpolation::Bilinear,
        }
    }
}

impl ClaheSection {
    pub fn options(&self) -> Result<EnhanceOptions> {
        if self.size < 32 {
            return Err(Error::Config(format!("clahe.size must be at least 32, got {}", self.size)));
        }
        Ok(EnhanceOptions {
            grid: TileGrid::from_str(&self.grid)?,
            clip: ClipSpec::from_normalized(self.clip, self.s_max)?,
            size: self.size,
            interpolation: self.interpolation,
        })
    }
}

/// One model to train: a backbone name for a transfer model, or `vrfusenet`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelChoice {
    pub name: String,
    #[serde(default = "one")]
    pub width_divisor: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout: Option<(f32, f32)>,
    /// Backbone weights blob for a transfer model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    #[serde(default = "yes")]
    pub trainable: bool,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl ModelChoice {
    pub fn named(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            width_divisor: 1,
            dropout: None,
            weights: None,
            trainable: true,
        }
    }

    pub fn with_divisor(mut self, d: usize) -> Self {
        self.width_divisor = d;
        self
    }

    pub fn label(&self) -> String {
        self.name.to_ascii_lowercase().replace(['-', '_'], "")
    }

    pub fn is_fusion(&self) -> bool {
        self.label() == "vrfusenet"
    }

    pub fn spec(&self, input_size: usize, seed: u64) -> Result<ModelSpec> {
        if self.width_divisor == 0 {
            return Err(Error::Config(format!("{}: width_divisor must be at least 1", self.name)));
        }
        let spec = if self.is_fusion() {
            if self.weights.is_some() {
                return Err(Error::Config("vrfusenet takes no weights file; its backbones start from random init".into()));
            }
            let mut f = FusionModelSpec::scaled(self.width_divisor);
            if let Some(d) = self.dropout {
                f.dropout_rates = d;
            }
            ModelSpec::fusion(f)
        } else {
            let kind = BackboneKind::from_str(&self.name)?;
            let mut b = BackboneSpec::new(kind).with_divisor(self.width_divisor);
            b.trainable = self.trainable;
            if let Some(w) = &self.weights {
                b.pretrained = true;
                b.weights = Some(w.to_string_lossy().into_owned());
            }
            let mut head = TransferHeadSpec::default();
            if let Some(d) = self.dropout {
                head.dropout_rates = d;
            }
            ModelSpec::transfer(b, head)
        };
        Ok(spec.with_input_size(input_size).with_seed(seed))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct XaiSection {
    pub methods: Vec<CamMethod>,
    /// Test images explained per grade.
    pub per_class: usize,
    pub opacity: f32,
    pub faster_channels: usize,
    /// Target layer; each model's default CAM layer when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer: Option<String>,
}

impl Default for XaiSection {
    fn default() -> Self {
        Self {
            methods: CamMethod::ALL.to_vec(),
            per_class: 1,
            opacity: 0.5,
            faster_channels: DEFAULT_FASTER_CHANNELS,
            layer: None,
        }
    }
}

/// The whole pipeline in one TOML document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    pub output: PathBuf,
    #[serde(rename = "corpus")]
    pub corpora: Vec<CorpusConfig>,
    #[serde(default)]
    pub smote: SmoteSection,
    #[serde(default)]
    pub clahe: ClaheSection,
    #[serde(default)]
    pub split: SplitRatios,
    #[serde(rename = "model", default)]
    pub models: Vec<ModelChoice>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub xai: XaiSection,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    /// Parses a config; relative paths are taken relative to `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        resolve(base, &mut cfg.output);
        for c in &mut cfg.corpora {
            resolve(base, &mut c.root);
        }
        if let Some(p) = &mut cfg.smote.overrides {
            resolve(base, p);
        }
        for m in &mut cfg.models {
            if let Some(w) = &mut m.weights {
                resolve(base, w);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical TOML serialization, hex encoded.
    pub fn hash(&self) -> Result<String> {
        Ok(hex(&Sha256::digest(self.to_toml()?.as_bytes())))
    }

    /// Checks every knob and every referenced path without touching the
    /// output directory.
    pub fn validate(&self) -> Result<()> {
        if self.corpora.is_empty() {
            return Err(Error::Config("at least one [[corpus]] is required".into()));
        }
        let mut seen = Vec::new();
        for c in &self.corpora {
            if !c.root.is_dir() {
                return Err(Error::Config(format!("corpus {} root {} is not a directory", c.id, c.root.display())));
            }
            if seen.contains(&c.id) {
                return Err(Error::Config(format!("corpus {} listed twice", c.id)));
            }
            seen.push(c.id);
        }
        if self.smote.k == 0 {
            return Err(Error::Config("smote.k must be at least 1".into()));
        }
        if self.smote.feature_size < 4 {
            return Err(Error::Config("smote.feature_size must be at least 4".into()));
        }
        if let Some(p) = &self.smote.overrides {
            TargetOverrides::load(p)?;
        }
        self.clahe.options()?;
        self.split.validate()?;
        self.train.validate()?;
        let mut labels = Vec::new();
        for m in &self.models {
            m.spec(self.clahe.size as usize, self.seed)?;
            if let Some(w) = &m.weights {
                if !w.is_file() {
                    return Err(Error::Config(format!("{}: weights file {} not found", m.name, w.display())));
                }
            }
            if labels.contains(&m.label()) {
                return Err(Error::Config(format!("model {} listed twice", m.name)));
            }
            labels.push(m.label());
        }
        if !(0.0..=1.0).contains(&self.xai.opacity) {
            return Err(Error::Config(format!("xai.opacity must lie in [0, 1], got {}", self.xai.opacity)));
        }
        if self.xai.faster_channels == 0 {
            return Err(Error::Config("xai.faster_channels must be at least 1".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> RunLayout {
        RunLayout::new(&self.output)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// Fixed directory names under a run root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config")
    }

    pub fn manifests(&self) -> PathBuf {
        self.root.join("manifests")
    }

    pub fn images(&self) -> PathBuf {
        self.root.join("images")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn xai(&self) -> PathBuf {
        self.root.join("xai")
    }

    pub fn manifest(&self, name: &str) -> PathBuf {
        self.manifests().join(format!("{name}.txt"))
    }

    pub fn record(&self) -> PathBuf {
        self.reports().join("run.json")
    }

    pub fn summary(&self) -> PathBuf {
        self.reports().join("summary.md")
    }

    fn create(&self) -> Result<()> {
        for d in [self.config(), self.manifests(), self.images(), self.checkpoints(), self.reports(), self.xai()] {
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub seconds: f64,
    pub artifacts: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: Stage,
    pub message: String,
}

/// Headline test metrics of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelOutcome {
    pub label: String,
    pub checkpoint: PathBuf,
    pub reports: PathBuf,
    pub parameters: usize,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub test: Option<MetricSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: f64,
}

impl From<&MetricsReport> for MetricSummary {
    fn from(r: &MetricsReport) -> Self {
        Self {
            accuracy: r.accuracy,
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
            auc: r.auc,
        }
    }
}

/// Everything a run did, persisted as `reports/run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub tool_version: String,
    pub config_hash: String,
    pub config: PipelineConfig,
    pub stages: Vec<StageRecord>,
    pub failure: Option<StageFailure>,
    /// Manifest name → SHA-256 of its text.
    pub manifest_hashes: BTreeMap<String, String>,
    pub balance: Vec<BalanceSummary>,
    pub hybrid: Option<HybridCheck>,
    pub models: Vec<ModelOutcome>,
    pub grids: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

impl RunRecord {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        Ok(Self {
            tool_version: TOOL_VERSION.to_string(),
            config_hash: config.hash()?,
            config,
            stages: Vec::new(),
            failure: None,
            manifest_hashes: BTreeMap::new(),
            balance: Vec::new(),
            hybrid: None,
            models: Vec::new(),
            grids: Vec::new(),
            warnings: Vec::new(),
        })
    }

    pub fn succeeded(&self) -> bool {
        self.failure.is_none()
    }

    pub fn completed(&self, stage: Stage) -> bool {
        self.stages.iter().any(|s| s.stage == stage)
    }

    pub fn layout(&self) -> RunLayout {
        self.config.layout()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        imageio::write_text(&self.layout().record(), &text)
    }
}

/// Runs every stage. Validation problems are returned as errors before any
/// file is written; a failing stage is reported in the returned record.
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunRecord> {
    run_until(config, Stage::Explain)
}

/// Runs (or resumes) the stages up to and including `last`.
pub fn run_until(config: &PipelineConfig, last: Stage) -> Result<RunRecord> {
    config.validate()?;
    let layout = config.layout();
    let mut record = match layout.record().is_file() {
        true => {
            let prev = RunRecord::load(&layout.record())?;
            if prev.config_hash != config.hash()? {
                return Err(Error::Config(format!(
                    "{} holds a run with a different config (hash {}); pick another output directory",
                    layout.root.display(),
                    prev.config_hash
                )));
            }
            prev
        }
        false => RunRecord::new(config.clone())?,
    };
    layout.create()?;
    imageio::write_text(&layout.config().join("config.toml"), &config.to_toml()?)?;
    record.failure = None;
    let mut runner = Runner {
        cfg: config,
        layout,
        current: None,
    };
    for stage in Stage::ALL.into_iter().filter(|&s| s <= last) {
        let start = Instant::now();
        let resumed = record.completed(stage);
        let result = if resumed {
            runner.reload(stage, &record)
        } else {
            runner.run(stage, &mut record)
        };
        match result {
            Ok(artifacts) if !resumed => {
                log::info!("stage {stage} done in {:.1}s", start.elapsed().as_secs_f64());
                record.stages.push(StageRecord {
                    stage,
                    seconds: start.elapsed().as_secs_f64(),
                    artifacts,
                });
                record.save()?;
            }
            Ok(_) => log::info!("stage {stage} resumed from artifacts"),
            Err(e) => {
                log::error!("stage {stage} failed: {e}");
                record.failure = Some(StageFailure {
                    stage,
                    message: e.to_string(),
                });
                record.save()?;
                return Ok(record);
            }
        }
    }
    imageio::write_text(&runner.layout.summary(), &report(&record))?;
    record.save()?;
    Ok(record)
}

struct Runner<'a> {
    cfg: &'a PipelineConfig,
    layout: RunLayout,
    /// Output manifest of the latest stage.
    current: Option<DatasetManifest>,
}

/// Manifest each data stage writes.
fn manifest_name(stage: Stage) -> Option<&'static str> {
    match stage {
        Stage::Merge => Some("merged"),
        Stage::Balance => Some("balanced"),
        Stage::Enhance => Some("enhanced"),
        Stage::Split => Some("split"),
        _ => None,
    }
}

impl Runner<'_> {
    fn stage_err(stage: Stage, e: Error) -> Error {
        match e {
            Error::Stage { .. } => e,
            other => Error::Stage {
                stage: stage.to_string(),
                msg: other.to_string(),
            },
        }
    }

    fn save_manifest(&self, name: &str, m: &DatasetManifest, record: &mut RunRecord) -> Result<PathBuf> {
        let path = self.layout.manifest(name);
        m.save(&path)?;
        record.manifest_hashes.insert(name.to_string(), file_hash(&path)?);
        Ok(path)
    }

    fn split_manifest(&mut self) -> Result<DatasetManifest> {
        match &self.current {
            Some(m) => Ok(m.clone()),
            None => DatasetManifest::load(&self.layout.manifest("split")),
        }
    }

    fn reload(&mut self, stage: Stage, record: &RunRecord) -> Result<Vec<PathBuf>> {
        if let Some(name) = manifest_name(stage) {
            let path = self.layout.manifest(name);
            if let Some(expected) = record.manifest_hashes.get(name) {
                if &file_hash(&path)? != expected {
                    return Err(Error::Config(format!("{} changed since it was written", path.display())));
                }
            }
            self.current = Some(DatasetManifest::load(&path)?);
        }
        Ok(Vec::new())
    }

    fn run(&mut self, stage: Stage, record: &mut RunRecord) -> Result<Vec<PathBuf>> {
        self.run_inner(stage, record).map_err(|e| Self::stage_err(stage, e))
    }

    fn run_inner(&mut self, stage: Stage, record: &mut RunRecord) -> Result<Vec<PathBuf>> {
        let cfg = self.cfg;
        match stage {
            Stage::Prepare => {
                let mut out = Vec::new();
                for c in &cfg.corpora {
                    let opts = ScanOptions {
                        aliases: c.aliases.clone(),
                        exclude: c.exclude.clone(),
                    };
                    let rep = scan_corpus(&c.root, c.id, &opts)?;
                    for g in &rep.missing_grades {
                        record.warnings.push(format!("{}: no directory for grade {g}", c.id));
                    }
                    for (p, why) in &rep.unreadable {
                        record.warnings.push(format!("{}: skipped unreadable {p}: {why}", c.id));
                    }
                    if rep.manifest.is_empty() {
                        return Err(Error::Invalid(format!("corpus {} at {} holds no images", c.id, c.root.display())));
                    }
                    out.push(self.save_manifest(&format!("prepare_{}", c.id), &rep.manifest, record)?);
                }
                Ok(out)
            }
            Stage::Merge => {
                let parts = cfg
                    .corpora
                    .iter()
                    .map(|c| DatasetManifest::load(&self.layout.manifest(&format!("prepare_{}", c.id))))
                    .collect::<Result<Vec<_>>>()?;
                let mut merged = merge(&parts)?;
                merged.seed = cfg.seed;
                let path = self.save_manifest("merged", &merged, record)?;
                self.current = Some(merged);
                Ok(vec![path])
            }
            Stage::Balance => {
                let merged = self.current.take().ok_or_else(|| Error::Invalid("no merged manifest".into()))?;
                let balanced = if cfg.smote.enabled {
                    let overrides = match &cfg.smote.overrides {
                        Some(p) => TargetOverrides::load(p)?,
                        None => TargetOverrides::default(),
                    };
                    let smote = SmoteConfig {
                        k: cfg.smote.k,
                        seed: cfg.seed,
                        ..SmoteConfig::default()
                    };
                    let space = PixelSpace {
                        size: cfg.smote.feature_size,
                    };
                    let (m, summaries) =
                        balance_manifest(&merged, &overrides, &smote, &space, &self.layout.images().join("smote"))?;
                    record.balance = summaries;
                    m
                } else {
                    record.balance = merged
                        .sources()
                        .into_iter()
                        .map(|c| {
                            let d = merged.filter_source(c).distribution();
                            BalanceSummary {
                                corpus: c,
                                before: d,
                                after: d,
                            }
                        })
                        .collect();
                    merged
                };
                let sources = balanced.sources();
                if CorpusId::HYBRID_DEFAULT.iter().all(|c| sources.contains(c)) {
                    let hybrid: crate::dataset::ClassDistribution = record
                        .balance
                        .iter()
                        .filter(|b| CorpusId::HYBRID_DEFAULT.contains(&b.corpus))
                        .fold(Default::default(), |acc, b| acc + b.after);
                    record.hybrid = Some(check_hybrid(&hybrid));
                }
                let path = self.save_manifest("balanced", &balanced, record)?;
                self.current = Some(balanced);
                Ok(vec![path])
            }
            Stage::Enhance => {
                let input = self.current.take().ok_or_else(|| Error::Invalid("no balanced manifest".into()))?;
                let (m, rows) = enhance_manifest(&input, &cfg.clahe.options()?, &self.layout.images().join("enhanced"))?;
                let report = self.layout.reports().join("contrast.csv");
                imageio::write_text(&report, &contrast_report_text(&rows))?;
                let path = self.save_manifest("enhanced", &m, record)?;
                self.current = Some(m);
                Ok(vec![path, report])
            }
            Stage::Split => {
                let input = self.current.take().ok_or_else(|| Error::Invalid("no enhanced manifest".into()))?;
                let m = split(&input, &cfg.split, cfg.seed)?;
                let path = self.save_manifest("split", &m, record)?;
                self.current = Some(m);
                Ok(vec![path])
            }
            Stage::Train => {
                let m = self.split_manifest()?;
                let size = cfg.clahe.size as usize;
                let train_set = LabeledSet::from_manifest(&m, Split::Train, size)?;
                let val_set = LabeledSet::from_manifest(&m, Split::Val, size)?;
                let tc = TrainConfig {
                    seed: cfg.seed,
                    ..cfg.train.clone()
                };
                let mut out = Vec::new();
                record.models.clear();
                for choice in &cfg.models {
                    let label = choice.label();
                    let model = TrainedModel::build(choice.spec(size, cfg.seed)?)?;
                    let parameters = model.param_count();
                    log::info!("training {label} ({parameters} parameters) on {} images", train_set.len());
                    let ckpt = self.layout.checkpoints().join(&label);
                    let (_, history) = train(model, &train_set, &val_set, &tc, Some((&ckpt, &record.config_hash)))?;
                    let dir = self.layout.reports().join(&label);
                    out.extend(write_history(&history, &dir)?);
                    out.push(ckpt.clone());
                    record.models.push(ModelOutcome {
                        label,
                        checkpoint: ckpt,
                        reports: dir,
                        parameters,
                        best_epoch: history.best_epoch,
                        best_val_accuracy: history.best().map(|e| e.val_accuracy).unwrap_or(0.0),
                        test: None,
                    });
                }
                Ok(out)
            }
            Stage::Evaluate => {
                let m = self.split_manifest()?;
                let test_set = LabeledSet::from_manifest(&m, Split::Test, cfg.clahe.size as usize)?;
                let mut out = Vec::new();
                for outcome in &mut record.models {
                    let model = TrainedModel::load(&outcome.checkpoint)?;
                    let rep = evaluate(&model, &test_set, cfg.train.eval_batch_size)?;
                    out.extend(rep.write(&outcome.reports)?);
                    outcome.test = Some(MetricSummary::from(&rep));
                }
                Ok(out)
            }
            Stage::Explain => {
                let m = self.split_manifest()?;
                self.explain(&m, record)
            }
        }
    }

    fn explain(&self, m: &DatasetManifest, record: &mut RunRecord) -> Result<Vec<PathBuf>> {
        let cfg = self.cfg;
        let x = &cfg.xai;
        if record.models.is_empty() || x.per_class == 0 || x.methods.is_empty() {
            return Ok(Vec::new());
        }
        let models = record
            .models
            .iter()
            .map(|o| TrainedModel::load(&o.checkpoint).map(|mdl| (o.label.clone(), mdl)))
            .collect::<Result<Vec<_>>>()?;
        let explainers = models
            .iter()
            .map(|(_, mdl)| Explainer::for_model(mdl))
            .collect::<Result<Vec<_>>>()?;
        let mut picked = Vec::new();
        for g in Grade::ALL {
            picked.extend(m.records_in(Split::Test).filter(|r| r.label == g).take(x.per_class));
        }
        let mut out = Vec::new();
        let mut grid_cells = Vec::new();
        for (n, r) in picked.iter().enumerate() {
            let img = imageio::load_rgb(Path::new(&r.path))?;
            let t = crate::enhance::normalize_resize_to(&img, cfg.clahe.size, Interpolation::Bilinear);
            let base = t.to_image();
            let stem = format!("{n:03}_{}", r.label.canonical_name());
            for ((label, _), ex) in models.iter().zip(&explainers) {
                let dir = self.layout.xai().join(label);
                let input = ex.input(&t)?;
                for &method in &x.methods {
                    let mut req = CamRequest::new(input.clone(), method).faster_channels(x.faster_channels);
                    if let Some(l) = &x.layer {
                        req = req.layer(l.clone());
                    }
                    match ex.explain(&req) {
                        Ok(e) => out.extend(write_explanation(&dir, &stem, &e, &base, x.opacity)?),
                        Err(e) => record.warnings.push(format!("{label} {method} on {}: {e}", r.path)),
                    }
                }
            }
            let rows: Vec<GridRow> = models
                .iter()
                .zip(&explainers)
                .map(|((label, _), ex)| GridRow {
                    label: label.clone(),
                    explainer: ex,
                    image: t.clone(),
                    class: None,
                    layer: x.layer.clone(),
                })
                .collect();
            let grid = comparison_grid(&rows, &x.methods, x.opacity)?;
            let png = self.layout.xai().join(format!("grid_{stem}.png"));
            imageio::save_rgb(&grid.image, &png)?;
            grid_cells.push(serde_json::json!({
                "image": r.path,
                "label": r.label.canonical_name(),
                "grid": png,
                "cells": grid.cells,
            }));
            record.grids.push(png.clone());
            out.push(png);
        }
        let manifest = self.layout.xai().join("manifest.json");
        let text = serde_json::to_string_pretty(&grid_cells).map_err(|e| Error::Config(e.to_string()))?;
        imageio::write_text(&manifest, &text)?;
        out.push(manifest);
        Ok(out)
    }
}

fn distribution_table(out: &mut String, title: &str, rows: &[(String, [usize; 5])]) {
    let _ = writeln!(out, "### {title}\n");
    let _ = writeln!(
        out,
        "| corpus | {} | total |",
        Grade::ALL.map(|g| g.canonical_name()).join(" | ")
    );
    let _ = writeln!(out, "|---|---|---|---|---|---|---|");
    for (name, c) in rows {
        let cells: Vec<String> = c.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "| {name} | {} | {} |", cells.join(" | "), c.iter().sum::<usize>());
    }
    out.push('\n');
}

/// Markdown summary: test metrics per model, class distributions before and
/// after SMOTE, hybrid consistency notes and artifact paths.
pub fn report(run: &RunRecord) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Run summary\n");
    let _ = writeln!(s, "- tool version: {}", run.tool_version);
    let _ = writeln!(s, "- config sha256: {}", run.config_hash);
    let _ = writeln!(s, "- seed: {}", run.config.seed);
    let _ = writeln!(s, "- output: {}", run.config.output.display());
    match &run.failure {
        Some(f) => {
            let _ = writeln!(s, "- status: failed in stage {}: {}", f.stage, f.message);
        }
        None => {
            let _ = writeln!(s, "- status: ok");
        }
    }
    s.push('\n');
    if !run.stages.is_empty() {
        let _ = writeln!(s, "## Stages\n\n| stage | seconds |\n|---|---|");
        for st in &run.stages {
            let _ = writeln!(s, "| {} | {:.1} |", st.stage, st.seconds);
        }
        s.push('\n');
    }
    let _ = writeln!(s, "## Test metrics\n");
    let _ = writeln!(s, "| model | accuracy | precision | recall | f1 | auc |\n|---|---|---|---|---|---|");
    for m in &run.models {
        match &m.test {
            Some(t) => {
                let _ = writeln!(
                    s,
                    "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |",
                    m.label, t.accuracy, t.precision, t.recall, t.f1, t.auc
                );
            }
            None => {
                let _ = writeln!(s, "| {} | - | - | - | - | - |", m.label);
            }
        }
    }
    s.push('\n');
    if !run.balance.is_empty() {
        let _ = writeln!(s, "## Class distributions\n");
        let before: Vec<_> = run.balance.iter().map(|b| (b.corpus.to_string(), b.before.counts())).collect();
        let after: Vec<_> = run.balance.iter().map(|b| (b.corpus.to_string(), b.after.counts())).collect();
        distribution_table(&mut s, "Before SMOTE", &before);
        distribution_table(&mut s, "After SMOTE", &after);
    }
    if let Some(h) = &run.hybrid {
        let _ = writeln!(s, "## Hybrid dataset check\n");
        let _ = writeln!(s, "derived {}\n\nstated {}\n", h.derived, h.stated);
        if h.is_consistent() {
            let _ = writeln!(s, "counts agree\n");
        }
        for n in h.notes() {
            let _ = writeln!(s, "- {n}");
        }
        s.push('\n');
    }
    if !run.models.is_empty() || !run.grids.is_empty() {
        let _ = writeln!(s, "## Artifacts\n");
        for m in &run.models {
            let _ = writeln!(s, "- {} checkpoint: {}", m.label, m.checkpoint.display());
            let _ = writeln!(s, "- {} curves: {}", m.label, m.reports.join("accuracy.png").display());
            let _ = writeln!(s, "- {} ROC: {}", m.label, m.reports.join("roc.png").display());
        }
        for g in &run.grids {
            let _ = writeln!(s, "- grid: {}", g.display());
        }
        s.push('\n');
    }
    if !run.warnings.is_empty() {
        let _ = writeln!(s, "## Warnings\n");
        for w in &run.warnings {
            let _ = writeln!(s, "- {w}");
        }
    }
    s
}

#[cfg(test)]
mod tests;
