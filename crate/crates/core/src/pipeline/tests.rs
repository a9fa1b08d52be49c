use super::*;
use crate::dataset::ClassDistribution;
use crate::synth::{generate_synthetic_corpus, SynthSpec};

fn fixture(dir: &Path, counts: [usize; 5]) -> PipelineConfig {
    let data = dir.join("data");
    generate_synthetic_corpus(&data, &SynthSpec::new(counts, 48, 3)).unwrap();
    let text = r#"
seed = 11
output = "run"

[[corpus]]
id = "synthetic"
root = "data"

[smote]
k = 3
feature_size = 32

[clahe]
size = 32
grid = "4x4"

[[model]]
name = "vgg16"
width_divisor = 16

[train]
batch_size = 8
epochs = 1
learning_rate = 1e-3

[xai]
methods = ["gradcam", "faster_scorecam"]
"#;
    PipelineConfig::parse(text, dir).unwrap()
}

#[test]
fn parse_resolves_relative_paths() {
    let cfg = PipelineConfig::parse(
        "output = \"out\"\n[[corpus]]\nid = \"aptos\"\nroot = \"/abs/aptos\"\naliases = { \"0\" = \"No_DR\" }\n",
        Path::new("/base"),
    )
    .unwrap();
    assert_eq!(cfg.output, PathBuf::from("/base/out"));
    assert_eq!(cfg.corpora[0].root, PathBuf::from("/abs/aptos"));
    assert_eq!(cfg.corpora[0].id, CorpusId::Aptos2019);
    assert_eq!(cfg.corpora[0].aliases["0"], Grade::NoDr);
    assert_eq!(cfg.xai.methods, CamMethod::ALL.to_vec());
    assert_eq!(cfg.clahe.size, 128);
}

#[test]
fn config_round_trips_and_hash_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path(), [3; 5]);
    let again = PipelineConfig::parse(&cfg.to_toml().unwrap(), dir.path()).unwrap();
    assert_eq!(cfg, again);
    assert_eq!(cfg.hash().unwrap(), again.hash().unwrap());
    assert_eq!(cfg.hash().unwrap().len(), 64);
    let mut other = cfg.clone();
    other.seed += 1;
    assert_ne!(cfg.hash().unwrap(), other.hash().unwrap());
}

#[test]
fn unknown_keys_and_bad_values_are_rejected() {
    assert!(PipelineConfig::parse("output = \"o\"\ncorpus = []\nbogus = 1\n", Path::new(".")).is_err());
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = fixture(dir.path(), [3; 5]);
    cfg.clahe.grid = "1x8".into();
    assert!(matches!(cfg.validate(), Err(Error::Invalid(_))));
    let mut cfg = fixture(dir.path(), [3; 5]);
    cfg.models.push(ModelChoice::named("alexnet"));
    assert!(cfg.validate().is_err());
    let mut cfg = fixture(dir.path(), [3; 5]);
    cfg.xai.opacity = 1.5;
    assert!(cfg.validate().is_err());
}

#[test]
fn missing_root_fails_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = fixture(dir.path(), [3; 5]);
    cfg.corpora[0].root = dir.path().join("nowhere");
    let err = run_pipeline(&cfg).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    assert!(!cfg.output.exists());
}

#[test]
fn model_choice_builds_specs() {
    let f = ModelChoice::named("VR-FuseNet").with_divisor(8).spec(64, 2).unwrap();
    assert_eq!(f.label(), "vrfusenet");
    assert_eq!(f.input_size, 64);
    assert_eq!(f.seed, 2);
    let t = ModelChoice::named("resnet50v2").spec(128, 0).unwrap();
    assert_eq!(t.label(), "resnet50v2");
    let mut w = ModelChoice::named("vrfusenet");
    w.weights = Some("x.bin".into());
    assert!(w.spec(128, 0).is_err());
}

#[test]
fn fixture_run_completes_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path(), [12, 6, 14, 5, 4]);
    let rec = run_pipeline(&cfg).unwrap();
    assert!(rec.succeeded(), "{:?}", rec.failure);
    assert_eq!(rec.stages.iter().map(|s| s.stage).collect::<Vec<_>>(), Stage::ALL.to_vec());
    let layout = cfg.layout();
    for p in [
        layout.summary(),
        layout.record(),
        layout.config().join("config.toml"),
        layout.manifest("split"),
        layout.reports().join("vgg16/metrics.csv"),
        layout.reports().join("vgg16/accuracy.png"),
        layout.reports().join("vgg16/roc.png"),
        layout.checkpoints().join("vgg16/model.toml"),
        layout.xai().join("manifest.json"),
    ] {
        assert!(p.is_file(), "{}", p.display());
    }
    assert_eq!(rec.balance.len(), 1);
    assert_eq!(rec.balance[0].after.counts(), [12, 8, 14, 8, 8]);
    assert_eq!(rec.grids.len(), 5);
    assert!(rec.models[0].test.is_some());
    let summary = fs::read_to_string(layout.summary()).unwrap();
    assert!(summary.contains(&rec.config_hash));
    assert!(summary.contains("| vgg16 |"));

    // resuming from the same record does no work
    let again = run_pipeline(&cfg).unwrap();
    assert_eq!(again.stages, rec.stages);

    // a fresh run into the same place reproduces every manifest
    let hashes = rec.manifest_hashes.clone();
    fs::remove_dir_all(&cfg.output).unwrap();
    let partial = run_until(&cfg, Stage::Split).unwrap();
    assert_eq!(partial.stages.len(), 5);
    assert!(!layout.checkpoints().join("vgg16").exists());
    let resumed = run_pipeline(&cfg).unwrap();
    assert!(resumed.succeeded());
    assert_eq!(resumed.manifest_hashes, hashes);
}

#[test]
fn different_config_in_same_dir_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path(), [4; 5]);
    run_until(&cfg, Stage::Merge).unwrap();
    let mut other = cfg.clone();
    other.seed = 12;
    assert!(matches!(run_until(&other, Stage::Merge), Err(Error::Config(_))));
}

#[test]
fn stage_failure_is_recorded_with_partial_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = fixture(dir.path(), [5, 2, 5, 5, 5]);
    cfg.smote.enabled = false;
    let rec = run_pipeline(&cfg).unwrap();
    let f = rec.failure.as_ref().unwrap();
    assert_eq!(f.stage, Stage::Split);
    assert!(f.message.contains("Moderate"), "{}", f.message);
    assert!(cfg.layout().manifest("enhanced").is_file());
    let saved = RunRecord::load(&cfg.layout().record()).unwrap();
    assert_eq!(saved.failure, rec.failure);
    assert!(report(&saved).contains("failed in stage split"));
}

fn record_with(balance: Vec<BalanceSummary>, hybrid: Option<HybridCheck>) -> RunRecord {
    let cfg = PipelineConfig::parse(
        "output = \"/tmp/x\"\n[[corpus]]\nid = \"idrid\"\nroot = \"/tmp\"\n",
        Path::new("/"),
    )
    .unwrap();
    let mut r = RunRecord::new(cfg).unwrap();
    r.balance = balance;
    r.hybrid = hybrid;
    r
}

#[test]
fn report_lists_models_distributions_and_hash() {
    let before = CorpusId::Idrid.published_counts().unwrap();
    let after = crate::balance::compute_targets(&before, &crate::balance::TargetPolicy::Mean).unwrap();
    let mut r = record_with(
        vec![BalanceSummary {
            corpus: CorpusId::Idrid,
            before,
            after,
        }],
        None,
    );
    r.models.push(ModelOutcome {
        label: "vrfusenet".into(),
        checkpoint: "c".into(),
        reports: "r".into(),
        parameters: 1,
        best_epoch: 1,
        best_val_accuracy: 0.5,
        test: Some(MetricSummary {
            accuracy: 0.9,
            precision: 0.8,
            recall: 0.7,
            f1: 0.75,
            auc: 0.95,
        }),
    });
    let s = report(&r);
    assert!(s.contains(&r.config_hash));
    assert_eq!(s.matches("| vrfusenet |").count(), 1);
    assert!(s.contains("| vrfusenet | 0.9000 | 0.8000 | 0.7000 | 0.7500 | 0.9500 |"));
    assert!(s.contains("| idrid | 25 | 168 | 168 | 62 | 93 | 516 |"));
    assert!(s.contains("| idrid | 103 | 168 | 168 | 103 | 103 | 645 |"));
}

#[test]
fn report_flags_hybrid_transposition() {
    let derived = ClassDistribution::from_counts([3967, 6471, 9534, 3967, 4194]);
    let s = report(&record_with(Vec::new(), Some(check_hybrid(&derived))));
    assert!(s.contains("Moderate/Severe transposed"), "{s}");
}
