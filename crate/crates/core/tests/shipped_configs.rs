use std::fs;
use std::path::Path;

use drfuse::dataset::CorpusId;
use drfuse::pipeline::PipelineConfig;

fn config_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/config"))
}

#[test]
fn full_scale_recipe_validates_against_stub_corpora() {
    let tmp = tempfile::tempdir().unwrap();
    let mut text = fs::read_to_string(config_dir().join("full_scale.toml")).unwrap();
    text = text.replace("\"targets.toml\"", &format!("{:?}", config_dir().join("targets.toml")));
    let cfg = PipelineConfig::parse(&text, tmp.path()).unwrap();
    assert_eq!(cfg.corpora.iter().map(|c| c.id).collect::<Vec<_>>(), CorpusId::HYBRID_DEFAULT.to_vec());
    for c in &cfg.corpora {
        fs::create_dir_all(&c.root).unwrap();
    }
    cfg.validate().unwrap();
    assert_eq!((cfg.train.batch_size, cfg.train.epochs, cfg.clahe.size), (128, 60, 128));
    assert_eq!(cfg.models.len(), 6);
}

#[test]
fn desk_config_validates_next_to_a_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::parse(&fs::read_to_string(config_dir().join("desk.toml")).unwrap(), tmp.path()).unwrap();
    fs::create_dir_all(tmp.path().join("data")).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg.models[0].dropout, Some((0.2, 0.2)));
}
