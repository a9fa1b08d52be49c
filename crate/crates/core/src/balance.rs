//! SMOTE class balancing over flattened image vectors.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassDistribution, CorpusId, DatasetManifest, Grade, ImageRecord, Split, NUM_CLASSES};
use crate::enhance::resize_rgb_bilinear;
use crate::error::{invalid, Error, Result};
use crate::imageio;

/// Value range of a feature vector's components.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Intensity {
    /// Pixel intensities in [0, 1].
    Unit,
    /// Pixel intensities in [0, 255].
    Byte,
    /// Arbitrary embedding values; no clamping.
    Raw,
}

impl Intensity {
    fn clamp(self, v: f64) -> f64 {
        match self {
            Intensity::Unit => v.clamp(0.0, 1.0),
            Intensity::Byte => v.clamp(0.0, 255.0),
            Intensity::Raw => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub unit: Intensity,
    pub source_record: Option<String>,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>, unit: Intensity) -> Self {
        Self {
            values,
            unit,
            source_record: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Maps images to and from the space SMOTE interpolates in.
///
/// The default is the flattened resized image itself; a learned embedding can
/// be substituted as long as it can be decoded back into an image.
pub trait FeatureSpace {
    fn encode(&self, img: &RgbImage) -> FeatureVector;
    fn decode(&self, v: &FeatureVector) -> Result<RgbImage>;
}

/// Flattened `size × size × 3` pixels in [0, 255].
#[derive(Clone, Copy, Debug)]
pub struct PixelSpace {
    pub size: u32,
}

impl FeatureSpace for PixelSpace {
    fn encode(&self, img: &RgbImage) -> FeatureVector {
        let resized;
        let img = if img.dimensions() == (self.size, self.size) {
            img
        } else {
            resized = resize_rgb_bilinear(img, self.size, self.size);
            &resized
        };
        flatten(img)
    }

    fn decode(&self, v: &FeatureVector) -> Result<RgbImage> {
        reshape(v, self.size, self.size)
    }
}

/// Row-major HWC flattening in byte units.
pub fn flatten(img: &RgbImage) -> FeatureVector {
    FeatureVector::new(img.as_raw().iter().map(|&b| b as f64).collect(), Intensity::Byte)
}

/// Inverse of [`flatten`], rounding to the nearest level.
pub fn reshape(v: &FeatureVector, width: u32, height: u32) -> Result<RgbImage> {
    let expected = width as usize * height as usize * 3;
    if v.dim() != expected {
        return Err(Error::Shape(format!(
            "vector of length {} cannot be reshaped to {width}x{height}x3",
            v.dim()
        )));
    }
    let scale = match v.unit {
        Intensity::Unit => 255.0,
        Intensity::Byte | Intensity::Raw => 1.0,
    };
    let bytes: Vec<u8> = v
        .values
        .iter()
        .map(|&x| (x * scale).round().clamp(0.0, 255.0) as u8)
        .collect();
    RgbImage::from_raw(width, height, bytes).ok_or_else(|| Error::Shape("reshape buffer".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TargetPolicy {
    /// Raise every class to the floored mean of the five class counts.
    Mean,
    /// Fixed per-class targets.
    Explicit(ClassDistribution),
}

/// Oversampling-only targets.
pub fn compute_targets(dist: &ClassDistribution, policy: &TargetPolicy) -> Result<ClassDistribution> {
    match policy {
        TargetPolicy::Mean => {
            let mean = dist.total() / NUM_CLASSES;
            let mut t = *dist;
            for (g, n) in dist.iter() {
                t.set(g, n.max(mean));
            }
            Ok(t)
        }
        TargetPolicy::Explicit(targets) => {
            for (g, n) in dist.iter() {
                if targets.get(g) < n {
                    return Err(invalid!(
                        "target for {g} ({}) is below the current count ({n}); undersampling is not supported",
                        targets.get(g)
                    ));
                }
            }
            Ok(*targets)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoteConfig {
    pub k: usize,
    pub seed: u64,
    pub delta_range: (f64, f64),
}

impl Default for SmoteConfig {
    fn default() -> Self {
        Self {
            k: 5,
            seed: 0,
            delta_range: (0.0, 1.0),
        }
    }
}

impl SmoteConfig {
    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.delta_range;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(invalid!("delta range must lie within [0, 1], got {:?}", self.delta_range));
        }
        if self.k == 0 {
            return Err(invalid!("k must be at least 1"));
        }
        Ok(())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Indices of the `k` nearest pool vectors by Euclidean distance, ascending,
/// ties broken by lower index. `exclude` removes the query's own pool slot.
pub fn knn(query: &[f64], pool: &[FeatureVector], k: usize, exclude: Option<usize>) -> Result<Vec<usize>> {
    let available = pool.len() - usize::from(exclude.is_some_and(|i| i < pool.len()));
    if available < k {
        return Err(invalid!("pool of {available} vectors is smaller than k = {k}"));
    }
    let mut d: Vec<(f64, usize)> = Vec::with_capacity(pool.len());
    for (i, p) in pool.iter().enumerate() {
        if Some(i) == exclude {
            continue;
        }
        if p.dim() != query.len() {
            return Err(Error::Shape(format!(
                "pool vector {i} has dimension {}, query has {}",
                p.dim(),
                query.len()
            )));
        }
        d.push((sq_dist(query, &p.values), i));
    }
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(d.into_iter().take(k).map(|(_, i)| i).collect())
}

/// `x_i + delta · (x_zi − x_i)`, clamped to the vector's intensity range.
pub fn smote_sample(x_i: &FeatureVector, x_zi: &FeatureVector, delta: f64) -> Result<FeatureVector> {
    if x_i.dim() != x_zi.dim() {
        return Err(Error::Shape(format!(
            "cannot interpolate vectors of dimension {} and {}",
            x_i.dim(),
            x_zi.dim()
        )));
    }
    if !(0.0..=1.0).contains(&delta) {
        return Err(invalid!("delta must lie in [0, 1], got {delta}"));
    }
    let values = x_i
        .values
        .iter()
        .zip(&x_zi.values)
        .map(|(a, b)| x_i.unit.clamp(a + delta * (b - a)))
        .collect();
    Ok(FeatureVector::new(values, x_i.unit))
}

/// A generated vector and how it was produced.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub vector: FeatureVector,
    pub base: usize,
    pub neighbor: usize,
    pub delta: f64,
}

/// Random stream for one class; distinct classes and corpora never share one.
pub fn class_rng(seed: u64, class: Grade, salt: u64) -> ChaCha8Rng {
    let key = seed
        ^ (class.index() as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)
        ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    ChaCha8Rng::seed_from_u64(key)
}

/// Generates `target − members.len()` synthetic vectors for one class.
///
/// Base points are taken round-robin; each sample picks one of the base's
/// `k` nearest class members and a fresh uniform gap.
pub fn balance_class(
    members: &[FeatureVector],
    target: usize,
    cfg: &SmoteConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SyntheticSample>> {
    cfg.validate()?;
    let current = members.len();
    if target < current {
        return Err(invalid!("target {target} is below the class size {current}"));
    }
    let needed = target - current;
    if needed == 0 {
        return Ok(Vec::new());
    }
    if current <= cfg.k {
        return Err(invalid!(
            "class has {current} samples, which is not more than k = {}; use a smaller k",
            cfg.k
        ));
    }
    if let Some(bad) = members.iter().position(|m| m.dim() != members[0].dim()) {
        return Err(Error::Shape(format!("member {bad} has a different dimension")));
    }

    let mut neighbours: Vec<Option<Vec<usize>>> = vec![None; current];
    let (lo, hi) = cfg.delta_range;
    let mut out = Vec::with_capacity(needed);
    for n in 0..needed {
        let base = n % current;
        if neighbours[base].is_none() {
            neighbours[base] = Some(knn(&members[base].values, members, cfg.k, Some(base))?);
        }
        let nn = neighbours[base].as_ref().expect("filled above");
        let neighbor = nn[rng.gen_range(0..nn.len())];
        let delta = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
        let vector = smote_sample(&members[base], &members[neighbor], delta)?;
        out.push(SyntheticSample {
            vector,
            base,
            neighbor,
            delta,
        });
    }
    Ok(out)
}

/// Writes a synthetic vector as a PNG and returns its record, attributed to
/// the corpus whose members it was interpolated from.
pub fn materialize(
    v: &FeatureVector,
    width: u32,
    height: u32,
    path: &Path,
    label: Grade,
    source: CorpusId,
) -> Result<(RgbImage, ImageRecord)> {
    let img = reshape(v, width, height)?;
    imageio::save_rgb(&img, path)?;
    Ok((
        img,
        ImageRecord {
            path: path.to_string_lossy().into_owned(),
            label,
            source,
            split: Split::Unassigned,
        },
    ))
}

/// Per-corpus explicit targets, keyed by corpus id. Loaded from TOML tables
/// such as `[aptos2019]` with one `Grade = count` entry per canonical grade.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TargetOverrides {
    pub by_corpus: BTreeMap<CorpusId, ClassDistribution>,
}

impl TargetOverrides {
    pub fn parse(text: &str) -> Result<Self> {
        let table: BTreeMap<String, BTreeMap<String, i64>> =
            toml::from_str(text).map_err(|e| Error::Config(format!("target overrides: {e}")))?;
        let mut by_corpus = BTreeMap::new();
        for (corpus, entries) in table {
            let id: CorpusId = corpus.parse()?;
            by_corpus.insert(id, parse_grade_map(&entries)?);
        }
        Ok(Self { by_corpus })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn policy_for(&self, corpus: CorpusId) -> TargetPolicy {
        match self.by_corpus.get(&corpus) {
            Some(d) => TargetPolicy::Explicit(*d),
            None => TargetPolicy::Mean,
        }
    }
}

/// Parses a flat `Grade = count` map; all five grades are required.
pub fn parse_grade_map(entries: &BTreeMap<String, i64>) -> Result<ClassDistribution> {
    let mut d = ClassDistribution::default();
    let mut seen = [false; NUM_CLASSES];
    for (k, &v) in entries {
        let g: Grade = k.parse()?;
        if v < 0 {
            return Err(invalid!("negative target for {g}"));
        }
        d.set(g, v as usize);
        seen[g.index()] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(invalid!("target map is missing grade {}", Grade::ALL[i]));
    }
    Ok(d)
}

/// Counts before and after balancing one corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceSummary {
    pub corpus: CorpusId,
    pub before: ClassDistribution,
    pub after: ClassDistribution,
}

/// Balances every source corpus of a manifest independently and writes the
/// synthetic images under `out_dir/<corpus>/<grade>/`.
///
/// Returns the input records plus one synthetic record per generated image.
pub fn balance_manifest(
    manifest: &DatasetManifest,
    overrides: &TargetOverrides,
    cfg: &SmoteConfig,
    space: &PixelSpace,
    out_dir: &Path,
) -> Result<(DatasetManifest, Vec<BalanceSummary>)> {
    let mut records = manifest.records.clone();
    let mut summaries = Vec::new();
    for corpus in manifest.sources() {
        let sub = manifest.filter_source(corpus);
        let before = sub.distribution();
        let targets = compute_targets(&before, &overrides.policy_for(corpus))?;
        for g in Grade::ALL {
            let need = targets.get(g) - before.get(g);
            if need == 0 {
                continue;
            }
            let mut members = Vec::with_capacity(before.get(g));
            for r in sub.records.iter().filter(|r| r.label == g) {
                let img = imageio::load_rgb(Path::new(&r.path))?;
                let mut v = space.encode(&img);
                v.source_record = Some(r.path.clone());
                members.push(v);
            }
            let mut rng = class_rng(cfg.seed, g, corpus as u64);
            let samples = balance_class(&members, targets.get(g), cfg, &mut rng)?;
            let dir: PathBuf = out_dir.join(corpus.as_str()).join(g.canonical_name());
            for (n, s) in samples.iter().enumerate() {
                let path = dir.join(format!("smote_{}_{}_{n:06}.png", corpus, g.canonical_name()));
                let (_, rec) = materialize(&s.vector, space.size, space.size, &path, g, corpus)?;
                records.push(rec);
            }
        }
        summaries.push(BalanceSummary {
            corpus,
            before,
            after: targets,
        });
    }
    let provenance = format!("{} | smote k={} seed={}", manifest.provenance, cfg.k, cfg.seed);
    Ok((DatasetManifest::new(records, provenance, manifest.seed)?, summaries))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector::new(v.to_vec(), Intensity::Raw)
    }

    #[test]
    fn mean_targets_idrid() {
        let d = CorpusId::Idrid.published_counts().unwrap();
        let t = compute_targets(&d, &TargetPolicy::Mean).unwrap();
        assert_eq!(t.counts(), [103, 168, 168, 103, 103]);
    }

    #[test]
    fn mean_targets_ddr() {
        let d = CorpusId::Ddr.published_counts().unwrap();
        let t = compute_targets(&d, &TargetPolicy::Mean).unwrap();
        assert_eq!(t.counts(), [2504, 4477, 6266, 2504, 2504]);
    }

    #[test]
    fn balanced_distribution_is_fixed_point() {
        let d = ClassDistribution::from_counts([100; 5]);
        assert_eq!(compute_targets(&d, &TargetPolicy::Mean).unwrap(), d);
    }

    #[test]
    fn explicit_target_below_count_is_rejected() {
        let d = ClassDistribution::from_counts([10, 10, 10, 10, 10]);
        let t = ClassDistribution::from_counts([10, 9, 10, 10, 10]);
        assert!(compute_targets(&d, &TargetPolicy::Explicit(t)).is_err());
    }

    #[test]
    fn knn_hand_case() {
        let pool = vec![fv(&[1.0, 0.0]), fv(&[2.0, 0.0]), fv(&[3.0, 0.0])];
        assert_eq!(knn(&[0.0, 0.0], &pool, 2, None).unwrap(), vec![0, 1]);
        assert_eq!(knn(&[2.0, 0.0], &pool, 1, None).unwrap(), vec![1]);
        assert!(knn(&[0.0, 0.0], &pool, 4, None).is_err());
        assert!(knn(&[0.0, 0.0], &pool, 3, Some(0)).is_err());
    }

    #[test]
    fn knn_ties_prefer_low_index() {
        let pool = vec![fv(&[1.0, 0.0]), fv(&[0.0, 1.0]), fv(&[-1.0, 0.0]), fv(&[0.0, -1.0])];
        assert_eq!(knn(&[0.0, 0.0], &pool, 2, None).unwrap(), vec![0, 1]);
        assert_eq!(knn(&[0.0, 0.0], &pool, 2, Some(0)).unwrap(), vec![1, 2]);
    }

    #[test]
    fn smote_sample_endpoints_and_hand_value() {
        let a = fv(&[0.0, 0.0]);
        let b = fv(&[2.0, 4.0]);
        assert_eq!(smote_sample(&a, &b, 0.0).unwrap().values, a.values);
        assert_eq!(smote_sample(&a, &b, 1.0).unwrap().values, b.values);
        assert_eq!(smote_sample(&a, &b, 0.25).unwrap().values, vec![0.5, 1.0]);
        assert!(smote_sample(&a, &fv(&[1.0]), 0.5).is_err());
        assert!(smote_sample(&a, &b, 1.5).is_err());
    }

    #[test]
    fn balance_class_counts_and_errors() {
        let members: Vec<FeatureVector> = (0..8).map(|i| fv(&[i as f64, 0.0])).collect();
        let cfg = SmoteConfig::default();
        let mut rng = class_rng(1, Grade::Mild, 0);
        assert!(balance_class(&members, 8, &cfg, &mut rng).unwrap().is_empty());
        let out = balance_class(&members, 20, &cfg, &mut rng).unwrap();
        assert_eq!(out.len(), 12);
        // round-robin bases
        assert_eq!(out.iter().map(|s| s.base).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4, 5, 6, 7, 0, 1, 2, 3]);
        assert!(balance_class(&members[..5], 20, &cfg, &mut rng).is_err());
        assert!(balance_class(&members, 3, &cfg, &mut rng).is_err());
    }

    #[test]
    fn balance_class_is_reproducible() {
        let members: Vec<FeatureVector> = (0..10).map(|i| fv(&[i as f64, (i * i) as f64])).collect();
        let cfg = SmoteConfig::default();
        let a = balance_class(&members, 40, &cfg, &mut class_rng(5, Grade::Severe, 2)).unwrap();
        let b = balance_class(&members, 40, &cfg, &mut class_rng(5, Grade::Severe, 2)).unwrap();
        assert_eq!(a, b);
        let c = balance_class(&members, 40, &cfg, &mut class_rng(6, Grade::Severe, 2)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn colinear_class_stays_on_segment() {
        let members: Vec<FeatureVector> = (0..10).map(|i| fv(&[i as f64, 2.0 * i as f64 + 1.0])).collect();
        let out = balance_class(&members, 200, &SmoteConfig::default(), &mut class_rng(0, Grade::Mild, 0)).unwrap();
        for s in &out {
            let (x, y) = (s.vector.values[0], s.vector.values[1]);
            assert!((y - (2.0 * x + 1.0)).abs() < 1e-9);
            assert!((0.0..=9.0).contains(&x));
        }
    }

    #[test]
    fn overrides_parse() {
        let text = "[aptos2019]\nMild = 733\nModerate = 999\nNo_DR = 1805\nProliferative_DR = 733\nSevere = 733\n";
        let o = TargetOverrides::parse(text).unwrap();
        assert_eq!(
            o.policy_for(CorpusId::Aptos2019),
            TargetPolicy::Explicit(ClassDistribution::from_counts([733, 999, 1805, 733, 733]))
        );
        assert_eq!(o.policy_for(CorpusId::Ddr), TargetPolicy::Mean);
        assert!(TargetOverrides::parse("[ddr]\nMild = 1\n").is_err());
    }

    #[test]
    fn reshape_checks_length() {
        let v = FeatureVector::new(vec![0.0; 11], Intensity::Byte);
        assert!(reshape(&v, 2, 2).is_err());
        let black = reshape(&FeatureVector::new(vec![0.0; 12], Intensity::Unit), 2, 2).unwrap();
        assert!(black.as_raw().iter().all(|&b| b == 0));
    }
}
