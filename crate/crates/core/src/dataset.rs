//! Corpus ingestion, manifests, merging and stratified splitting.
//!
//! A corpus on disk is a directory with one subdirectory per grade. Grade
//! directory names differ between public corpora, so each corpus carries an
//! alias map onto the canonical names below.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::error::{invalid, Error, Result};

/// Diabetic-retinopathy grade.
///
/// Variants are declared in alphabetical order of their canonical names;
/// the discriminant is the class index used by every model and report.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Grade {
    #[serde(rename = "Mild")]
    Mild,
    #[serde(rename = "Moderate")]
    Moderate,
    #[serde(rename = "No_DR")]
    NoDr,
    #[serde(rename = "Proliferative_DR")]
    ProliferativeDr,
    #[serde(rename = "Severe")]
    Severe,
}

pub const NUM_CLASSES: usize = 5;

impl Grade {
    /// Label order: alphabetical by canonical name.
    pub const ALL: [Grade; NUM_CLASSES] = [
        Grade::Mild,
        Grade::Moderate,
        Grade::NoDr,
        Grade::ProliferativeDr,
        Grade::Severe,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Grade> {
        Self::ALL.get(i).copied()
    }

    pub fn canonical_name(self) -> &'static str {
        match self {
            Grade::Mild => "Mild",
            Grade::Moderate => "Moderate",
            Grade::NoDr => "No_DR",
            Grade::ProliferativeDr => "Proliferative_DR",
            Grade::Severe => "Severe",
        }
    }

    /// Clinical severity, 0 (no DR) through 4 (proliferative).
    pub fn severity(self) -> u8 {
        match self {
            Grade::NoDr => 0,
            Grade::Mild => 1,
            Grade::Moderate => 2,
            Grade::Severe => 3,
            Grade::ProliferativeDr => 4,
        }
    }

    pub fn from_severity(level: u8) -> Option<Grade> {
        Self::ALL.iter().copied().find(|g| g.severity() == level)
    }
}

impl fmt::Display for Grade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.canonical_name())
    }
}

impl FromStr for Grade {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .trim()
            .chars()
            .filter(|c| !matches!(c, '_' | '-' | ' '))
            .collect::<String>()
            .to_ascii_lowercase();
        let g = match key.as_str() {
            "mild" | "milddr" => Grade::Mild,
            "moderate" | "moderatedr" => Grade::Moderate,
            "nodr" | "normal" | "none" => Grade::NoDr,
            "proliferativedr" | "proliferative" | "pdr" => Grade::ProliferativeDr,
            "severe" | "severedr" => Grade::Severe,
            _ => return Err(invalid!("unknown grade {s:?}")),
        };
        Ok(g)
    }
}

/// Source corpus of an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusId {
    #[serde(alias = "aptos")]
    Aptos2019,
    Ddr,
    Idrid,
    #[serde(alias = "messidor")]
    Messidor2,
    Retino,
    Eyepacs,
    #[serde(alias = "synth")]
    Synthetic,
}

impl CorpusId {
    pub const ALL: [CorpusId; 7] = [
        CorpusId::Aptos2019,
        CorpusId::Ddr,
        CorpusId::Idrid,
        CorpusId::Messidor2,
        CorpusId::Retino,
        CorpusId::Eyepacs,
        CorpusId::Synthetic,
    ];

    /// Corpora merged into the default hybrid dataset. EyePACS is recognised
    /// but left out.
    pub const HYBRID_DEFAULT: [CorpusId; 5] = [
        CorpusId::Aptos2019,
        CorpusId::Ddr,
        CorpusId::Idrid,
        CorpusId::Messidor2,
        CorpusId::Retino,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CorpusId::Aptos2019 => "aptos2019",
            CorpusId::Ddr => "ddr",
            CorpusId::Idrid => "idrid",
            CorpusId::Messidor2 => "messidor2",
            CorpusId::Retino => "retino",
            CorpusId::Eyepacs => "eyepacs",
            CorpusId::Synthetic => "synthetic",
        }
    }

    /// Per-grade image counts of the public release, in label order.
    pub fn published_counts(self) -> Option<ClassDistribution> {
        let c = match self {
            CorpusId::Aptos2019 => [370, 999, 1805, 295, 193],
            CorpusId::Ddr => [630, 4477, 6266, 913, 236],
            CorpusId::Idrid => [25, 168, 168, 62, 93],
            CorpusId::Messidor2 => [270, 347, 1017, 35, 75],
            CorpusId::Retino => [30, 480, 112, 265, 505],
            _ => return None,
        };
        Some(ClassDistribution::from_counts(c))
    }
}

impl fmt::Display for CorpusId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CorpusId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace(['_', '-', ' '], "");
        let id = match key.as_str() {
            "aptos2019" | "aptos" => CorpusId::Aptos2019,
            "ddr" => CorpusId::Ddr,
            "idrid" => CorpusId::Idrid,
            "messidor2" | "messidor" => CorpusId::Messidor2,
            "retino" => CorpusId::Retino,
            "eyepacs" => CorpusId::Eyepacs,
            "synthetic" | "synth" => CorpusId::Synthetic,
            _ => return Err(invalid!("unknown corpus id {s:?}")),
        };
        Ok(id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "unassigned" => Ok(Split::Unassigned),
            other => Err(invalid!("unknown split {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRecord {
    pub path: String,
    pub label: Grade,
    pub source: CorpusId,
    pub split: Split,
}

/// Per-grade counts, always carrying all five grades.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassDistribution {
    counts: [usize; NUM_CLASSES],
}

impl ClassDistribution {
    /// Counts given in label order (see [`Grade::ALL`]).
    pub fn from_counts(counts: [usize; NUM_CLASSES]) -> Self {
        Self { counts }
    }

    pub fn get(&self, g: Grade) -> usize {
        self.counts[g.index()]
    }

    pub fn set(&mut self, g: Grade, n: usize) {
        self.counts[g.index()] = n;
    }

    pub fn add(&mut self, g: Grade, n: usize) {
        self.counts[g.index()] += n;
    }

    pub fn counts(&self) -> [usize; NUM_CLASSES] {
        self.counts
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Grade, usize)> + '_ {
        Grade::ALL.iter().map(move |&g| (g, self.get(g)))
    }

    pub fn as_map(&self) -> BTreeMap<Grade, usize> {
        self.iter().collect()
    }
}

impl std::ops::Add for ClassDistribution {
    type Output = ClassDistribution;

    fn add(mut self, rhs: Self) -> Self {
        for (a, b) in self.counts.iter_mut().zip(rhs.counts) {
            *a += b;
        }
        self
    }
}

impl fmt::Display for ClassDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.iter().map(|(g, n)| format!("{g}:{n}")).collect();
        write!(f, "{{{}}}", parts.join(", "))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<ImageRecord>,
    pub provenance: String,
    pub seed: u64,
}

const MANIFEST_MAGIC: &str = "# drfuse-manifest v1";
const MANIFEST_COLUMNS: &str = "path\tlabel\tsource\tsplit";

impl DatasetManifest {
    pub fn new(records: Vec<ImageRecord>, provenance: impl Into<String>, seed: u64) -> Result<Self> {
        let m = Self {
            records,
            provenance: provenance.into(),
            seed,
        };
        m.check_unique_paths()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn distribution(&self) -> ClassDistribution {
        let mut d = ClassDistribution::default();
        for r in &self.records {
            d.add(r.label, 1);
        }
        d
    }

    pub fn split_distribution(&self, split: Split) -> ClassDistribution {
        let mut d = ClassDistribution::default();
        for r in self.records.iter().filter(|r| r.split == split) {
            d.add(r.label, 1);
        }
        d
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn sources(&self) -> Vec<CorpusId> {
        let mut s: Vec<CorpusId> = self.records.iter().map(|r| r.source).collect();
        s.sort();
        s.dedup();
        s
    }

    /// Sub-manifest of one source corpus.
    pub fn filter_source(&self, source: CorpusId) -> DatasetManifest {
        DatasetManifest {
            records: self.records.iter().filter(|r| r.source == source).cloned().collect(),
            provenance: format!("{} | source={source}", self.provenance),
            seed: self.seed,
        }
    }

    fn check_unique_paths(&self) -> Result<()> {
        let mut seen: HashMap<&str, CorpusId> = HashMap::with_capacity(self.records.len());
        for r in &self.records {
            if let Some(first) = seen.insert(r.path.as_str(), r.source) {
                return Err(Error::DuplicatePath {
                    path: r.path.clone(),
                    first: first.to_string(),
                    second: r.source.to_string(),
                });
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> Result<String> {
        let mut out = String::new();
        out.push_str(MANIFEST_MAGIC);
        out.push('\n');
        out.push_str(&format!("# seed: {}\n", self.seed));
        out.push_str(&format!("# provenance: {}\n", escape(&self.provenance)));
        out.push_str(&format!("# records: {}\n", self.records.len()));
        out.push_str(MANIFEST_COLUMNS);
        out.push('\n');
        for r in &self.records {
            if r.path.contains(['\t', '\n']) {
                return Err(invalid!("record path contains a tab or newline: {:?}", r.path));
            }
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                r.path,
                r.label.canonical_name(),
                r.source,
                r.split.as_str()
            ));
        }
        Ok(out)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut seed = None;
        let mut provenance = String::new();
        let mut records = Vec::new();
        let mut saw_magic = false;
        let mut saw_columns = false;
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if i == 0 {
                if line.trim() != MANIFEST_MAGIC {
                    return Err(Error::ManifestParse {
                        line: lineno,
                        msg: "missing manifest header".into(),
                    });
                }
                saw_magic = true;
                continue;
            }
            if let Some(rest) = line.strip_prefix("# ") {
                if let Some(v) = rest.strip_prefix("seed: ") {
                    seed = Some(v.trim().parse::<u64>().map_err(|e| Error::ManifestParse {
                        line: lineno,
                        msg: format!("bad seed: {e}"),
                    })?);
                } else if let Some(v) = rest.strip_prefix("provenance: ") {
                    provenance = unescape(v);
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            if !saw_columns {
                if line != MANIFEST_COLUMNS {
                    return Err(Error::ManifestParse {
                        line: lineno,
                        msg: "expected column header".into(),
                    });
                }
                saw_columns = true;
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(Error::ManifestParse {
                    line: lineno,
                    msg: format!("expected 4 columns, found {}", cols.len()),
                });
            }
            let perr = |e: Error| Error::ManifestParse {
                line: lineno,
                msg: e.to_string(),
            };
            records.push(ImageRecord {
                path: cols[0].to_string(),
                label: cols[1].parse().map_err(perr)?,
                source: cols[2].parse().map_err(perr)?,
                split: cols[3].parse().map_err(perr)?,
            });
        }
        if !saw_magic {
            return Err(Error::ManifestParse {
                line: 1,
                msg: "empty manifest".into(),
            });
        }
        let seed = seed.ok_or(Error::ManifestParse {
            line: 2,
            msg: "missing seed".into(),
        })?;
        DatasetManifest::new(records, provenance, seed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let text = self.to_text()?;
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        w.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut text = String::new();
        for line in BufReader::new(f).lines() {
            text.push_str(&line.map_err(|e| Error::io(path, e))?);
            text.push('\n');
        }
        Self::parse(&text)
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\n', "\\n")
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('n') => out.push('\n'),
                Some(other) => out.push(other),
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

/// How a corpus maps its directory layout onto grades.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ScanOptions {
    /// Directory name → grade, consulted before the canonical names.
    #[serde(default)]
    pub aliases: BTreeMap<String, Grade>,
    /// File names (or root-relative paths) to skip, e.g. unlabeled images.
    #[serde(default)]
    pub exclude: Vec<String>,
}

impl ScanOptions {
    fn grade_for_dir(&self, name: &str) -> Option<Grade> {
        if let Some(&g) = self.aliases.get(name) {
            return Some(g);
        }
        Grade::ALL
            .iter()
            .copied()
            .find(|g| g.canonical_name().eq_ignore_ascii_case(name))
    }
}

#[derive(Clone, Debug)]
pub struct ScanReport {
    pub manifest: DatasetManifest,
    /// Grades with no directory under the root.
    pub missing_grades: Vec<Grade>,
    /// Files that looked like images but could not be read.
    pub unreadable: Vec<(String, String)>,
    pub excluded: usize,
}

pub const IMAGE_EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "tif", "tiff", "bmp"];

pub fn is_image_path(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Builds a manifest from a directory-per-grade tree.
///
/// A missing grade directory is a warning (zero count); files that cannot be
/// decoded are listed in the report and skipped.
pub fn scan_corpus(root: &Path, source: CorpusId, opts: &ScanOptions) -> Result<ScanReport> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "corpus root is not a directory"),
        ));
    }
    let mut grade_dirs: Vec<(Grade, PathBuf)> = Vec::new();
    let mut entries: Vec<_> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .collect();
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let p = entry.path();
        if !p.is_dir() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        match opts.grade_for_dir(&name) {
            Some(g) => grade_dirs.push((g, p)),
            None => log::warn!("{source}: ignoring unrecognised directory {}", p.display()),
        }
    }

    let mut missing_grades = Vec::new();
    for g in Grade::ALL {
        if !grade_dirs.iter().any(|(dg, _)| *dg == g) {
            log::warn!("{source}: no directory for grade {g} under {}", root.display());
            missing_grades.push(g);
        }
    }

    let mut records = Vec::new();
    let mut unreadable = Vec::new();
    let mut excluded = 0;
    for (grade, dir) in &grade_dirs {
        for entry in WalkDir::new(dir).sort_by_file_name() {
            let entry = entry.map_err(|e| {
                let path = e.path().map(Path::to_path_buf).unwrap_or_else(|| dir.clone());
                Error::io(path, std::io::Error::other(e.to_string()))
            })?;
            let p = entry.path();
            if !entry.file_type().is_file() || !is_image_path(p) {
                continue;
            }
            let rel = p.strip_prefix(root).unwrap_or(p).to_string_lossy().into_owned();
            let fname = p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
            if opts.exclude.iter().any(|x| *x == fname || *x == rel) {
                excluded += 1;
                continue;
            }
            let path_str = p.to_string_lossy().into_owned();
            match image_header_ok(p) {
                Ok(()) => records.push(ImageRecord {
                    path: path_str,
                    label: *grade,
                    source,
                    split: Split::Unassigned,
                }),
                Err(msg) => unreadable.push((path_str, msg)),
            }
        }
    }
    records.sort_by(|a, b| a.path.cmp(&b.path));
    let provenance = format!("scan {source} root={}", root.display());
    let manifest = DatasetManifest::new(records, provenance, 0)?;
    Ok(ScanReport {
        manifest,
        missing_grades,
        unreadable,
        excluded,
    })
}

fn image_header_ok(p: &Path) -> std::result::Result<(), String> {
    let reader = image::ImageReader::open(p)
        .map_err(|e| e.to_string())?
        .with_guessed_format()
        .map_err(|e| e.to_string())?;
    let (w, h) = reader.into_dimensions().map_err(|e| e.to_string())?;
    if w == 0 || h == 0 {
        return Err("zero-sized image".into());
    }
    Ok(())
}

/// Union of manifests. Paths must be unique across all inputs.
pub fn merge(manifests: &[DatasetManifest]) -> Result<DatasetManifest> {
    if manifests.is_empty() {
        return Err(invalid!("merge needs at least one manifest"));
    }
    let records: Vec<ImageRecord> = manifests.iter().flat_map(|m| m.records.iter().cloned()).collect();
    let provenance = format!(
        "merge of {} manifests [{}]",
        manifests.len(),
        manifests
            .iter()
            .map(|m| m.provenance.as_str())
            .collect::<Vec<_>>()
            .join("; ")
    );
    DatasetManifest::new(records, provenance, manifests[0].seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let r = Self { train, val, test };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(invalid!("split ratios must be non-negative: {parts:?}"));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(invalid!("split ratios must sum to 1, got {sum}"));
        }
        Ok(())
    }

    fn positive_parts(&self) -> usize {
        [self.train, self.val, self.test].iter().filter(|p| **p > 0.0).count()
    }
}

impl FromStr for SplitRatios {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|e| invalid!("bad ratio {p:?}: {e}")))
            .collect::<Result<_>>()?;
        if parts.len() != 3 {
            return Err(invalid!("expected three comma-separated ratios, got {s:?}"));
        }
        SplitRatios::new(parts[0], parts[1], parts[2])
    }
}

/// Per-class (val, test) sizes for a class of `n` records.
pub fn split_sizes(n: usize, ratios: &SplitRatios) -> (usize, usize) {
    let want = |r: f64| -> usize {
        let c = (n as f64 * r).round() as usize;
        if r > 0.0 && c == 0 && n >= ratios.positive_parts() {
            1
        } else {
            c
        }
    };
    let test = want(ratios.test).min(n);
    let mut val = want(ratios.val).min(n - test);
    if ratios.train > 0.0 && n - test - val == 0 && val > 0 && n >= ratios.positive_parts() {
        val -= 1;
    }
    (val, test)
}

fn class_seed(seed: u64, g: Grade) -> u64 {
    seed ^ (g.index() as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Deterministic per-class stratified split.
///
/// Within each grade, records are ordered by path and shuffled with a stream
/// keyed by `(seed, grade)`, so the assignment does not depend on record order
/// in the input manifest.
pub fn split(manifest: &DatasetManifest, ratios: &SplitRatios, seed: u64) -> Result<DatasetManifest> {
    ratios.validate()?;
    let dist = manifest.distribution();
    let needed = ratios.positive_parts();
    let short: Vec<String> = dist
        .iter()
        .filter(|&(_, n)| n > 0 && n < needed)
        .map(|(g, n)| format!("{g} ({n} records)"))
        .collect();
    if !short.is_empty() {
        return Err(invalid!(
            "classes too small for a {needed}-way split: {}",
            short.join(", ")
        ));
    }

    let mut out = manifest.clone();
    for g in Grade::ALL {
        let mut idx: Vec<usize> = (0..out.records.len()).filter(|&i| out.records[i].label == g).collect();
        if idx.is_empty() {
            continue;
        }
        idx.sort_by(|&a, &b| out.records[a].path.cmp(&out.records[b].path));
        let mut rng = ChaCha8Rng::seed_from_u64(class_seed(seed, g));
        idx.shuffle(&mut rng);
        let (n_val, n_test) = split_sizes(idx.len(), ratios);
        for (pos, &i) in idx.iter().enumerate() {
            out.records[i].split = if pos < n_test {
                Split::Test
            } else if pos < n_test + n_val {
                Split::Val
            } else {
                Split::Train
            };
        }
    }
    out.seed = seed;
    out.provenance = format!(
        "{} | split {}/{}/{} seed={seed}",
        manifest.provenance, ratios.train, ratios.val, ratios.test
    );
    Ok(out)
}

/// Per-grade counts the merged five-corpus dataset is stated to have, in
/// label order.
pub const STATED_HYBRID_COUNTS: [usize; NUM_CLASSES] = [3967, 4194, 9534, 3967, 6473];

/// Relative tolerance when matching a derived count against a stated one.
pub const HYBRID_MATCH_TOLERANCE: f64 = 1e-3;

/// Derived hybrid counts compared with [`STATED_HYBRID_COUNTS`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridCheck {
    pub derived: ClassDistribution,
    pub stated: ClassDistribution,
    /// Grades whose derived count differs from the stated one.
    pub mismatched: Vec<Grade>,
    /// Grade pairs whose stated counts match each other's derived counts.
    pub transposed: Vec<(Grade, Grade)>,
}

impl HybridCheck {
    pub fn is_consistent(&self) -> bool {
        self.mismatched.is_empty()
    }

    /// One line per finding; empty when the counts agree.
    pub fn notes(&self) -> Vec<String> {
        let mut notes = Vec::new();
        for &(a, b) in &self.transposed {
            notes.push(format!(
                "{a}/{b} transposed: derived {a} {} and {b} {}, stated {a} {} and {b} {}",
                self.derived.get(a),
                self.derived.get(b),
                self.stated.get(a),
                self.stated.get(b)
            ));
        }
        for &g in &self.mismatched {
            if !self.transposed.iter().any(|&(a, b)| a == g || b == g) {
                notes.push(format!("{g}: derived {} vs stated {}", self.derived.get(g), self.stated.get(g)));
            }
        }
        notes
    }
}

fn near(a: usize, b: usize) -> bool {
    (a as f64 - b as f64).abs() <= HYBRID_MATCH_TOLERANCE * a.max(b) as f64
}

/// Compares a merged distribution against the stated hybrid counts and
/// flags pairs of grades whose counts look swapped.
pub fn check_hybrid(derived: &ClassDistribution) -> HybridCheck {
    let stated = ClassDistribution::from_counts(STATED_HYBRID_COUNTS);
    let mismatched: Vec<Grade> = Grade::ALL.into_iter().filter(|&g| derived.get(g) != stated.get(g)).collect();
    let mut transposed = Vec::new();
    for (i, &a) in mismatched.iter().enumerate() {
        for &b in &mismatched[i + 1..] {
            if near(derived.get(a), stated.get(b)) && near(derived.get(b), stated.get(a)) {
                transposed.push((a, b));
            }
        }
    }
    HybridCheck {
        derived: *derived,
        stated,
        mismatched,
        transposed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(path: &str, label: Grade, source: CorpusId) -> ImageRecord {
        ImageRecord {
            path: path.into(),
            label,
            source,
            split: Split::Unassigned,
        }
    }

    fn single_class(n: usize) -> DatasetManifest {
        let records = (0..n)
            .map(|i| rec(&format!("img/{i:05}.png"), Grade::Moderate, CorpusId::Synthetic))
            .collect();
        DatasetManifest::new(records, "test", 0).unwrap()
    }

    #[test]
    fn grade_order_is_alphabetical() {
        let names: Vec<&str> = Grade::ALL.iter().map(|g| g.canonical_name()).collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
        assert_eq!(Grade::from_severity(0), Some(Grade::NoDr));
        assert_eq!(Grade::from_severity(4), Some(Grade::ProliferativeDr));
    }

    #[test]
    fn grade_parses_common_spellings() {
        assert_eq!("No_DR".parse::<Grade>().unwrap(), Grade::NoDr);
        assert_eq!("NoDR".parse::<Grade>().unwrap(), Grade::NoDr);
        assert_eq!("PDR".parse::<Grade>().unwrap(), Grade::ProliferativeDr);
        assert!("grade7".parse::<Grade>().is_err());
    }

    #[test]
    fn manifest_text_round_trip() {
        let mut m = single_class(3);
        m.provenance = "line one\nline two".into();
        m.seed = 17;
        m.records[1].split = Split::Val;
        let text = m.to_text().unwrap();
        let back = DatasetManifest::parse(&text).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn manifest_rejects_duplicate_paths() {
        let records = vec![
            rec("a.png", Grade::Mild, CorpusId::Ddr),
            rec("a.png", Grade::Severe, CorpusId::Idrid),
        ];
        let err = DatasetManifest::new(records, "", 0).unwrap_err();
        assert!(matches!(err, Error::DuplicatePath { .. }));
    }

    #[test]
    fn merge_duplicate_names_both_sources() {
        let a = DatasetManifest::new(vec![rec("x.png", Grade::Mild, CorpusId::Ddr)], "a", 0).unwrap();
        let b = DatasetManifest::new(vec![rec("x.png", Grade::Mild, CorpusId::Retino)], "b", 0).unwrap();
        let msg = merge(&[a, b]).unwrap_err().to_string();
        assert!(msg.contains("ddr") && msg.contains("retino"), "{msg}");
    }

    #[test]
    fn merge_of_one_is_identity_on_counts() {
        let m = single_class(7);
        assert_eq!(merge(std::slice::from_ref(&m)).unwrap().distribution(), m.distribution());
        assert!(merge(&[]).is_err());
    }

    #[test]
    fn split_exact_ratio_on_1000() {
        let m = single_class(1000);
        let s = split(&m, &SplitRatios::default(), 3).unwrap();
        let sizes = [Split::Train, Split::Val, Split::Test].map(|sp| s.records_in(sp).count());
        assert_eq!(sizes, [800, 100, 100]);
    }

    #[test]
    fn split_is_deterministic_and_order_independent() {
        let m = single_class(101);
        let a = split(&m, &SplitRatios::default(), 9).unwrap();
        let b = split(&m, &SplitRatios::default(), 9).unwrap();
        assert_eq!(a, b);

        let mut reversed = m.clone();
        reversed.records.reverse();
        let c = split(&reversed, &SplitRatios::default(), 9).unwrap();
        let lookup: HashMap<_, _> = a.records.iter().map(|r| (r.path.clone(), r.split)).collect();
        assert!(c.records.iter().all(|r| lookup[&r.path] == r.split));

        let d = split(&m, &SplitRatios::default(), 10).unwrap();
        assert_ne!(a, d);
    }

    #[test]
    fn split_rejects_tiny_class() {
        let m = single_class(2);
        let msg = split(&m, &SplitRatios::default(), 0).unwrap_err().to_string();
        assert!(msg.contains("Moderate"), "{msg}");
        // two-way split of two records is fine
        let two_way = SplitRatios::new(0.5, 0.0, 0.5).unwrap();
        assert!(split(&m, &two_way, 0).is_ok());
    }

    #[test]
    fn split_sizes_small_classes_get_every_part() {
        let r = SplitRatios::default();
        assert_eq!(split_sizes(3, &r), (1, 1));
        assert_eq!(split_sizes(10, &r), (1, 1));
        assert_eq!(split_sizes(15, &r), (2, 2));
        assert_eq!(split_sizes(3967, &r), (397, 397));
    }

    #[test]
    fn ratios_validation() {
        assert!("0.8,0.1,0.1".parse::<SplitRatios>().is_ok());
        assert!("0.8,0.1".parse::<SplitRatios>().is_err());
        assert!("0.8,0.3,0.1".parse::<SplitRatios>().is_err());
        assert!("1.2,-0.1,-0.1".parse::<SplitRatios>().is_err());
    }

    #[test]
    fn distribution_display_lists_all_grades() {
        let d = ClassDistribution::from_counts([1, 2, 3, 4, 5]);
        assert_eq!(
            d.to_string(),
            "{Mild:1, Moderate:2, No_DR:3, Proliferative_DR:4, Severe:5}"
        );
        assert_eq!(d.total(), 15);
    }

    #[test]
    fn hybrid_check_flags_swapped_grades() {
        let derived = ClassDistribution::from_counts([3967, 6471, 9534, 3967, 4194]);
        let c = check_hybrid(&derived);
        assert_eq!(c.mismatched, vec![Grade::Moderate, Grade::Severe]);
        assert_eq!(c.transposed, vec![(Grade::Moderate, Grade::Severe)]);
        assert_eq!(c.notes().len(), 1);
        assert!(c.notes()[0].contains("transposed"));
        let ok = check_hybrid(&ClassDistribution::from_counts(STATED_HYBRID_COUNTS));
        assert!(ok.is_consistent() && ok.notes().is_empty());
        let off = check_hybrid(&ClassDistribution::from_counts([3000, 4194, 9534, 3967, 6473]));
        assert!(off.transposed.is_empty());
        assert_eq!(off.notes(), vec!["Mild: derived 3000 vs stated 3967".to_string()]);
    }
}
