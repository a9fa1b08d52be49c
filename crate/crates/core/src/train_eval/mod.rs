//! Mini-batch training with best-epoch checkpointing, and the evaluation
//! suite: confusion matrix, per-class and averaged metrics, ROC and AUC.

pub mod metrics;
pub mod plot;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use metrics::{argmax, auc, confusion, metrics, roc_curve, Averaged, ClassMetrics, Confusion, Metrics};
use plot::{auto_range, line_chart, Series, PALETTE};

use crate::dataset::{DatasetManifest, Grade, Split, NUM_CLASSES};
use crate::enhance::{normalize_resize_to, EnhancedTensor, Interpolation};
use crate::error::{invalid, Error, Result};
use crate::imageio;
use crate::models::TrainedModel;
use crate::nn::{self, softmax_cross_entropy, softmax_rows, Adam, Ctx, Layer, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f32,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Batch size for validation and prediction passes.
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            learning_rate: 1e-5,
            epochs: 60,
            seed: 0,
            optimizer: Optimizer::Adam,
            eval_batch_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        Ok(())
    }
}

/// Images and labels held in memory as one flat `n × s × s × 3` buffer.
#[derive(Clone, Debug, Default)]
pub struct LabeledSet {
    pub size: usize,
    pub inputs: Vec<f32>,
    pub labels: Vec<usize>,
    pub paths: Vec<String>,
}

impl LabeledSet {
    pub fn new(size: usize) -> Self {
        Self {
            size,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, t: &EnhancedTensor, label: usize, path: impl Into<String>) -> Result<()> {
        if t.size != self.size {
            return Err(Error::Shape(format!("image is {0}x{0}, set holds {1}x{1}", t.size, self.size)));
        }
        if label >= NUM_CLASSES {
            return Err(invalid!("label {label} outside 0..{NUM_CLASSES}"));
        }
        self.inputs.extend_from_slice(&t.data);
        self.labels.push(label);
        self.paths.push(path.into());
        Ok(())
    }

    pub fn item(&self, i: usize) -> &[f32] {
        let l = self.size * self.size * 3;
        &self.inputs[i * l..(i + 1) * l]
    }

    pub fn image(&self, i: usize) -> EnhancedTensor {
        EnhancedTensor {
            size: self.size,
            data: self.item(i).to_vec(),
        }
    }

    pub fn batch(&self, idx: &[usize]) -> Tensor {
        let items: Vec<&[f32]> = idx.iter().map(|&i| self.item(i)).collect();
        Tensor::stack(&items, &[self.size, self.size, 3])
    }

    /// Loads every record of `split`, resizing to `size` when needed.
    pub fn from_manifest(manifest: &DatasetManifest, split: Split, size: usize) -> Result<Self> {
        let mut set = Self::new(size);
        for r in manifest.records_in(split) {
            let img = imageio::load_rgb(Path::new(&r.path))?;
            let t = if img.dimensions() == (size as u32, size as u32) {
                EnhancedTensor::from_image(&img)?
            } else {
                normalize_resize_to(&img, size as u32, Interpolation::Bilinear)
            };
            set.push(&t, r.label.index(), r.path.clone())?;
        }
        Ok(set)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochStats>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
}

impl History {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn best(&self) -> Option<&EpochStats> {
        self.epochs.get(self.best_epoch.checked_sub(1)?)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,train_accuracy,val_loss,val_accuracy,seconds\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.2}\n",
                e.epoch, e.train_loss, e.train_accuracy, e.val_loss, e.val_accuracy, e.seconds
            ));
        }
        s
    }
}

/// Softmax probabilities for every item of the set.
pub fn predict_set(model: &TrainedModel, set: &LabeledSet, batch: usize) -> Result<Tensor> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut data = Vec::with_capacity(set.len() * NUM_CLASSES);
    for chunk in idx.chunks(batch.max(1)) {
        data.extend(model.predict(&set.batch(chunk))?.data);
    }
    Ok(Tensor::new(vec![set.len(), NUM_CLASSES], data))
}

fn loss_and_accuracy(model: &TrainedModel, set: &LabeledSet, batch: usize) -> Result<(f64, f64)> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let (mut loss, mut correct) = (0.0, 0usize);
    for chunk in idx.chunks(batch.max(1)) {
        let labels: Vec<usize> = chunk.iter().map(|&i| set.labels[i]).collect();
        let logits = model.logits(&set.batch(chunk))?;
        loss += softmax_cross_entropy(&logits, &labels).0 * chunk.len() as f64;
        correct += (0..chunk.len()).filter(|&i| argmax(logits.item(i)) == labels[i]).count();
    }
    Ok((loss / set.len() as f64, correct as f64 / set.len() as f64))
}

/// Trains with categorical cross-entropy and Adam, evaluating on `val` after
/// each epoch; the weights of the best validation-accuracy epoch are restored
/// at the end (and written to `checkpoint` when given).
pub fn train(
    mut model: TrainedModel,
    train_set: &LabeledSet,
    val_set: &LabeledSet,
    cfg: &TrainConfig,
    checkpoint: Option<(&Path, &str)>,
) -> Result<(TrainedModel, History)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(invalid!("training split is empty"));
    }
    if val_set.is_empty() {
        return Err(invalid!("validation split is empty"));
    }
    for s in [train_set, val_set] {
        if s.size != model.input_size() {
            return Err(Error::Shape(format!(
                "data is {0}x{0}, model expects {1}x{1}",
                s.size,
                model.input_size()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = History::default();
    let mut best: Option<(f64, Vec<u8>)> = None;
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        let start = std::time::Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set.labels[i]).collect();
            let mut ctx = Ctx::training(cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(step));
            let logits = model.net.forward(train_set.batch(chunk), &mut ctx);
            let (loss, g) = softmax_cross_entropy(&logits, &labels);
            if !loss.is_finite() {
                return Err(Error::Stage {
                    stage: "train".into(),
                    msg: format!("loss diverged at epoch {epoch}"),
                });
            }
            loss_sum += loss * chunk.len() as f64;
            correct += (0..chunk.len()).filter(|&i| argmax(logits.item(i)) == labels[i]).count();
            model.net.backward(g, &mut ctx);
            adam.step(&mut model.net, ctx.grads());
            ctx.apply_stat_updates(&mut model.net);
            step += 1;
        }
        let (val_loss, val_accuracy) = loss_and_accuracy(&model, val_set, cfg.eval_batch_size)?;
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_accuracy: correct as f64 / train_set.len() as f64,
            val_loss,
            val_accuracy,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}/{}: loss {:.4} acc {:.4} val_loss {:.4} val_acc {:.4} ({:.1}s)",
            cfg.epochs,
            stats.train_loss,
            stats.train_accuracy,
            val_loss,
            val_accuracy,
            stats.seconds
        );
        history.epochs.push(stats);
        if best.as_ref().is_none_or(|(acc, _)| val_accuracy > *acc) {
            best = Some((val_accuracy, nn::save_weights(&model.net)));
            history.best_epoch = epoch;
            if let Some((dir, hash)) = checkpoint {
                model.save(dir, hash)?;
            }
        }
    }
    if let Some((_, bytes)) = best {
        nn::load_weights(&mut model.net, &bytes)?;
    }
    Ok((model, history))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub accuracy: f64,
    /// Macro averages.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Mean of the defined per-class one-vs-rest AUCs.
    pub auc: f64,
    pub micro: Averaged,
    pub weighted: Averaged,
    pub confusion: Confusion,
    pub per_class: Vec<ClassMetrics>,
    /// `None` for classes absent from (or covering all of) the evaluated set.
    pub per_class_roc: Vec<Option<Vec<(f64, f64)>>>,
    pub per_class_auc: Vec<Option<f64>>,
}

/// Full report from per-sample class probabilities.
pub fn report_from_scores(probs: &Tensor, labels: &[usize]) -> Result<MetricsReport> {
    let (n, k) = probs.dims2();
    if n == 0 {
        return Err(invalid!("no samples to evaluate"));
    }
    if labels.len() != n {
        return Err(invalid!("{n} score rows but {} labels", labels.len()));
    }
    let preds: Vec<usize> = (0..n).map(|i| argmax(probs.item(i))).collect();
    let conf = confusion(labels, &preds, k)?;
    let m = metrics(&conf)?;
    let mut rocs = Vec::with_capacity(k);
    let mut aucs = Vec::with_capacity(k);
    for c in 0..k {
        let scores: Vec<f64> = (0..n).map(|i| probs.item(i)[c] as f64).collect();
        let bin: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        match roc_curve(&scores, &bin) {
            Ok(curve) => {
                aucs.push(Some(auc(&curve)));
                rocs.push(Some(curve));
            }
            Err(_) => {
                log::warn!("class {c}: ROC undefined on this set");
                aucs.push(None);
                rocs.push(None);
            }
        }
    }
    let defined: Vec<f64> = aucs.iter().flatten().copied().collect();
    let macro_auc = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    Ok(MetricsReport {
        n,
        accuracy: m.accuracy,
        precision: m.macro_avg.precision,
        recall: m.macro_avg.recall,
        f1: m.macro_avg.f1,
        auc: macro_auc,
        micro: m.micro_avg,
        weighted: m.weighted_avg,
        confusion: conf,
        per_class: m.per_class,
        per_class_roc: rocs,
        per_class_auc: aucs,
    })
}

pub fn evaluate(model: &TrainedModel, set: &LabeledSet, batch: usize) -> Result<MetricsReport> {
    if set.is_empty() {
        return Err(invalid!("test split is empty"));
    }
    let probs = predict_set(model, set, batch)?;
    report_from_scores(&probs, &set.labels)
}

/// Pre-softmax logits turned into probabilities, exposed for callers that
/// already hold logits.
pub fn probabilities(logits: &Tensor) -> Tensor {
    softmax_rows(logits)
}

fn write(path: &Path, text: &str) -> Result<PathBuf> {
    imageio::write_text(path, text)?;
    Ok(path.to_path_buf())
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let mut row = |k: &str, v: f64| s.push_str(&format!("{k},{v:.6}\n"));
        row("samples", self.n as f64);
        row("accuracy", self.accuracy);
        row("precision_macro", self.precision);
        row("recall_macro", self.recall);
        row("f1_macro", self.f1);
        row("auc_macro", self.auc);
        row("precision_micro", self.micro.precision);
        row("recall_micro", self.micro.recall);
        row("f1_micro", self.micro.f1);
        row("precision_weighted", self.weighted.precision);
        row("recall_weighted", self.weighted.recall);
        row("f1_weighted", self.weighted.f1);
        for (g, c) in Grade::ALL.iter().zip(&self.per_class) {
            let n = g.canonical_name();
            row(&format!("precision[{n}]"), c.precision);
            row(&format!("recall[{n}]"), c.recall);
            row(&format!("f1[{n}]"), c.f1);
            row(&format!("support[{n}]"), c.support as f64);
        }
        for (g, a) in Grade::ALL.iter().zip(&self.per_class_auc) {
            if let Some(a) = a {
                row(&format!("auc[{}]", g.canonical_name()), *a);
            }
        }
        s
    }

    /// Writes metrics.csv, confusion.csv, roc_<grade>.csv and roc.png.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let names: Vec<&str> = Grade::ALL.iter().map(|g| g.canonical_name()).collect();
        let mut out = vec![
            write(&dir.join("metrics.csv"), &self.to_csv())?,
            write(&dir.join("confusion.csv"), &self.confusion.to_csv(&names))?,
        ];
        let mut series = Vec::new();
        for (i, (g, roc)) in Grade::ALL.iter().zip(&self.per_class_roc).enumerate() {
            let Some(curve) = roc else { continue };
            let mut text = String::from("fpr,tpr\n");
            for (x, y) in curve {
                text.push_str(&format!("{x:.6},{y:.6}\n"));
            }
            out.push(write(&dir.join(format!("roc_{}.csv", g.canonical_name())), &text)?);
            series.push(Series {
                points: curve.clone(),
                color: PALETTE[i % PALETTE.len()],
            });
        }
        series.push(Series {
            points: vec![(0.0, 0.0), (1.0, 1.0)],
            color: [170, 170, 170],
        });
        let p = dir.join("roc.png");
        imageio::save_rgb(&line_chart(&series, 360, 360, (0.0, 1.0), (0.0, 1.0)), &p)?;
        out.push(p);
        Ok(out)
    }
}

/// Writes history.csv plus loss.png and accuracy.png (train then val series).
pub fn write_history(history: &History, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = vec![write(&dir.join("history.csv"), &history.to_csv())?];
    let pts = |f: fn(&EpochStats) -> f64| history.epochs.iter().map(|e| (e.epoch as f64, f(e))).collect::<Vec<_>>();
    for (file, train, val) in [
        ("loss.png", pts(|e| e.train_loss), pts(|e| e.val_loss)),
        ("accuracy.png", pts(|e| e.train_accuracy), pts(|e| e.val_accuracy)),
    ] {
        let series = vec![
            Series {
                points: train,
                color: PALETTE[0],
            },
            Series {
                points: val,
                color: PALETTE[1],
            },
        ];
        let img = line_chart(&series, 480, 320, auto_range(&series, 0), auto_range(&series, 1));
        let p = dir.join(file);
        imageio::save_rgb(&img, &p)?;
        out.push(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
