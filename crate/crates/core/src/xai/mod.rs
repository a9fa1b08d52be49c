//! Class activation maps: Grad-CAM, Grad-CAM++, LayerCAM, Score-CAM and
//! Faster Score-CAM, plus overlays, comparison grids and a deletion check.
//!
//! Gradient methods differentiate the pre-softmax class score. Score-CAM
//! scores masked inputs by softmax confidence.

mod render;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::enhance::{resize_f32_bilinear, EnhancedTensor};
use crate::error::{invalid, Error, Result};
use crate::models::TrainedModel;
use crate::nn::{softmax_rows, Ctx, Layer, Tensor};
use crate::train_eval::argmax;

pub use render::{comparison_grid, jet, overlay, write_explanation, ComparisonGrid, GridCell, GridRow};

/// Side length of every upsampled heatmap.
pub const HEATMAP_SIZE: usize = 128;
/// Faster Score-CAM channel budget when none is given.
pub const DEFAULT_FASTER_CHANNELS: usize = 10;
/// Guard for the Grad-CAM++ denominator and the Score-CAM mask range.
pub const EPS: f64 = 1e-8;

const SCORE_CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CamMethod {
    #[serde(rename = "gradcam")]
    GradCam,
    #[serde(rename = "gradcampp")]
    GradCamPp,
    #[serde(rename = "layercam")]
    LayerCam,
    #[serde(rename = "scorecam")]
    ScoreCam,
    #[serde(rename = "faster_scorecam")]
    FasterScoreCam,
}

impl CamMethod {
    pub const ALL: [CamMethod; 5] = [
        CamMethod::GradCam,
        CamMethod::GradCamPp,
        CamMethod::LayerCam,
        CamMethod::ScoreCam,
        CamMethod::FasterScoreCam,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CamMethod::GradCam => "gradcam",
            CamMethod::GradCamPp => "gradcampp",
            CamMethod::LayerCam => "layercam",
            CamMethod::ScoreCam => "scorecam",
            CamMethod::FasterScoreCam => "faster_scorecam",
        }
    }
}

impl fmt::Display for CamMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CamMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.replace("++", "pp").chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        match key.as_str() {
            "gradcam" => Ok(CamMethod::GradCam),
            "gradcampp" | "gradcamplusplus" => Ok(CamMethod::GradCamPp),
            "layercam" => Ok(CamMethod::LayerCam),
            "scorecam" => Ok(CamMethod::ScoreCam),
            "fasterscorecam" => Ok(CamMethod::FasterScoreCam),
            _ => Err(invalid!("unknown CAM method {s:?}")),
        }
    }
}

/// One channel-last activation (or gradient) map for a single input.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerMaps {
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub data: Vec<f32>,
}

impl LayerMaps {
    pub fn new(h: usize, w: usize, k: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != h * w * k || h * w * k == 0 {
            return Err(Error::Shape(format!("{h}x{w}x{k} maps cannot hold {} values", data.len())));
        }
        Ok(Self { h, w, k, data })
    }

    /// Builds maps from per-channel `h × w` planes.
    pub fn from_channels(h: usize, w: usize, channels: &[Vec<f32>]) -> Result<Self> {
        let k = channels.len();
        let mut data = vec![0f32; h * w * k];
        for (c, plane) in channels.iter().enumerate() {
            if plane.len() != h * w {
                return Err(Error::Shape(format!("channel {c} has {} values, expected {}", plane.len(), h * w)));
            }
            for (i, &v) in plane.iter().enumerate() {
                data[i * k + c] = v;
            }
        }
        Self::new(h, w, k, data)
    }

    fn from_tensor(t: &Tensor, layer: &str) -> Result<Self> {
        if t.shape.len() != 4 || t.shape[0] != 1 {
            return Err(invalid!("layer {layer:?} is not convolutional (output shape {:?})", t.shape));
        }
        Self::new(t.shape[1], t.shape[2], t.shape[3], t.data.clone())
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    pub fn at(&self, pixel: usize, channel: usize) -> f32 {
        self.data[pixel * self.k + channel]
    }

    pub fn channel(&self, c: usize) -> Vec<f32> {
        (0..self.pixels()).map(|i| self.at(i, c)).collect()
    }
}

/// A spatial saliency map. `values` is row-major `height × width`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
    pub normalized: bool,
    pub method: CamMethod,
    pub class: usize,
    pub layer: String,
}

impl Heatmap {
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(0.0, f32::max)
    }

    /// Bilinear resize followed by min-max scaling into [0, 1].
    pub fn upsampled(&self, width: usize, height: usize) -> Heatmap {
        let mut values = resize_f32_bilinear(&self.values, self.width, self.height, 1, width, height);
        normalize_min_max(&mut values);
        Heatmap {
            width,
            height,
            values,
            normalized: true,
            ..self.clone()
        }
    }

    /// Plain-text float grid: a `width height` line, then one line per row.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.width, self.height);
        for row in self.values.chunks(self.width) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            s.push_str(&cells.join(" "));
            s.push('\n');
        }
        s
    }

    /// Reads the values of a grid written by [`Heatmap::to_text`].
    pub fn parse_grid(text: &str) -> Result<(usize, usize, Vec<f32>)> {
        let mut lines = text.lines();
        let head: Vec<usize> = lines
            .next()
            .ok_or_else(|| invalid!("empty heatmap grid"))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| invalid!("bad grid header {t:?}")))
            .collect::<Result<_>>()?;
        let [w, h] = head[..] else {
            return Err(invalid!("grid header needs width and height"));
        };
        let values: Vec<f32> = lines
            .flat_map(|l| l.split_whitespace())
            .map(|t| t.parse().map_err(|_| invalid!("bad grid value {t:?}")))
            .collect::<Result<_>>()?;
        if values.len() != w * h {
            return Err(invalid!("grid holds {} values, header says {w}x{h}", values.len()));
        }
        Ok((w, h, values))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSource {
    GradientPooled,
    HigherOrder,
    ScoreBased,
    VarianceBased,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelWeights {
    pub alpha: Vec<f32>,
    pub source: WeightSource,
}

/// A CAM at layer resolution (`raw`, after ReLU) and upsampled to
/// [`HEATMAP_SIZE`] and normalized (`heatmap`). LayerCAM has no channel weights.
#[derive(Clone, Debug)]
pub struct Explanation {
    pub raw: Heatmap,
    pub heatmap: Heatmap,
    pub weights: Option<ChannelWeights>,
    /// Faster Score-CAM: the chosen channel indices, highest variance first.
    pub selected: Vec<usize>,
}

pub fn relu(v: &mut [f32]) {
    for x in v {
        *x = x.max(0.0);
    }
}

/// `(x - min) / (max - min)`; an all-zero map stays zero and any other
/// constant map becomes all ones.
pub fn normalize_min_max(v: &mut [f32]) {
    let lo = v.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !hi.is_finite() || hi <= 0.0 && lo >= 0.0 {
        v.iter_mut().for_each(|x| *x = 0.0);
    } else if hi - lo <= f32::EPSILON * hi.abs() {
        v.iter_mut().for_each(|x| *x = 1.0);
    } else {
        v.iter_mut().for_each(|x| *x = (*x - lo) / (hi - lo));
    }
}

/// Spatial mean of the gradients per channel.
pub fn grad_cam_weights(grads: &LayerMaps) -> Vec<f32> {
    let z = grads.pixels() as f64;
    (0..grads.k)
        .map(|c| ((0..grads.pixels()).map(|i| grads.at(i, c) as f64).sum::<f64>() / z) as f32)
        .collect()
}

/// Per-pixel, per-channel Grad-CAM++ coefficients, channel-last.
///
/// With `y = exp(S)` the higher derivatives are `exp(S)·g²` and `exp(S)·g³`
/// for `g = ∂S/∂A`, so the exponential cancels:
/// `a_ij = g_ij² / (2 g_ij² + Σ_ab A_ab g_ab³)`, zero where the denominator
/// is below [`EPS`] in magnitude.
pub fn grad_cam_pp_coefficients(acts: &LayerMaps, grads: &LayerMaps) -> Vec<f32> {
    let (p, k) = (acts.pixels(), acts.k);
    let mut out = vec![0f32; p * k];
    for c in 0..k {
        let third: f64 = (0..p).map(|i| acts.at(i, c) as f64 * (grads.at(i, c) as f64).powi(3)).sum();
        for i in 0..p {
            let g2 = (grads.at(i, c) as f64).powi(2);
            let denom = 2.0 * g2 + third;
            if denom.abs() >= EPS {
                out[i * k + c] = (g2 / denom) as f32;
            }
        }
    }
    out
}

/// `α_k = Σ_ij a_ij · ReLU(g_ij)`.
pub fn grad_cam_pp_weights(acts: &LayerMaps, grads: &LayerMaps) -> Vec<f32> {
    let a = grad_cam_pp_coefficients(acts, grads);
    (0..acts.k)
        .map(|c| {
            (0..acts.pixels())
                .map(|i| a[i * acts.k + c] as f64 * grads.at(i, c).max(0.0) as f64)
                .sum::<f64>() as f32
        })
        .collect()
}

/// Pre-ReLU `Σ_k α_k A^k`.
pub fn weighted_sum(acts: &LayerMaps, alpha: &[f32]) -> Vec<f32> {
    (0..acts.pixels())
        .map(|i| (0..acts.k).map(|c| alpha[c] as f64 * acts.at(i, c) as f64).sum::<f64>() as f32)
        .collect()
}

/// Pre-ReLU `Σ_k ReLU(g_ij) · A_ij`.
pub fn layer_cam_map(acts: &LayerMaps, grads: &LayerMaps) -> Vec<f32> {
    (0..acts.pixels())
        .map(|i| {
            (0..acts.k)
                .map(|c| grads.at(i, c).max(0.0) as f64 * acts.at(i, c) as f64)
                .sum::<f64>() as f32
        })
        .collect()
}

/// Population variance of each channel.
pub fn channel_variances(acts: &LayerMaps) -> Vec<f64> {
    let p = acts.pixels() as f64;
    (0..acts.k)
        .map(|c| {
            let mean = (0..acts.pixels()).map(|i| acts.at(i, c) as f64).sum::<f64>() / p;
            (0..acts.pixels()).map(|i| (acts.at(i, c) as f64 - mean).powi(2)).sum::<f64>() / p
        })
        .collect()
}

/// Keeps the `n` highest-variance channels (ties by lower index; zero-variance
/// channels never) and weights them by their share of the selected variance.
/// Returns full-length weights and the selection.
pub fn variance_weights(acts: &LayerMaps, n: usize) -> (Vec<f32>, Vec<usize>) {
    let var = channel_variances(acts);
    let mut order: Vec<usize> = (0..acts.k).filter(|&c| var[c] > 0.0).collect();
    order.sort_by(|&a, &b| var[b].total_cmp(&var[a]).then(a.cmp(&b)));
    order.truncate(n);
    let total: f64 = order.iter().map(|&c| var[c]).sum();
    let mut alpha = vec![0f32; acts.k];
    for &c in &order {
        alpha[c] = (var[c] / total) as f32;
    }
    (alpha, order)
}

/// Softmax over the confidence gains `f_c(masked) - f_c(baseline)`.
pub fn score_weights(masked: &[f32], baseline: f32) -> Vec<f32> {
    let gains: Vec<f64> = masked.iter().map(|&s| (s - baseline) as f64).collect();
    let m = gains.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = gains.iter().map(|g| (g - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| (v / z) as f32).collect()
}

/// Score-CAM mask for one channel: upsampled to `size` and scaled into
/// [0, 1] by `(x - min) / (max - min + EPS)`.
pub fn score_mask(acts: &LayerMaps, channel: usize, width: usize, height: usize) -> Vec<f32> {
    let mut up = resize_f32_bilinear(&acts.channel(channel), acts.w, acts.h, 1, width, height);
    let lo = up.iter().copied().fold(f32::INFINITY, f32::min) as f64;
    let hi = up.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    for v in &mut up {
        *v = ((*v as f64 - lo) / (hi - lo + EPS)) as f32;
    }
    up
}

/// What to explain: an input `[1, h, w, c]`, a class (argmax when `None`)
/// and a layer (the model's default when `None`).
#[derive(Clone, Debug)]
pub struct CamRequest {
    pub image: Tensor,
    pub class: Option<usize>,
    pub layer: Option<String>,
    pub method: CamMethod,
    pub faster_channels: usize,
}

impl CamRequest {
    pub fn new(image: Tensor, method: CamMethod) -> Self {
        Self {
            image,
            class: None,
            layer: None,
            method,
            faster_channels: DEFAULT_FASTER_CHANNELS,
        }
    }

    pub fn class(mut self, c: usize) -> Self {
        self.class = Some(c);
        self
    }

    pub fn layer(mut self, l: impl Into<String>) -> Self {
        self.layer = Some(l.into());
        self
    }

    pub fn faster_channels(mut self, n: usize) -> Self {
        self.faster_channels = n;
        self
    }
}

struct Captured {
    logits: Vec<f32>,
    acts: HashMap<String, LayerMaps>,
    grads: HashMap<String, LayerMaps>,
}

/// CAM computations over an immutable network. Each call uses its own
/// context, so one explainer can serve several threads.
pub struct Explainer<'a> {
    net: &'a dyn Layer,
    input_shape: [usize; 3],
    default_layer: String,
    taps: Vec<String>,
    score_passes: AtomicUsize,
}

impl<'a> Explainer<'a> {
    /// `input_shape` is `[h, w, c]` of a single input.
    pub fn new(net: &'a dyn Layer, input_shape: [usize; 3], default_layer: impl Into<String>) -> Result<Self> {
        let mut taps = Vec::new();
        net.taps(&mut taps);
        let default_layer = default_layer.into();
        if !taps.contains(&default_layer) {
            return Err(Error::UnknownLayer(default_layer));
        }
        Ok(Self {
            net,
            input_shape,
            default_layer,
            taps,
            score_passes: AtomicUsize::new(0),
        })
    }

    pub fn for_model(model: &'a TrainedModel) -> Result<Self> {
        let s = model.input_size();
        Self::new(&model.net, [s, s, 3], model.cam_layer.clone())
    }

    pub fn layers(&self) -> &[String] {
        &self.taps
    }

    pub fn default_layer(&self) -> &str {
        &self.default_layer
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    /// Inputs scored by Score-CAM so far: masked images plus baselines.
    pub fn score_passes(&self) -> usize {
        self.score_passes.load(Ordering::Relaxed)
    }

    /// Wraps an enhanced image as a single-item batch.
    pub fn input(&self, img: &EnhancedTensor) -> Result<Tensor> {
        let x = Tensor::new(vec![1, img.size, img.size, 3], img.data.clone());
        self.check(&x)?;
        Ok(x)
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        let [h, w, c] = self.input_shape;
        if x.shape != [1, h, w, c] {
            return Err(Error::Shape(format!("explainer expects a [1, {h}, {w}, {c}] input, got {:?}", x.shape)));
        }
        Ok(())
    }

    fn resolve(&self, layer: Option<&str>) -> Result<String> {
        let l = layer.unwrap_or(&self.default_layer);
        if !self.taps.iter().any(|t| t == l) {
            return Err(Error::UnknownLayer(l.to_string()));
        }
        Ok(l.to_string())
    }

    /// Softmax confidences for a batch.
    pub fn probabilities(&self, x: &Tensor) -> Tensor {
        softmax_rows(&self.net.forward(x.clone(), &mut Ctx::inference()))
    }

    pub fn predicted_class(&self, x: &Tensor) -> Result<usize> {
        self.check(x)?;
        Ok(argmax(self.probabilities(x).item(0)))
    }

    fn capture(&self, x: &Tensor, layers: &[String], class: Option<usize>) -> Result<Captured> {
        self.check(x)?;
        let mut ctx = if class.is_some() {
            Ctx::gradients()
        } else {
            Ctx::inference()
        }
        .capture(layers.iter().cloned());
        let logits = self.net.forward(x.clone(), &mut ctx);
        let nclass = logits.item_len();
        if let Some(c) = class {
            if c >= nclass {
                return Err(invalid!("class {c} outside 0..{nclass}"));
            }
            let mut g = Tensor::zeros(logits.shape.clone());
            g.data[c] = 1.0;
            self.net.backward(g, &mut ctx);
        }
        let mut acts = HashMap::new();
        let mut grads = HashMap::new();
        for l in layers {
            let a = ctx.activations.get(l).ok_or_else(|| Error::UnknownLayer(l.clone()))?;
            acts.insert(l.clone(), LayerMaps::from_tensor(a, l)?);
            if class.is_some() {
                let g = ctx
                    .activation_grads
                    .get(l)
                    .ok_or_else(|| invalid!("layer {l:?} received no gradient"))?;
                grads.insert(l.clone(), LayerMaps::from_tensor(g, l)?);
            }
        }
        Ok(Captured {
            logits: logits.data,
            acts,
            grads,
        })
    }

    fn class_or_argmax(&self, x: &Tensor, class: Option<usize>) -> Result<usize> {
        match class {
            Some(c) => Ok(c),
            None => self.predicted_class(x),
        }
    }

    /// Activations and gradients of the class score at one layer.
    pub fn activations_and_gradients(&self, x: &Tensor, class: usize, layer: Option<&str>) -> Result<(LayerMaps, LayerMaps)> {
        let l = self.resolve(layer)?;
        let mut cap = self.capture(x, std::slice::from_ref(&l), Some(class))?;
        Ok((cap.acts.remove(&l).unwrap(), cap.grads.remove(&l).unwrap()))
    }

    pub fn activations(&self, x: &Tensor, layer: Option<&str>) -> Result<LayerMaps> {
        let l = self.resolve(layer)?;
        let mut cap = self.capture(x, std::slice::from_ref(&l), None)?;
        Ok(cap.acts.remove(&l).unwrap())
    }

    /// Pre-softmax scores for one input.
    pub fn logits(&self, x: &Tensor) -> Result<Vec<f32>> {
        Ok(self.capture(x, &[], None)?.logits)
    }

    pub fn explain(&self, req: &CamRequest) -> Result<Explanation> {
        let class = self.class_or_argmax(&req.image, req.class)?;
        let layer = req.layer.as_deref();
        match req.method {
            CamMethod::GradCam => self.grad_cam(&req.image, class, layer),
            CamMethod::GradCamPp => self.grad_cam_pp(&req.image, class, layer),
            CamMethod::LayerCam => {
                let l = self.resolve(layer)?;
                Ok(self.layer_cam(&req.image, class, &[l.as_str()])?.remove(0))
            }
            CamMethod::ScoreCam => self.score_cam(&req.image, class, layer, None),
            CamMethod::FasterScoreCam => self.faster_score_cam(&req.image, class, layer, req.faster_channels),
        }
    }

    pub fn grad_cam(&self, x: &Tensor, class: usize, layer: Option<&str>) -> Result<Explanation> {
        let l = self.resolve(layer)?;
        let (a, g) = self.activations_and_gradients(x, class, Some(&l))?;
        let alpha = grad_cam_weights(&g);
        let map = weighted_sum(&a, &alpha);
        Ok(finish(map, &a, CamMethod::GradCam, class, l, Some((alpha, WeightSource::GradientPooled)), Vec::new()))
    }

    pub fn grad_cam_pp(&self, x: &Tensor, class: usize, layer: Option<&str>) -> Result<Explanation> {
        let l = self.resolve(layer)?;
        let (a, g) = self.activations_and_gradients(x, class, Some(&l))?;
        let alpha = grad_cam_pp_weights(&a, &g);
        if alpha.iter().all(|&v| v == 0.0) {
            log::warn!("grad-cam++ weights are all zero for class {class} at {l}");
        }
        let map = weighted_sum(&a, &alpha);
        Ok(finish(map, &a, CamMethod::GradCamPp, class, l, Some((alpha, WeightSource::HigherOrder)), Vec::new()))
    }

    /// One map per requested layer, from a single forward and backward pass.
    pub fn layer_cam(&self, x: &Tensor, class: usize, layers: &[&str]) -> Result<Vec<Explanation>> {
        if layers.is_empty() {
            return Err(invalid!("layer_cam needs at least one layer"));
        }
        let names: Vec<String> = layers.iter().map(|l| self.resolve(Some(l))).collect::<Result<_>>()?;
        let cap = self.capture(x, &names, Some(class))?;
        Ok(names
            .into_iter()
            .map(|l| {
                let (a, g) = (&cap.acts[&l], &cap.grads[&l]);
                finish(layer_cam_map(a, g), a, CamMethod::LayerCam, class, l, None, Vec::new())
            })
            .collect())
    }

    /// Softmax confidence for `class` on each input of the batch.
    fn confidences(&self, batch: Vec<f32>, n: usize, class: usize) -> Vec<f32> {
        let [h, w, c] = self.input_shape;
        self.score_passes.fetch_add(n, Ordering::Relaxed);
        let p = self.probabilities(&Tensor::new(vec![n, h, w, c], batch));
        (0..n).map(|i| p.item(i)[class]).collect()
    }

    /// Score-CAM with a zero baseline unless one is given.
    pub fn score_cam(&self, x: &Tensor, class: usize, layer: Option<&str>, baseline: Option<&Tensor>) -> Result<Explanation> {
        let l = self.resolve(layer)?;
        let a = self.activations(x, Some(&l))?;
        let [h, w, _] = self.input_shape;
        let masks: Vec<Vec<f32>> = (0..a.k).map(|c| score_mask(&a, c, w, h)).collect();
        self.score_cam_with_masks(x, class, &l, &a, &masks, baseline)
    }

    /// Score-CAM from precomputed `h × w` masks, one per channel of `acts`.
    /// Scores exactly `K + 1` inputs: every masked image and the baseline.
    pub fn score_cam_with_masks(
        &self,
        x: &Tensor,
        class: usize,
        layer: &str,
        acts: &LayerMaps,
        masks: &[Vec<f32>],
        baseline: Option<&Tensor>,
    ) -> Result<Explanation> {
        self.check(x)?;
        let [h, w, ch] = self.input_shape;
        if masks.len() != acts.k || masks.iter().any(|m| m.len() != h * w) {
            return Err(Error::Shape(format!("need {} masks of {h}x{w}", acts.k)));
        }
        let zeros;
        let base = match baseline {
            Some(b) => {
                self.check(b)?;
                b
            }
            None => {
                zeros = Tensor::zeros(x.shape.clone());
                &zeros
            }
        };
        let f_base = self.confidences(base.data.clone(), 1, class)[0];
        let mut scores = Vec::with_capacity(acts.k);
        for chunk in masks.chunks(SCORE_CHUNK) {
            let mut batch = Vec::with_capacity(chunk.len() * h * w * ch);
            for m in chunk {
                for (i, &mv) in m.iter().enumerate() {
                    for c in 0..ch {
                        batch.push(x.data[i * ch + c] * mv);
                    }
                }
            }
            scores.extend(self.confidences(batch, chunk.len(), class));
        }
        let alpha = score_weights(&scores, f_base);
        let map = weighted_sum(acts, &alpha);
        Ok(finish(map, acts, CamMethod::ScoreCam, class, layer.to_string(), Some((alpha, WeightSource::ScoreBased)), Vec::new()))
    }

    pub fn faster_score_cam(&self, x: &Tensor, class: usize, layer: Option<&str>, n: usize) -> Result<Explanation> {
        let l = self.resolve(layer)?;
        let a = self.activations(x, Some(&l))?;
        if n == 0 || n > a.k {
            return Err(invalid!("channel budget {n} outside 1..={}", a.k));
        }
        let (alpha, selected) = variance_weights(&a, n);
        let map = weighted_sum(&a, &alpha);
        Ok(finish(map, &a, CamMethod::FasterScoreCam, class, l, Some((alpha, WeightSource::VarianceBased)), selected))
    }

    /// Zeroes the hottest `fraction` of input pixels under the Grad-CAM map
    /// and compares the class score and confidence before and after.
    pub fn deletion_check(&self, x: &Tensor, class: usize, fraction: f64) -> Result<DeletionOutcome> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(invalid!("deletion fraction {fraction} outside (0, 1)"));
        }
        let e = self.grad_cam(x, class, None)?;
        let [h, w, ch] = self.input_shape;
        let heat = e.raw.upsampled(w, h);
        let mut order: Vec<usize> = (0..h * w).collect();
        order.sort_by(|&a, &b| heat.values[b].total_cmp(&heat.values[a]).then(a.cmp(&b)));
        let count = ((h * w) as f64 * fraction).round() as usize;
        let mut masked = x.clone();
        for &i in &order[..count] {
            for c in 0..ch {
                masked.data[i * ch + c] = 0.0;
            }
        }
        let (lb, la) = (self.logits(x)?, self.logits(&masked)?);
        Ok(DeletionOutcome {
            score_before: lb[class],
            score_after: la[class],
            before: self.probabilities(x).item(0)[class],
            after: self.probabilities(&masked).item(0)[class],
            removed: count,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeletionOutcome {
    /// Pre-softmax class score.
    pub score_before: f32,
    pub score_after: f32,
    /// Softmax confidence.
    pub before: f32,
    pub after: f32,
    pub removed: usize,
}

impl DeletionOutcome {
    /// The class score dropped. Confidence alone saturates at 1.0 for
    /// confident predictions.
    pub fn reduced(&self) -> bool {
        self.score_after < self.score_before
    }

    pub fn confidence_reduced(&self) -> bool {
        self.after < self.before
    }
}

fn finish(
    mut map: Vec<f32>,
    acts: &LayerMaps,
    method: CamMethod,
    class: usize,
    layer: String,
    weights: Option<(Vec<f32>, WeightSource)>,
    selected: Vec<usize>,
) -> Explanation {
    relu(&mut map);
    let raw = Heatmap {
        width: acts.w,
        height: acts.h,
        values: map,
        normalized: false,
        method,
        class,
        layer,
    };
    Explanation {
        heatmap: raw.upsampled(HEATMAP_SIZE, HEATMAP_SIZE),
        raw,
        weights: weights.map(|(alpha, source)| ChannelWeights { alpha, source }),
        selected,
    }
}
