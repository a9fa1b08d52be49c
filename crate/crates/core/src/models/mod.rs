//! Transfer-learning classifiers and the dual-backbone fusion network.

pub mod backbones;

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{Grade, NUM_CLASSES};
use crate::enhance::{EnhancedTensor, MODEL_INPUT_SIZE};
use crate::error::{invalid, Error, Result};
use crate::nn::{
    self, count_params, relu, softmax_rows, BatchNorm, Conv2d, Ctx, Dense, Dropout, DualBranch, Flatten, Init,
    Layer, MaxPool2d, Padding, Param, Sequential, Tap, Tensor,
};

pub use crate::nn::mean_shift_concat;

/// Tap name of the fused map inside the fusion network.
pub const FUSION_TAP: &str = "fusion";
/// Tap name of the refinement convolution, the fusion network's default CAM layer.
pub const REFINE_TAP: &str = "refine";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Vgg16,
    Vgg19,
    ResNet50V2,
    MobileNetV2,
    Xception,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 5] = [
        BackboneKind::Vgg16,
        BackboneKind::Vgg19,
        BackboneKind::ResNet50V2,
        BackboneKind::MobileNetV2,
        BackboneKind::Xception,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BackboneKind::Vgg16 => "vgg16",
            BackboneKind::Vgg19 => "vgg19",
            BackboneKind::ResNet50V2 => "resnet50v2",
            BackboneKind::MobileNetV2 => "mobilenetv2",
            BackboneKind::Xception => "xception",
        }
    }

    /// Channel width of the final feature map at full scale.
    pub fn full_channels(self) -> usize {
        match self {
            BackboneKind::Vgg16 | BackboneKind::Vgg19 => 512,
            BackboneKind::ResNet50V2 | BackboneKind::Xception => 2048,
            BackboneKind::MobileNetV2 => 1280,
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BackboneKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| invalid!("unknown backbone {s:?} (expected vgg16, vgg19, resnet50v2, mobilenetv2 or xception)"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: BackboneKind,
    /// Load backbone weights from `weights` instead of random initialization.
    #[serde(default)]
    pub pretrained: bool,
    #[serde(default)]
    pub weights: Option<String>,
    #[serde(default = "yes")]
    pub trainable: bool,
    /// Every channel width is divided by this (rounding up); 1 is the full network.
    #[serde(default = "one")]
    pub width_divisor: usize,
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

impl BackboneSpec {
    pub fn new(name: BackboneKind) -> Self {
        Self {
            name,
            pretrained: false,
            weights: None,
            trainable: true,
            width_divisor: 1,
        }
    }

    pub fn with_divisor(mut self, d: usize) -> Self {
        self.width_divisor = d;
        self
    }

    pub fn out_channels(&self) -> usize {
        self.name.full_channels().div_ceil(self.width_divisor.max(1))
    }

    fn validate(&self) -> Result<()> {
        if self.width_divisor == 0 {
            return Err(Error::Config("width_divisor must be at least 1".into()));
        }
        if self.pretrained && self.weights.is_none() {
            return Err(Error::Config(format!(
                "{}: pretrained initialization needs a weights file (no bundled weights)",
                self.name
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferHeadSpec {
    pub dense_widths: (usize, usize),
    pub dropout_rates: (f32, f32),
    pub classes: usize,
}

impl Default for TransferHeadSpec {
    fn default() -> Self {
        Self {
            dense_widths: (1024, 512),
            dropout_rates: (0.5, 0.5),
            classes: NUM_CLASSES,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionModelSpec {
    pub backbone_a: BackboneSpec,
    pub backbone_b: BackboneSpec,
    pub refine_channels: usize,
    pub head_widths: (usize, usize),
    pub dropout_rates: (f32, f32),
    pub classes: usize,
}

impl Default for FusionModelSpec {
    fn default() -> Self {
        Self {
            backbone_a: BackboneSpec::new(BackboneKind::Vgg19),
            backbone_b: BackboneSpec::new(BackboneKind::ResNet50V2),
            refine_channels: 512,
            head_widths: (256, 64),
            dropout_rates: (0.5, 0.5),
            classes: NUM_CLASSES,
        }
    }
}

impl FusionModelSpec {
    /// Both backbones and the refinement width scaled by `d`.
    pub fn scaled(d: usize) -> Self {
        let mut s = Self::default();
        s.backbone_a.width_divisor = d;
        s.backbone_b.width_divisor = d;
        s.refine_channels = 512usize.div_ceil(d);
        s
    }

    pub fn fused_channels(&self) -> usize {
        self.backbone_a.out_channels() + self.backbone_b.out_channels()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Architecture {
    Transfer {
        backbone: BackboneSpec,
        head: TransferHeadSpec,
    },
    Fusion(FusionModelSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_size: usize,
    pub seed: u64,
    pub architecture: Architecture,
}

impl ModelSpec {
    pub fn transfer(backbone: BackboneSpec, head: TransferHeadSpec) -> Self {
        Self {
            input_size: MODEL_INPUT_SIZE as usize,
            seed: 0,
            architecture: Architecture::Transfer { backbone, head },
        }
    }

    pub fn fusion(spec: FusionModelSpec) -> Self {
        Self {
            input_size: MODEL_INPUT_SIZE as usize,
            seed: 0,
            architecture: Architecture::Fusion(spec),
        }
    }

    pub fn with_input_size(mut self, s: usize) -> Self {
        self.input_size = s;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Short identifier used in reports: the backbone name or `vrfusenet`.
    pub fn label(&self) -> String {
        match &self.architecture {
            Architecture::Transfer { backbone, .. } => backbone.name.to_string(),
            Architecture::Fusion(_) => "vrfusenet".into(),
        }
    }
}

/// Backbone followed by a head; `features` ends at the final convolutional stage.
pub struct Network {
    pub features: Sequential,
    pub head: Sequential,
}

impl Layer for Network {
    fn forward(&self, x: Tensor, ctx: &mut Ctx) -> Tensor {
        let f = self.features.forward(x, ctx);
        self.head.forward(f, ctx)
    }

    fn backward(&self, g: Tensor, ctx: &mut Ctx) -> Tensor {
        let g = self.head.backward(g, ctx);
        self.features.backward(g, ctx)
    }

    fn out_shape(&self, s: &[usize]) -> Vec<usize> {
        self.head.out_shape(&self.features.out_shape(s))
    }

    fn params(&self) -> Vec<&Param> {
        let mut v = self.features.params();
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.features.params_mut();
        v.extend(self.head.params_mut());
        v
    }

    fn taps(&self, out: &mut Vec<String>) {
        self.features.taps(out);
        self.head.taps(out);
    }
}

/// A classifier with its spec and fixed label order. The network outputs
/// pre-softmax scores; [`TrainedModel::predict`] applies softmax.
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub net: Network,
    pub label_order: Vec<Grade>,
    /// Default layer for saliency maps.
    pub cam_layer: String,
    /// Number of leading parameters that belong to the backbone(s).
    backbone_params: usize,
}

fn head_layers(
    s: &mut Sequential,
    init: &mut Init,
    fin: usize,
    widths: (usize, usize),
    drops: (f32, f32),
    classes: usize,
) {
    s.add(Flatten)
        .add(Dense::new("head/dense1", init, fin, widths.0))
        .add_boxed(relu())
        .add(Dropout { rate: drops.0 })
        .add(Dense::new("head/dense2", init, widths.0, widths.1))
        .add_boxed(relu())
        .add(Dropout { rate: drops.1 })
        .add(Dense::output("head/logits", init, widths.1, classes));
}

fn check_rates(r: (f32, f32)) -> Result<()> {
    for v in [r.0, r.1] {
        if !(0.0..1.0).contains(&v) {
            return Err(Error::Config(format!("dropout rate {v} outside [0, 1)")));
        }
    }
    Ok(())
}

fn check_classes(c: usize) -> Result<()> {
    if c != NUM_CLASSES {
        return Err(Error::Config(format!("classifier must have {NUM_CLASSES} outputs, got {c}")));
    }
    Ok(())
}

fn build_backbone(spec: &BackboneSpec, init: &mut Init) -> Result<backbones::Backbone> {
    spec.validate()?;
    let mut b = backbones::build(spec.name, spec.name.as_str(), spec.width_divisor, init);
    if let Some(path) = spec.weights.as_deref().filter(|_| spec.pretrained) {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        nn::load_weights(&mut b.layers, &bytes)?;
    }
    if !spec.trainable {
        nn::set_trainable(&mut b.layers, false);
    }
    Ok(b)
}

pub fn build_transfer_model(backbone: BackboneSpec, head: TransferHeadSpec) -> Result<TrainedModel> {
    TrainedModel::build(ModelSpec::transfer(backbone, head))
}

pub fn build_vrfusenet(spec: FusionModelSpec) -> Result<TrainedModel> {
    TrainedModel::build(ModelSpec::fusion(spec))
}

impl TrainedModel {
    pub fn build(spec: ModelSpec) -> Result<Self> {
        if spec.input_size < 32 {
            return Err(Error::Config(format!("input size {} is below the minimum of 32", spec.input_size)));
        }
        let mut init = Init::new(spec.seed);
        let input = [spec.input_size, spec.input_size, 3];
        let (features, head, cam_layer) = match &spec.architecture {
            Architecture::Transfer { backbone, head } => {
                check_rates(head.dropout_rates)?;
                check_classes(head.classes)?;
                let b = build_backbone(backbone, &mut init)?;
                let fshape = b.layers.out_shape(&input);
                let mut h = Sequential::new();
                head_layers(
                    &mut h,
                    &mut init,
                    fshape.iter().product(),
                    head.dense_widths,
                    head.dropout_rates,
                    head.classes,
                );
                (b.layers, h, b.last_conv)
            }
            Architecture::Fusion(f) => {
                check_rates(f.dropout_rates)?;
                check_classes(f.classes)?;
                let a = build_backbone(&f.backbone_a, &mut init)?;
                let b = build_backbone(&f.backbone_b, &mut init)?;
                if a.kind == b.kind {
                    return Err(Error::Config("fusion needs two different backbones".into()));
                }
                let (sa, sb) = (a.layers.out_shape(&input), b.layers.out_shape(&input));
                if sa[..2] != sb[..2] {
                    return Err(Error::Shape(format!(
                        "backbone maps {sa:?} and {sb:?} differ spatially at input {}",
                        spec.input_size
                    )));
                }
                let mut features = Sequential::new();
                features.add(DualBranch { a: a.layers, b: b.layers });
                features.add_boxed(Tap::boxed(FUSION_TAP));
                let fused = sa[2] + sb[2];
                let rc = f.refine_channels;
                let mut h = Sequential::new();
                h.add(Conv2d::new("refine/conv", &mut init, fused, rc, 3, 1, Padding::Same, true))
                    .add(BatchNorm::new("refine/bn", rc))
                    .add_boxed(relu())
                    .add_boxed(Tap::boxed(REFINE_TAP))
                    .add(MaxPool2d::new(2, 2, Padding::Same));
                let pooled = h.out_shape(&[sa[0], sa[1], fused]);
                let mut rest = Sequential::new();
                head_layers(
                    &mut rest,
                    &mut init,
                    pooled.iter().product(),
                    f.head_widths,
                    f.dropout_rates,
                    f.classes,
                );
                h.layers.extend(rest.layers);
                (features, h, REFINE_TAP.to_string())
            }
        };
        let backbone_params = features.params().len();
        Ok(Self {
            spec,
            net: Network { features, head },
            label_order: Grade::ALL.to_vec(),
            cam_layer,
            backbone_params,
        })
    }

    pub fn input_size(&self) -> usize {
        self.spec.input_size
    }

    pub fn param_count(&self) -> usize {
        count_params(&self.net)
    }

    /// Parameter tensors of the backbone part, in forward order.
    pub fn backbone_params(&self) -> Vec<&Param> {
        self.net.params().into_iter().take(self.backbone_params).collect()
    }

    pub fn head_params(&self) -> Vec<&Param> {
        self.net.params().into_iter().skip(self.backbone_params).collect()
    }

    /// All tap names in forward order.
    pub fn taps(&self) -> Vec<String> {
        let mut v = Vec::new();
        self.net.taps(&mut v);
        v
    }

    pub fn feature_shape(&self) -> Vec<usize> {
        let s = self.input_size();
        self.net.features.out_shape(&[s, s, 3])
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = self.input_size();
        if x.shape.len() != 4 || x.shape[1..] != [s, s, 3] || x.shape[0] == 0 {
            return Err(Error::Shape(format!("model expects [n, {s}, {s}, 3] input, got {:?}", x.shape)));
        }
        Ok(())
    }

    /// Pre-softmax class scores.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        Ok(self.net.forward(x.clone(), &mut Ctx::inference()))
    }

    /// Class probabilities, one row per input, columns in `label_order`.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(softmax_rows(&self.logits(x)?))
    }

    /// Final convolutional-stage activations (the fused map for the fusion network).
    pub fn extract_features(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        Ok(self.net.features.forward(x.clone(), &mut Ctx::inference()))
    }

    pub fn batch_from(&self, images: &[&EnhancedTensor]) -> Result<Tensor> {
        let s = self.input_size();
        if let Some(bad) = images.iter().find(|t| t.size != s) {
            return Err(Error::Shape(format!("image is {0}x{0}, model expects {s}x{s}", bad.size)));
        }
        let items: Vec<&[f32]> = images.iter().map(|t| t.data.as_slice()).collect();
        Ok(Tensor::stack(&items, &[s, s, 3]))
    }

    pub fn save(&self, dir: &Path, config_hash: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let weights = dir.join("weights.bin");
        fs::write(&weights, nn::save_weights(&self.net)).map_err(|e| Error::io(&weights, e))?;
        let meta = CheckpointMeta {
            format: 1,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash.to_string(),
            label_order: self.label_order.iter().map(|g| g.canonical_name().to_string()).collect(),
            cam_layer: self.cam_layer.clone(),
            parameters: self.param_count(),
            spec: self.spec.clone(),
        };
        let text = toml::to_string(&meta).map_err(|e| Error::Config(e.to_string()))?;
        let path = dir.join("model.toml");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("model.toml");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: CheckpointMeta = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut spec = meta.spec;
        for b in spec_backbones_mut(&mut spec) {
            b.pretrained = false;
        }
        let mut model = Self::build(spec)?;
        let order: Vec<Grade> = meta.label_order.iter().map(|s| s.parse()).collect::<Result<_>>()?;
        if order != Grade::ALL {
            return Err(Error::Config(format!("checkpoint label order {:?} is not the canonical order", meta.label_order)));
        }
        let wpath = dir.join("weights.bin");
        let bytes = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
        nn::load_weights(&mut model.net, &bytes)?;
        Ok(model)
    }
}

fn spec_backbones_mut(spec: &mut ModelSpec) -> Vec<&mut BackboneSpec> {
    match &mut spec.architecture {
        Architecture::Transfer { backbone, .. } => vec![backbone],
        Architecture::Fusion(f) => vec![&mut f.backbone_a, &mut f.backbone_b],
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    format: u32,
    tool_version: String,
    config_hash: String,
    label_order: Vec<String>,
    cam_layer: String,
    parameters: usize,
    spec: ModelSpec,
}

/// Spatially averaged feature matrix: one row per item, one column per channel.
pub fn pooled_features(maps: &Tensor) -> Vec<Vec<f64>> {
    let (n, _, _, c) = maps.dims4();
    (0..n)
        .map(|i| {
            let mut row = vec![0f64; c];
            let item = maps.item(i);
            for px in item.chunks_exact(c) {
                for (r, &v) in row.iter_mut().zip(px) {
                    *r += v as f64;
                }
            }
            let z = (item.len() / c) as f64;
            row.iter_mut().for_each(|v| *v /= z);
            row
        })
        .collect()
}

/// Sample cross-covariance `m1ᵀ m2 / (n − 1)` of two row-aligned feature
/// matrices after centering each column.
pub fn cross_covariance(m1: &[Vec<f64>], m2: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = m1.len();
    if n != m2.len() {
        return Err(Error::Shape(format!("row counts differ: {n} vs {}", m2.len())));
    }
    if n < 2 {
        return Err(invalid!("cross-covariance needs at least 2 rows, got {n}"));
    }
    let center = |m: &[Vec<f64>]| -> Result<Vec<Vec<f64>>> {
        let c = m[0].len();
        if m.iter().any(|r| r.len() != c) {
            return Err(Error::Shape("ragged feature matrix".into()));
        }
        let means: Vec<f64> = (0..c).map(|j| m.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
        Ok(m.iter().map(|r| r.iter().zip(&means).map(|(v, mu)| v - mu).collect()).collect())
    };
    let (a, b) = (center(m1)?, center(m2)?);
    let (r, s) = (a[0].len(), b[0].len());
    let mut f = vec![vec![0f64; s]; r];
    for k in 0..n {
        for i in 0..r {
            let aki = a[k][i];
            for j in 0..s {
                f[i][j] += aki * b[k][j];
            }
        }
    }
    for row in &mut f {
        row.iter_mut().for_each(|v| *v /= (n - 1) as f64);
    }
    Ok(f)
}

/// Equal batch and spatial dims required; output keeps `a` channels first.
pub fn fuse(map_a: &Tensor, map_b: &Tensor) -> Result<Tensor> {
    mean_shift_concat(map_a, map_b)
}

#[cfg(test)]
mod tests;
