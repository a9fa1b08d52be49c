//! A small CPU neural-network engine: NHWC tensors, layers with explicit
//! backward passes, named activation taps and an Adam optimizer.
//!
//! Forward passes record whatever each layer needs for its backward pass on
//! a tape held by [`Ctx`]; backward passes pop the tape in reverse order.
//! Layers themselves are immutable during a pass, so one network can serve
//! concurrent inference through separate contexts.

pub mod gemm;
pub mod layers;
pub mod tensor;

use std::any::Any;
use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use layers::*;
pub use tensor::{softmax_cross_entropy, softmax_rows, Tensor};

use crate::error::{Error, Result};

static NEXT_PARAM_ID: AtomicUsize = AtomicUsize::new(1);

/// A named weight array. Buffers (batch-norm running statistics) are
/// persisted with the weights but never receive gradients.
#[derive(Clone, Debug)]
pub struct Param {
    pub id: usize,
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub trainable: bool,
    pub buffer: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        Self {
            id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed),
            name: name.into(),
            shape,
            value,
            trainable: true,
            buffer: false,
        }
    }

    pub fn buffer(name: impl Into<String>, value: Vec<f32>) -> Self {
        let n = value.len();
        let mut p = Self::new(name, vec![n], value);
        p.trainable = false;
        p.buffer = true;
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Seeded weight initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn uniform(&mut self, n: usize, limit: f32) -> Vec<f32> {
        let d = Uniform::new_inclusive(-limit, limit);
        (0..n).map(|_| d.sample(&mut self.rng)).collect()
    }

    /// He-uniform, for layers followed by a rectifier.
    pub fn he(&mut self, n: usize, fan_in: usize) -> Vec<f32> {
        self.uniform(n, (6.0 / fan_in.max(1) as f32).sqrt())
    }

    /// Glorot-uniform, for the output layer.
    pub fn glorot(&mut self, n: usize, fan_in: usize, fan_out: usize) -> Vec<f32> {
        self.uniform(n, (6.0 / (fan_in + fan_out).max(1) as f32).sqrt())
    }
}

/// Per-pass state: mode flags, the backward tape, accumulated gradients,
/// dropout randomness and captured activations.
pub struct Ctx {
    pub train: bool,
    record: bool,
    tape: Vec<Box<dyn Any + Send>>,
    grads: HashMap<usize, Vec<f32>>,
    rng: ChaCha8Rng,
    stat_updates: Vec<(usize, Vec<f32>)>,
    capture: BTreeSet<String>,
    pub activations: HashMap<String, Tensor>,
    pub activation_grads: HashMap<String, Tensor>,
}

impl Ctx {
    fn with(train: bool, record: bool, seed: u64) -> Self {
        Self {
            train,
            record,
            tape: Vec::new(),
            grads: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            stat_updates: Vec::new(),
            capture: BTreeSet::new(),
            activations: HashMap::new(),
            activation_grads: HashMap::new(),
        }
    }

    /// Evaluation mode without a tape.
    pub fn inference() -> Self {
        Self::with(false, false, 0)
    }

    /// Evaluation mode (frozen statistics, no dropout) with a tape, for
    /// gradients with respect to inputs or activations.
    pub fn gradients() -> Self {
        Self::with(false, true, 0)
    }

    /// Training mode: batch statistics, dropout, tape.
    pub fn training(seed: u64) -> Self {
        Self::with(true, true, seed)
    }

    /// Records activations (and, on backward, their gradients) at the named taps.
    pub fn capture<I: IntoIterator<Item = S>, S: Into<String>>(mut self, names: I) -> Self {
        self.capture.extend(names.into_iter().map(Into::into));
        self
    }

    pub fn records(&self) -> bool {
        self.record
    }

    pub fn captures(&self, name: &str) -> bool {
        self.capture.contains(name)
    }

    pub fn push<T: Any + Send>(&mut self, v: T) {
        if self.record {
            self.tape.push(Box::new(v));
        }
    }

    pub fn pop<T: Any + Send>(&mut self) -> T {
        let b = self.tape.pop().expect("backward called without a recorded forward pass");
        *b.downcast::<T>().expect("tape entry type mismatch")
    }

    pub fn accumulate(&mut self, p: &Param, g: &[f32]) {
        if !p.trainable {
            return;
        }
        match self.grads.get_mut(&p.id) {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => {
                self.grads.insert(p.id, g.to_vec());
            }
        }
    }

    pub fn grad(&self, p: &Param) -> Option<&[f32]> {
        self.grads.get(&p.id).map(|v| v.as_slice())
    }

    pub fn grads(&self) -> &HashMap<usize, Vec<f32>> {
        &self.grads
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn queue_stat_update(&mut self, p: &Param, value: Vec<f32>) {
        if self.train {
            self.stat_updates.push((p.id, value));
        }
    }

    /// Writes queued batch-norm running statistics into the network.
    pub fn apply_stat_updates(&mut self, layer: &mut dyn Layer) {
        if self.stat_updates.is_empty() {
            return;
        }
        let updates: HashMap<usize, Vec<f32>> = self.stat_updates.drain(..).collect();
        for p in layer.params_mut() {
            if let Some(v) = updates.get(&p.id) {
                p.value.clone_from(v);
            }
        }
    }
}

/// A differentiable transformation of a batch. Shapes exclude the batch axis.
pub trait Layer: Send + Sync {
    fn forward(&self, x: Tensor, ctx: &mut Ctx) -> Tensor;
    fn backward(&self, g: Tensor, ctx: &mut Ctx) -> Tensor;
    fn out_shape(&self, input: &[usize]) -> Vec<usize>;
    fn params(&self) -> Vec<&Param> {
        Vec::new()
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        Vec::new()
    }
    /// Names of activation taps inside this layer, in forward order.
    fn taps(&self, _out: &mut Vec<String>) {}
}

pub fn count_params(layer: &dyn Layer) -> usize {
    layer.params().iter().filter(|p| !p.buffer).map(|p| p.len()).sum()
}

pub fn set_trainable(layer: &mut dyn Layer, trainable: bool) {
    for p in layer.params_mut() {
        if !p.buffer {
            p.trainable = trainable;
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: i32,
    state: HashMap<usize, (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
            t: 0,
            state: HashMap::new(),
        }
    }

    pub fn step(&mut self, layer: &mut dyn Layer, grads: &HashMap<usize, Vec<f32>>) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for p in layer.params_mut() {
            let Some(g) = grads.get(&p.id) else { continue };
            if !p.trainable {
                continue;
            }
            let (m, v) = self
                .state
                .entry(p.id)
                .or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
            for i in 0..p.value.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p.value[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

const WEIGHTS_MAGIC: &[u8] = b"DRFW1\n";

/// Serializes every parameter and buffer as little-endian f32 records keyed by name.
pub fn save_weights(layer: &dyn Layer) -> Vec<u8> {
    let mut out = WEIGHTS_MAGIC.to_vec();
    let params = layer.params();
    out.extend((params.len() as u32).to_le_bytes());
    for p in params {
        out.extend((p.name.len() as u32).to_le_bytes());
        out.extend(p.name.as_bytes());
        out.extend((p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            out.extend((d as u32).to_le_bytes());
        }
        for v in &p.value {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Invalid("corrupt weights blob: truncated".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

/// Loads weights saved by [`save_weights`]; names and shapes must match exactly.
pub fn load_weights(layer: &mut dyn Layer, bytes: &[u8]) -> Result<()> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(WEIGHTS_MAGIC.len())? != WEIGHTS_MAGIC {
        return Err(Error::Invalid("corrupt weights blob: bad magic".into()));
    }
    let count = cur.u32()?;
    let mut stored: HashMap<String, (Vec<usize>, Vec<f32>)> = HashMap::with_capacity(count);
    for _ in 0..count {
        let nl = cur.u32()?;
        let name = String::from_utf8(cur.take(nl)?.to_vec())
            .map_err(|_| Error::Invalid("corrupt weights blob: name is not utf-8".into()))?;
        let rank = cur.u32()?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()?);
        }
        let n: usize = shape.iter().product();
        let vals = cur
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        stored.insert(name, (shape, vals));
    }
    let mut params = layer.params_mut();
    if params.len() != stored.len() {
        return Err(Error::Invalid(format!(
            "weights blob holds {} tensors, model expects {}",
            stored.len(),
            params.len()
        )));
    }
    for p in params.iter_mut() {
        let (shape, vals) = stored
            .remove(&p.name)
            .ok_or_else(|| Error::Invalid(format!("weights blob lacks {}", p.name)))?;
        if shape != p.shape {
            return Err(Error::Shape(format!(
                "{}: stored shape {shape:?}, model shape {:?}",
                p.name, p.shape
            )));
        }
        p.value = vals;
    }
    Ok(())
}
