use std::fmt;

/// Dense f32 tensor, row-major. Image batches are NHWC.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, v: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![v; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn item(&self, i: usize) -> &[f32] {
        let l = self.item_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [f32] {
        let l = self.item_len();
        &mut self.data[i * l..(i + 1) * l]
    }

    /// (n, h, w, c) of a rank-4 tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected NHWC tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    /// (n, features) of a rank-2 tensor.
    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected [n, f] tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    pub fn channels(&self) -> usize {
        *self.shape.last().expect("non-scalar tensor")
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(mut self, s: f32) -> Self {
        for v in &mut self.data {
            *v *= s;
        }
        self
    }

    /// Stacks equally shaped items along a new leading axis.
    pub fn stack(items: &[&[f32]], item_shape: &[usize]) -> Self {
        let mut shape = vec![items.len()];
        shape.extend_from_slice(item_shape);
        let mut data = Vec::with_capacity(shape.iter().product());
        for it in items {
            data.extend_from_slice(it);
        }
        Tensor::new(shape, data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Row-wise softmax of an [n, k] tensor, computed in f64.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let (n, k) = logits.dims2();
    let mut out = vec![0f32; n * k];
    for i in 0..n {
        let row = &logits.data[i * k..(i + 1) * k];
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - m).exp()).collect();
        let s: f64 = exps.iter().sum();
        for j in 0..k {
            out[i * k + j] = (exps[j] / s) as f32;
        }
    }
    Tensor::new(vec![n, k], out)
}

/// Mean categorical cross-entropy over the batch and its gradient with
/// respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> (f64, Tensor) {
    let (n, k) = logits.dims2();
    assert_eq!(labels.len(), n);
    let mut grad = vec![0f32; n * k];
    let mut loss = 0.0;
    for i in 0..n {
        let row = &logits.data[i * k..(i + 1) * k];
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - m).exp()).collect();
        let s: f64 = exps.iter().sum();
        loss += -(exps[labels[i]] / s).max(1e-300).ln();
        for j in 0..k {
            let p = exps[j] / s;
            let y = if j == labels[i] { 1.0 } else { 0.0 };
            grad[i * k + j] = ((p - y) / n as f64) as f32;
        }
    }
    (loss / n as f64, Tensor::new(vec![n, k], grad))
}
