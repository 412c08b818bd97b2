//! Minimal dense-tensor layer: f64 row-major tensors, forward operations and
//! hand-derived backward passes for the fixed layer repertoire used here.

use crate::{Error, Result};

/// Dense numeric array, row-major, 64-bit floats throughout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as 2-D.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() requires a 2-D tensor");
        self.shape[0]
    }

    /// Number of columns when viewed as 2-D.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() requires a 2-D tensor");
        self.shape[1]
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    /// Row slice of a 2-D tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.cols();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let cols = self.cols();
        &mut self.data[r * cols..(r + 1) * cols]
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..m {
            for j in 0..n {
                out.data[j * m + i] = self.data[i * n + j];
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise a += b.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Standard matrix product of 2-D tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
        return Err(Error::Dimension(format!(
            "matmul: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (p, &av) in arow.iter().enumerate().take(k) {
            if av == 0.0 {
                continue;
            }
            let brow = b.row(p);
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// Backward pass of `matmul`: gradients for both operands given d(out).
pub fn matmul_backward(a: &Tensor, b: &Tensor, d_out: &Tensor) -> (Tensor, Tensor) {
    let d_a = matmul(d_out, &b.transpose()).expect("shapes fixed by forward");
    let d_b = matmul(&a.transpose(), d_out).expect("shapes fixed by forward");
    (d_a, d_b)
}

/// Elementwise max(0, x).
pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::from_vec(x.shape(), data).unwrap()
}

/// ReLU backward: passes gradient where x > 0; subgradient at exactly 0 is 0.
pub fn relu_backward(x: &Tensor, d_out: &Tensor) -> Tensor {
    assert_eq!(x.shape(), d_out.shape(), "relu_backward shape mismatch");
    let data = x
        .data()
        .iter()
        .zip(d_out.data())
        .map(|(&xv, &dv)| if xv > 0.0 { dv } else { 0.0 })
        .collect();
    Tensor::from_vec(x.shape(), data).unwrap()
}

/// Numerically stable softmax over a single logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    assert!(!logits.is_empty(), "softmax of empty vector");
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Row-wise softmax of a 2-D logit tensor.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(logits.shape());
    for r in 0..logits.rows() {
        let p = softmax(logits.row(r));
        out.row_mut(r).copy_from_slice(&p);
    }
    out
}

/// Softmax backward for one row: dL/dlogit_k = p_k (dp_k - sum_m p_m dp_m).
pub fn softmax_backward_row(probs: &[f64], d_probs: &[f64]) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(d_probs).map(|(p, d)| p * d).sum();
    probs
        .iter()
        .zip(d_probs)
        .map(|(p, d)| p * (d - dot))
        .collect()
}

/// Row-wise softmax backward.
pub fn softmax_backward_rows(probs: &Tensor, d_probs: &Tensor) -> Tensor {
    assert_eq!(probs.shape(), d_probs.shape());
    let mut out = Tensor::zeros(probs.shape());
    for r in 0..probs.rows() {
        let d = softmax_backward_row(probs.row(r), d_probs.row(r));
        out.row_mut(r).copy_from_slice(&d);
    }
    out
}

/// Trainable tensor with accumulated gradient, momentum buffer and freeze flag.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    pub velocity: Tensor,
    pub frozen: bool,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        let velocity = Tensor::zeros(value.shape());
        Parameter {
            value,
            grad,
            velocity,
            frozen: false,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }
}

/// SGD with momentum: v <- m*v + g; w <- w - lr*v. Frozen parameters are left
/// bit-identical; all gradients are zeroed afterwards.
pub fn sgd_step<'a, I>(params: I, lr: f64, momentum: f64)
where
    I: IntoIterator<Item = &'a mut Parameter>,
{
    assert!(lr > 0.0, "learning rate must be positive");
    assert!((0.0..1.0).contains(&momentum), "momentum must be in [0, 1)");
    for p in params {
        if p.frozen {
            p.zero_grad();
            continue;
        }
        for i in 0..p.value.len() {
            let g = p.grad.data()[i];
            let v = momentum * p.velocity.data()[i] + g;
            p.velocity.data_mut()[i] = v;
            p.value.data_mut()[i] -= lr * v;
        }
        p.zero_grad();
    }
}
