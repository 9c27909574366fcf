//! Small dense-network building blocks with hand-written backward passes.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::scalar::Scalar;

/// Fully connected layer, `y = x·W + b` with `W` of shape `(in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Dense<T> {
    /// He-style uniform init; biases get a small random offset so an
    /// all-zero input still maps to a non-zero output.
    pub fn init<R: Rng>(rng: &mut R, inputs: usize, outputs: usize) -> Self {
        let limit = (6.0 / inputs.max(1) as f64).sqrt();
        Dense {
            weight: uniform(rng, (inputs, outputs), limit),
            bias: Array1::from_shape_fn(outputs, |_| T::of(rng.gen_range(-0.05..0.05))),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        x.dot(&self.weight) + &self.bias
    }

    /// Returns parameter gradients and the gradient w.r.t. the input.
    pub fn backward(&self, x: ArrayView2<T>, dy: ArrayView2<T>) -> (DenseGrad<T>, Array2<T>) {
        let grad = DenseGrad {
            weight: x.t().dot(&dy),
            bias: dy.sum_axis(Axis(0)),
        };
        let dx = dy.dot(&self.weight.t());
        (grad, dx)
    }

    pub fn apply(&mut self, grad: &DenseGrad<T>, lr: T) {
        self.weight.scaled_add(-lr, &grad.weight);
        self.bias.scaled_add(-lr, &grad.bias);
    }
}

impl<T: Scalar> DenseGrad<T> {
    pub fn sq_norm(&self) -> T {
        sq_sum(self.weight.iter()) + sq_sum(self.bias.iter())
    }

    pub fn scale(&mut self, f: T) {
        self.weight.mapv_inplace(|v| v * f);
        self.bias.mapv_inplace(|v| v * f);
    }
}

pub(crate) fn sq_sum<'a, T: Scalar>(it: impl Iterator<Item = &'a T>) -> T {
    it.fold(T::zero(), |acc, &v| acc + v * v)
}

pub fn uniform<T: Scalar, R: Rng>(rng: &mut R, shape: (usize, usize), limit: f64) -> Array2<T> {
    Array2::from_shape_fn(shape, |_| T::of(rng.gen_range(-limit..limit)))
}

pub fn relu<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient through ReLU given the pre-activation.
pub fn relu_backward<T: Scalar>(pre: &Array2<T>, dy: &Array2<T>) -> Array2<T> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(pre).for_each(|d, &p| {
        if p <= T::zero() {
            *d = T::zero();
        }
    });
    dx
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Row-wise L2 normalization. Rows with (near) zero norm map to the first
/// basis vector so every output row has unit length.
pub fn normalize_rows<T: Scalar>(x: &Array2<T>) -> (Array2<T>, Array1<T>) {
    let mut y = x.clone();
    let mut norms = Array1::zeros(x.nrows());
    for (i, mut row) in y.axis_iter_mut(Axis(0)).enumerate() {
        let n = row.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
        norms[i] = n;
        if n > T::of(1e-12) {
            row.mapv_inplace(|v| v / n);
        } else {
            row.fill(T::zero());
            if !row.is_empty() {
                row[0] = T::one();
            }
        }
    }
    (y, norms)
}

/// Backward pass of [`normalize_rows`]: `dx = (dy - y (y·dy)) / |x|`.
pub fn normalize_rows_backward<T: Scalar>(
    y: &Array2<T>,
    norms: &Array1<T>,
    dy: &Array2<T>,
) -> Array2<T> {
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..y.nrows() {
        let n = norms[i];
        if n <= T::of(1e-12) {
            continue;
        }
        let yr = y.row(i);
        let dr = dy.row(i);
        let proj = yr.dot(&dr);
        let mut out = dx.row_mut(i);
        for j in 0..yr.len() {
            out[j] = (dr[j] - yr[j] * proj) / n;
        }
    }
    dx
}

/// Mean of `-log softmax(scores)[i][i]` over rows, and the gradient w.r.t.
/// `scores` (already divided by the batch size).
pub fn diagonal_softmax_loss<T: Scalar>(scores: &Array2<T>) -> (T, Array2<T>) {
    let b = scores.nrows();
    let bt = T::of(b as f64);
    let mut loss = T::zero();
    let mut grad = Array2::zeros(scores.raw_dim());
    for i in 0..b {
        let row = scores.row(i);
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[i];
        for j in 0..row.len() {
            grad[[i, j]] = (row[j] - lse).exp() / bt;
        }
        grad[[i, i]] -= T::one() / bt;
    }
    (loss / bt, grad)
}
