//! Single-layer multi-head scaled dot-product self-attention with a residual
//! connection: `y = x + concat_h(softmax(q_h k_hᵀ / √d_h) v_h) · W_o`.
//! No positional encoding is applied.

use ndarray::{s, Array2, Axis};
use rand::Rng;

use crate::nn::{sq_sum, uniform};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T> {
    pub heads: usize,
    pub wq: Array2<T>,
    pub wk: Array2<T>,
    pub wv: Array2<T>,
    pub wo: Array2<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrad<T> {
    pub wq: Array2<T>,
    pub wk: Array2<T>,
    pub wv: Array2<T>,
    pub wo: Array2<T>,
}

pub(crate) struct AttentionCache<T> {
    x: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<Array2<T>>,
    mixed: Array2<T>,
}

impl<T: Scalar> Attention<T> {
    pub fn init<R: Rng>(rng: &mut R, dim: usize, heads: usize) -> Self {
        let qk = (3.0 / dim as f64).sqrt();
        Attention {
            heads,
            wq: uniform(rng, (dim, dim), qk),
            wk: uniform(rng, (dim, dim), qk),
            wv: uniform(rng, (dim, dim), qk),
            wo: uniform(rng, (dim, dim), 0.5 / (dim as f64).sqrt()),
        }
    }

    pub fn zeros(dim: usize, heads: usize) -> Self {
        Attention {
            heads,
            wq: Array2::zeros((dim, dim)),
            wk: Array2::zeros((dim, dim)),
            wv: Array2::zeros((dim, dim)),
            wo: Array2::zeros((dim, dim)),
        }
    }

    fn head_dim(&self) -> usize {
        self.wq.nrows() / self.heads
    }

    pub(crate) fn forward(&self, x: Array2<T>) -> (Array2<T>, AttentionCache<T>) {
        let n = x.nrows();
        let dh = self.head_dim();
        let inv_sqrt = T::one() / T::of(dh as f64).sqrt();
        let q = x.dot(&self.wq);
        let k = x.dot(&self.wk);
        let v = x.dot(&self.wv);
        let mut mixed = Array2::zeros((n, self.wq.ncols()));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut a = q.slice(cols).dot(&k.slice(cols).t()) * inv_sqrt;
            for mut row in a.axis_iter_mut(Axis(0)) {
                let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                row.mapv_inplace(|v| (v - max).exp());
                let sum: T = row.iter().copied().sum();
                row.mapv_inplace(|v| v / sum);
            }
            mixed.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
            probs.push(a);
        }
        let y = &x + &mixed.dot(&self.wo);
        (
            y,
            AttentionCache {
                x,
                q,
                k,
                v,
                probs,
                mixed,
            },
        )
    }

    pub(crate) fn backward(
        &self,
        cache: &AttentionCache<T>,
        dy: &Array2<T>,
    ) -> (AttentionGrad<T>, Array2<T>) {
        let dh = self.head_dim();
        let inv_sqrt = T::one() / T::of(dh as f64).sqrt();
        let dwo = cache.mixed.t().dot(dy);
        let dmixed = dy.dot(&self.wo.t());
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let a = &cache.probs[h];
            let dout = dmixed.slice(cols);
            let da = dout.dot(&cache.v.slice(cols).t());
            dv.slice_mut(cols).assign(&a.t().dot(&dout));
            // softmax backward, row-wise
            let mut ds = Array2::zeros(a.raw_dim());
            for i in 0..a.nrows() {
                let inner: T = (0..a.ncols()).map(|j| da[[i, j]] * a[[i, j]]).sum();
                for j in 0..a.ncols() {
                    ds[[i, j]] = a[[i, j]] * (da[[i, j]] - inner) * inv_sqrt;
                }
            }
            dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
        }
        let grad = AttentionGrad {
            wq: cache.x.t().dot(&dq),
            wk: cache.x.t().dot(&dk),
            wv: cache.x.t().dot(&dv),
            wo: dwo,
        };
        let dx = dy + &dq.dot(&self.wq.t()) + dk.dot(&self.wk.t()) + dv.dot(&self.wv.t());
        (grad, dx)
    }

    pub(crate) fn apply(&mut self, g: &AttentionGrad<T>, lr: T) {
        self.wq.scaled_add(-lr, &g.wq);
        self.wk.scaled_add(-lr, &g.wk);
        self.wv.scaled_add(-lr, &g.wv);
        self.wo.scaled_add(-lr, &g.wo);
    }

    pub(crate) fn tensors_mut(&mut self) -> [(&'static str, &mut Array2<T>); 4] {
        [
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
        ]
    }

    pub(crate) fn tensors(&self) -> [&Array2<T>; 4] {
        [&self.wq, &self.wk, &self.wv, &self.wo]
    }
}

impl<T: Scalar> AttentionGrad<T> {
    pub(crate) fn zeros_like(a: &Attention<T>) -> Self {
        AttentionGrad {
            wq: Array2::zeros(a.wq.raw_dim()),
            wk: Array2::zeros(a.wk.raw_dim()),
            wv: Array2::zeros(a.wv.raw_dim()),
            wo: Array2::zeros(a.wo.raw_dim()),
        }
    }

    pub(crate) fn add(&mut self, other: &AttentionGrad<T>) {
        self.wq += &other.wq;
        self.wk += &other.wk;
        self.wv += &other.wv;
        self.wo += &other.wo;
    }

    pub(crate) fn sq_norm(&self) -> T {
        self.tensors().iter().map(|t| sq_sum(t.iter())).sum()
    }

    pub(crate) fn scale(&mut self, f: T) {
        for t in [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo] {
            t.mapv_inplace(|v| v * f);
        }
    }

    pub(crate) fn tensors(&self) -> [&Array2<T>; 4] {
        [&self.wq, &self.wk, &self.wv, &self.wo]
    }
}
