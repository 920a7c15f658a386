//! Dense layers with explicit backward passes. Sentences of a batch are packed
//! row-wise into one matrix; attention works per sentence segment.

use std::fmt;
use std::ops::{AddAssign, DivAssign, MulAssign, Range, SubAssign};

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand, Zip};
use rand::Rng;

/// Floating-point element type of a model (f32 for training and inference,
/// f64 for gradient checking).
pub trait Real:
    num_traits::Float
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + 'static
{
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn lit(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn lit(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Row offsets of the sentences packed into a batch matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
}

impl Segments {
    pub fn from_lengths(lengths: impl IntoIterator<Item = usize>) -> Self {
        let mut offsets = vec![0];
        for l in lengths {
            offsets.push(offsets.last().unwrap() + l);
        }
        Self { offsets }
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn range(&self, i: usize) -> Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }
}

fn uniform<T: Real, R: Rng>(rng: &mut R, shape: (usize, usize), bound: f64) -> Array2<T> {
    Array2::from_shape_simple_fn(shape, || T::lit(rng.gen_range(-bound..bound)))
}

pub(crate) fn embedding<T: Real, R: Rng>(rng: &mut R, vocab: usize, dim: usize) -> Array2<T> {
    uniform(rng, (vocab, dim), (3.0 / dim as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// in x out
    pub w: Array2<T>,
    pub b: Array1<T>,
}

impl<T: Real> Linear<T> {
    pub fn init<R: Rng>(rng: &mut R, input: usize, output: usize) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        Self {
            w: uniform(rng, (input, output), bound),
            b: Array1::zeros(output),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }

    pub fn forward(&self, x: &ArrayView2<T>) -> Array2<T> {
        let mut y = x.dot(&self.w);
        y += &self.b;
        y
    }

    /// Accumulates parameter gradients into `grad` and returns dL/dx.
    pub fn backward(&self, x: &ArrayView2<T>, dy: &Array2<T>, grad: &mut Self) -> Array2<T> {
        general_mat_mul(T::one(), &x.t(), dy, T::one(), &mut grad.w);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
}

#[derive(Debug, Clone)]
pub struct LnCache<T> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            gamma: Array1::zeros(self.gamma.raw_dim()),
            beta: Array1::zeros(self.beta.raw_dim()),
        }
    }

    pub fn forward(&self, x: &Array2<T>) -> (Array2<T>, LnCache<T>) {
        let n = T::lit(x.ncols() as f64);
        let eps = T::lit(LN_EPS);
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, istd) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / n;
            row -= mean;
            let var = row.iter().map(|&v| v * v).sum::<T>() / n;
            *istd = T::one() / (var + eps).sqrt();
            row *= *istd;
        }
        let mut y = &xhat * &self.gamma;
        y += &self.beta;
        (y, LnCache { xhat, inv_std })
    }

    /// Forward pass without keeping a cache.
    pub fn apply(&self, x: &Array2<T>) -> Array2<T> {
        self.forward(x).0
    }

    pub fn backward(&self, cache: &LnCache<T>, dy: &Array2<T>, grad: &mut Self) -> Array2<T> {
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let n = T::lit(dy.ncols() as f64);
        let mut dx = dy * &self.gamma;
        for ((mut row, xh), &istd) in dx
            .rows_mut()
            .into_iter()
            .zip(cache.xhat.rows())
            .zip(cache.inv_std.iter())
        {
            let sum = row.sum();
            let dot = row.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>();
            Zip::from(&mut row).and(&xh).for_each(|d, &xv| {
                *d = istd / n * (n * *d - sum - xv * dot);
            });
        }
        dx
    }
}

/// Multi-head attention with per-head masking of the context vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct AttnCache<T> {
    q_in: Array2<T>,
    /// `None` for self-attention, where keys/values come from `q_in`.
    kv_in: Option<Array2<T>>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    ctx: Array2<T>,
    /// Post-softmax weights per (segment, head); `None` for masked heads.
    pub probs: Vec<Option<Array2<T>>>,
    pub heads: usize,
}

impl<T: Real> AttnCache<T> {
    pub fn context(&self) -> &Array2<T> {
        &self.ctx
    }
}

/// Row-wise softmax in place.
pub fn softmax_rows<T: Real>(m: &mut Array2<T>) {
    for mut row in m.rows_mut() {
        let max = row.fold(T::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row /= z;
    }
}

pub struct AttnInput<'a, T> {
    pub q_in: Array2<T>,
    pub kv_in: Option<Array2<T>>,
    pub q_segs: &'a Segments,
    pub k_segs: &'a Segments,
    pub causal: bool,
    /// One flag per head; `true` zeroes that head's context vector.
    pub masked: &'a [bool],
}

impl<T: Real> Attention<T> {
    pub fn init<R: Rng>(rng: &mut R, d: usize) -> Self {
        Self {
            q: Linear::init(rng, d, d),
            k: Linear::init(rng, d, d),
            v: Linear::init(rng, d, d),
            o: Linear::init(rng, d, d),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            q: self.q.zeros_like(),
            k: self.k.zeros_like(),
            v: self.v.zeros_like(),
            o: self.o.zeros_like(),
        }
    }

    pub fn forward(&self, input: AttnInput<'_, T>) -> (Array2<T>, AttnCache<T>) {
        let heads = input.masked.len();
        let d = self.q.w.ncols();
        let dk = d / heads;
        let scale = T::lit(1.0 / (dk as f64).sqrt());
        let q = self.q.forward(&input.q_in.view());
        let kv_src = input.kv_in.as_ref().unwrap_or(&input.q_in).view();
        let k = self.k.forward(&kv_src);
        let v = self.v.forward(&kv_src);
        let mut ctx = Array2::zeros((q.nrows(), d));
        let mut probs = Vec::with_capacity(input.q_segs.len() * heads);
        for seg in 0..input.q_segs.len() {
            let qr = input.q_segs.range(seg);
            let kr = input.k_segs.range(seg);
            for (h, &is_masked) in input.masked.iter().enumerate() {
                if is_masked {
                    probs.push(None);
                    continue;
                }
                let cols = h * dk..(h + 1) * dk;
                let qh = q.slice(s![qr.clone(), cols.clone()]);
                let kh = k.slice(s![kr.clone(), cols.clone()]);
                let vh = v.slice(s![kr.clone(), cols.clone()]);
                let mut a = qh.dot(&kh.t());
                a *= scale;
                if input.causal {
                    for (i, mut row) in a.rows_mut().into_iter().enumerate() {
                        row.slice_mut(s![i + 1..]).fill(T::neg_infinity());
                    }
                }
                softmax_rows(&mut a);
                ctx.slice_mut(s![qr.clone(), cols]).assign(&a.dot(&vh));
                probs.push(Some(a));
            }
        }
        let out = self.o.forward(&ctx.view());
        let cache = AttnCache {
            q_in: input.q_in,
            kv_in: input.kv_in,
            q,
            k,
            v,
            ctx,
            probs,
            heads,
        };
        (out, cache)
    }

    /// Returns (dL/dq_in, dL/dkv_in). For self-attention the second is `None`
    /// and all input gradient is folded into the first.
    pub fn backward(
        &self,
        cache: &AttnCache<T>,
        dout: &Array2<T>,
        q_segs: &Segments,
        k_segs: &Segments,
        grad: &mut Self,
    ) -> (Array2<T>, Option<Array2<T>>) {
        let heads = cache.heads;
        let d = self.q.w.ncols();
        let dk = d / heads;
        let scale = T::lit(1.0 / (dk as f64).sqrt());
        let dctx = self.o.backward(&cache.ctx.view(), dout, &mut grad.o);
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk_all = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for seg in 0..q_segs.len() {
            let qr = q_segs.range(seg);
            let kr = k_segs.range(seg);
            for h in 0..heads {
                let Some(a) = &cache.probs[seg * heads + h] else {
                    continue;
                };
                let cols = h * dk..(h + 1) * dk;
                let dc = dctx.slice(s![qr.clone(), cols.clone()]);
                let qh = cache.q.slice(s![qr.clone(), cols.clone()]);
                let kh = cache.k.slice(s![kr.clone(), cols.clone()]);
                let vh = cache.v.slice(s![kr.clone(), cols.clone()]);
                let da = dc.dot(&vh.t());
                general_mat_mul(
                    T::one(),
                    &a.t(),
                    &dc,
                    T::one(),
                    &mut dv.slice_mut(s![kr.clone(), cols.clone()]),
                );
                let mut ds = &da * a;
                for (mut row, arow) in ds.rows_mut().into_iter().zip(a.rows()) {
                    let dot = row.sum();
                    Zip::from(&mut row).and(&arow).for_each(|x, &p| *x = *x - p * dot);
                }
                ds *= scale;
                general_mat_mul(
                    T::one(),
                    &ds,
                    &kh,
                    T::one(),
                    &mut dq.slice_mut(s![qr.clone(), cols.clone()]),
                );
                general_mat_mul(
                    T::one(),
                    &ds.t(),
                    &qh,
                    T::one(),
                    &mut dk_all.slice_mut(s![kr.clone(), cols]),
                );
            }
        }
        let kv_in = cache.kv_in.as_ref().unwrap_or(&cache.q_in).view();
        let mut dq_in = self.q.backward(&cache.q_in.view(), &dq, &mut grad.q);
        let mut dkv = self.k.backward(&kv_in, &dk_all, &mut grad.k);
        dkv += &self.v.backward(&kv_in, &dv, &mut grad.v);
        if cache.kv_in.is_none() {
            dq_in += &dkv;
            (dq_in, None)
        } else {
            (dq_in, Some(dkv))
        }
    }
}

/// Position-wise feed-forward block with ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward<T> {
    pub up: Linear<T>,
    pub down: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct FfnCache<T> {
    x: Array2<T>,
    hidden: Array2<T>,
}

impl<T: Real> FeedForward<T> {
    pub fn init<R: Rng>(rng: &mut R, d: usize, width: usize) -> Self {
        Self {
            up: Linear::init(rng, d, width),
            down: Linear::init(rng, width, d),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            up: self.up.zeros_like(),
            down: self.down.zeros_like(),
        }
    }

    pub fn forward(&self, x: Array2<T>) -> (Array2<T>, FfnCache<T>) {
        let mut hidden = self.up.forward(&x.view());
        hidden.mapv_inplace(|v| v.max(T::zero()));
        let y = self.down.forward(&hidden.view());
        (y, FfnCache { x, hidden })
    }

    pub fn backward(&self, cache: &FfnCache<T>, dy: &Array2<T>, grad: &mut Self) -> Array2<T> {
        let mut dh = self.down.backward(&cache.hidden.view(), dy, &mut grad.down);
        Zip::from(&mut dh).and(&cache.hidden).for_each(|g, &h| {
            if h <= T::zero() {
                *g = T::zero();
            }
        });
        self.up.backward(&cache.x.view(), &dh, &mut grad.up)
    }
}

/// Fixed sinusoidal position table, `max_len` x `d`.
pub fn sinusoidal<T: Real>(max_len: usize, d: usize) -> Array2<T> {
    Array2::from_shape_fn((max_len, d), |(pos, i)| {
        let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let angle = pos as f64 * rate;
        T::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}
