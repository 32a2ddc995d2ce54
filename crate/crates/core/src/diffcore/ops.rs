use rand::Rng;

use super::tensor::{axpy, dot, BitMatrix, ParamGroup, ParamTensor, Tensor2};
use super::Real;
use crate::error::{MedmixError, Result};

/// `sqrt(2 / pi)`, the constant of the tanh form of GELU.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Denominator floor used by [`cosine_rows`].
pub const COSINE_EPS: f64 = 1e-8;

fn shape_err(op: &'static str, detail: String) -> MedmixError {
    MedmixError::Shape { op, detail }
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// `y = x W + b` with `W: d_in × d_out` and `b: 1 × d_out`.
pub fn linear_forward<T: Real>(x: &Tensor2<T>, w: &ParamTensor<T>, b: &ParamTensor<T>) -> Result<Tensor2<T>> {
    let (d_in, d_out) = w.shape();
    if x.cols() != d_in || b.shape() != (1, d_out) {
        return Err(shape_err("linear_forward", format!("x {:?}, W {:?}, b {:?}", x.shape(), w.shape(), b.shape())));
    }
    let mut y = x.matmul(&w.value)?;
    let bias = b.value.row(0);
    for i in 0..y.rows() {
        axpy(y.row_mut(i), T::one(), bias);
    }
    Ok(y)
}

/// Accumulates `dL/dW` and `dL/db`; does not compute `dL/dx`.
pub fn linear_backward_params<T: Real>(
    x: &Tensor2<T>,
    w: &mut ParamTensor<T>,
    b: &mut ParamTensor<T>,
    dy: &Tensor2<T>,
) -> Result<()> {
    if dy.shape() != (x.rows(), w.shape().1) {
        return Err(shape_err("linear_backward", format!("x {:?}, dy {:?}, W {:?}", x.shape(), dy.shape(), w.shape())));
    }
    x.matmul_tn_acc(dy, &mut w.grad)?;
    dy.sum_rows_acc(&mut b.grad)
}

/// Accumulates parameter gradients and returns `dL/dx`.
pub fn linear_backward<T: Real>(
    x: &Tensor2<T>,
    w: &mut ParamTensor<T>,
    b: &mut ParamTensor<T>,
    dy: &Tensor2<T>,
) -> Result<Tensor2<T>> {
    linear_backward_params(x, w, b, dy)?;
    dy.matmul(&w.value.transpose())
}

/// Dense layer owning its weight and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: ParamTensor<T>,
    pub bias: ParamTensor<T>,
}

impl<T: Real> Linear<T> {
    pub fn zeros(d_in: usize, d_out: usize, group: ParamGroup) -> Self {
        Self { weight: ParamTensor::zeros(d_in, d_out, group), bias: ParamTensor::zeros(1, d_out, group) }
    }

    /// Weights uniform in `±1/sqrt(d_in)`, bias zero.
    pub fn init_uniform(d_in: usize, d_out: usize, group: ParamGroup, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let data = (0..d_in * d_out).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
        Self {
            weight: ParamTensor::new(Tensor2::from_vec(d_in, d_out, data).unwrap(), group),
            bias: ParamTensor::zeros(1, d_out, group),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape().0
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape().1
    }

    pub fn forward(&self, x: &Tensor2<T>) -> Result<Tensor2<T>> {
        linear_forward(x, &self.weight, &self.bias)
    }

    pub fn backward(&mut self, x: &Tensor2<T>, dy: &Tensor2<T>) -> Result<Tensor2<T>> {
        linear_backward(x, &mut self.weight, &mut self.bias, dy)
    }

    pub fn backward_params(&mut self, x: &Tensor2<T>, dy: &Tensor2<T>) -> Result<()> {
        linear_backward_params(x, &mut self.weight, &mut self.bias, dy)
    }

    pub fn num_params(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    pub fn cast<U: Real>(&self) -> Linear<U> {
        Linear { weight: self.weight.cast(), bias: self.bias.cast() }
    }
}

// ---------------------------------------------------------------------------
// LayerNorm
// ---------------------------------------------------------------------------

/// Saved activations for [`layernorm_backward`].
#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    xhat: Tensor2<T>,
    inv_std: Vec<T>,
}

pub fn layernorm_forward<T: Real>(
    x: &Tensor2<T>,
    gain: &ParamTensor<T>,
    bias: &ParamTensor<T>,
    eps: f64,
) -> Result<(Tensor2<T>, LayerNormCache<T>)> {
    let d = x.cols();
    if gain.shape() != (1, d) || bias.shape() != (1, d) {
        return Err(shape_err(
            "layernorm_forward",
            format!("x {:?}, gain {:?}, bias {:?}", x.shape(), gain.shape(), bias.shape()),
        ));
    }
    let n = T::lit(d as f64);
    let eps = T::lit(eps);
    let g = gain.value.row(0);
    let b = bias.value.row(0);
    let mut xhat = Tensor2::zeros(x.rows(), d);
    let mut y = Tensor2::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let istd = T::one() / (var + eps).sqrt();
        inv_std.push(istd);
        let xr = xhat.row_mut(i);
        for j in 0..d {
            xr[j] = (row[j] - mean) * istd;
        }
        let yr = y.row_mut(i);
        for j in 0..d {
            yr[j] = xr[j] * g[j] + b[j];
        }
    }
    Ok((y, LayerNormCache { xhat, inv_std }))
}

pub fn layernorm_backward<T: Real>(
    cache: &LayerNormCache<T>,
    gain: &mut ParamTensor<T>,
    bias: &mut ParamTensor<T>,
    dy: &Tensor2<T>,
) -> Result<Tensor2<T>> {
    let (rows, d) = cache.xhat.shape();
    if dy.shape() != (rows, d) {
        return Err(shape_err("layernorm_backward", format!("dy {:?} vs {:?}", dy.shape(), (rows, d))));
    }
    let n = T::lit(d as f64);
    let mut dx = Tensor2::zeros(rows, d);
    let mut dxhat = vec![T::zero(); d];
    for i in 0..rows {
        let dyr = dy.row(i);
        let xr = cache.xhat.row(i);
        {
            let g = gain.value.row(0);
            for j in 0..d {
                dxhat[j] = dyr[j] * g[j];
            }
        }
        {
            let gg = gain.grad.row_mut(0);
            for j in 0..d {
                gg[j] += dyr[j] * xr[j];
            }
        }
        axpy(bias.grad.row_mut(0), T::one(), dyr);
        let sum_dxhat = dxhat.iter().copied().sum::<T>();
        let sum_dxhat_x = dot(&dxhat, xr);
        let scale = cache.inv_std[i] / n;
        let out = dx.row_mut(i);
        for j in 0..d {
            out[j] = scale * (n * dxhat[j] - sum_dxhat - xr[j] * sum_dxhat_x);
        }
    }
    Ok(dx)
}

/// Layer normalization with learned gain and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T> {
    pub gain: ParamTensor<T>,
    pub bias: ParamTensor<T>,
    pub eps: f64,
}

impl<T: Real> LayerNorm<T> {
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(d: usize, group: ParamGroup) -> Self {
        Self {
            gain: ParamTensor::new(Tensor2::filled(1, d, T::one()), group),
            bias: ParamTensor::zeros(1, d, group),
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn forward(&self, x: &Tensor2<T>) -> Result<(Tensor2<T>, LayerNormCache<T>)> {
        layernorm_forward(x, &self.gain, &self.bias, self.eps)
    }

    pub fn backward(&mut self, cache: &LayerNormCache<T>, dy: &Tensor2<T>) -> Result<Tensor2<T>> {
        layernorm_backward(cache, &mut self.gain, &mut self.bias, dy)
    }

    pub fn num_params(&self) -> usize {
        self.gain.numel() + self.bias.numel()
    }

    pub fn cast<U: Real>(&self) -> LayerNorm<U> {
        LayerNorm { gain: self.gain.cast(), bias: self.bias.cast(), eps: self.eps }
    }
}

// ---------------------------------------------------------------------------
// Activations, dropout, softmax
// ---------------------------------------------------------------------------

#[inline]
fn gelu_scalar<T: Real>(x: T) -> T {
    let k = T::lit(GELU_SQRT_2_OVER_PI);
    let c = T::lit(GELU_CUBIC);
    let half = T::lit(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

#[inline]
fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let k = T::lit(GELU_SQRT_2_OVER_PI);
    let c = T::lit(GELU_CUBIC);
    let half = T::lit(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::lit(3.0) * c * x * x)
}

/// GELU, tanh approximation.
pub fn gelu<T: Real>(x: &Tensor2<T>) -> Tensor2<T> {
    x.map(gelu_scalar)
}

/// `dL/dx` given the GELU input `x` and `dL/dy`.
pub fn gelu_backward<T: Real>(x: &Tensor2<T>, dy: &Tensor2<T>) -> Tensor2<T> {
    let mut dx = dy.clone();
    for (d, &xi) in dx.data_mut().iter_mut().zip(x.data()) {
        *d *= gelu_grad_scalar(xi);
    }
    dx
}

/// Inverted dropout. Returns the output and, when active, the per-entry scale
/// (`0` or `1/(1-rate)`) needed by [`dropout_backward`].
pub fn dropout<T: Real>(
    x: &Tensor2<T>,
    rate: f64,
    training: bool,
    rng: &mut impl Rng,
) -> Result<(Tensor2<T>, Option<Vec<T>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(MedmixError::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    let scale: Vec<T> =
        (0..x.data().len()).map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep }).collect();
    let mut y = x.clone();
    for (v, &s) in y.data_mut().iter_mut().zip(&scale) {
        *v *= s;
    }
    Ok((y, Some(scale)))
}

pub fn dropout_backward<T: Real>(scale: Option<&[T]>, dy: &Tensor2<T>) -> Tensor2<T> {
    match scale {
        None => dy.clone(),
        Some(s) => {
            let mut dx = dy.clone();
            for (v, &k) in dx.data_mut().iter_mut().zip(s) {
                *v *= k;
            }
            dx
        }
    }
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise softmax.
pub fn softmax_rows<T: Real>(x: &Tensor2<T>) -> Tensor2<T> {
    let mut y = x.clone();
    for i in 0..y.rows() {
        softmax_in_place(y.row_mut(i));
    }
    y
}

/// Backward of a (masked) softmax given its output `y`:
/// `dx_j = y_j (dy_j - Σ_i y_i dy_i)`. Entries with `y_j = 0` get exactly 0.
pub fn softmax_backward<T: Real>(y: &Tensor2<T>, dy: &Tensor2<T>) -> Tensor2<T> {
    let mut dx = Tensor2::zeros(y.rows(), y.cols());
    for i in 0..y.rows() {
        let yr = y.row(i);
        let dyr = dy.row(i);
        let s = dot(yr, dyr);
        let out = dx.row_mut(i);
        for j in 0..yr.len() {
            out[j] = if yr[j] == T::zero() { T::zero() } else { yr[j] * (dyr[j] - s) };
        }
    }
    dx
}

/// Output of [`masked_softmax`].
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedSoftmax<T> {
    pub weights: Tensor2<T>,
    /// `true` for rows whose mask had no set bit; such rows are all zero.
    pub empty: Vec<bool>,
}

/// Softmax over the unmasked entries of each row. Masked entries are excluded
/// from normalization and receive weight exactly zero.
pub fn masked_softmax<T: Real>(scores: &Tensor2<T>, mask: &BitMatrix) -> Result<MaskedSoftmax<T>> {
    if scores.shape() != (mask.rows(), mask.cols()) {
        return Err(shape_err(
            "masked_softmax",
            format!("scores {:?}, mask {:?}", scores.shape(), (mask.rows(), mask.cols())),
        ));
    }
    let mut weights = Tensor2::zeros(scores.rows(), scores.cols());
    let mut empty = Vec::with_capacity(scores.rows());
    for i in 0..scores.rows() {
        let s = scores.row(i);
        let m = mask.row(i);
        let max = s.iter().zip(m).filter(|(_, &b)| b).map(|(&v, _)| v).fold(T::neg_infinity(), T::max);
        if max == T::neg_infinity() {
            empty.push(true);
            continue;
        }
        empty.push(false);
        let w = weights.row_mut(i);
        let mut sum = T::zero();
        for j in 0..s.len() {
            if m[j] {
                w[j] = (s[j] - max).exp();
                sum += w[j];
            }
        }
        for v in w.iter_mut() {
            *v /= sum;
        }
    }
    Ok(MaskedSoftmax { weights, empty })
}

// ---------------------------------------------------------------------------
// Similarities
// ---------------------------------------------------------------------------

/// Row-wise cosine similarity with denominator `max(‖a‖·‖b‖, 1e-8)`.
pub fn cosine_rows<T: Real>(a: &Tensor2<T>, b: &Tensor2<T>) -> Result<Vec<T>> {
    if a.shape() != b.shape() {
        return Err(shape_err("cosine_rows", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok((0..a.rows())
        .map(|i| {
            let (ar, br) = (a.row(i), b.row(i));
            let den = (dot(ar, ar).sqrt() * dot(br, br).sqrt()).max(T::lit(COSINE_EPS));
            dot(ar, br) / den
        })
        .collect())
}

/// Gradients of `Σ_i dcos_i · cos(a_i, b_i)` with respect to `a` and `b`.
pub fn cosine_rows_backward<T: Real>(a: &Tensor2<T>, b: &Tensor2<T>, dcos: &[T]) -> (Tensor2<T>, Tensor2<T>) {
    let mut da = Tensor2::zeros(a.rows(), a.cols());
    let mut db = Tensor2::zeros(b.rows(), b.cols());
    let eps = T::lit(COSINE_EPS);
    for i in 0..a.rows() {
        let g = dcos[i];
        if g == T::zero() {
            continue;
        }
        let (ar, br) = (a.row(i), b.row(i));
        let (na2, nb2) = (dot(ar, ar), dot(br, br));
        let prod = na2.sqrt() * nb2.sqrt();
        let ab = dot(ar, br);
        if prod > eps {
            let cos = ab / prod;
            let (dar, dbr) = (da.row_mut(i), db.row_mut(i));
            for j in 0..ar.len() {
                dar[j] = g * (br[j] / prod - cos * ar[j] / na2);
            }
            for j in 0..br.len() {
                dbr[j] = g * (ar[j] / prod - cos * br[j] / nb2);
            }
        } else {
            let dar = da.row_mut(i);
            for j in 0..ar.len() {
                dar[j] = g * br[j] / eps;
            }
            let dbr = db.row_mut(i);
            for j in 0..br.len() {
                dbr[j] = g * ar[j] / eps;
            }
        }
    }
    (da, db)
}

/// Euclidean distance matrix among the rows of `z` listed in `subset`.
pub fn pairwise_distances<T: Real>(z: &Tensor2<T>, subset: &[usize]) -> Tensor2<T> {
    let n = subset.len();
    let mut dist = Tensor2::zeros(n, n);
    for a in 0..n {
        for b in a + 1..n {
            let (za, zb) = (z.row(subset[a]), z.row(subset[b]));
            let d2 = za.iter().zip(zb).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>();
            let d = d2.sqrt();
            dist.set(a, b, d);
            dist.set(b, a, d);
        }
    }
    dist
}

/// Backward of [`pairwise_distances`]. `ddist` is the upstream gradient for the
/// full symmetric matrix; the returned tensor has the shape of `z` and is zero
/// outside the subset. Coincident points contribute a zero subgradient.
pub fn pairwise_distances_backward<T: Real>(
    z: &Tensor2<T>,
    subset: &[usize],
    dist: &Tensor2<T>,
    ddist: &Tensor2<T>,
) -> Tensor2<T> {
    let mut dz = Tensor2::zeros(z.rows(), z.cols());
    let n = subset.len();
    let mut diff = vec![T::zero(); z.cols()];
    for a in 0..n {
        for b in a + 1..n {
            let d = dist.get(a, b);
            if d == T::zero() {
                continue;
            }
            let g = (ddist.get(a, b) + ddist.get(b, a)) / d;
            if g == T::zero() {
                continue;
            }
            let (ia, ib) = (subset[a], subset[b]);
            for ((o, &x), &y) in diff.iter_mut().zip(z.row(ia)).zip(z.row(ib)) {
                *o = x - y;
            }
            axpy(dz.row_mut(ia), g, &diff);
            axpy(dz.row_mut(ib), -g, &diff);
        }
    }
    dz
}
