//! Forward and backward kernels for the layers the network uses.
//!
//! Every function here is pure: it reads its inputs and returns fresh
//! tensors. The one exception is [`batch_norm`], which updates the running
//! statistics handed to it in train mode.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Copies the `k x k` neighbourhoods of one `[C, H, W]` sample into a
/// `[C*k*k, H*W]` column matrix (zero padding, stride 1).
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize, cols: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dx = kj as isize - pad as isize;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + ki as isize - pad as isize;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    out[..x0].fill(T::zero());
                    out[x1..].fill(T::zero());
                    let s0 = (x0 as isize + dx) as usize;
                    out[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into a `[C, H, W]` sample.
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize, x: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                let dx = kj as isize - pad as isize;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ki as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (x0 as isize + dx) as usize;
                    let dst = &mut plane[sy as usize * w + s0..sy as usize * w + s0 + (x1 - x0)];
                    for (d, &v) in dst.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Shape bookkeeping shared by the conv forward and backward passes.
#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
}

fn conv_geom<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<ConvGeom> {
    let [n, c_in, h, w] = input.dims4()?;
    let [c_out, wc_in, kh, kw] = weight.dims4()?;
    if wc_in != c_in {
        return Err(Error::shape(format!(
            "conv2d: input has {c_in} channels but weight expects {wc_in}"
        )));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::shape(format!(
            "conv2d: kernel must be square with odd size, got {kh}x{kw}"
        )));
    }
    if bias.shape() != [c_out] {
        return Err(Error::shape(format!(
            "conv2d: bias shape {:?} does not match {c_out} output channels",
            bias.shape()
        )));
    }
    Ok(ConvGeom {
        n,
        c_in,
        c_out,
        h,
        w,
        k: kh,
        pad: (kh - 1) / 2,
    })
}

/// Same-padded 2-D cross-correlation with zero padding and stride 1.
///
/// `padding` must equal `(k - 1) / 2`; it is the only mode the network uses.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = conv_geom(input, weight, bias)?;
    if padding != g.pad {
        return Err(Error::shape(format!(
            "conv2d: only same padding is supported (k={}, padding must be {})",
            g.k, g.pad
        )));
    }
    Ok(conv2d_same(input, weight, bias, g))
}

fn conv2d_same<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    g: ConvGeom,
) -> Tensor<T> {
    let hw = g.h * g.w;
    let ckk = g.c_in * g.k * g.k;
    let mut out = vec![T::zero(); g.n * g.c_out * hw];
    let mut cols = vec![T::zero(); ckk * hw];
    let x = input.data();
    for ni in 0..g.n {
        let sample = &x[ni * g.c_in * hw..(ni + 1) * g.c_in * hw];
        let dst = &mut out[ni * g.c_out * hw..(ni + 1) * g.c_out * hw];
        for (co, &b) in bias.data().iter().enumerate() {
            dst[co * hw..(co + 1) * hw].fill(b);
        }
        im2col(sample, g.c_in, g.h, g.w, g.k, g.pad, &mut cols);
        T::gemm(
            g.c_out,
            ckk,
            hw,
            T::one(),
            weight.data(),
            (ckk, 1),
            &cols,
            (hw, 1),
            T::one(),
            dst,
            (hw, 1),
        );
    }
    Tensor::new([g.n, g.c_out, g.h, g.w], out).expect("conv output shape")
}

/// Gradients of [`conv2d`] with respect to its input (when requested),
/// weight and bias.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let g = conv_geom(input, weight, bias)?;
    if grad_out.shape() != [g.n, g.c_out, g.h, g.w] {
        return Err(Error::shape(format!(
            "conv2d backward: gradient shape {:?} does not match output",
            grad_out.shape()
        )));
    }
    let hw = g.h * g.w;
    let ckk = g.c_in * g.k * g.k;
    let x = input.data();
    let dy = grad_out.data();
    let mut dw = vec![T::zero(); g.c_out * ckk];
    let mut db = vec![T::zero(); g.c_out];
    let mut dx = need_input_grad.then(|| vec![T::zero(); g.n * g.c_in * hw]);
    let mut cols = vec![T::zero(); ckk * hw];
    let mut dcols = if need_input_grad {
        vec![T::zero(); ckk * hw]
    } else {
        Vec::new()
    };

    for ni in 0..g.n {
        let sample = &x[ni * g.c_in * hw..(ni + 1) * g.c_in * hw];
        let dys = &dy[ni * g.c_out * hw..(ni + 1) * g.c_out * hw];
        for (co, acc) in db.iter_mut().enumerate() {
            *acc += dys[co * hw..(co + 1) * hw].iter().copied().sum::<T>();
        }
        im2col(sample, g.c_in, g.h, g.w, g.k, g.pad, &mut cols);
        // dW += dY [c_out, hw] * cols^T [hw, ckk]
        T::gemm(
            g.c_out,
            hw,
            ckk,
            T::one(),
            dys,
            (hw, 1),
            &cols,
            (1, hw),
            T::one(),
            &mut dw,
            (ckk, 1),
        );
        if let Some(dx) = dx.as_mut() {
            // dcols = W^T [ckk, c_out] * dY [c_out, hw]
            T::gemm(
                ckk,
                g.c_out,
                hw,
                T::one(),
                weight.data(),
                (1, ckk),
                dys,
                (hw, 1),
                T::zero(),
                &mut dcols,
                (hw, 1),
            );
            col2im(
                &dcols,
                g.c_in,
                g.h,
                g.w,
                g.k,
                g.pad,
                &mut dx[ni * g.c_in * hw..(ni + 1) * g.c_in * hw],
            );
        }
    }
    Ok(ConvGrads {
        input: dx.map(|d| Tensor::new(input.shape(), d).expect("dx shape")),
        weight: Tensor::new(weight.shape(), dw).expect("dw shape"),
        bias: Tensor::new([g.c_out], db).expect("db shape"),
    })
}

/// Whether batch norm normalizes with batch statistics or running ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel running mean and variance of a batch norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    /// The conventional starting point before any batch has been seen.
    pub fn fresh(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    /// `running = (1 - m) * running + m * batch`, with the unbiased batch
    /// variance.
    pub fn update(&mut self, batch: &BatchStats<T>) {
        let m = T::from_f64(BN_MOMENTUM);
        let count = batch.count as f64;
        let unbias = T::from_f64(count / (count - 1.0).max(1.0));
        for c in 0..self.mean.len() {
            self.mean[c] = (T::one() - m) * self.mean[c] + m * batch.mean[c];
            self.var[c] = (T::one() - m) * self.var[c] + m * batch.var[c] * unbias;
        }
    }
}

/// Biased per-channel statistics of one batch.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

/// Intermediate values of a train-mode batch norm, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

fn bn_check<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<[usize; 4]> {
    let dims = input.dims4()?;
    let c = dims[1];
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(format!(
            "batch_norm: gamma {:?} / beta {:?} do not match {c} channels",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok(dims)
}

/// Train-mode batch norm: normalizes each channel with the statistics of
/// this batch (two-pass mean and biased variance).
pub fn batch_norm_train<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, BatchStats<T>, BnCache<T>)> {
    let [n, c, h, w] = bn_check(input, gamma, beta)?;
    let hw = h * w;
    let count = n * hw;
    if count < 2 {
        return Err(Error::TooFewBatchValues(count));
    }
    let x = input.data();
    let inv_count = 1.0 / count as f64;
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let mut inv_std = vec![T::zero(); c];
    for ci in 0..c {
        let planes = (0..n).map(|ni| &x[(ni * c + ci) * hw..(ni * c + ci + 1) * hw]);
        let s: f64 = planes.clone().flatten().map(|v| v.as_f64()).sum();
        let mu = s * inv_count;
        let ss: f64 = planes.flatten().map(|v| (v.as_f64() - mu).powi(2)).sum();
        let v = ss * inv_count;
        mean[ci] = T::from_f64(mu);
        var[ci] = T::from_f64(v);
        inv_std[ci] = T::from_f64(1.0 / (v + BN_EPS).sqrt());
    }
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            let (mu, is, ga, be) = (mean[ci], inv_std[ci], gamma.data()[ci], beta.data()[ci]);
            for i in base..base + hw {
                let xh = (x[i] - mu) * is;
                xhat[i] = xh;
                out[i] = ga * xh + be;
            }
        }
    }
    Ok((
        Tensor::new(input.shape(), out)?,
        BatchStats { mean, var, count },
        BnCache {
            xhat: Tensor::new(input.shape(), xhat)?,
            inv_std,
        },
    ))
}

/// Eval-mode batch norm with fixed statistics.
pub fn batch_norm_eval<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &RunningStats<T>,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = bn_check(input, gamma, beta)?;
    if stats.mean.len() != c || stats.var.len() != c {
        return Err(Error::shape(format!(
            "batch_norm: running stats have {} channels, input has {c}",
            stats.mean.len()
        )));
    }
    let hw = h * w;
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    for ci in 0..c {
        let is = T::one() / (stats.var[ci] + T::from_f64(BN_EPS)).sqrt();
        let scale = gamma.data()[ci] * is;
        let shift = beta.data()[ci] - stats.mean[ci] * scale;
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for i in base..base + hw {
                out[i] = x[i] * scale + shift;
            }
        }
    }
    Tensor::new(input.shape(), out)
}

/// Batch norm over `[N, C, H, W]` with per-channel `gamma`/`beta`.
///
/// In train mode the batch statistics normalize the input and are folded
/// into `running` (initialized to mean 0, variance 1 on first use). In eval
/// mode `running` must already hold statistics.
pub fn batch_norm<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: &mut Option<RunningStats<T>>,
    mode: Mode,
) -> Result<Tensor<T>> {
    match mode {
        Mode::Train => {
            let (out, stats, _) = batch_norm_train(input, gamma, beta)?;
            running
                .get_or_insert_with(|| RunningStats::fresh(gamma.numel()))
                .update(&stats);
            Ok(out)
        }
        Mode::Eval => {
            let stats = running
                .as_ref()
                .ok_or_else(|| Error::MissingRunningStats("batch_norm".into()))?;
            batch_norm_eval(input, gamma, beta, stats)
        }
    }
}

/// Backward of train-mode batch norm. Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_train_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &BnCache<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [n, c, h, w] = grad_out.dims4()?;
    let hw = h * w;
    let count = (n * hw) as f64;
    let dy = grad_out.data();
    let xh = cache.xhat.data();
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ci in 0..c {
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xh = 0.0f64;
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for i in base..base + hw {
                sum_dy += dy[i].as_f64();
                sum_dy_xh += dy[i].as_f64() * xh[i].as_f64();
            }
        }
        dgamma[ci] = T::from_f64(sum_dy_xh);
        dbeta[ci] = T::from_f64(sum_dy);
        let ga = gamma.data()[ci];
        let k = ga * cache.inv_std[ci];
        let mean_dy = T::from_f64(sum_dy / count);
        let mean_dy_xh = T::from_f64(sum_dy_xh / count);
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for i in base..base + hw {
                dx[i] = k * (dy[i] - mean_dy - xh[i] * mean_dy_xh);
            }
        }
    }
    Ok((
        Tensor::new(grad_out.shape(), dx)?,
        Tensor::new([c], dgamma)?,
        Tensor::new([c], dbeta)?,
    ))
}

/// Backward of eval-mode batch norm. Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_eval_backward<T: Scalar>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &RunningStats<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [n, c, h, w] = grad_out.dims4()?;
    let hw = h * w;
    let x = input.data();
    let dy = grad_out.data();
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ci in 0..c {
        let is = T::one() / (stats.var[ci] + T::from_f64(BN_EPS)).sqrt();
        let scale = gamma.data()[ci] * is;
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for i in base..base + hw {
                dx[i] = dy[i] * scale;
                dgamma[ci] += dy[i] * (x[i] - stats.mean[ci]) * is;
                dbeta[ci] += dy[i];
            }
        }
    }
    Ok((
        Tensor::new(grad_out.shape(), dx)?,
        Tensor::new([c], dgamma)?,
        Tensor::new([c], dbeta)?,
    ))
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `grad_out` where the relu output was positive.
pub fn relu_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    output.zip_map(grad_out, |y, g| if y > T::zero() { g } else { T::zero() })
}

/// Concatenates `[N, C_i, H, W]` tensors along the channel axis, in order.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat_channels: no inputs"))?
        .dims4()?;
    let [n, _, h, w] = first;
    let mut total_c = 0;
    for p in parts {
        let [pn, pc, ph, pw] = p.dims4()?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::shape(format!(
                "concat_channels: {:?} does not match batch/spatial dims of {:?}",
                p.shape(),
                first
            )));
        }
        total_c += pc;
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * total_c * hw);
    for ni in 0..n {
        for p in parts {
            let pc = p.shape()[1];
            out.extend_from_slice(&p.data()[ni * pc * hw..(ni + 1) * pc * hw]);
        }
    }
    Tensor::new([n, total_c, h, w], out)
}

/// Channels `[start, start + len)` of an `[N, C, H, W]` tensor.
pub fn slice_channels<T: Scalar>(input: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.dims4()?;
    if start + len > c {
        return Err(Error::shape(format!(
            "slice_channels: range {start}..{} exceeds {c} channels",
            start + len
        )));
    }
    if start == 0 && len == c {
        return Ok(input.clone());
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * len * hw);
    for ni in 0..n {
        let base = (ni * c + start) * hw;
        out.extend_from_slice(&input.data()[base..base + len * hw]);
    }
    Tensor::new([n, len, h, w], out)
}

/// Adjoint of [`slice_channels`]: places `grad` into a zero tensor of
/// `full_shape` at channel offset `start`.
pub fn unslice_channels<T: Scalar>(
    grad: &Tensor<T>,
    full_shape: &[usize],
    start: usize,
) -> Result<Tensor<T>> {
    let [n, len, h, w] = grad.dims4()?;
    let c = full_shape[1];
    let hw = h * w;
    let mut out = vec![T::zero(); n * c * hw];
    for ni in 0..n {
        let base = (ni * c + start) * hw;
        out[base..base + len * hw]
            .copy_from_slice(&grad.data()[ni * len * hw..(ni + 1) * len * hw]);
    }
    Tensor::new(full_shape.to_vec(), out)
}
