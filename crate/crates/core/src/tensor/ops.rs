//! Forward and backward kernels for the layer primitives.
//!
//! Images are laid out NHWC (`[batch, height, width, channels]`) and
//! convolution kernels as `[k, k, c_in, c_out]`.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

use super::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    Valid,
    Same,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    batch: usize,
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    cout: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn cols(&self) -> usize {
        self.k * self.k * self.cin
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

pub(crate) fn conv_geometry<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    padding: Padding,
) -> Result<ConvGeom> {
    let (is, ks) = (input.shape(), kernel.shape());
    if is.len() != 4 {
        return Err(Error::Dimension(format!(
            "conv2d input must be [batch, h, w, c], got {is:?}"
        )));
    }
    if ks.len() != 4 || ks[0] != ks[1] {
        return Err(Error::Dimension(format!(
            "conv2d kernel must be [k, k, c_in, c_out], got {ks:?}"
        )));
    }
    let k = ks[0];
    if k % 2 == 0 {
        return Err(Error::Dimension(format!(
            "conv2d kernel size {k} is not odd"
        )));
    }
    if ks[2] != is[3] {
        return Err(Error::Dimension(format!(
            "conv2d input has {} channels but kernel expects {}",
            is[3], ks[2]
        )));
    }
    let (pad, ho, wo) = match padding {
        Padding::Same => (k / 2, is[1], is[2]),
        Padding::Valid => {
            if is[1] < k || is[2] < k {
                return Err(Error::Dimension(format!(
                    "conv2d valid input {}x{} smaller than kernel {k}",
                    is[1], is[2]
                )));
            }
            (0, is[1] - k + 1, is[2] - k + 1)
        }
    };
    Ok(ConvGeom {
        batch: is[0],
        h: is[1],
        w: is[2],
        cin: is[3],
        k,
        cout: ks[3],
        pad,
        ho,
        wo,
    })
}

fn im2col<T: Scalar>(g: &ConvGeom, image: &[T], col: &mut [T]) {
    let kc = g.cols();
    let run = g.cin;
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &mut col[(oy * g.wo + ox) * kc..][..kc];
            for ky in 0..g.k {
                let iy = (oy + ky) as isize - g.pad as isize;
                for kx in 0..g.k {
                    let ix = (ox + kx) as isize - g.pad as isize;
                    let dst = &mut row[(ky * g.k + kx) * run..][..run];
                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                        dst.fill(T::zero());
                    } else {
                        let src = (iy as usize * g.w + ix as usize) * run;
                        dst.copy_from_slice(&image[src..src + run]);
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &ConvGeom, col: &[T], image: &mut [T]) {
    let kc = g.cols();
    let run = g.cin;
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &col[(oy * g.wo + ox) * kc..][..kc];
            for ky in 0..g.k {
                let iy = (oy + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.w + ix as usize) * run;
                    let src = &row[(ky * g.k + kx) * run..][..run];
                    for (d, &s) in image[dst..dst + run].iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}

/// Stride-1 2-D convolution (cross-correlation) with optional per-channel bias.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    padding: Padding,
) -> Result<Tensor<T>> {
    let g = conv_geometry(input, kernel, padding)?;
    if let Some(b) = bias {
        if b.len() != g.cout {
            return Err(Error::Dimension(format!(
                "conv2d bias has {} entries, expected {}",
                b.len(),
                g.cout
            )));
        }
    }
    let in_stride = g.h * g.w * g.cin;
    let out_stride = g.positions() * g.cout;
    let mut out = vec![T::zero(); g.batch * out_stride];
    let kdata = kernel.data();
    out.par_chunks_mut(out_stride.max(1))
        .zip(input.data().par_chunks(in_stride.max(1)))
        .for_each(|(dst, src)| {
            let mut col = vec![T::zero(); g.positions() * g.cols()];
            im2col(&g, src, &mut col);
            let kc = g.cols() as isize;
            let co = g.cout as isize;
            T::gemm(
                g.positions(),
                g.cols(),
                g.cout,
                &col,
                kc,
                1,
                kdata,
                co,
                1,
                T::zero(),
                dst,
                co,
                1,
            );
            if let Some(b) = bias {
                for px in dst.chunks_mut(g.cout) {
                    for (v, &bb) in px.iter_mut().zip(b.data()) {
                        *v = *v + bb;
                    }
                }
            }
        });
    Tensor::new(vec![g.batch, g.ho, g.wo, g.cout], out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    padding: Padding,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let g = conv_geometry(input, kernel, padding)?;
    let in_stride = g.h * g.w * g.cin;
    let out_stride = g.positions() * g.cout;
    let kc = g.cols();
    let kdata = kernel.data();

    let per_sample: Vec<(Vec<T>, Option<Vec<T>>)> = input
        .data()
        .par_chunks(in_stride.max(1))
        .zip(grad_out.data().par_chunks(out_stride.max(1)))
        .map(|(src, dout)| {
            let mut col = vec![T::zero(); g.positions() * kc];
            im2col(&g, src, &mut col);
            let mut dk = vec![T::zero(); kc * g.cout];
            // dK = col^T * dout
            T::gemm(
                kc,
                g.positions(),
                g.cout,
                &col,
                1,
                kc as isize,
                dout,
                g.cout as isize,
                1,
                T::zero(),
                &mut dk,
                g.cout as isize,
                1,
            );
            let dimg = need_input.then(|| {
                // dcol = dout * K^T, reusing the column buffer
                T::gemm(
                    g.positions(),
                    g.cout,
                    kc,
                    dout,
                    g.cout as isize,
                    1,
                    kdata,
                    1,
                    g.cout as isize,
                    T::zero(),
                    &mut col,
                    kc as isize,
                    1,
                );
                let mut dimg = vec![T::zero(); in_stride];
                col2im_add(&g, &col, &mut dimg);
                dimg
            });
            (dk, dimg)
        })
        .collect();

    let mut dk = vec![T::zero(); kc * g.cout];
    let mut dinput = need_input.then(|| Vec::with_capacity(g.batch * in_stride));
    for (part, dimg) in per_sample {
        for (a, b) in dk.iter_mut().zip(part) {
            *a = *a + b;
        }
        if let (Some(all), Some(d)) = (dinput.as_mut(), dimg) {
            all.extend(d);
        }
    }
    let mut db = vec![T::zero(); g.cout];
    for px in grad_out.data().chunks(g.cout) {
        for (a, &b) in db.iter_mut().zip(px) {
            *a = *a + b;
        }
    }
    Ok(ConvGrads {
        input: dinput
            .map(|d| Tensor::new(input.shape().to_vec(), d))
            .transpose()?,
        kernel: Tensor::new(kernel.shape().to_vec(), dk)?,
        bias: Tensor::new(vec![g.cout], db)?,
    })
}

/// Per-channel statistics of a batch-norm input (channel = last axis).
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

fn channel_stats<T: Scalar>(x: &Tensor<T>) -> BatchStats<T> {
    let c = *x.shape().last().unwrap_or(&1);
    let n = (x.len() / c.max(1)) as f64;
    let mut sum = vec![0.0f64; c];
    for px in x.data().chunks(c) {
        for (s, &v) in sum.iter_mut().zip(px) {
            *s += v.f64();
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let mut sq = vec![0.0f64; c];
    for px in x.data().chunks(c) {
        for ((s, &v), m) in sq.iter_mut().zip(px).zip(&mean) {
            let d = v.f64() - m;
            *s += d * d;
        }
    }
    BatchStats {
        mean: mean.iter().map(|&m| T::of(m)).collect(),
        var: sq.iter().map(|&s| T::of(s / n)).collect(),
    }
}

pub(crate) fn check_bn_args<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    mode: Mode,
) -> Result<usize> {
    let c = *x
        .shape()
        .last()
        .ok_or_else(|| Error::Dimension("batch_norm on a rank-0 tensor".into()))?;
    if scale.len() != c || shift.len() != c {
        return Err(Error::Dimension(format!(
            "batch_norm expects {c} scale/shift entries, got {}/{}",
            scale.len(),
            shift.len()
        )));
    }
    if mode == Mode::Train && x.shape()[0] < 2 {
        return Err(Error::Parameter(
            "batch_norm in train mode needs a batch of at least 2".into(),
        ));
    }
    Ok(c)
}

/// Normalises over every axis except the last. In train mode the batch
/// statistics are used and returned; in infer mode `running` is used.
pub fn batch_norm<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    mode: Mode,
    running: &BatchStats<T>,
) -> Result<(Tensor<T>, BatchStats<T>)> {
    let c = check_bn_args(x, scale, shift, mode)?;
    let stats = match mode {
        Mode::Train => channel_stats(x),
        Mode::Infer => running.clone(),
    };
    let eps = T::of(BN_EPS);
    let inv: Vec<T> = stats
        .var
        .iter()
        .map(|&v| (v + eps).sqrt().recip())
        .collect();
    let mut out = x.data().to_vec();
    for px in out.chunks_mut(c) {
        for (j, v) in px.iter_mut().enumerate() {
            *v = scale.data()[j] * (*v - stats.mean[j]) * inv[j] + shift.data()[j];
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, stats))
}

pub struct BnGrads<T> {
    pub input: Tensor<T>,
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
}

pub fn batch_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    stats: &BatchStats<T>,
    mode: Mode,
    grad_out: &Tensor<T>,
) -> Result<BnGrads<T>> {
    let c = scale.len();
    let n = (x.len() / c) as f64;
    let eps = T::of(BN_EPS);
    let inv: Vec<T> = stats
        .var
        .iter()
        .map(|&v| (v + eps).sqrt().recip())
        .collect();
    let mut dscale = vec![0.0f64; c];
    let mut dshift = vec![0.0f64; c];
    for (px, dy) in x.data().chunks(c).zip(grad_out.data().chunks(c)) {
        for j in 0..c {
            let xhat = ((px[j] - stats.mean[j]) * inv[j]).f64();
            dscale[j] += dy[j].f64() * xhat;
            dshift[j] += dy[j].f64();
        }
    }
    let mut dx = vec![T::zero(); x.len()];
    match mode {
        Mode::Infer => {
            for (d, dy) in dx.chunks_mut(c).zip(grad_out.data().chunks(c)) {
                for j in 0..c {
                    d[j] = dy[j] * scale.data()[j] * inv[j];
                }
            }
        }
        Mode::Train => {
            // sum(dxhat) = scale * dshift, sum(dxhat * xhat) = scale * dscale
            for ((d, px), dy) in dx
                .chunks_mut(c)
                .zip(x.data().chunks(c))
                .zip(grad_out.data().chunks(c))
            {
                for j in 0..c {
                    let g = scale.data()[j].f64();
                    let xhat = ((px[j] - stats.mean[j]) * inv[j]).f64();
                    let dxhat = dy[j].f64() * g;
                    let v = inv[j].f64() / n * (n * dxhat - g * dshift[j] - xhat * g * dscale[j]);
                    d[j] = T::of(v);
                }
            }
        }
    }
    Ok(BnGrads {
        input: Tensor::new(x.shape().to_vec(), dx)?,
        scale: Tensor::new(vec![c], dscale.into_iter().map(T::of).collect())?,
        shift: Tensor::new(vec![c], dshift.into_iter().map(T::of).collect())?,
    })
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Inverted-dropout mask: kept entries carry `1 / keep_prob`, dropped ones 0.
pub fn dropout_mask<T: Scalar, R: Rng + ?Sized>(
    len: usize,
    keep_prob: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Vec<T>> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(Error::Parameter(format!(
            "dropout keep probability {keep_prob} outside (0, 1]"
        )));
    }
    if mode == Mode::Infer || keep_prob == 1.0 {
        return Ok(vec![T::one(); len]);
    }
    let kept = T::of(1.0 / keep_prob);
    Ok((0..len)
        .map(|_| {
            if rng.gen::<f64>() < keep_prob {
                kept
            } else {
                T::zero()
            }
        })
        .collect())
}

pub fn dropout<T: Scalar, R: Rng + ?Sized>(
    x: &Tensor<T>,
    keep_prob: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let mask = dropout_mask(x.len(), keep_prob, mode, rng)?;
    let data = x.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
    Tensor::new(x.shape().to_vec(), data)
}

fn dense_dims<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || b.len() != ws[1] {
        return Err(Error::Dimension(format!(
            "dense: input {:?}, weights {:?}, bias {:?} do not compose",
            xs,
            ws,
            b.shape()
        )));
    }
    Ok((xs[0], xs[1], ws[1]))
}

/// Affine map `x W + b` for `x: [m, d]`, `W: [d, n]`.
pub fn dense<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, d, n) = dense_dims(x, w, b)?;
    let mut out = Vec::with_capacity(m * n);
    for _ in 0..m {
        out.extend_from_slice(b.data());
    }
    T::gemm(
        m,
        d,
        n,
        x.data(),
        d as isize,
        1,
        w.data(),
        n as isize,
        1,
        T::one(),
        &mut out,
        n as isize,
        1,
    );
    Tensor::new(vec![m, n], out)
}

pub struct DenseGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<DenseGrads<T>> {
    let (m, d) = (x.shape()[0], x.shape()[1]);
    let n = w.shape()[1];
    let mut dx = vec![T::zero(); m * d];
    T::gemm(
        m,
        n,
        d,
        grad_out.data(),
        n as isize,
        1,
        w.data(),
        1,
        n as isize,
        T::zero(),
        &mut dx,
        d as isize,
        1,
    );
    let mut dw = vec![T::zero(); d * n];
    T::gemm(
        d,
        m,
        n,
        x.data(),
        1,
        d as isize,
        grad_out.data(),
        n as isize,
        1,
        T::zero(),
        &mut dw,
        n as isize,
        1,
    );
    let mut db = vec![T::zero(); n];
    for row in grad_out.data().chunks(n) {
        for (a, &v) in db.iter_mut().zip(row) {
            *a = *a + v;
        }
    }
    Ok(DenseGrads {
        input: Tensor::new(vec![m, d], dx)?,
        weights: Tensor::new(vec![d, n], dw)?,
        bias: Tensor::new(vec![n], db)?,
    })
}

/// Row-wise softmax of `[m, c]` logits, stabilised by max subtraction.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let c = *logits.shape().last().unwrap_or(&1);
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(c) {
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Tensor::new(logits.shape().to_vec(), out).expect("same shape")
}

/// Mean cross-entropy of one-hot `labels` under `softmax(logits)`, and its
/// gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &Tensor<T>,
) -> Result<(T, Tensor<T>)> {
    let s = logits.shape();
    if s.len() != 2 || labels.shape() != s {
        return Err(Error::Dimension(format!(
            "cross entropy: logits {:?} vs labels {:?}",
            s,
            labels.shape()
        )));
    }
    let (m, c) = (s[0], s[1]);
    if c < 2 {
        return Err(Error::Input(
            "cross entropy needs at least 2 classes".into(),
        ));
    }
    for (i, row) in labels.data().chunks(c).enumerate() {
        let ones = row.iter().filter(|&&v| v == T::one()).count();
        let zeros = row.iter().filter(|&&v| v == T::zero()).count();
        if ones != 1 || zeros != c - 1 {
            return Err(Error::Input(format!("label row {i} is not one-hot")));
        }
    }
    let mut loss = 0.0f64;
    let mut grad = vec![T::zero(); m * c];
    let inv_m = 1.0 / m as f64;
    for ((row, y), g) in logits
        .data()
        .chunks(c)
        .zip(labels.data().chunks(c))
        .zip(grad.chunks_mut(c))
    {
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b.f64()));
        let lse = row.iter().map(|v| (v.f64() - max).exp()).sum::<f64>().ln() + max;
        for j in 0..c {
            let p = (row[j].f64() - lse).exp();
            let yj = y[j].f64();
            if yj > 0.0 {
                loss += lse - row[j].f64();
            }
            g[j] = T::of((p - yj) * inv_m);
        }
    }
    Ok((T::of(loss * inv_m), Tensor::new(vec![m, c], grad)?))
}

/// Class indices to a one-hot `[m, classes]` matrix.
pub fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Input(format!("label {l} outside [0, {classes})")));
        }
        data[i * classes + l] = T::one();
    }
    Tensor::new(vec![labels.len(), classes], data)
}
