//! Forward and backward kernels.
//!
//! Backward functions read `d loss / d output` from the output tensor's grad
//! buffer and accumulate into the input's grad buffer (only when the input
//! has one allocated) and into the parameter grads (always).

use rand::Rng;

use super::{Element, ParamGroup, Tensor};
use crate::error::{Error, Result};

/// Class index of the target in every two-way classification head.
pub const TARGET: usize = 0;
/// Class index of the background.
pub const BACKGROUND: usize = 1;

/// Spatial output extent of a convolution or pooling window.
pub fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::config("stride must be positive"));
    }
    if kernel == 0 || kernel > input + 2 * pad {
        return Err(Error::shape(format!(
            "kernel {kernel} does not fit padded extent {}",
            input + 2 * pad
        )));
    }
    Ok((input + 2 * pad - kernel) / stride + 1)
}

fn rank4(t: &Tensor<impl Element>, op: &str) -> Result<[usize; 4]> {
    match *t.dims() {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::shape(format!("{op} expects rank 4, got {:?}", t.dims()))),
    }
}

fn output_grad<'a, T: Element>(output: &'a Tensor<T>, op: &str) -> Result<&'a [T]> {
    output
        .grad()
        .ok_or_else(|| Error::usage(format!("{op} backward: output has no gradient")))
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Calls `f(column-matrix offset, image offset)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (k, s, p) = (self.kernel, self.stride, self.pad as isize);
        let cols = self.cols();
        for c in 0..self.channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    for oh in 0..self.out_h {
                        let ih = (oh * s + ki) as isize - p;
                        if ih < 0 || ih >= self.height as isize {
                            continue;
                        }
                        let base = (c * self.height + ih as usize) * self.width;
                        for ow in 0..self.out_w {
                            let iw = (ow * s + kj) as isize - p;
                            if iw < 0 || iw >= self.width as isize {
                                continue;
                            }
                            f(row * cols + oh * self.out_w + ow, base + iw as usize);
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Element>(&self, image: &[T], cols: &mut [T]) {
        if self.pad == 0 {
            self.im2col_unpadded(image, cols);
            return;
        }
        cols.iter_mut().for_each(|v| *v = T::zero());
        self.for_each_tap(|dst, src| cols[dst] = image[src]);
    }

    /// Splits every image row into `stride` column phases so that each
    /// kernel tap reads a contiguous run.
    fn im2col_unpadded<T: Element>(&self, image: &[T], cols: &mut [T]) {
        let (k, s) = (self.kernel, self.stride);
        let pw = self.width.div_ceil(s);
        let rows_total = self.channels * self.height;
        let mut phases = vec![T::zero(); s * rows_total * pw];
        for (r, src) in image.chunks_exact(self.width).enumerate() {
            for (j, &v) in src.iter().enumerate() {
                phases[((j % s) * rows_total + r) * pw + j / s] = v;
            }
        }
        let p = self.cols();
        for c in 0..self.channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let phase = &phases[(kj % s) * rows_total * pw..];
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for (oh, out) in dst.chunks_exact_mut(self.out_w).enumerate() {
                        let start = (c * self.height + oh * s + ki) * pw + kj / s;
                        out.copy_from_slice(&phase[start..start + self.out_w]);
                    }
                }
            }
        }
    }

    fn col2im<T: Element>(&self, cols: &[T], image: &mut [T]) {
        self.for_each_tap(|src, dst| image[dst] += cols[src]);
    }
}

fn conv_geom<T: Element>(
    input: &Tensor<T>,
    params: &ParamGroup<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    let [_, c, h, w] = rank4(input, "conv2d")?;
    let (kc, kh, kw) = match *params.weights.dims() {
        [_, kc, kh, kw] => (kc, kh, kw),
        _ => return Err(Error::shape("conv2d kernel must be rank 4")),
    };
    if kc != c {
        return Err(Error::config(format!(
            "{}: kernel expects {kc} input channels, input has {c}",
            params.name
        )));
    }
    if kh != kw {
        return Err(Error::config("conv2d kernels must be square"));
    }
    Ok(ConvGeom {
        channels: c,
        height: h,
        width: w,
        kernel: kh,
        stride,
        pad,
        out_h: out_extent(h, kh, stride, pad)?,
        out_w: out_extent(w, kw, stride, pad)?,
    })
}

pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    params: &ParamGroup<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = conv_geom(input, params, stride, pad)?;
    let n = input.batch();
    let filters = params.weights.dims()[0];
    let (rows, cols) = (g.rows(), g.cols());
    let mut out = Tensor::zeros(&[n, filters, g.out_h, g.out_w]);
    let mut colbuf = vec![T::zero(); rows * cols];
    let w = params.weights.data();
    let bias = params.bias.data();
    for (i, dst) in out.data_mut().chunks_mut(filters * cols).enumerate() {
        for (f, row) in dst.chunks_mut(cols).enumerate() {
            row.iter_mut().for_each(|v| *v = bias[f]);
        }
        g.im2col(input.item(i), &mut colbuf);
        // Yᵀ (P×F) += colsᵀ (P×R) · Wᵀ (R×F), stored straight into F×P layout
        T::gemm(
            cols,
            rows,
            filters,
            T::one(),
            &colbuf,
            (1, cols as isize),
            w,
            (1, rows as isize),
            T::one(),
            dst,
            (1, cols as isize),
        );
    }
    out.check_finite(&params.name)?;
    Ok(out)
}

pub fn conv2d_backward<T: Element>(
    input: &mut Tensor<T>,
    params: &mut ParamGroup<T>,
    output: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<()> {
    let g = conv_geom(input, params, stride, pad)?;
    let dout = output_grad(output, "conv2d")?;
    let filters = params.weights.dims()[0];
    let (rows, cols) = (g.rows(), g.cols());
    let n = input.batch();
    if output.dims() != [n, filters, g.out_h, g.out_w] {
        return Err(Error::shape("conv2d backward: output shape mismatch"));
    }
    params.require_grad();
    let want_input = input.has_grad();
    let mut colbuf = vec![T::zero(); rows * cols];
    let mut dcols = vec![T::zero(); rows * cols];
    let item_len = input.item_len();
    for i in 0..n {
        let dy = &dout[i * filters * cols..(i + 1) * filters * cols];
        {
            let (_, gb) = params.bias.data_and_grad_mut();
            for (f, row) in dy.chunks(cols).enumerate() {
                gb[f] += row.iter().copied().sum::<T>();
            }
        }
        g.im2col(input.item(i), &mut colbuf);
        {
            let (_, gw) = params.weights.data_and_grad_mut();
            // dW (F×R) += dY (F×P) · colsᵀ (P×R)
            T::gemm(
                filters,
                cols,
                rows,
                T::one(),
                dy,
                (cols as isize, 1),
                &colbuf,
                (1, cols as isize),
                T::one(),
                gw,
                (rows as isize, 1),
            );
        }
        if want_input {
            // dcols (R×P) = Wᵀ (R×F) · dY (F×P)
            T::gemm(
                rows,
                filters,
                cols,
                T::one(),
                params.weights.data(),
                (1, rows as isize),
                dy,
                (cols as isize, 1),
                T::zero(),
                &mut dcols,
                (cols as isize, 1),
            );
            let gin = input.grad_mut().unwrap();
            g.col2im(&dcols, &mut gin[i * item_len..(i + 1) * item_len]);
        }
    }
    Ok(())
}

fn pool_geom(input: &Tensor<impl Element>, k: usize, stride: usize) -> Result<ConvGeom> {
    let [_, c, h, w] = rank4(input, "maxpool2d")?;
    Ok(ConvGeom {
        channels: c,
        height: h,
        width: w,
        kernel: k,
        stride,
        pad: 0,
        out_h: out_extent(h, k, stride, 0)?,
        out_w: out_extent(w, k, stride, 0)?,
    })
}

/// Flat input index of the window maximum (first in row-major order on ties).
#[inline]
fn argmax_window<T: Element>(plane: &[T], g: &ConvGeom, oh: usize, ow: usize) -> usize {
    let mut best = oh * g.stride * g.width + ow * g.stride;
    for i in 0..g.kernel {
        let row = (oh * g.stride + i) * g.width + ow * g.stride;
        for j in 0..g.kernel {
            if plane[row + j] > plane[best] {
                best = row + j;
            }
        }
    }
    best
}

pub fn maxpool2d<T: Element>(input: &Tensor<T>, k: usize, stride: usize) -> Result<Tensor<T>> {
    let g = pool_geom(input, k, stride)?;
    let n = input.batch();
    let plane_in = g.height * g.width;
    let mut out = Tensor::zeros(&[n, g.channels, g.out_h, g.out_w]);
    let src = input.data();
    for (p, dst) in out.data_mut().chunks_mut(g.out_h * g.out_w).enumerate() {
        let plane = &src[p * plane_in..(p + 1) * plane_in];
        for (oh, row_out) in dst.chunks_exact_mut(g.out_w).enumerate() {
            row_out.fill(T::neg_infinity());
            for i in 0..k {
                let row = &plane[(oh * stride + i) * g.width..(oh * stride + i + 1) * g.width];
                for (ow, o) in row_out.iter_mut().enumerate() {
                    for &v in &row[ow * stride..ow * stride + k] {
                        *o = o.max(v);
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn maxpool2d_backward<T: Element>(
    input: &mut Tensor<T>,
    output: &Tensor<T>,
    k: usize,
    stride: usize,
) -> Result<()> {
    let g = pool_geom(input, k, stride)?;
    let dout = output_grad(output, "maxpool2d")?;
    let planes = input.batch() * g.channels;
    let plane_in = g.height * g.width;
    let plane_out = g.out_h * g.out_w;
    let (x, gx) = input.data_and_grad_mut();
    for p in 0..planes {
        let plane = &x[p * plane_in..(p + 1) * plane_in];
        let gplane = &mut gx[p * plane_in..(p + 1) * plane_in];
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let best = argmax_window(plane, &g, oh, ow);
                gplane[best] += dout[p * plane_out + oh * g.out_w + ow];
            }
        }
    }
    Ok(())
}

/// Cross-channel local response normalization,
/// `y_c = x_c · (kappa + alpha·Σ_{c'∈window(c)} x_{c'}²)^(−beta)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lrn {
    pub size: usize,
    pub kappa: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for Lrn {
    /// VGG-M normalization constants.
    fn default() -> Self {
        Self {
            size: 5,
            kappa: 2.0,
            alpha: 1e-4,
            beta: 0.75,
        }
    }
}

impl Lrn {
    fn window(&self, c: usize, channels: usize) -> (usize, usize) {
        let lo = c.saturating_sub((self.size - 1) / 2);
        let hi = (c + self.size / 2).min(channels - 1);
        (lo, hi)
    }

    /// Per-element denominators `kappa + alpha·Σ x²`.
    fn scales<T: Element>(&self, x: &[T], channels: usize, plane: usize) -> Vec<T> {
        let (kappa, alpha) = (T::from_f64(self.kappa), T::from_f64(self.alpha));
        let mut s = vec![kappa; x.len()];
        for c in 0..channels {
            let (lo, hi) = self.window(c, channels);
            for cc in lo..=hi {
                for i in 0..plane {
                    let v = x[cc * plane + i];
                    s[c * plane + i] += alpha * v * v;
                }
            }
        }
        s
    }

    pub fn forward<T: Element>(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, c, h, w] = rank4(input, "lrn")?;
        let plane = h * w;
        let beta = T::from_f64(self.beta);
        let mut out = Tensor::zeros(input.dims());
        for i in 0..n {
            let x = input.item(i);
            let s = self.scales(x, c, plane);
            let dst = &mut out.data_mut()[i * c * plane..(i + 1) * c * plane];
            for j in 0..x.len() {
                dst[j] = x[j] * s[j].powf(-beta);
            }
        }
        out.check_finite("lrn")?;
        Ok(out)
    }

    pub fn backward<T: Element>(&self, input: &mut Tensor<T>, output: &Tensor<T>) -> Result<()> {
        let [n, c, h, w] = rank4(input, "lrn")?;
        let dout = output_grad(output, "lrn")?;
        let plane = h * w;
        let item = c * plane;
        let beta = T::from_f64(self.beta);
        let coef = T::from_f64(2.0 * self.alpha * self.beta);
        let (x_all, gx_all) = input.data_and_grad_mut();
        for i in 0..n {
            let x = &x_all[i * item..(i + 1) * item];
            let dy = &dout[i * item..(i + 1) * item];
            let s = self.scales(x, c, plane);
            // t_c = dy_c · x_c · s_c^(−beta−1)
            let t: Vec<T> = (0..item)
                .map(|j| dy[j] * x[j] * s[j].powf(-beta - T::one()))
                .collect();
            let gx = &mut gx_all[i * item..(i + 1) * item];
            for j in 0..item {
                gx[j] += dy[j] * s[j].powf(-beta);
            }
            for cc in 0..c {
                let (lo, hi) = self.window(cc, c);
                for src in lo..=hi {
                    for p in 0..plane {
                        gx[src * plane + p] -= coef * x[src * plane + p] * t[cc * plane + p];
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn relu<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    let data = input.data().iter().map(|&v| v.max(T::zero())).collect();
    Tensor::new(input.dims(), data).unwrap()
}

pub fn relu_backward<T: Element>(input: &mut Tensor<T>, output: &Tensor<T>) -> Result<()> {
    let dout = output_grad(output, "relu")?;
    let (x, gx) = input.data_and_grad_mut();
    for ((g, &xv), &d) in gx.iter_mut().zip(x).zip(dout) {
        if xv > T::zero() {
            *g += d;
        }
    }
    Ok(())
}

fn linear_dims<T: Element>(input: &Tensor<T>, params: &ParamGroup<T>) -> Result<(usize, usize, usize)> {
    let (b, i) = match *input.dims() {
        [b, i] => (b, i),
        _ => {
            return Err(Error::shape(format!(
                "{}: linear input must be rank 2, got {:?}",
                params.name,
                input.dims()
            )))
        }
    };
    let (o, wi) = match *params.weights.dims() {
        [o, wi] => (o, wi),
        _ => return Err(Error::shape("linear weights must be rank 2")),
    };
    if wi != i {
        return Err(Error::config(format!(
            "{}: expects {wi} input features, got {i}",
            params.name
        )));
    }
    Ok((b, i, o))
}

/// `y = x·Wᵀ + b` with `x: batch×in`, `W: out×in`.
pub fn linear<T: Element>(input: &Tensor<T>, params: &ParamGroup<T>) -> Result<Tensor<T>> {
    let (b, i, o) = linear_dims(input, params)?;
    let mut out = Tensor::zeros(&[b, o]);
    let bias = params.bias.data();
    for row in out.data_mut().chunks_mut(o) {
        row.copy_from_slice(bias);
    }
    T::gemm(
        b,
        i,
        o,
        T::one(),
        input.data(),
        (i as isize, 1),
        params.weights.data(),
        (1, i as isize),
        T::one(),
        out.data_mut(),
        (o as isize, 1),
    );
    out.check_finite(&params.name)?;
    Ok(out)
}

pub fn linear_backward<T: Element>(
    input: &mut Tensor<T>,
    params: &mut ParamGroup<T>,
    output: &Tensor<T>,
) -> Result<()> {
    let (b, i, o) = linear_dims(input, params)?;
    let dout = output_grad(output, "linear")?;
    params.require_grad();
    {
        let (_, gb) = params.bias.data_and_grad_mut();
        for row in dout.chunks(o) {
            for (g, &d) in gb.iter_mut().zip(row) {
                *g += d;
            }
        }
    }
    {
        let (_, gw) = params.weights.data_and_grad_mut();
        // dW (O×I) += dYᵀ (O×B) · X (B×I)
        T::gemm(
            o,
            b,
            i,
            T::one(),
            dout,
            (1, o as isize),
            input.data(),
            (i as isize, 1),
            T::one(),
            gw,
            (i as isize, 1),
        );
    }
    if input.has_grad() {
        let gx = input.grad_mut().unwrap();
        // dX (B×I) += dY (B×O) · W (O×I)
        T::gemm(
            b,
            o,
            i,
            T::one(),
            dout,
            (o as isize, 1),
            params.weights.data(),
            (i as isize, 1),
            T::one(),
            gx,
            (i as isize, 1),
        );
    }
    Ok(())
}

/// Per-element multipliers applied by a dropout pass; `None` is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask<T>(Option<Vec<T>>);

pub fn dropout<T: Element>(
    input: &Tensor<T>,
    rate: f64,
    train_mode: bool,
    rng: &mut impl Rng,
) -> Result<(Tensor<T>, DropoutMask<T>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !train_mode || rate == 0.0 {
        return Ok((input.clone_without_grad(), DropoutMask(None)));
    }
    let keep = T::from_f64(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..input.len())
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let data = input.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
    Ok((Tensor::new(input.dims(), data)?, DropoutMask(Some(mask))))
}

pub fn dropout_backward<T: Element>(
    input: &mut Tensor<T>,
    output: &Tensor<T>,
    mask: &DropoutMask<T>,
) -> Result<()> {
    let dout = output_grad(output, "dropout")?;
    let (_, gx) = input.data_and_grad_mut();
    match &mask.0 {
        None => gx.iter_mut().zip(dout).for_each(|(g, &d)| *g += d),
        Some(m) => gx
            .iter_mut()
            .zip(dout)
            .zip(m)
            .for_each(|((g, &d), &k)| *g += d * k),
    }
    Ok(())
}

fn two_way(logits: &Tensor<impl Element>) -> Result<usize> {
    match *logits.dims() {
        [b, 2] if b > 0 => Ok(b),
        _ => Err(Error::shape(format!(
            "expected batch×2 logits, got {:?}",
            logits.dims()
        ))),
    }
}

/// Row-wise softmax of two-way logits.
pub fn softmax<T: Element>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    two_way(logits)?;
    let mut data = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(2) {
        let m = row[0].max(row[1]);
        let e0 = (row[0] - m).exp();
        let e1 = (row[1] - m).exp();
        let z = e0 + e1;
        data.push(e0 / z);
        data.push(e1 / z);
    }
    Tensor::new(logits.dims(), data)
}

/// Target-class probability `f+` of every row.
pub fn positive_scores<T: Element>(logits: &Tensor<T>) -> Result<Vec<T>> {
    let p = softmax(logits)?;
    Ok(p.data().chunks(2).map(|r| r[TARGET]).collect())
}

fn check_labels(labels: &[usize], batch: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::input(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::input(format!("label {bad} is not 0 or 1")));
    }
    Ok(())
}

/// Mean negative log-likelihood over the batch.
pub fn softmax_cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let b = two_way(logits)?;
    check_labels(labels, b)?;
    let mut total = T::zero();
    for (row, &l) in logits.data().chunks(2).zip(labels) {
        let m = row[0].max(row[1]);
        let lse = m + ((row[0] - m).exp() + (row[1] - m).exp()).ln();
        total += lse - row[l];
    }
    let loss = total / T::from_f64(b as f64);
    if !loss.is_finite() {
        return Err(Error::NonFinite("softmax_cross_entropy".into()));
    }
    Ok(loss)
}

/// Accumulates `(softmax − onehot) / batch` into the logits' grad.
pub fn softmax_cross_entropy_backward<T: Element>(
    logits: &mut Tensor<T>,
    labels: &[usize],
) -> Result<()> {
    let b = two_way(logits)?;
    check_labels(labels, b)?;
    let p = softmax(logits)?;
    let inv = T::one() / T::from_f64(b as f64);
    let (_, g) = logits.data_and_grad_mut();
    for (r, &l) in labels.iter().enumerate() {
        for c in 0..2 {
            let onehot = if c == l { T::one() } else { T::zero() };
            g[r * 2 + c] += (p.data()[r * 2 + c] - onehot) * inv;
        }
    }
    Ok(())
}

impl<T: Element> Tensor<T> {
    pub(crate) fn clone_without_grad(&self) -> Self {
        Tensor::new(self.dims(), self.data().to_vec()).unwrap()
    }
}
