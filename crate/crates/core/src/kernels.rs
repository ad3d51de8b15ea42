//! Forward and backward kernels on plain tensors. The gradient tape composes these.

use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::{LabelMap, Real, Tensor};

// ---------------------------------------------------------------------------
// convolution

fn check_conv<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<usize> {
    let (_, c, _, _) = x.dims4()?;
    let (f, wc, kh, kw) = w.dims4()?;
    if kh != kw || kh % 2 == 0 {
        return Err(Error::shape("conv2d", format!("kernel must be square and odd, got {kh}x{kw}")));
    }
    if wc != c {
        return Err(Error::shape("conv2d", format!("weight expects {wc} channels, input has {c}")));
    }
    if let Some(b) = b {
        if b.shape() != [f] {
            return Err(Error::shape("conv2d", format!("bias {:?} for {f} filters", b.shape())));
        }
    }
    Ok(kh)
}

/// Unfold one `[C, H, W]` image into `[C·k·k, H·W]` patches with zero padding `(k-1)/2`.
fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let p = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((ci * k + ki) * k + kj) * hw..][..hw];
                let j_lo = p.saturating_sub(kj);
                let j_hi = (w + p).saturating_sub(kj).min(w);
                for i in 0..h {
                    let dst = &mut row[i * w..(i + 1) * w];
                    let si = i + ki;
                    if si < p || si - p >= h || j_lo >= j_hi {
                        dst.fill(T::zero());
                        continue;
                    }
                    let si = si - p;
                    dst[..j_lo].fill(T::zero());
                    dst[j_hi..].fill(T::zero());
                    let sj = j_lo + kj - p;
                    dst[j_lo..j_hi].copy_from_slice(&plane[si * w + sj..si * w + sj + (j_hi - j_lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add patches back into an image.
fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, k: usize, x: &mut [T]) {
    let p = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((ci * k + ki) * k + kj) * hw..][..hw];
                let j_lo = p.saturating_sub(kj);
                let j_hi = (w + p).saturating_sub(kj).min(w);
                if j_lo >= j_hi {
                    continue;
                }
                for i in 0..h {
                    let si = i + ki;
                    if si < p || si - p >= h {
                        continue;
                    }
                    let si = si - p;
                    let sj = j_lo + kj - p;
                    let dst = &mut plane[si * w + sj..si * w + sj + (j_hi - j_lo)];
                    for (d, &s) in dst.iter_mut().zip(&row[i * w + j_lo..i * w + j_hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Stride-1 convolution (cross-correlation) with same zero padding.
pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let k = check_conv(x, w, b)?;
    let (n, c, h, wd) = x.dims4()?;
    let f = w.shape()[0];
    let hw = h * wd;
    let ckk = c * k * k;
    let xd = x.data();
    let wdat = w.data();
    let per_image = exec::map_indexed(n, |b_idx| {
        let xi = &xd[b_idx * c * hw..(b_idx + 1) * c * hw];
        let mut out = vec![T::zero(); f * hw];
        if k == 1 {
            T::gemm(f, c, hw, wdat, false, xi, false, T::zero(), &mut out);
        } else {
            T::with_scratch(ckk * hw, |cols| {
                im2col(xi, c, h, wd, k, cols);
                T::gemm(f, ckk, hw, wdat, false, cols, false, T::zero(), &mut out);
            });
        }
        if let Some(bias) = b {
            for (row, &bv) in out.chunks_exact_mut(hw).zip(bias.data()) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
        out
    });
    Tensor::new(vec![n, f, h, wd], per_image.concat())
}

/// Gradients of [`conv2d`] with respect to input (when `need_gx`), weight and bias (when present).
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    with_bias: bool,
    need_gx: bool,
    gy: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let k = check_conv(x, w, None)?;
    let (n, c, h, wd) = x.dims4()?;
    let f = w.shape()[0];
    if gy.shape() != [n, f, h, wd] {
        return Err(Error::shape("conv2d_backward", format!("upstream {:?}", gy.shape())));
    }
    let hw = h * wd;
    let ckk = c * k * k;
    let (xd, wdat, gd) = (x.data(), w.data(), gy.data());
    let per_image = exec::map_indexed(n, |b_idx| {
        let xi = &xd[b_idx * c * hw..(b_idx + 1) * c * hw];
        let gi = &gd[b_idx * f * hw..(b_idx + 1) * f * hw];
        let mut gw = vec![T::zero(); f * ckk];
        let mut gx = if need_gx { vec![T::zero(); c * hw] } else { Vec::new() };
        if k == 1 {
            T::gemm(f, hw, c, gi, false, xi, true, T::zero(), &mut gw);
            if need_gx {
                T::gemm(c, f, hw, wdat, true, gi, false, T::zero(), &mut gx);
            }
        } else {
            T::with_scratch(ckk * hw, |cols| {
                im2col(xi, c, h, wd, k, cols);
                T::gemm(f, hw, ckk, gi, false, cols, true, T::zero(), &mut gw);
                if need_gx {
                    T::gemm(ckk, f, hw, wdat, true, gi, false, T::zero(), cols);
                    col2im(cols, c, h, wd, k, &mut gx);
                }
            });
        }
        let gb: Vec<T> = if with_bias {
            gi.chunks_exact(hw).map(|row| row.iter().copied().sum()).collect()
        } else {
            Vec::new()
        };
        (gx, gw, gb)
    });
    let mut gx = Vec::with_capacity(if need_gx { n * c * hw } else { 0 });
    let mut gw = vec![T::zero(); f * ckk];
    let mut gb = vec![T::zero(); if with_bias { f } else { 0 }];
    for (px, pw, pb) in per_image {
        gx.extend_from_slice(&px);
        gw.iter_mut().zip(&pw).for_each(|(a, &b)| *a += b);
        gb.iter_mut().zip(&pb).for_each(|(a, &b)| *a += b);
    }
    Ok(ConvGrads {
        x: if need_gx { Some(Tensor::new(x.shape().to_vec(), gx)?) } else { None },
        w: Tensor::new(w.shape().to_vec(), gw)?,
        b: if with_bias { Some(Tensor::new(vec![f], gb)?) } else { None },
    })
}

/// Output of [`conv2d_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T> {
    pub x: Option<Tensor<T>>,
    pub w: Tensor<T>,
    pub b: Option<Tensor<T>>,
}

// ---------------------------------------------------------------------------
// activation

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Derivative at exactly zero is taken as 0.
pub fn relu_backward<T: Real>(x: &Tensor<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(gy, "relu_backward", |v, g| if v > T::zero() { g } else { T::zero() })
}

// ---------------------------------------------------------------------------
// batch normalization

/// Per-channel statistics of one training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Population (biased) variance.
    pub var: Vec<T>,
    /// Elements per channel (N·H·W).
    pub count: usize,
}

/// Values saved by the normalization forward pass.
#[derive(Debug, Clone)]
pub struct BnSaved<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    /// True when the batch statistics were used (gradient flows through them).
    pub batch_stats: bool,
}

fn check_bn<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<usize> {
    let (_, c, _, _) = x.dims4()?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "batchnorm",
            format!("gamma {:?} / beta {:?} for {c} channels", gamma.shape(), beta.shape()),
        ));
    }
    Ok(c)
}

fn bn_apply<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let mut xhat = Vec::with_capacity(x.len());
    let mut y = Vec::with_capacity(x.len());
    for b in 0..n {
        for ch in 0..c {
            let (m, s, g, be) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for &v in &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                let xh = (v - m) * s;
                xhat.push(xh);
                y.push(g * xh + be);
            }
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), y)?, Tensor::new(x.shape().to_vec(), xhat)?))
}

/// Per-channel mean and population variance over N·H·W.
pub fn channel_stats<T: Real>(x: &Tensor<T>) -> Result<BatchStats<T>> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let count = n * hw;
    let cnt = T::from_f64(count as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            s += x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum();
        }
        let m = s / cnt;
        let mut ss = T::zero();
        for b in 0..n {
            ss += x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                .iter()
                .map(|&v| (v - m) * (v - m))
                .sum();
        }
        mean[ch] = m;
        var[ch] = ss / cnt;
    }
    Ok(BatchStats { mean, var, count })
}

/// Train-mode normalization with batch statistics.
pub fn batchnorm_train<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, BnSaved<T>, BatchStats<T>)> {
    check_bn(x, gamma, beta)?;
    let stats = channel_stats(x)?;
    let inv_std: Vec<T> = stats.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let (y, xhat) = bn_apply(x, gamma, beta, &stats.mean, &inv_std)?;
    Ok((y, BnSaved { xhat, inv_std, batch_stats: true }, stats))
}

/// Inference-mode normalization with fixed statistics.
pub fn batchnorm_infer<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &[T],
    running_var: &[T],
    eps: T,
) -> Result<(Tensor<T>, BnSaved<T>)> {
    let c = check_bn(x, gamma, beta)?;
    if running_mean.len() != c || running_var.len() != c {
        return Err(Error::shape("batchnorm", "running statistics length"));
    }
    let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let (y, xhat) = bn_apply(x, gamma, beta, running_mean, &inv_std)?;
    Ok((y, BnSaved { xhat, inv_std, batch_stats: false }))
}

/// Gradients with respect to input, gamma and beta.
pub fn batchnorm_backward<T: Real>(
    gamma: &Tensor<T>,
    saved: &BnSaved<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = gy.dims4()?;
    let hw = h * w;
    let m = T::from_f64((n * hw) as f64);
    let xh = saved.xhat.data();
    let g = gy.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            for (&gv, &xv) in g[r.clone()].iter().zip(&xh[r]) {
                dbeta[ch] += gv;
                dgamma[ch] += gv * xv;
            }
        }
    }
    let mut dx = vec![T::zero(); gy.len()];
    for b in 0..n {
        for ch in 0..c {
            let gm = gamma.data()[ch];
            let s = saved.inv_std[ch];
            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            for ((d, &gv), &xv) in dx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xh[r]) {
                *d = if saved.batch_stats {
                    gm * s / m * (m * gv - dbeta[ch] - xv * dgamma[ch])
                } else {
                    gm * s * gv
                };
            }
        }
    }
    Ok((
        Tensor::new(gy.shape().to_vec(), dx)?,
        Tensor::new(vec![c], dgamma)?,
        Tensor::new(vec![c], dbeta)?,
    ))
}

// ---------------------------------------------------------------------------
// pooling and resampling

/// 2×2 max pooling. Returns the output and, per output cell, the flat input index of its max.
pub fn maxpool2<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("maxpool2", format!("spatial extent {h}x{w} must be even")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    let xd = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                // row-major window order; strict comparison keeps the first maximum
                let mut best = base + 2 * i * w + 2 * j;
                for idx in [best + 1, best + w, best + w + 1] {
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                out.push(xd[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, arg))
}

pub fn maxpool2_backward<T: Real>(input_shape: &[usize], argmax: &[usize], gy: &Tensor<T>) -> Result<Tensor<T>> {
    if gy.len() != argmax.len() {
        return Err(Error::shape("maxpool2_backward", "upstream length"));
    }
    let mut gx = Tensor::zeros(input_shape);
    let d = gx.data_mut();
    for (&idx, &g) in argmax.iter().zip(gy.data()) {
        d[idx] += g;
    }
    Ok(gx)
}

/// Source taps for doubling one axis with half-pixel centers and edge clamping:
/// output `i` samples input coordinate `(i + 0.5) / 2 - 0.5`.
fn up2_taps(len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|i| {
            let src = ((i as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear 2× upsampling.
pub fn bilinear_up2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let (ty, tx) = (up2_taps(h), up2_taps(w));
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for src in x.data().chunks_exact(h * w) {
        for &(y0, y1, fy) in &ty {
            let fy = T::from_f64(fy);
            for &(x0, x1, fx) in &tx {
                let fx = T::from_f64(fx);
                let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                out.push(top * (T::one() - fy) + bot * fy);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

/// Transpose of [`bilinear_up2`].
pub fn bilinear_up2_backward<T: Real>(input_shape: &[usize], gy: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (ty, tx) = (up2_taps(h), up2_taps(w));
    let mut gx = Tensor::zeros(input_shape);
    let ow = 2 * w;
    for (dst, g) in gx.data_mut().chunks_exact_mut(h * w).zip(gy.data().chunks_exact(4 * h * w)) {
        for (oi, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::from_f64(fy);
            for (oj, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::from_f64(fx);
                let gv = g[oi * ow + oj];
                let top = gv * (T::one() - fy);
                let bot = gv * fy;
                dst[y0 * w + x0] += top * (T::one() - fx);
                dst[y0 * w + x1] += top * fx;
                dst[y1 * w + x0] += bot * (T::one() - fx);
                dst[y1 * w + x1] += bot * fx;
            }
        }
    }
    Ok(gx)
}

// ---------------------------------------------------------------------------
// loss

/// Mean per-pixel softmax cross-entropy. Returns the loss and the softmax probabilities.
pub fn softmax_xent<T: Real>(logits: &Tensor<T>, labels: &LabelMap) -> Result<(T, Tensor<T>)> {
    let (n, c, h, w) = logits.dims4()?;
    if labels.shape() != [n, h, w] {
        return Err(Error::shape(
            "softmax_xent",
            format!("labels {:?} for logits {:?}", labels.shape(), logits.shape()),
        ));
    }
    if let Some(&bad) = labels.data().iter().find(|&&l| l as usize >= c) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {c} classes")));
    }
    let hw = h * w;
    let ld = logits.data();
    let mut probs = vec![T::zero(); logits.len()];
    let mut total = 0.0f64;
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let mut mx = T::neg_infinity();
            for ch in 0..c {
                mx = mx.max(ld[base + ch * hw + p]);
            }
            let mut z = T::zero();
            for ch in 0..c {
                let e = (ld[base + ch * hw + p] - mx).exp();
                probs[base + ch * hw + p] = e;
                z += e;
            }
            for ch in 0..c {
                probs[base + ch * hw + p] /= z;
            }
            let t = labels.data()[b * hw + p] as usize;
            // -log softmax = log z - (logit - max)
            total += (z.ln() - (ld[base + t * hw + p] - mx)).as_f64();
        }
    }
    let loss = T::from_f64(total / (n * hw) as f64);
    Ok((loss, Tensor::new(logits.shape().to_vec(), probs)?))
}

/// `upstream · (softmax − one_hot) / pixel_count`.
pub fn softmax_xent_backward<T: Real>(probs: &Tensor<T>, labels: &LabelMap, upstream: T) -> Result<Tensor<T>> {
    let (n, c, h, w) = probs.dims4()?;
    let hw = h * w;
    let scale = upstream / T::from_f64((n * hw) as f64);
    let mut g = probs.scale(scale);
    let gd = g.data_mut();
    for b in 0..n {
        for p in 0..hw {
            let t = labels.data()[b * hw + p] as usize;
            gd[b * c * hw + t * hw + p] -= scale;
        }
    }
    Ok(g)
}

/// Per-pixel argmax over the channel axis: `[N, C, H, W]` → `[N, H, W]`.
pub fn argmax_channels<T: Real>(logits: &Tensor<T>) -> Result<LabelMap> {
    let (n, c, h, w) = logits.dims4()?;
    let hw = h * w;
    let ld = logits.data();
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        for p in 0..hw {
            let mut best = 0;
            for ch in 1..c {
                if ld[b * c * hw + ch * hw + p] > ld[b * c * hw + best * hw + p] {
                    best = ch;
                }
            }
            out.push(best as u8);
        }
    }
    Tensor::new(vec![n, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]) -> Tensor<f64> {
        let (n, c, h, wd) = x.dims4().unwrap();
        let (f, _, k, _) = w.dims4().unwrap();
        let p = (k / 2) as isize;
        let mut out = Tensor::zeros(&[n, f, h, wd]);
        for bi in 0..n {
            for fi in 0..f {
                for i in 0..h {
                    for j in 0..wd {
                        let mut s = b[fi];
                        for ci in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let si = i as isize + ki as isize - p;
                                    let sj = j as isize + kj as isize - p;
                                    if si < 0 || sj < 0 || si >= h as isize || sj >= wd as isize {
                                        continue;
                                    }
                                    s += x.data()[((bi * c + ci) * h + si as usize) * wd + sj as usize]
                                        * w.data()[((fi * c + ci) * k + ki) * k + kj];
                                }
                            }
                        }
                        out.data_mut()[((bi * f + fi) * h + i) * wd + j] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_ones_three_by_three() {
        let x = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let w = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let y = conv2d(&x, &w, Some(&Tensor::zeros(&[1]))).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv_zero_input_broadcasts_bias() {
        let x = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        let w = Tensor::<f64>::from_fn(&[1, 1, 3, 3], |i| i as f64 - 3.0);
        let y = conv2d(&x, &w, Some(&Tensor::full(&[1], 0.5))).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn conv_identity_mixing() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 4, 5], |i| (i as f64).sin());
        let w = Tensor::<f64>::from_fn(&[3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        assert_eq!(conv2d(&x, &w, None).unwrap(), x);
    }

    #[test]
    fn conv_matches_naive_loop() {
        for (k, h, w) in [(1, 3, 4), (3, 5, 4), (5, 3, 3), (7, 6, 5)] {
            let x = Tensor::<f64>::from_fn(&[2, 3, h, w], |i| ((i * 37 % 11) as f64) - 5.0);
            let wt = Tensor::<f64>::from_fn(&[4, 3, k, k], |i| ((i * 13 % 7) as f64) * 0.25 - 0.7);
            let b = [0.1, -0.2, 0.3, 0.0];
            let bias = Tensor::new(vec![4], b.to_vec()).unwrap();
            let fast = conv2d(&x, &wt, Some(&bias)).unwrap();
            let slow = naive_conv(&x, &wt, &b);
            assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12, "k={k}");
        }
    }

    #[test]
    fn conv_errors() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        assert!(conv2d(&x, &Tensor::zeros(&[1, 3, 3, 3]), None).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 2, 2]), None).is_err());
    }

    #[test]
    fn relu_values() {
        let x = Tensor::new(vec![3], vec![-1.0f64, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &Tensor::ones(&[3])).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn batchnorm_two_values() {
        let x = Tensor::new(vec![2, 1, 1, 1], vec![1.0f64, 3.0]).unwrap();
        let (y, _, stats) =
            batchnorm_train(&x, &Tensor::ones(&[1]), &Tensor::zeros(&[1]), 1e-12).unwrap();
        assert_eq!(stats.mean, vec![2.0]);
        assert_eq!(stats.var, vec![1.0]);
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn batchnorm_zero_gamma_gives_beta() {
        let x = Tensor::<f64>::from_fn(&[2, 2, 3, 3], |i| (i as f64).cos() * 4.0);
        let beta = Tensor::new(vec![2], vec![0.25, -1.5]).unwrap();
        let (y, _, _) = batchnorm_train(&x, &Tensor::zeros(&[2]), &beta, 1e-5).unwrap();
        assert!(y.data()[..9].iter().all(|&v| v == 0.25));
        assert!(y.data()[9..18].iter().all(|&v| v == -1.5));
    }

    #[test]
    fn maxpool_window_and_ties() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = maxpool2(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let g = maxpool2_backward(x.shape(), &arg, &Tensor::<f64>::ones(&[1, 1, 1, 1])).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0, 1.0]);
        let c = Tensor::<f64>::full(&[1, 1, 2, 2], 7.0);
        let (y, arg) = maxpool2(&c).unwrap();
        assert_eq!((y.data()[0], arg[0]), (7.0, 0));
        assert!(maxpool2(&Tensor::<f64>::zeros(&[1, 1, 3, 2])).is_err());
    }

    #[test]
    fn bilinear_row_example() {
        let x = Tensor::new(vec![1, 1, 1, 2], vec![0.0f64, 2.0]).unwrap();
        let y = bilinear_up2(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 4]);
        assert_eq!(&y.data()[..4], &[0.0, 0.5, 1.5, 2.0]);
        assert_eq!(&y.data()[4..], &[0.0, 0.5, 1.5, 2.0]);
    }

    #[test]
    fn bilinear_backward_is_transpose() {
        // <up(x), g> == <x, up^T(g)>
        let x = Tensor::<f64>::from_fn(&[1, 2, 3, 4], |i| (i as f64 * 0.7).sin());
        let g = Tensor::<f64>::from_fn(&[1, 2, 6, 8], |i| (i as f64 * 0.3).cos());
        let lhs = bilinear_up2(&x).unwrap().mul(&g).unwrap().sum();
        let rhs = x.mul(&bilinear_up2_backward(x.shape(), &g).unwrap()).unwrap().sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn xent_uniform_and_peaked() {
        let logits = Tensor::<f64>::zeros(&[1, 5, 2, 2]);
        let labels = Tensor::new(vec![1, 2, 2], vec![0u8, 1, 2, 4]).unwrap();
        let (loss, _) = softmax_xent(&logits, &labels).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
        let peaked = Tensor::<f64>::from_fn(&[1, 2, 1, 1], |i| if i == 1 { 50.0 } else { 0.0 });
        let (loss, _) = softmax_xent(&peaked, &Tensor::new(vec![1, 1, 1], vec![1u8]).unwrap()).unwrap();
        assert!(loss < 1e-6);
        assert!(softmax_xent(&peaked, &Tensor::new(vec![1, 1, 1], vec![2u8]).unwrap()).is_err());
    }
}
