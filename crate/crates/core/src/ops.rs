//! Eager forward/backward kernels on [`Tensor`]s.
//!
//! The tape (see [`crate::tape`]) records which kernel produced which node
//! and calls back into the `*_backward` functions here. Convolution is
//! lowered to im2col + GEMM; everything else is straightforward loops.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

thread_local! {
    // conv scratch, reused across calls to avoid large-allocation churn
    static COLS_BUF: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
    static DCOLS_BUF: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
}

fn with_scratch<R>(
    slot: &'static std::thread::LocalKey<RefCell<Vec<f64>>>,
    len: usize,
    f: impl FnOnce(&mut [f64]) -> R,
) -> R {
    slot.with(|buf| {
        let mut buf = buf.borrow_mut();
        if buf.len() < len {
            buf.resize(len, 0.0);
        }
        f(&mut buf[..len])
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    Sigmoid,
    Abs,
    Square,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

/// Output spatial extent of a convolution axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

struct ConvDims {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    h_out: usize,
    w_out: usize,
}

fn conv_dims(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<ConvDims> {
    let (n, c_in, h, w) = input.shape().nchw();
    let kd = kernel.dims();
    if kernel.shape().rank() != 4 {
        return Err(Error::rejected("conv2d kernel must be rank 4 (O,I,k,k)"));
    }
    let (c_out, k_i, kh, kw) = (kd[0], kd[1], kd[2], kd[3]);
    if kh != kw {
        return Err(Error::rejected("conv2d kernel must be square"));
    }
    if k_i != c_in {
        return Err(Error::rejected(format!(
            "conv2d kernel expects {} input channels, image has {}",
            k_i, c_in
        )));
    }
    if stride < 1 {
        return Err(Error::rejected("conv2d stride must be >= 1"));
    }
    let (h_out, w_out) = match (
        conv_out_extent(h, kh, stride, pad),
        conv_out_extent(w, kw, stride, pad),
    ) {
        (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
        _ => return Err(Error::rejected("conv2d output would be empty")),
    };
    Ok(ConvDims {
        n,
        c_in,
        h,
        w,
        c_out,
        k: kh,
        h_out,
        w_out,
    })
}

/// Lower one image to the [C_in*k*k, H_out*W_out] patch matrix.
fn im2col(
    img: &[f64],
    cols: &mut [f64],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
) {
    let hw_out = h_out * w_out;
    for ci in 0..c_in {
        let chan = &img[ci * h * w..(ci + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let row = &mut cols[((ci * k + kh) * k + kw) * hw_out..][..hw_out];
                // valid ow range for stride 1: lo..hi maps onto a
                // contiguous source slice
                let (lo, hi) = if stride == 1 {
                    (
                        pad.saturating_sub(kw),
                        w_out.min((w + pad).saturating_sub(kw)),
                    )
                } else {
                    (0, 0)
                };
                for oh in 0..h_out {
                    let ih = (oh * stride + kh) as isize - pad as isize;
                    let dst = &mut row[oh * w_out..(oh + 1) * w_out];
                    if ih < 0 || ih >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &chan[ih as usize * w..(ih as usize + 1) * w];
                    if stride == 1 {
                        dst[..lo].fill(0.0);
                        let off = lo + kw - pad;
                        dst[lo..hi].copy_from_slice(&src[off..off + (hi - lo)]);
                        dst[hi..].fill(0.0);
                    } else {
                        for (ow, d) in dst.iter_mut().enumerate() {
                            let iw = (ow * stride + kw) as isize - pad as isize;
                            *d = if iw < 0 || iw >= w as isize {
                                0.0
                            } else {
                                src[iw as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the patch-matrix gradient back onto the image gradient.
#[allow(clippy::too_many_arguments)]
fn col2im_add(
    dcols: &[f64],
    dimg: &mut [f64],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
) {
    let hw_out = h_out * w_out;
    for ci in 0..c_in {
        let chan = &mut dimg[ci * h * w..(ci + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let row = &dcols[((ci * k + kh) * k + kw) * hw_out..][..hw_out];
                let (lo, hi) = if stride == 1 {
                    (
                        pad.saturating_sub(kw),
                        w_out.min((w + pad).saturating_sub(kw)),
                    )
                } else {
                    (0, 0)
                };
                for oh in 0..h_out {
                    let ih = (oh * stride + kh) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst = &mut chan[ih as usize * w..(ih as usize + 1) * w];
                    let src = &row[oh * w_out..(oh + 1) * w_out];
                    if stride == 1 {
                        let off = lo + kw - pad;
                        for (d, g) in dst[off..off + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
                            *d += g;
                        }
                    } else {
                        for (ow, &g) in src.iter().enumerate() {
                            let iw = (ow * stride + kw) as isize - pad as isize;
                            if iw >= 0 && (iw as usize) < w {
                                dst[iw as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with bias: standard NCHW conv2d.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let d = conv_dims(input, kernel, stride, pad)?;
    if let Some(b) = bias {
        if b.numel() != d.c_out {
            return Err(Error::rejected(format!(
                "conv2d bias has {} values, expected {}",
                b.numel(),
                d.c_out
            )));
        }
    }
    let ckk = d.c_in * d.k * d.k;
    let hw_out = d.h_out * d.w_out;
    let mut out = vec![0.0; d.n * d.c_out * hw_out];
    let img_len = d.c_in * d.h * d.w;
    with_scratch(&COLS_BUF, ckk * hw_out, |cols| {
        for img in 0..d.n {
            im2col(
                &input.data()[img * img_len..(img + 1) * img_len],
                cols,
                d.c_in,
                d.h,
                d.w,
                d.k,
                stride,
                pad,
                d.h_out,
                d.w_out,
            );
            let dst = &mut out[img * d.c_out * hw_out..(img + 1) * d.c_out * hw_out];
            unsafe {
                matrixmultiply::dgemm(
                    d.c_out,
                    ckk,
                    hw_out,
                    1.0,
                    kernel.data().as_ptr(),
                    ckk as isize,
                    1,
                    cols.as_ptr(),
                    hw_out as isize,
                    1,
                    0.0,
                    dst.as_mut_ptr(),
                    hw_out as isize,
                    1,
                );
            }
            if let Some(b) = bias {
                for (co, &bv) in b.data().iter().enumerate() {
                    for v in &mut dst[co * hw_out..(co + 1) * hw_out] {
                        *v += bv;
                    }
                }
            }
        }
    });
    Tensor::new(&[d.n, d.c_out, d.h_out, d.w_out], out)
}

/// Gradients of conv2d. Any of the three outputs can be skipped.
pub struct Conv2dGrads {
    pub dinput: Option<Tensor>,
    pub dkernel: Option<Tensor>,
    pub dbias: Option<Tensor>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    pad: usize,
    dout: &Tensor,
    need_dinput: bool,
    need_dkernel: bool,
    need_dbias: bool,
) -> Result<Conv2dGrads> {
    let d = conv_dims(input, kernel, stride, pad)?;
    let ckk = d.c_in * d.k * d.k;
    let hw_out = d.h_out * d.w_out;
    let img_len = d.c_in * d.h * d.w;

    let mut dinput = need_dinput.then(|| vec![0.0; input.numel()]);
    let mut dkernel = need_dkernel.then(|| vec![0.0; kernel.numel()]);
    let mut dbias = need_dbias.then(|| vec![0.0; d.c_out]);

    with_scratch(&COLS_BUF, ckk * hw_out, |cols| {
        with_scratch(&DCOLS_BUF, ckk * hw_out, |dcols| {
            for img in 0..d.n {
                let dout_n = &dout.data()[img * d.c_out * hw_out..(img + 1) * d.c_out * hw_out];
                if need_dkernel {
                    im2col(
                        &input.data()[img * img_len..(img + 1) * img_len],
                        cols,
                        d.c_in,
                        d.h,
                        d.w,
                        d.k,
                        stride,
                        pad,
                        d.h_out,
                        d.w_out,
                    );
                    // dW += dOut_n x cols^T
                    unsafe {
                        matrixmultiply::dgemm(
                            d.c_out,
                            hw_out,
                            ckk,
                            1.0,
                            dout_n.as_ptr(),
                            hw_out as isize,
                            1,
                            cols.as_ptr(),
                            1,
                            hw_out as isize,
                            1.0,
                            dkernel.as_mut().unwrap().as_mut_ptr(),
                            ckk as isize,
                            1,
                        );
                    }
                }
                if need_dinput {
                    // dcols = W^T x dOut_n, then scatter back to image layout
                    unsafe {
                        matrixmultiply::dgemm(
                            ckk,
                            d.c_out,
                            hw_out,
                            1.0,
                            kernel.data().as_ptr(),
                            1,
                            ckk as isize,
                            dout_n.as_ptr(),
                            hw_out as isize,
                            1,
                            0.0,
                            dcols.as_mut_ptr(),
                            hw_out as isize,
                            1,
                        );
                    }
                    col2im_add(
                        dcols,
                        &mut dinput.as_mut().unwrap()[img * img_len..(img + 1) * img_len],
                        d.c_in,
                        d.h,
                        d.w,
                        d.k,
                        stride,
                        pad,
                        d.h_out,
                        d.w_out,
                    );
                }
                if let Some(db) = dbias.as_mut() {
                    for co in 0..d.c_out {
                        db[co] += dout_n[co * hw_out..(co + 1) * hw_out].iter().sum::<f64>();
                    }
                }
            }
        })
    });

    Ok(Conv2dGrads {
        dinput: dinput.map(|v| Tensor::new(input.dims(), v).unwrap()),
        dkernel: dkernel.map(|v| Tensor::new(kernel.dims(), v).unwrap()),
        dbias: dbias.map(|v| Tensor::new(&[d.c_out], v).unwrap()),
    })
}

// ---------------------------------------------------------------------------
// maxpool2d (2x2 window, stride 2)
// ---------------------------------------------------------------------------

/// 2x2/stride-2 max pooling. Returns the pooled tensor and, per output
/// cell, the flat input index of its maximum (ties: first in row-major
/// scan), which routes the gradient.
pub fn maxpool2d(input: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let (n, c, h, w) = input.shape().nchw();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::rejected(format!(
            "maxpool2d requires even spatial extents, got {}x{}",
            h, w
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; n * c * ho * wo];
    let mut argmax = vec![0u32; n * c * ho * wo];
    let data = input.data();
    for nc in 0..n * c {
        let base = nc * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let i00 = base + (2 * oh) * w + 2 * ow;
                let idx4 = [i00, i00 + 1, i00 + w, i00 + w + 1];
                let mut best = idx4[0];
                for &i in &idx4[1..] {
                    if data[i] > data[best] {
                        best = i;
                    }
                }
                let o = nc * ho * wo + oh * wo + ow;
                out[o] = data[best];
                argmax[o] = best as u32;
            }
        }
    }
    Ok((Tensor::new(&[n, c, ho, wo], out)?, argmax))
}

pub fn maxpool2d_backward(input_shape: &[usize], argmax: &[u32], dout: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    let dxd = dx.data_mut();
    for (g, &i) in dout.data().iter().zip(argmax.iter()) {
        dxd[i as usize] += g;
    }
    dx
}

// ---------------------------------------------------------------------------
// element-wise and reductions
// ---------------------------------------------------------------------------

pub fn unary(input: &Tensor, kind: UnaryKind) -> Tensor {
    match kind {
        UnaryKind::Relu => input.map(|v| if v > 0.0 { v } else { 0.0 }),
        UnaryKind::Sigmoid => input.map(sigmoid),
        UnaryKind::Abs => input.map(f64::abs),
        UnaryKind::Square => input.map(|v| v * v),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// d(unary)/d(input) * dout. `input`/`output` are the saved forward values.
/// abs at 0 uses subgradient 0; relu at 0 likewise.
pub fn unary_backward(input: &Tensor, output: &Tensor, kind: UnaryKind, dout: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input.dims());
    let dxd = dx.data_mut();
    match kind {
        UnaryKind::Relu => {
            for i in 0..dxd.len() {
                if input.data()[i] > 0.0 {
                    dxd[i] = dout.data()[i];
                }
            }
        }
        UnaryKind::Sigmoid => {
            for i in 0..dxd.len() {
                let y = output.data()[i];
                dxd[i] = dout.data()[i] * y * (1.0 - y);
            }
        }
        UnaryKind::Abs => {
            for i in 0..dxd.len() {
                let x = input.data()[i];
                dxd[i] = dout.data()[i] * if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 };
            }
        }
        UnaryKind::Square => {
            for i in 0..dxd.len() {
                dxd[i] = dout.data()[i] * 2.0 * input.data()[i];
            }
        }
    }
    dx
}

/// Element-wise binary op; `b` may be a one-element tensor, which is
/// broadcast to all of `a`.
pub fn binary(a: &Tensor, b: &Tensor, kind: BinaryKind) -> Result<Tensor> {
    let op = |x: f64, y: f64| match kind {
        BinaryKind::Add => x + y,
        BinaryKind::Sub => x - y,
        BinaryKind::Mul => x * y,
    };
    if b.is_scalar() {
        let s = b.item();
        return Ok(a.map(|v| op(v, s)));
    }
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "binary operands {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| op(x, y))
        .collect();
    Tensor::new(a.dims(), data)
}

/// Gradients (da, db) of a binary op.
pub fn binary_backward(
    a: &Tensor,
    b: &Tensor,
    kind: BinaryKind,
    dout: &Tensor,
    need_da: bool,
    need_db: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let scalar_b = b.is_scalar();
    let da = need_da.then(|| match kind {
        BinaryKind::Add | BinaryKind::Sub => dout.clone(),
        BinaryKind::Mul => {
            if scalar_b {
                let s = b.item();
                dout.map(|g| g * s)
            } else {
                let data = dout.data().iter().zip(b.data()).map(|(&g, &y)| g * y).collect();
                Tensor::new(a.dims(), data).unwrap()
            }
        }
    });
    let db = need_db.then(|| {
        let contrib = |i: usize| match kind {
            BinaryKind::Add => dout.data()[i],
            BinaryKind::Sub => -dout.data()[i],
            BinaryKind::Mul => dout.data()[i] * a.data()[i],
        };
        if scalar_b {
            Tensor::scalar((0..dout.numel()).map(contrib).sum())
        } else {
            Tensor::new(b.dims(), (0..dout.numel()).map(contrib).collect()).unwrap()
        }
    });
    (da, db)
}

pub fn reduce(input: &Tensor, kind: ReduceKind) -> Tensor {
    let s: f64 = input.data().iter().sum();
    Tensor::scalar(match kind {
        ReduceKind::Sum => s,
        ReduceKind::Mean => s / input.numel() as f64,
    })
}

pub fn reduce_backward(input_shape: &[usize], kind: ReduceKind, dout: &Tensor) -> Tensor {
    let g = dout.item();
    let mut t = Tensor::zeros(input_shape);
    let v = match kind {
        ReduceKind::Sum => g,
        ReduceKind::Mean => g / t.numel() as f64,
    };
    t.data_mut().fill(v);
    t
}

// ---------------------------------------------------------------------------
// gram matrix
// ---------------------------------------------------------------------------

/// Per-sample Gram matrix G = F F^T / (C*H*W) of the C x (H*W) flattening.
/// The upper triangle is computed once and mirrored, so G is symmetric to
/// the bit.
pub fn gram(feature: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = feature.shape().nchw();
    let hw = h * w;
    let norm = 1.0 / (c * h * w) as f64;
    let mut out = vec![0.0; n * c * c];
    for img in 0..n {
        let f = &feature.data()[img * c * hw..(img + 1) * c * hw];
        let g = &mut out[img * c * c..(img + 1) * c * c];
        for i in 0..c {
            for j in i..c {
                let mut acc = 0.0;
                let (fi, fj) = (&f[i * hw..(i + 1) * hw], &f[j * hw..(j + 1) * hw]);
                for k in 0..hw {
                    acc += fi[k] * fj[k];
                }
                let v = acc * norm;
                g[i * c + j] = v;
                g[j * c + i] = v;
            }
        }
    }
    Tensor::new(&[n, c, c], out)
}

/// dL/dF given dL/dG: dF = (dG + dG^T) F / (C*H*W).
pub fn gram_backward(feature: &Tensor, dout: &Tensor) -> Tensor {
    let (n, c, h, w) = feature.shape().nchw();
    let hw = h * w;
    let norm = 1.0 / (c * h * w) as f64;
    let mut dfeat = Tensor::zeros(feature.dims());
    for img in 0..n {
        let f = &feature.data()[img * c * hw..(img + 1) * c * hw];
        let dg = &dout.data()[img * c * c..(img + 1) * c * c];
        let df = &mut dfeat.data_mut()[img * c * hw..(img + 1) * c * hw];
        for i in 0..c {
            for j in 0..c {
                let coeff = (dg[i * c + j] + dg[j * c + i]) * norm;
                if coeff == 0.0 {
                    continue;
                }
                let fj = &f[j * hw..(j + 1) * hw];
                let di = &mut df[i * hw..(i + 1) * hw];
                for k in 0..hw {
                    di[k] += coeff * fj[k];
                }
            }
        }
    }
    dfeat
}

// ---------------------------------------------------------------------------
// upsample (nearest, factor 2)
// ---------------------------------------------------------------------------

pub fn upsample_nearest(input: &Tensor) -> Tensor {
    let (n, c, h, w) = input.shape().nchw();
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * c * h2 * w2];
    for nc in 0..n * c {
        let src = &input.data()[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out[nc * h2 * w2..(nc + 1) * h2 * w2];
        for ih in 0..h {
            for iw in 0..w {
                let v = src[ih * w + iw];
                let o = (2 * ih) * w2 + 2 * iw;
                dst[o] = v;
                dst[o + 1] = v;
                dst[o + w2] = v;
                dst[o + w2 + 1] = v;
            }
        }
    }
    Tensor::new(&[n, c, h2, w2], out).unwrap()
}

pub fn upsample_nearest_backward(input_shape: &[usize], dout: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    let (n, c, h, w) = dx.shape().nchw();
    let w2 = 2 * w;
    for nc in 0..n * c {
        let src = &dout.data()[nc * 4 * h * w..(nc + 1) * 4 * h * w];
        let dst = &mut dx.data_mut()[nc * h * w..(nc + 1) * h * w];
        for ih in 0..h {
            for iw in 0..w {
                let o = (2 * ih) * w2 + 2 * iw;
                dst[ih * w + iw] = src[o] + src[o + 1] + src[o + w2] + src[o + w2 + 1];
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// spatial forward differences (for total variation)
// ---------------------------------------------------------------------------

/// out[h][w] = x[h+1][w] - x[h][w]; output H extent shrinks by one.
pub fn diff_h(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.shape().nchw();
    if h < 2 {
        return Err(Error::rejected("diff_h requires H >= 2"));
    }
    let mut out = vec![0.0; n * c * (h - 1) * w];
    for nc in 0..n * c {
        let src = &input.data()[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out[nc * (h - 1) * w..(nc + 1) * (h - 1) * w];
        for ih in 0..h - 1 {
            for iw in 0..w {
                dst[ih * w + iw] = src[(ih + 1) * w + iw] - src[ih * w + iw];
            }
        }
    }
    Tensor::new(&[n, c, h - 1, w], out)
}

pub fn diff_h_backward(input_shape: &[usize], dout: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    let (n, c, h, w) = dx.shape().nchw();
    for nc in 0..n * c {
        let g = &dout.data()[nc * (h - 1) * w..(nc + 1) * (h - 1) * w];
        let dst = &mut dx.data_mut()[nc * h * w..(nc + 1) * h * w];
        for ih in 0..h - 1 {
            for iw in 0..w {
                let gv = g[ih * w + iw];
                dst[(ih + 1) * w + iw] += gv;
                dst[ih * w + iw] -= gv;
            }
        }
    }
    dx
}

/// out[h][w] = x[h][w+1] - x[h][w]; output W extent shrinks by one.
pub fn diff_w(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.shape().nchw();
    if w < 2 {
        return Err(Error::rejected("diff_w requires W >= 2"));
    }
    let mut out = vec![0.0; n * c * h * (w - 1)];
    for nc in 0..n * c {
        let src = &input.data()[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out[nc * h * (w - 1)..(nc + 1) * h * (w - 1)];
        for ih in 0..h {
            for iw in 0..w - 1 {
                dst[ih * (w - 1) + iw] = src[ih * w + iw + 1] - src[ih * w + iw];
            }
        }
    }
    Tensor::new(&[n, c, h, w - 1], out)
}

pub fn diff_w_backward(input_shape: &[usize], dout: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    let (n, c, h, w) = dx.shape().nchw();
    for nc in 0..n * c {
        let g = &dout.data()[nc * h * (w - 1)..(nc + 1) * h * (w - 1)];
        let dst = &mut dx.data_mut()[nc * h * w..(nc + 1) * h * w];
        for ih in 0..h {
            for iw in 0..w - 1 {
                let gv = g[ih * (w - 1) + iw];
                dst[ih * w + iw + 1] += gv;
                dst[ih * w + iw] -= gv;
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// channel concat
// ---------------------------------------------------------------------------

/// Concatenate along the channel axis; N, H, W must agree.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (na, ca, ha, wa) = a.shape().nchw();
    let (nb, cb, hb, wb) = b.shape().nchw();
    if (na, ha, wa) != (nb, hb, wb) {
        return Err(Error::shape(format!(
            "concat_channels operands {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (hw, c) = (ha * wa, ca + cb);
    let mut out = vec![0.0; na * c * hw];
    for img in 0..na {
        out[img * c * hw..img * c * hw + ca * hw]
            .copy_from_slice(&a.data()[img * ca * hw..(img + 1) * ca * hw]);
        out[img * c * hw + ca * hw..(img + 1) * c * hw]
            .copy_from_slice(&b.data()[img * cb * hw..(img + 1) * cb * hw]);
    }
    Tensor::new(&[na, c, ha, wa], out)
}

pub fn concat_channels_backward(
    a_shape: &[usize],
    b_shape: &[usize],
    dout: &Tensor,
    need_da: bool,
    need_db: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let sa = crate::tensor::Shape::new(a_shape).nchw();
    let (n, ca, h, w) = sa;
    let cb = crate::tensor::Shape::new(b_shape).nchw().1;
    let (hw, c) = (h * w, ca + cb);
    let mut da = need_da.then(|| Tensor::zeros(a_shape));
    let mut db = need_db.then(|| Tensor::zeros(b_shape));
    for img in 0..n {
        if let Some(da) = da.as_mut() {
            da.data_mut()[img * ca * hw..(img + 1) * ca * hw]
                .copy_from_slice(&dout.data()[img * c * hw..img * c * hw + ca * hw]);
        }
        if let Some(db) = db.as_mut() {
            db.data_mut()[img * cb * hw..(img + 1) * cb * hw]
                .copy_from_slice(&dout.data()[img * c * hw + ca * hw..(img + 1) * c * hw]);
        }
    }
    (da, db)
}
