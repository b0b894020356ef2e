//! Evaluation metrics: PSNR, SSIM, MAE and the frozen-extractor
//! perceptual distance.

use crate::error::{Error, Result};
use crate::nets::{FeatureExtractor, NUM_TAPS};
use crate::tensor::Tensor;

/// PSNR in dB for values in [0,1], capped at 100 dB (MSE <= 1e-10 maps
/// to the cap, which makes the cap continuous).
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same_shape(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    if mse <= 1e-10 {
        return Ok(100.0);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// mean |a - b|.
pub fn mae_metric(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same_shape(a, b)?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / a.numel() as f64)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let d2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2);
            let v = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[y * SSIM_WINDOW + x] = v;
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

fn to_grayscale(img: &Tensor) -> Result<(Vec<f64>, usize, usize)> {
    let (n, c, h, w) = img.shape().nchw();
    if n != 1 {
        return Err(Error::rejected("ssim expects a single image"));
    }
    let hw = h * w;
    let mut gray = vec![0.0; hw];
    for ch in 0..c {
        for p in 0..hw {
            gray[p] += img.data()[ch * hw + p];
        }
    }
    for v in &mut gray {
        *v /= c as f64;
    }
    Ok((gray, h, w))
}

/// Standard single-scale SSIM over the grayscale mean of the channels:
/// 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03, data range 1,
/// averaged over fully interior windows.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same_shape(a, b)?;
    let (ga, h, w) = to_grayscale(a)?;
    let (gb, _, _) = to_grayscale(b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::rejected(format!(
            "ssim requires at least {0}x{0} images",
            SSIM_WINDOW
        )));
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);

    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for wy in 0..SSIM_WINDOW {
                for wx in 0..SSIM_WINDOW {
                    let wgt = win[wy * SSIM_WINDOW + wx];
                    let va = ga[(y0 + wy) * w + x0 + wx];
                    let vb = gb[(y0 + wy) * w + x0 + wx];
                    ma += wgt * va;
                    mb += wgt * vb;
                    saa += wgt * va * va;
                    sbb += wgt * vb * vb;
                    sab += wgt * va * vb;
                }
            }
            let var_a = saa - ma * ma;
            let var_b = sbb - mb * mb;
            let cov = sab - ma * mb;
            let v = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
            total += v;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Perceptual distance through the frozen extractor: the mean over the
/// three taps of the per-element mean |psi_n(a) - psi_n(b)|. Accepts
/// batches; the batched value equals the mean of per-image values.
pub fn perceptual_distance(fe: &FeatureExtractor, a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same_shape(a, b)?;
    let ta = fe.extract_eager(a)?;
    let tb = fe.extract_eager(b)?;
    let mut total = 0.0;
    for n in 0..NUM_TAPS {
        let d: f64 = ta[n]
            .data()
            .iter()
            .zip(tb[n].data())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / ta[n].numel() as f64;
        total += d;
    }
    Ok(total / NUM_TAPS as f64)
}

fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "metric operands {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}
