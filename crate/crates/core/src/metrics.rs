//! Image quality metrics on `H x W x C` tensors.

use crate::error::{MtsError, Result};
use crate::tensor::{Real, Tensor};

/// Side of the SSIM Gaussian window.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn same_shape<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(MtsError::shape(format!(
            "metric inputs differ in shape: {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    Ok(())
}

pub fn mse<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    same_shape(x, y)?;
    if x.is_empty() {
        return Err(MtsError::shape("metric inputs are empty"));
    }
    let sum: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| {
            let d = a.to_f64().unwrap() - b.to_f64().unwrap();
            d * d
        })
        .sum();
    Ok(sum / x.len() as f64)
}

/// Peak signal-to-noise ratio in dB. Identical inputs give `f64::INFINITY`.
pub fn psnr<T: Real>(x: &Tensor<T>, y: &Tensor<T>, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(MtsError::config("psnr peak must be positive"));
    }
    let e = mse(x, y)?;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / e).log10())
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0; SSIM_WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - r;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Separable valid-mode filtering of one `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..k).map(|t| taps[t] * plane[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..k).map(|t| taps[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Structural similarity with an 11x11 Gaussian window (sigma 1.5),
/// `C1 = (0.01 L)^2`, `C2 = (0.03 L)^2`, averaged over valid window
/// positions and then over channels. Both sides must be at least 11 pixels.
pub fn ssim<T: Real>(x: &Tensor<T>, y: &Tensor<T>, peak: f64) -> Result<f64> {
    same_shape(x, y)?;
    let (h, w, c) = match *x.shape() {
        [h, w, c] => (h, w, c),
        ref s => return Err(MtsError::shape(format!("ssim expects H x W x C, got {s:?}"))),
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MtsError::shape(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    if !(peak > 0.0) {
        return Err(MtsError::config("ssim peak must be positive"));
    }
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let taps = gaussian_taps();
    let plane = |t: &Tensor<T>, ch: usize| -> Vec<f64> {
        t.data().iter().skip(ch).step_by(c).map(|v| v.to_f64().unwrap()).collect()
    };
    let mut total = 0.0;
    for ch in 0..c {
        let a = plane(x, ch);
        let b = plane(y, ch);
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let ux = filter_valid(&a, h, w, &taps);
        let uy = filter_valid(&b, h, w, &taps);
        let uxx = filter_valid(&prod(&a, &a), h, w, &taps);
        let uyy = filter_valid(&prod(&b, &b), h, w, &taps);
        let uxy = filter_valid(&prod(&a, &b), h, w, &taps);
        let mut acc = 0.0;
        for i in 0..ux.len() {
            let (mx, my) = (ux[i], uy[i]);
            let vx = uxx[i] - mx * mx;
            let vy = uyy[i] - my * my;
            let vxy = uxy[i] - mx * my;
            acc += ((2.0 * mx * my + c1) * (2.0 * vxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
        total += acc / ux.len() as f64;
    }
    Ok(total / c as f64)
}
