//! PSNR and SSIM on [0, 1]-scaled images.

use crate::error::{Error, Result};
use crate::tensor::{Plane, Real};

/// Side of the SSIM Gaussian window.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_dims<T: Real>(a: &Plane<T>, b: &Plane<T>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Dims(format!(
            "metric inputs differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

pub fn mse<T: Real>(a: &Plane<T>, b: &Plane<T>) -> Result<f64> {
    same_dims(a, b)?;
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        / a.data.len() as f64)
}

/// Peak signal-to-noise ratio in dB; `+inf` when the MSE is below 1e-12.
pub fn psnr<T: Real>(a: &Plane<T>, b: &Plane<T>, data_range: f64) -> Result<f64> {
    if !(data_range > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "data_range must be positive, got {data_range}"
        )));
    }
    let m = mse(a, b)?;
    if m < 1e-12 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / m).log10())
}

/// Normalized 1D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering with `taps` along both axes.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = taps.iter().enumerate().map(|(t, &g)| g * x[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = taps.iter().enumerate().map(|(t, &g)| g * rows[(i + t) * ow + j]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM over all valid 11x11 Gaussian window positions (sigma 1.5).
pub fn ssim_with_range<T: Real>(a: &Plane<T>, b: &Plane<T>, data_range: f64) -> Result<f64> {
    same_dims(a, b)?;
    if a.h < SSIM_WINDOW || a.w < SSIM_WINDOW {
        return Err(Error::Dims(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            a.h, a.w
        )));
    }
    let (h, w) = a.dims();
    let x: Vec<f64> = a.data.iter().map(|v| v.as_f64()).collect();
    let y: Vec<f64> = b.data.iter().map(|v| v.as_f64()).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let (mx, ..) = filter_valid(&x, h, w, &taps);
    let (my, ..) = filter_valid(&y, h, w, &taps);
    let (mxx, ..) = filter_valid(&xx, h, w, &taps);
    let (myy, ..) = filter_valid(&yy, h, w, &taps);
    let (mxy, ..) = filter_valid(&xy, h, w, &taps);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

pub fn ssim<T: Real>(a: &Plane<T>, b: &Plane<T>) -> Result<f64> {
    ssim_with_range(a, b, 1.0)
}
