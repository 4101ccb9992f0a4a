//! Training objective: L1 reconstruction loss plus a masked k-space L2 term.

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kspace::{fft2c, ifft2c, FrequencyMask, KSpaceGrid};
use crate::tensor::{lit, Plane, Real};

/// Default k-space loss weight.
pub const LAMBDA_K: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_rec: f64,
    pub l_k: f64,
    pub l_full: f64,
    /// Weight actually applied to `l_k` (0 when the k-space term is off).
    pub lambda_k: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossOptions {
    pub lambda_k: f64,
    pub k_loss_on: bool,
    /// Use the squared norm instead of the norm for the k-space term.
    pub squared: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            lambda_k: LAMBDA_K,
            k_loss_on: true,
            squared: false,
        }
    }
}

fn same_dims<T: Real>(a: &Plane<T>, b: &Plane<T>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Dims(format!(
            "loss inputs differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Mean absolute error.
pub fn rec_loss<T: Real>(sr: &Plane<T>, hr: &Plane<T>) -> Result<f64> {
    same_dims(sr, hr)?;
    let n = sr.data.len() as f64;
    Ok(sr
        .data
        .iter()
        .zip(&hr.data)
        .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
        .sum::<f64>()
        / n)
}

fn rec_grad<T: Real>(sr: &Plane<T>, hr: &Plane<T>, weight: T) -> Plane<T> {
    let k = weight / lit::<T>(sr.data.len() as f64);
    Plane {
        h: sr.h,
        w: sr.w,
        data: sr
            .data
            .iter()
            .zip(&hr.data)
            .map(|(&a, &b)| {
                let d = a - b;
                if d > T::zero() {
                    k
                } else if d < T::zero() {
                    -k
                } else {
                    T::zero()
                }
            })
            .collect(),
    }
}

fn masked_residual<T: Real>(sr: &Plane<T>, hr: &Plane<T>, mask: &FrequencyMask) -> Result<KSpaceGrid<T>> {
    same_dims(sr, hr)?;
    if (mask.h, mask.w) != sr.dims() {
        return Err(Error::Dims(format!(
            "mask {}x{} does not match images {:?}",
            mask.h,
            mask.w,
            sr.dims()
        )));
    }
    // the transform is linear: F(sr) - F(hr) = F(sr - hr)
    let diff = Plane {
        h: sr.h,
        w: sr.w,
        data: sr.data.iter().zip(&hr.data).map(|(&a, &b)| a - b).collect(),
    };
    let mut k = fft2c(&diff)?;
    for (c, &m) in k.coeffs.iter_mut().zip(&mask.values) {
        if m == 0 {
            *c = Complex::new(T::zero(), T::zero());
        }
    }
    Ok(k)
}

/// `|| (F(sr) - F(hr)) * M ||_2`.
pub fn k_loss<T: Real>(sr: &Plane<T>, hr: &Plane<T>, mask: &FrequencyMask) -> Result<f64> {
    Ok(masked_residual(sr, hr, mask)?.energy().sqrt())
}

/// Loss value and gradient with respect to `sr`.
pub fn full_loss_with_grad<T: Real>(
    sr: &Plane<T>,
    hr: &Plane<T>,
    mask: &FrequencyMask,
    opts: &LossOptions,
) -> Result<(LossReport, Plane<T>)> {
    if !(opts.lambda_k >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "lambda_k must be >= 0, got {}",
            opts.lambda_k
        )));
    }
    let l_rec = rec_loss(sr, hr)?;
    let resid = masked_residual(sr, hr, mask)?;
    let energy = resid.energy();
    let l_k = if opts.squared { energy } else { energy.sqrt() };
    let lambda = if opts.k_loss_on { opts.lambda_k } else { 0.0 };
    let mut grad = rec_grad(sr, hr, T::one());
    if lambda > 0.0 && energy > 0.0 {
        // d||D|| / d sr = Re(F^H D) / ||D||;  d||D||^2 / d sr = 2 Re(F^H D)
        let coef = if opts.squared {
            2.0 * lambda
        } else {
            lambda / energy.sqrt()
        };
        let back = ifft2c(&resid)?;
        let c = lit::<T>(coef);
        for (g, z) in grad.data.iter_mut().zip(&back) {
            *g += c * z.re;
        }
    }
    Ok((
        LossReport {
            l_rec,
            l_k,
            l_full: l_rec + lambda * l_k,
            lambda_k: lambda,
        },
        grad,
    ))
}

pub fn full_loss<T: Real>(
    sr: &Plane<T>,
    hr: &Plane<T>,
    mask: &FrequencyMask,
    opts: &LossOptions,
) -> Result<LossReport> {
    Ok(full_loss_with_grad(sr, hr, mask, opts)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kspace::lowpass_mask;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_plane(h: usize, w: usize, seed: u64) -> Plane<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Plane::from_fn(h, w, |_, _| rng.random::<f64>())
    }

    #[test]
    fn rec_loss_examples() {
        let hr = rand_plane(6, 6, 0);
        assert_eq!(rec_loss(&hr, &hr).unwrap(), 0.0);
        let off = hr.map(|v| v + 0.1);
        assert!((rec_loss(&off, &hr).unwrap() - 0.1).abs() < 1e-12);
        let sr = rand_plane(6, 6, 1);
        let oracle: f64 = (0..36).map(|i| (sr.data[i] - hr.data[i]).abs()).sum::<f64>() / 36.0;
        assert!((rec_loss(&sr, &hr).unwrap() - oracle).abs() < 1e-15);
        assert!(rec_loss(&sr, &rand_plane(6, 5, 2)).is_err());
    }

    #[test]
    fn full_loss_arithmetic_and_flags() {
        let hr = rand_plane(8, 8, 3);
        let mask = lowpass_mask((8, 8), (4, 4)).unwrap();
        let r = full_loss(&hr, &hr, &mask, &LossOptions::default()).unwrap();
        assert_eq!((r.l_rec, r.l_k, r.l_full), (0.0, 0.0, 0.0));

        let sr = rand_plane(8, 8, 4);
        let r = full_loss(&sr, &hr, &mask, &LossOptions::default()).unwrap();
        assert_eq!(r.l_full, r.l_rec + 0.05 * r.l_k);
        let off = LossOptions {
            k_loss_on: false,
            ..LossOptions::default()
        };
        let r = full_loss(&sr, &hr, &mask, &off).unwrap();
        assert_eq!(r.l_full, r.l_rec);
        let neg = LossOptions {
            lambda_k: -0.1,
            ..LossOptions::default()
        };
        assert!(full_loss(&sr, &hr, &mask, &neg).is_err());
    }

    #[test]
    fn arithmetic_example() {
        let r = LossReport {
            l_rec: 0.2,
            l_k: 1.0,
            l_full: 0.2 + 0.05 * 1.0,
            lambda_k: 0.05,
        };
        assert!((r.l_full - 0.25).abs() < 1e-15);
    }

    #[test]
    fn dc_offset_closed_form() {
        let hr = rand_plane(12, 12, 5);
        let c = 0.3;
        let sr = hr.map(|v| v + c);
        let mask = lowpass_mask((12, 12), (6, 6)).unwrap();
        let lk = k_loss(&sr, &hr, &mask).unwrap();
        assert!((lk - c * 12.0).abs() / (c * 12.0) < 1e-6);
    }

    #[test]
    fn parseval_split() {
        let (x, y) = (rand_plane(10, 10, 6), rand_plane(10, 10, 7));
        let mask = lowpass_mask((10, 10), (6, 4)).unwrap();
        let all = lowpass_mask((10, 10), (10, 10)).unwrap();
        let total: f64 = x.data.iter().zip(&y.data).map(|(a, b)| (a - b).powi(2)).sum();
        let kept = k_loss(&x, &y, &mask).unwrap().powi(2);
        let mut inv = mask.clone();
        inv.values.iter_mut().for_each(|v| *v = 1 - *v);
        let dropped = k_loss(&x, &y, &inv).unwrap().powi(2);
        assert!((kept + dropped - total).abs() / total < 1e-6);
        assert!((k_loss(&x, &y, &all).unwrap().powi(2) - total).abs() / total < 1e-6);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let hr = rand_plane(8, 6, 8);
        let sr = rand_plane(8, 6, 9);
        let mask = lowpass_mask((8, 6), (4, 4)).unwrap();
        for squared in [false, true] {
            for k_on in [false, true] {
                let opts = LossOptions {
                    lambda_k: 0.05,
                    k_loss_on: k_on,
                    squared,
                };
                let (_, g) = full_loss_with_grad(&sr, &hr, &mask, &opts).unwrap();
                let eps = 1e-6;
                for idx in 0..sr.data.len() {
                    if (sr.data[idx] - hr.data[idx]).abs() < 1e-6 {
                        continue;
                    }
                    let mut p = sr.clone();
                    p.data[idx] += eps;
                    let mut m = sr.clone();
                    m.data[idx] -= eps;
                    let fd = (full_loss(&p, &hr, &mask, &opts).unwrap().l_full
                        - full_loss(&m, &hr, &mask, &opts).unwrap().l_full)
                        / (2.0 * eps);
                    let rel = (fd - g.data[idx]).abs() / fd.abs().max(g.data[idx].abs()).max(1e-12);
                    assert!(rel < 1e-4, "idx {idx}: fd {fd} vs {}", g.data[idx]);
                }
            }
        }
    }
}
