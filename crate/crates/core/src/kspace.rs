//! Orthonormal DC-centered 2D Fourier transforms, central k-space cropping,
//! and the low-pass degradation used to synthesize LR inputs.

use std::sync::Arc;

use num_complex::Complex;
use rustfft::Fft;

use crate::error::{Error, Result};
use crate::phantom::SliceImage;
use crate::tensor::{lit, Plane, Real};

/// Complex spectrum with DC stored at `(h / 2, w / 2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceGrid<T = f64> {
    pub h: usize,
    pub w: usize,
    pub coeffs: Vec<Complex<T>>,
}

impl<T: Real> KSpaceGrid<T> {
    pub fn get(&self, i: usize, j: usize) -> Complex<T> {
        self.coeffs[i * self.w + j]
    }

    pub fn energy(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm_sqr().as_f64()).sum()
    }
}

/// Binary low-pass mask in the centered layout.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyMask {
    pub h: usize,
    pub w: usize,
    pub values: Vec<u8>,
    pub passband_dims: (usize, usize),
}

impl FrequencyMask {
    pub fn ones(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_set(&self, i: usize, j: usize) -> bool {
        self.values[i * self.w + j] == 1
    }

    pub fn is_all_pass(&self) -> bool {
        self.passband_dims == (self.h, self.w)
    }
}

fn plan<T: Real>(len: usize, inverse: bool) -> Arc<dyn Fft<T>> {
    let mut planner = T::fft_planner().lock().expect("fft planner poisoned");
    if inverse {
        planner.plan_fft_inverse(len)
    } else {
        planner.plan_fft_forward(len)
    }
}

/// In-place unnormalized 2D FFT of a row-major `h x w` buffer.
fn fft2_in_place<T: Real>(buf: &mut [Complex<T>], h: usize, w: usize, inverse: bool) {
    plan::<T>(w, inverse).process(buf);
    let mut cols = vec![Complex::new(T::zero(), T::zero()); h * w];
    for i in 0..h {
        for j in 0..w {
            cols[j * h + i] = buf[i * w + j];
        }
    }
    plan::<T>(h, inverse).process(&mut cols);
    for i in 0..h {
        for j in 0..w {
            buf[i * w + j] = cols[j * h + i];
        }
    }
}

/// Moves index 0 to index `n / 2` along both axes.
fn fftshift<T: Copy>(src: &[T], h: usize, w: usize) -> Vec<T> {
    let mut out = src.to_vec();
    for i in 0..h {
        for j in 0..w {
            out[((i + h / 2) % h) * w + (j + w / 2) % w] = src[i * w + j];
        }
    }
    out
}

fn ifftshift<T: Copy>(src: &[T], h: usize, w: usize) -> Vec<T> {
    let mut out = src.to_vec();
    for i in 0..h {
        for j in 0..w {
            out[i * w + j] = src[((i + h / 2) % h) * w + (j + w / 2) % w];
        }
    }
    out
}

/// Forward transform of a complex buffer into the centered layout.
pub fn fft2c_complex<T: Real>(data: &[Complex<T>], h: usize, w: usize) -> KSpaceGrid<T> {
    let mut buf = data.to_vec();
    fft2_in_place(&mut buf, h, w, false);
    let scale = T::one() / lit::<T>((h * w) as f64).sqrt();
    for c in buf.iter_mut() {
        *c = *c * scale;
    }
    KSpaceGrid {
        h,
        w,
        coeffs: fftshift(&buf, h, w),
    }
}

/// Orthonormal centered forward transform of a real plane.
pub fn fft2c<T: Real>(img: &Plane<T>) -> Result<KSpaceGrid<T>> {
    if !img.is_finite() {
        return Err(Error::NonFinite("fft2c input".into()));
    }
    let data: Vec<Complex<T>> = img.data.iter().map(|&v| Complex::new(v, T::zero())).collect();
    Ok(fft2c_complex(&data, img.h, img.w))
}

/// Orthonormal centered inverse transform.
pub fn ifft2c<T: Real>(k: &KSpaceGrid<T>) -> Result<Vec<Complex<T>>> {
    if k.coeffs.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return Err(Error::NonFinite("ifft2c input".into()));
    }
    let mut buf = ifftshift(&k.coeffs, k.h, k.w);
    fft2_in_place(&mut buf, k.h, k.w, true);
    let scale = T::one() / lit::<T>((k.h * k.w) as f64).sqrt();
    for c in buf.iter_mut() {
        *c = *c * scale;
    }
    Ok(buf)
}

/// First index of the centered window of length `out` inside length `n`.
/// DC sits at `n / 2` in the input and at `out / 2` in the output.
#[inline]
pub fn window_start(n: usize, out: usize) -> usize {
    n / 2 - out / 2
}

fn check_window(hr: (usize, usize), lr: (usize, usize)) -> Result<()> {
    if lr.0 == 0 || lr.1 == 0 || lr.0 > hr.0 || lr.1 > hr.1 {
        return Err(Error::Dims(format!(
            "window {}x{} must be non-empty and fit inside {}x{}",
            lr.0, lr.1, hr.0, hr.1
        )));
    }
    Ok(())
}

/// Keeps the centered `out_dims` block of the spectrum.
pub fn central_crop<T: Real>(k: &KSpaceGrid<T>, out_dims: (usize, usize)) -> Result<KSpaceGrid<T>> {
    check_window((k.h, k.w), out_dims)?;
    let (oh, ow) = out_dims;
    let (r0, c0) = (window_start(k.h, oh), window_start(k.w, ow));
    let mut coeffs = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        coeffs.extend_from_slice(&k.coeffs[(r0 + i) * k.w + c0..(r0 + i) * k.w + c0 + ow]);
    }
    Ok(KSpaceGrid { h: oh, w: ow, coeffs })
}

/// Inverse of [`central_crop`]: embeds a small centered spectrum into a
/// larger zero grid.
pub fn zero_pad<T: Real>(k: &KSpaceGrid<T>, out_dims: (usize, usize)) -> Result<KSpaceGrid<T>> {
    check_window(out_dims, (k.h, k.w))?;
    let (oh, ow) = out_dims;
    let (r0, c0) = (window_start(oh, k.h), window_start(ow, k.w));
    let mut coeffs = vec![Complex::new(T::zero(), T::zero()); oh * ow];
    for i in 0..k.h {
        coeffs[(r0 + i) * ow + c0..(r0 + i) * ow + c0 + k.w].copy_from_slice(&k.coeffs[i * k.w..(i + 1) * k.w]);
    }
    Ok(KSpaceGrid { h: oh, w: ow, coeffs })
}

/// Ones on the [`central_crop`] window for `lr_dims`, zeros elsewhere.
pub fn lowpass_mask(hr_dims: (usize, usize), lr_dims: (usize, usize)) -> Result<FrequencyMask> {
    check_window(hr_dims, lr_dims)?;
    let (h, w) = hr_dims;
    let (r0, c0) = (window_start(h, lr_dims.0), window_start(w, lr_dims.1));
    let mut values = vec![0u8; h * w];
    for i in r0..r0 + lr_dims.0 {
        for j in c0..c0 + lr_dims.1 {
            values[i * w + j] = 1;
        }
    }
    Ok(FrequencyMask {
        h,
        w,
        values,
        passband_dims: lr_dims,
    })
}

/// LR dimensions produced by degrading `dims` by `k`.
pub fn lr_dims_for(dims: (usize, usize), k: f64) -> (usize, usize) {
    (
        ((dims.0 as f64 / k).round() as usize).max(1),
        ((dims.1 as f64 / k).round() as usize).max(1),
    )
}

/// Crops the spectrum of `img` to `lr_dims` and returns the magnitude image,
/// rescaled by `sqrt(N_lr / N_hr)` so constants keep their value.
pub fn degrade_to<T: Real>(img: &Plane<T>, lr_dims: (usize, usize)) -> Result<Plane<T>> {
    let spec = fft2c(img)?;
    let cropped = central_crop(&spec, lr_dims)?;
    let spatial = ifft2c(&cropped)?;
    let comp = lit::<T>(((lr_dims.0 * lr_dims.1) as f64 / (img.h * img.w) as f64).sqrt());
    Plane::new(lr_dims.0, lr_dims.1, spatial.iter().map(|c| c.norm() * comp).collect())
}

/// Low-pass k-space degradation by scale `k >= 1`.
pub fn degrade_plane<T: Real>(img: &Plane<T>, k: f64) -> Result<Plane<T>> {
    if !(k >= 1.0) || !k.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "degradation scale must be >= 1, got {k}"
        )));
    }
    degrade_to(img, lr_dims_for(img.dims(), k))
}

pub fn degrade(img: &SliceImage, k: f64) -> Result<SliceImage> {
    let lr = degrade_plane(&img.pixels.cast::<f64>(), k)?;
    Ok(img.with_pixels(lr.cast()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_plane(h: usize, w: usize, seed: u64) -> Plane<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Plane::from_fn(h, w, |_, _| rng.random::<f64>())
    }

    /// Brute-force centered orthonormal DFT.
    fn dft_oracle(img: &Plane<f64>) -> Vec<Complex<f64>> {
        let (h, w) = img.dims();
        let norm = ((h * w) as f64).sqrt();
        let mut out = vec![Complex::new(0.0, 0.0); h * w];
        for u in 0..h {
            for v in 0..w {
                let fu = u as f64 - (h / 2) as f64;
                let fv = v as f64 - (w / 2) as f64;
                let mut acc = Complex::new(0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let ph = -2.0 * std::f64::consts::PI * (fu * y as f64 / h as f64 + fv * x as f64 / w as f64);
                        acc += Complex::from_polar(img.get(y, x), ph);
                    }
                }
                out[u * w + v] = acc / norm;
            }
        }
        out
    }

    #[test]
    fn constant_image_has_single_dc_coefficient() {
        let c = 0.37;
        let img = Plane::filled(6, 8, c);
        let k = fft2c(&img).unwrap();
        for i in 0..6 {
            for j in 0..8 {
                let v = k.get(i, j);
                if (i, j) == (3, 4) {
                    assert!((v.re - c * 48f64.sqrt()).abs() < 1e-12 && v.im.abs() < 1e-12);
                } else {
                    assert!(v.norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn round_trip_and_parseval() {
        let img = random_plane(8, 8, 1);
        let k = fft2c(&img).unwrap();
        let back = ifft2c(&k).unwrap();
        let err = back
            .iter()
            .zip(&img.data)
            .map(|(c, v)| (c - v).norm())
            .fold(0.0, f64::max);
        assert!(err < 1e-6);
        let e_img: f64 = img.data.iter().map(|v| v * v).sum();
        assert!((k.energy() - e_img).abs() / e_img < 1e-6);
    }

    #[test]
    fn matches_dft_oracle_on_6x8() {
        let img = random_plane(6, 8, 2);
        let k = fft2c(&img).unwrap();
        let want = dft_oracle(&img);
        for (a, b) in k.coeffs.iter().zip(&want) {
            assert!((a - b).norm() < 1e-6);
        }
    }

    #[test]
    fn matches_dft_oracle_on_odd_sizes() {
        let img = random_plane(5, 7, 3);
        let k = fft2c(&img).unwrap();
        for (a, b) in k.coeffs.iter().zip(&dft_oracle(&img)) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn rejects_non_finite() {
        let mut img = Plane::filled(4, 4, 1.0);
        img.data[3] = f64::NAN;
        assert!(matches!(fft2c(&img), Err(Error::NonFinite(_))));
    }

    #[test]
    fn crop_identity_and_window() {
        let k = fft2c(&random_plane(8, 8, 4)).unwrap();
        assert_eq!(central_crop(&k, (8, 8)).unwrap(), k);
        let c = central_crop(&k, (4, 4)).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(c.get(i, j), k.get(i + 2, j + 2));
            }
        }
        assert!(central_crop(&k, (9, 8)).is_err());
    }

    #[test]
    fn crop_keeps_dc_energy() {
        let img = Plane::filled(8, 8, 0.5);
        let k = fft2c(&img).unwrap();
        let c = central_crop(&k, (4, 4)).unwrap();
        assert!((c.energy() - k.energy()).abs() < 1e-12);
    }

    #[test]
    fn mask_window_counts() {
        let m = lowpass_mask((8, 8), (4, 4)).unwrap();
        assert_eq!(m.ones(), 16);
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(m.is_set(i, j), (2..6).contains(&i) && (2..6).contains(&j));
            }
        }
        assert_eq!(lowpass_mask((8, 8), (8, 8)).unwrap().ones(), 64);
        let m = lowpass_mask((12, 12), (8, 8)).unwrap();
        assert_eq!(m.ones(), 64);
        assert!(m.is_set(2, 2) && m.is_set(9, 9) && !m.is_set(1, 5) && !m.is_set(10, 5));
        assert!(lowpass_mask((8, 8), (10, 4)).is_err());
    }

    #[test]
    fn degrade_keeps_constants() {
        let img = Plane::filled(24, 24, 0.8f64);
        for k in [1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0] {
            let lr = degrade_plane(&img, k).unwrap();
            assert_eq!(lr.dims(), lr_dims_for((24, 24), k));
            assert!(lr.data.iter().all(|v| (v - 0.8).abs() < 1e-12), "k={k}");
        }
    }

    #[test]
    fn degrade_identity_scale() {
        let img = random_plane(24, 24, 5);
        let lr = degrade_plane(&img, 1.0).unwrap();
        assert!(lr.max_abs_diff(&img) < 1e-6);
    }

    #[test]
    fn degrade_rejects_upscaling() {
        assert!(degrade_plane(&Plane::filled(24, 24, 1.0), 0.5).is_err());
    }

    #[test]
    fn mask_equals_pad_of_crop() {
        let k = fft2c(&random_plane(12, 12, 6)).unwrap();
        let m = lowpass_mask((12, 12), (8, 8)).unwrap();
        let padded = zero_pad(&central_crop(&k, (8, 8)).unwrap(), (12, 12)).unwrap();
        for (idx, (a, b)) in k.coeffs.iter().zip(&padded.coeffs).enumerate() {
            let masked = if m.values[idx] == 1 { *a } else { Complex::new(0.0, 0.0) };
            assert_eq!(masked, *b);
        }
    }

    #[test]
    fn retained_energy_is_monotone_in_scale() {
        let k = fft2c(&random_plane(24, 24, 7)).unwrap();
        let mut last = f64::INFINITY;
        for s in [1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0] {
            let e = central_crop(&k, lr_dims_for((24, 24), s)).unwrap().energy();
            assert!(e <= last + 1e-12);
            last = e;
        }
    }
}
