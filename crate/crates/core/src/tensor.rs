//! Dense real arrays used throughout the pipeline: single-channel planes and
//! channel-major feature maps, plus the scalar trait that lets the network run
//! in `f32` for training and `f64` for gradient checks.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::sync::{Mutex, OnceLock};

use num_traits::{Float, FloatConst};
use rustfft::{FftNum, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating-point scalar usable by every numeric routine in the crate.
pub trait Real:
    Float + FloatConst + FftNum + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Process-wide FFT planner for this scalar type.
    fn fft_planner() -> &'static Mutex<FftPlanner<Self>>;

    /// Raw row-major GEMM.
    ///
    /// # Safety
    ///
    /// Same contract as `matrixmultiply::sgemm`: the pointers and strides must
    /// describe valid `m x k`, `k x n` and `m x n` matrices, `c` not aliasing `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    fn fft_planner() -> &'static Mutex<FftPlanner<f32>> {
        static PLANNER: OnceLock<Mutex<FftPlanner<f32>>> = OnceLock::new();
        PLANNER.get_or_init(|| Mutex::new(FftPlanner::new()))
    }
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    fn fft_planner() -> &'static Mutex<FftPlanner<f64>> {
        static PLANNER: OnceLock<Mutex<FftPlanner<f64>>> = OnceLock::new();
        PLANNER.get_or_init(|| Mutex::new(FftPlanner::new()))
    }
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Shorthand for converting a literal into the working scalar type.
#[inline]
pub fn lit<T: Real>(v: f64) -> T {
    T::of(v)
}

/// `c = alpha * op(a) * op(b) + beta * c` on dense row-major buffers.
///
/// `a` is `m x k` (or `k x m` when `trans_a`), `b` is `k x n` (or `n x k` when
/// `trans_b`), `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs size");
    assert_eq!(b.len(), k * n, "gemm: rhs size");
    assert_eq!(c.len(), m * n, "gemm: output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths checked above match the strides passed.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// A single-channel 2D array stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plane<T> {
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Copy + Default> Plane<T> {
    pub fn new(h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::Dims(format!("plane must be non-empty, got {h}x{w}")));
        }
        if data.len() != h * w {
            return Err(Error::Dims(format!(
                "plane {h}x{w} needs {} values, got {}",
                h * w,
                data.len()
            )));
        }
        Ok(Plane { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Plane {
            h,
            w,
            data: vec![T::default(); h * w],
        }
    }

    pub fn filled(h: usize, w: usize, v: T) -> Self {
        Plane {
            h,
            w,
            data: vec![v; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                data.push(f(i, j));
            }
        }
        Plane { h, w, data }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.w + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.w + j] = v;
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn map<U: Copy + Default>(&self, f: impl Fn(T) -> U) -> Plane<U> {
        Plane {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copy of the `rows x cols` window starting at `(r0, c0)`.
    pub fn crop(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Result<Self> {
        if r0 + rows > self.h || c0 + cols > self.w || rows == 0 || cols == 0 {
            return Err(Error::Dims(format!(
                "crop {rows}x{cols}@({r0},{c0}) outside {}x{}",
                self.h, self.w
            )));
        }
        Ok(Plane::from_fn(rows, cols, |i, j| self.get(r0 + i, c0 + j)))
    }
}

impl<T: Real> Plane<T> {
    pub fn cast<U: Real>(&self) -> Plane<U> {
        self.map(|v| U::of(v.as_f64()))
    }

    pub fn max_abs_diff(&self, other: &Plane<T>) -> f64 {
        assert_eq!(self.dims(), other.dims());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A `C x H x W` channel-major real array.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        FeatureMap {
            c,
            h,
            w,
            data: vec![T::zero(); c * h * w],
        }
    }

    pub fn new(c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(Error::Dims(format!(
                "feature map {c}x{h}x{w} needs {} values, got {}",
                c * h * w,
                data.len()
            )));
        }
        Ok(FeatureMap { c, h, w, data })
    }

    pub fn from_plane(p: &Plane<T>) -> Self {
        FeatureMap {
            c: 1,
            h: p.h,
            w: p.w,
            data: p.data.clone(),
        }
    }

    /// Single-channel map viewed as a plane.
    pub fn to_plane(&self) -> Plane<T> {
        assert_eq!(self.c, 1, "to_plane on a multi-channel map");
        Plane {
            h: self.h,
            w: self.w,
            data: self.data.clone(),
        }
    }

    #[inline]
    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn at(&self, c: usize, i: usize, j: usize) -> T {
        self.data[(c * self.h + i) * self.w + j]
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.hw();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.hw();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_spatial(&self, other: &FeatureMap<T>) -> bool {
        self.h == other.h && self.w == other.w
    }

    /// Channel concatenation `[a; b]`.
    pub fn concat(a: &FeatureMap<T>, b: &FeatureMap<T>) -> Result<Self> {
        if !a.same_spatial(b) {
            return Err(Error::Dims(format!(
                "cannot concatenate {}x{} with {}x{}",
                a.h, a.w, b.h, b.w
            )));
        }
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Ok(FeatureMap {
            c: a.c + b.c,
            h: a.h,
            w: a.w,
            data,
        })
    }

    /// Channels `[from, to)` as a new map.
    pub fn slice_channels(&self, from: usize, to: usize) -> Self {
        assert!(from <= to && to <= self.c);
        let n = self.hw();
        FeatureMap {
            c: to - from,
            h: self.h,
            w: self.w,
            data: self.data[from * n..to * n].to_vec(),
        }
    }

    pub fn add_assign(&mut self, other: &FeatureMap<T>) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> FeatureMap<U> {
        FeatureMap {
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}
