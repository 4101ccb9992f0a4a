//! Pixel-center geometry shared by the encoder and decoder: nearest feature
//! upsampling, 3x3 unfolding, relative query coordinates, and exact-scale
//! bookkeeping. Every mapping uses the `(i + 0.5) / n` pixel-center rule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Real};

/// Largest supported scale for either branch.
pub const MAX_SCALE: f64 = 16.0;

/// Exact ratio of two grid sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rational {
    pub num: usize,
    pub den: usize,
}

impl Rational {
    pub fn new(num: usize, den: usize) -> Self {
        assert!(den > 0, "rational with zero denominator");
        Rational { num, den }
    }

    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefMode {
    /// Reference at the target LR resolution.
    Lr,
    /// Reference at the target HR resolution.
    Hr,
    /// Any other reference resolution.
    Custom,
}

impl RefMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RefMode::Lr => "lr",
            RefMode::Hr => "hr",
            RefMode::Custom => "custom",
        }
    }
}

impl std::str::FromStr for RefMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lr" => Ok(RefMode::Lr),
            "hr" => Ok(RefMode::Hr),
            "custom" => Ok(RefMode::Custom),
            other => Err(Error::InvalidArgument(format!("unknown reference mode {other:?}"))),
        }
    }
}

/// Geometry of one super-resolution query.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleTask {
    pub s_tar: Rational,
    pub s_ref: Rational,
    pub hr_dims: (usize, usize),
    pub tar_dims: (usize, usize),
    pub ref_dims: (usize, usize),
    pub ref_mode: RefMode,
}

fn branch_scale(hr: (usize, usize), lr: (usize, usize), what: &str) -> Result<Rational> {
    if lr.0 == 0 || lr.1 == 0 || hr.0 == 0 || hr.1 == 0 {
        return Err(Error::Dims(format!("{what}: empty grid {lr:?} -> {hr:?}")));
    }
    let sy = hr.0 as f64 / lr.0 as f64;
    let sx = hr.1 as f64 / lr.1 as f64;
    if (sy - sx).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "{what}: anisotropic scale {sy} (rows) vs {sx} (cols) for {lr:?} -> {hr:?}"
        )));
    }
    if !(sy > 0.0 && sy <= MAX_SCALE) {
        return Err(Error::InvalidArgument(format!(
            "{what}: scale {sy} outside (0, {MAX_SCALE}]"
        )));
    }
    Ok(Rational::new(hr.0, lr.0))
}

impl ScaleTask {
    pub fn new(
        tar_dims: (usize, usize),
        ref_dims: (usize, usize),
        hr_dims: (usize, usize),
        ref_mode: RefMode,
    ) -> Result<Self> {
        Ok(ScaleTask {
            s_tar: branch_scale(hr_dims, tar_dims, "target")?,
            s_ref: branch_scale(hr_dims, ref_dims, "reference")?,
            hr_dims,
            tar_dims,
            ref_dims,
            ref_mode,
        })
    }

    /// Task inferring the reference mode from the reference size.
    pub fn infer(tar_dims: (usize, usize), ref_dims: (usize, usize), hr_dims: (usize, usize)) -> Result<Self> {
        let mode = if ref_dims == hr_dims {
            RefMode::Hr
        } else if ref_dims == tar_dims {
            RefMode::Lr
        } else {
            RefMode::Custom
        };
        Self::new(tar_dims, ref_dims, hr_dims, mode)
    }
}

/// `min(h - 1, floor((i + 0.5) * h / big))` evaluated exactly in integers.
#[inline]
pub fn src_index(i: usize, big: usize, h: usize) -> usize {
    ((2 * i + 1) * h / (2 * big)).min(h - 1)
}

fn check_dims(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 {
        return Err(Error::Dims(format!("grid must be non-empty, got {h}x{w}")));
    }
    Ok(())
}

/// Nearest-neighbour resampling of every channel to `out_dims`.
pub fn nearest_upsample<T: Real>(f: &FeatureMap<T>, out_dims: (usize, usize)) -> Result<FeatureMap<T>> {
    check_dims(f.h, f.w)?;
    check_dims(out_dims.0, out_dims.1)?;
    let (oh, ow) = out_dims;
    let rows: Vec<usize> = (0..oh).map(|i| src_index(i, oh, f.h)).collect();
    let cols: Vec<usize> = (0..ow).map(|j| src_index(j, ow, f.w)).collect();
    let mut out = FeatureMap::zeros(f.c, oh, ow);
    for c in 0..f.c {
        let src = f.channel(c);
        let dst = out.channel_mut(c);
        for (i, &si) in rows.iter().enumerate() {
            let srow = &src[si * f.w..(si + 1) * f.w];
            for (j, &sj) in cols.iter().enumerate() {
                dst[i * ow + j] = srow[sj];
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`nearest_upsample`]: sums each output gradient into its source cell.
pub fn nearest_upsample_backward<T: Real>(grad: &FeatureMap<T>, in_dims: (usize, usize)) -> FeatureMap<T> {
    let (h, w) = in_dims;
    let mut out = FeatureMap::zeros(grad.c, h, w);
    let rows: Vec<usize> = (0..grad.h).map(|i| src_index(i, grad.h, h)).collect();
    let cols: Vec<usize> = (0..grad.w).map(|j| src_index(j, grad.w, w)).collect();
    for c in 0..grad.c {
        let g = grad.channel(c);
        let dst = out.channel_mut(c);
        for (i, &si) in rows.iter().enumerate() {
            for (j, &sj) in cols.iter().enumerate() {
                dst[si * w + sj] += g[i * grad.w + j];
            }
        }
    }
    out
}

/// Neighbourhood offsets in channel-block order.
pub const UNFOLD_OFFSETS: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

#[inline]
fn clamp_idx(i: usize, d: isize, n: usize) -> usize {
    (i as isize + d).clamp(0, n as isize - 1) as usize
}

/// Stacks the replicate-padded 3x3 neighbourhood into channels: output
/// channel `k * C + c` holds channel `c` shifted by `UNFOLD_OFFSETS[k]`.
pub fn unfold3x3<T: Real>(f: &FeatureMap<T>) -> FeatureMap<T> {
    let (h, w) = (f.h, f.w);
    let mut out = FeatureMap::zeros(9 * f.c, h, w);
    for (k, &(dy, dx)) in UNFOLD_OFFSETS.iter().enumerate() {
        for c in 0..f.c {
            let src = f.channel(c);
            let dst = out.channel_mut(k * f.c + c);
            for i in 0..h {
                let si = clamp_idx(i, dy, h);
                for j in 0..w {
                    dst[i * w + j] = src[si * w + clamp_idx(j, dx, w)];
                }
            }
        }
    }
    out
}

pub fn unfold3x3_backward<T: Real>(grad: &FeatureMap<T>) -> FeatureMap<T> {
    let c_in = grad.c / 9;
    let (h, w) = (grad.h, grad.w);
    let mut out = FeatureMap::zeros(c_in, h, w);
    for (k, &(dy, dx)) in UNFOLD_OFFSETS.iter().enumerate() {
        for c in 0..c_in {
            let g = grad.channel(k * c_in + c);
            let dst = out.channel_mut(c);
            for i in 0..h {
                let si = clamp_idx(i, dy, h);
                for j in 0..w {
                    dst[si * w + clamp_idx(j, dx, w)] += g[i * w + j];
                }
            }
        }
    }
    out
}

/// Offset of each HR pixel center from the nearest cell center of an
/// `n`-cell grid, in units of half a cell: `p` in [-1, 1].
pub fn axis_offsets(big: usize, n: usize) -> Vec<f64> {
    (0..big)
        .map(|i| {
            let j = src_index(i, big, n);
            ((2 * i + 1) * n) as f64 / big as f64 - (2 * j + 1) as f64
        })
        .collect()
}

/// Relative coordinates `(p_y, p_x)` of every HR pixel; separable per axis.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordMap {
    pub py: Vec<f64>,
    pub px: Vec<f64>,
}

impl CoordMap {
    pub fn dims(&self) -> (usize, usize) {
        (self.py.len(), self.px.len())
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> (f64, f64) {
        (self.py[i], self.px[j])
    }

    /// Dense 2-channel `(p_y, p_x)` map.
    pub fn to_feature_map<T: Real>(&self) -> FeatureMap<T> {
        let (h, w) = self.dims();
        let mut out = FeatureMap::zeros(2, h, w);
        for i in 0..h {
            for j in 0..w {
                out.data[i * w + j] = T::of(self.py[i]);
                out.data[h * w + i * w + j] = T::of(self.px[j]);
            }
        }
        out
    }
}

pub fn relative_coords(hr_dims: (usize, usize), grid_dims: (usize, usize)) -> Result<CoordMap> {
    check_dims(hr_dims.0, hr_dims.1)?;
    check_dims(grid_dims.0, grid_dims.1)?;
    Ok(CoordMap {
        py: axis_offsets(hr_dims.0, grid_dims.0),
        px: axis_offsets(hr_dims.1, grid_dims.1),
    })
}

/// `(round(lr_size * s_nominal), exact ratio)` for a nominal scale.
pub fn effective_scale(lr_size: usize, s_nominal: f64) -> Result<(usize, Rational)> {
    if lr_size == 0 || !(s_nominal >= 1.0) || !s_nominal.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "effective_scale needs lr_size >= 1 and scale >= 1, got ({lr_size}, {s_nominal})"
        )));
    }
    let hr = (lr_size as f64 * s_nominal).round() as usize;
    Ok((hr, Rational::new(hr, lr_size)))
}
