//! Whole-slice inference at a nominal scale, shared by the command line and
//! the HTTP service so both produce identical pixels.

use crate::error::{Error, Result};
use crate::geometry::{effective_scale, ScaleTask};
use crate::model::{Branch, DualArbNet, Prepared};
use crate::tensor::Plane;

/// Scale slider resolution.
pub const SCALE_STEPS: f64 = 96.0;

/// Rounds a scale to the nearest multiple of `1 / SCALE_STEPS`.
pub fn quantize_scale(s: f64) -> f64 {
    (s * SCALE_STEPS).round() / SCALE_STEPS
}

/// Output grid `round(dims * scale)` per axis, with the reference mode taken
/// from the reference size.
pub fn task_for_scale(tar_dims: (usize, usize), ref_dims: (usize, usize), scale: f64) -> Result<ScaleTask> {
    let (h, _) = effective_scale(tar_dims.0, scale)?;
    let (w, _) = effective_scale(tar_dims.1, scale)?;
    ScaleTask::infer(tar_dims, ref_dims, (h, w))
}

/// Encoder and fusion over the full output grid for `scale`.
pub fn prepare_slice(
    net: &DualArbNet<f32>,
    tar: &Plane<f32>,
    reference: Option<&Plane<f32>>,
    scale: f64,
) -> Result<Prepared<f32>> {
    let ref_dims = match reference {
        Some(r) => r.dims(),
        None if net.config.use_ref => return Err(Error::Missing("reference image".into())),
        None => tar.dims(),
    };
    let task = task_for_scale(tar.dims(), ref_dims, scale)?;
    net.prepare(tar, reference.filter(|_| net.config.use_ref), &task)
}

/// Super-resolves a whole target slice.
pub fn super_resolve(
    net: &DualArbNet<f32>,
    tar: &Plane<f32>,
    reference: Option<&Plane<f32>>,
    scale: f64,
) -> Result<Plane<f32>> {
    let prep = prepare_slice(net, tar, reference, scale)?;
    let (h, w) = prep.task.hr_dims;
    net.decode_region(&prep, Branch::Target, 0..h, 0..w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RefMode;

    #[test]
    fn quantization_keeps_grid_points() {
        for s in [1.0, 1.5, 2.5, 8.0, 1.0 + 1.0 / 96.0] {
            assert_eq!(quantize_scale(s), s);
        }
        assert_eq!(quantize_scale(2.0 + 0.004), 2.0);
    }

    #[test]
    fn task_rounds_each_axis() {
        let t = task_for_scale((32, 32), (32, 32), 2.5).unwrap();
        assert_eq!(t.hr_dims, (80, 80));
        assert_eq!(t.ref_mode, RefMode::Lr);
        let t = task_for_scale((32, 32), (80, 80), 2.5).unwrap();
        assert_eq!(t.ref_mode, RefMode::Hr);
        assert!(task_for_scale((32, 32), (32, 32), 0.5).is_err());
    }
}
