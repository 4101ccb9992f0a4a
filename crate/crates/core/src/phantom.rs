//! Synthetic multi-contrast phantoms: overlapping ellipses painted in order,
//! one shared tissue-class map, and one intensity lookup per contrast.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Plane;

/// Every dataset slice is cropped to a multiple of this so that all test
/// scales {1.5, 2, 3, 4, 6, 8} give integral LR sizes.
pub const DIM_MULTIPLE: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Contrast {
    Target,
    Reference,
}

impl Contrast {
    pub fn as_str(self) -> &'static str {
        match self {
            Contrast::Target => "target",
            Contrast::Reference => "reference",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "target" => Some(Contrast::Target),
            "reference" => Some(Contrast::Reference),
            _ => None,
        }
    }
}

/// A normalized 2D slice with its subject, slice and contrast labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceImage {
    pub pixels: Plane<f32>,
    pub contrast: Contrast,
    pub subject_id: String,
    pub slice_id: String,
    /// Maximum before division into [0, 1].
    pub norm_max: f64,
}

impl SliceImage {
    pub fn dims(&self) -> (usize, usize) {
        self.pixels.dims()
    }

    /// Same metadata, new pixels (used for LR versions of a slice).
    pub fn with_pixels(&self, pixels: Plane<f32>) -> SliceImage {
        SliceImage {
            pixels,
            contrast: self.contrast,
            subject_id: self.subject_id.clone(),
            slice_id: self.slice_id.clone(),
            norm_max: self.norm_max,
        }
    }
}

/// Ellipse in normalized canvas coordinates: both axes span [-1, 1] over
/// the pixel-center grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center_y: f64,
    pub center_x: f64,
    pub semi_y: f64,
    pub semi_x: f64,
    /// Counter-clockwise rotation in radians.
    pub angle: f64,
}

impl Ellipse {
    pub fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.center_y, x - self.center_x);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.semi_x).powi(2) + (v / self.semi_y).powi(2) <= 1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    /// `(H, W)`, both multiples of 24.
    pub canvas: (usize, usize),
    pub n_ellipses: usize,
    /// Intensity per tissue class; index 0 is background, index `e + 1` is
    /// ellipse `e`.
    pub intensity_map_target: Vec<f64>,
    pub intensity_map_reference: Vec<f64>,
}

impl PhantomSpec {
    /// Parameters with intensity maps drawn from `seed` as well: background 0, each
    /// tissue class in [0.1, 1] independently per contrast.
    pub fn random(seed: u64, canvas: (usize, usize), n_ellipses: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1a7e_4517_c0de_0001);
        let (target, reference) = random_intensity_maps(&mut rng, n_ellipses);
        PhantomSpec {
            seed,
            canvas,
            n_ellipses,
            intensity_map_target: target,
            intensity_map_reference: reference,
        }
    }

    fn validate(&self) -> Result<()> {
        let (h, w) = self.canvas;
        if h == 0 || w == 0 || h % DIM_MULTIPLE != 0 || w % DIM_MULTIPLE != 0 {
            return Err(Error::Dims(format!(
                "phantom canvas {h}x{w} must be a positive multiple of {DIM_MULTIPLE} in both dimensions"
            )));
        }
        if self.n_ellipses < 3 {
            return Err(Error::InvalidArgument(format!(
                "phantom needs at least 3 ellipses, got {}",
                self.n_ellipses
            )));
        }
        for (name, map) in [
            ("target", &self.intensity_map_target),
            ("reference", &self.intensity_map_reference),
        ] {
            if map.len() != self.n_ellipses + 1 {
                return Err(Error::InvalidArgument(format!(
                    "{name} intensity map needs {} entries (background + ellipses), got {}",
                    self.n_ellipses + 1,
                    map.len()
                )));
            }
            if map.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidArgument(format!(
                    "{name} intensity map values must lie in [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn random_intensity_maps(rng: &mut impl Rng, n_ellipses: usize) -> (Vec<f64>, Vec<f64>) {
    let mut draw = || {
        let mut m = vec![0.0];
        m.extend((0..n_ellipses).map(|_| rng.random_range(0.1..=1.0)));
        m
    };
    let target = draw();
    let reference = draw();
    (target, reference)
}

/// Output of [`generate_phantom`].
#[derive(Clone, Debug)]
pub struct PhantomPair {
    pub target: SliceImage,
    pub reference: SliceImage,
    /// Tissue-class index per pixel, shared by both contrasts.
    pub classes: Plane<u16>,
    pub ellipses: Vec<Ellipse>,
}

/// Ellipse geometry for `seed`: a head outline, a brain region inside it,
/// and smaller structures, all under one random rigid motion.
pub fn phantom_geometry(seed: u64, n_ellipses: usize) -> Vec<Ellipse> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rot = rng.random_range(-PI / 8.0..PI / 8.0);
    let ty = rng.random_range(-0.08..0.08);
    let tx = rng.random_range(-0.08..0.08);

    let outer_y = rng.random_range(0.80..0.90);
    let outer_x = rng.random_range(0.62..0.74);
    let mut local = vec![
        Ellipse {
            center_y: 0.0,
            center_x: 0.0,
            semi_y: outer_y,
            semi_x: outer_x,
            angle: 0.0,
        },
        Ellipse {
            center_y: -0.02,
            center_x: 0.0,
            semi_y: outer_y * 0.9,
            semi_x: outer_x * 0.88,
            angle: 0.0,
        },
    ];
    while local.len() < n_ellipses {
        // centers inside the brain region
        let r = rng.random_range(0.0..0.65f64).sqrt() * 0.8;
        let phi = rng.random_range(0.0..2.0 * PI);
        local.push(Ellipse {
            center_y: r * phi.sin() * outer_y,
            center_x: r * phi.cos() * outer_x,
            semi_y: rng.random_range(0.05..0.30),
            semi_x: rng.random_range(0.04..0.22),
            angle: rng.random_range(0.0..PI),
        });
    }

    let (s, c) = rot.sin_cos();
    local
        .into_iter()
        .map(|e| Ellipse {
            center_y: s * e.center_x + c * e.center_y + ty,
            center_x: c * e.center_x - s * e.center_y + tx,
            angle: e.angle + rot,
            ..e
        })
        .collect()
}

/// Normalized pixel-center coordinate in [-1, 1] for index `i` of `n`.
#[inline]
pub fn pixel_center(i: usize, n: usize) -> f64 {
    2.0 * (i as f64 + 0.5) / n as f64 - 1.0
}

/// Tissue-class map in painter's order: later ellipses overwrite earlier ones.
pub fn rasterize_classes(ellipses: &[Ellipse], h: usize, w: usize) -> Plane<u16> {
    Plane::from_fn(h, w, |i, j| {
        let (y, x) = (pixel_center(i, h), pixel_center(j, w));
        ellipses
            .iter()
            .enumerate()
            .rev()
            .find(|(_, e)| e.contains(y, x))
            .map_or(0, |(k, _)| k as u16 + 1)
    })
}

fn paint(classes: &Plane<u16>, map: &[f64]) -> Result<(Plane<f32>, f64)> {
    let raw = classes.map(|c| map[c as usize]);
    let max = raw.data.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return Err(Error::InvalidArgument(
            "phantom contrast is identically zero; cannot normalize".into(),
        ));
    }
    Ok((raw.map(|v| (v / max) as f32), max))
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<PhantomPair> {
    generate_phantom_named(spec, &format!("seed{}", spec.seed), "0")
}

/// [`generate_phantom`] with explicit subject and slice identifiers.
pub fn generate_phantom_named(spec: &PhantomSpec, subject_id: &str, slice_id: &str) -> Result<PhantomPair> {
    spec.validate()?;
    let (h, w) = spec.canvas;
    let ellipses = phantom_geometry(spec.seed, spec.n_ellipses);
    let classes = rasterize_classes(&ellipses, h, w);
    let (tar, tar_max) = paint(&classes, &spec.intensity_map_target)?;
    let (reference, ref_max) = paint(&classes, &spec.intensity_map_reference)?;
    let make = |pixels, contrast, norm_max| SliceImage {
        pixels,
        contrast,
        subject_id: subject_id.to_string(),
        slice_id: slice_id.to_string(),
        norm_max,
    };
    Ok(PhantomPair {
        target: make(tar, Contrast::Target, tar_max),
        reference: make(reference, Contrast::Reference, ref_max),
        classes,
        ellipses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec7() -> PhantomSpec {
        PhantomSpec::random(7, (48, 48), 5)
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_phantom(&spec7()).unwrap();
        let b = generate_phantom(&spec7()).unwrap();
        assert_eq!(a.target, b.target);
        assert_eq!(a.reference, b.reference);
        assert_eq!(a.classes, b.classes);
    }

    #[test]
    fn equal_maps_give_equal_contrasts() {
        let mut spec = spec7();
        spec.intensity_map_reference = spec.intensity_map_target.clone();
        let p = generate_phantom(&spec).unwrap();
        assert_eq!(p.target.pixels, p.reference.pixels);
    }

    #[test]
    fn rejects_non_multiple_of_24() {
        let spec = PhantomSpec::random(1, (50, 48), 5);
        let err = generate_phantom(&spec).unwrap_err();
        assert!(err.to_string().contains("multiple of 24"), "{err}");
    }

    #[test]
    fn rejects_too_few_ellipses() {
        let spec = PhantomSpec::random(1, (48, 48), 2);
        assert!(generate_phantom(&spec).is_err());
    }

    #[test]
    fn max_is_one_and_values_in_range() {
        for seed in 0..20 {
            let p = generate_phantom(&PhantomSpec::random(seed, (48, 72), 6)).unwrap();
            for img in [&p.target, &p.reference] {
                let max = img.pixels.data.iter().cloned().fold(f32::MIN, f32::max);
                assert!((max - 1.0).abs() < 1e-6);
                assert!(img.pixels.data.iter().all(|v| (0.0..=1.0).contains(v)));
                assert!(img.norm_max > 0.0 && img.norm_max <= 1.0);
            }
        }
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate_phantom(&PhantomSpec::random(1, (48, 48), 5)).unwrap();
        let b = generate_phantom(&PhantomSpec::random(2, (48, 48), 5)).unwrap();
        assert_ne!(a.classes, b.classes);
    }
}
