//! Slices served by the service, loaded once from a dataset directory.

use std::collections::BTreeMap;
use std::path::Path;

use dualarb::dataset::{DatasetManifest, Split};
use dualarb::kspace::degrade;
use dualarb::tensor::Plane;
use dualarb::Result;
use serde::Serialize;

/// One aligned pair plus its simulated acquisition.
#[derive(Clone, Debug)]
pub struct SliceEntry {
    pub volume_id: String,
    pub slice_id: String,
    pub split: Split,
    pub hr: Plane<f32>,
    pub reference: Plane<f32>,
    /// Target degraded by the catalog's acquisition factor.
    pub lr: Plane<f32>,
    /// Reference degraded to the same grid as `lr`.
    pub ref_lr: Plane<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SliceInfo {
    pub id: String,
    pub split: Split,
    pub dims: [usize; 2],
    pub lr_dims: [usize; 2],
    pub contrasts: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VolumeInfo {
    pub id: String,
    pub slices: Vec<SliceInfo>,
}

#[derive(Clone, Debug, Default)]
pub struct Catalog {
    pub lr_scale: f64,
    volumes: BTreeMap<String, BTreeMap<String, SliceEntry>>,
}

impl Catalog {
    pub fn empty(lr_scale: f64) -> Self {
        Catalog {
            lr_scale,
            volumes: BTreeMap::new(),
        }
    }

    /// Reads every split manifest found under `root`; missing manifests are
    /// skipped, so a directory without any gives an empty catalog.
    pub fn load(root: &Path, lr_scale: f64) -> Result<Self> {
        if !root.is_dir() {
            return Err(dualarb::Error::Missing(format!("data directory {}", root.display())));
        }
        let mut cat = Catalog::empty(lr_scale);
        for split in Split::ALL {
            if !DatasetManifest::manifest_path(root, split).exists() {
                continue;
            }
            let manifest = DatasetManifest::load(root, split)?;
            for (i, e) in manifest.entries.iter().enumerate() {
                let (tar, reference) = manifest.load_pair(i)?;
                let entry = SliceEntry {
                    volume_id: e.subject_id.clone(),
                    slice_id: e.slice_id.clone(),
                    split,
                    lr: degrade(&tar, lr_scale)?.pixels,
                    ref_lr: degrade(&reference, lr_scale)?.pixels,
                    hr: tar.pixels,
                    reference: reference.pixels,
                };
                cat.volumes
                    .entry(entry.volume_id.clone())
                    .or_default()
                    .insert(entry.slice_id.clone(), entry);
            }
        }
        Ok(cat)
    }

    pub fn get(&self, volume: &str, slice: &str) -> Option<&SliceEntry> {
        self.volumes.get(volume)?.get(slice)
    }

    pub fn has_volume(&self, volume: &str) -> bool {
        self.volumes.contains_key(volume)
    }

    pub fn len(&self) -> usize {
        self.volumes.values().map(|v| v.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }

    pub fn listing(&self) -> Vec<VolumeInfo> {
        self.volumes
            .iter()
            .map(|(id, slices)| VolumeInfo {
                id: id.clone(),
                slices: slices
                    .values()
                    .map(|s| SliceInfo {
                        id: s.slice_id.clone(),
                        split: s.split,
                        dims: [s.hr.h, s.hr.w],
                        lr_dims: [s.lr.h, s.lr.w],
                        contrasts: vec!["target".into(), "reference".into()],
                    })
                    .collect(),
            })
            .collect()
    }
}
