//! On-disk formats: `.mrs` slices (raw little-endian f32 payload plus a JSON
//! sidecar) and per-split JSON manifests.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::{generate_phantom_named, random_intensity_maps, Contrast, PhantomSpec, SliceImage};
use crate::tensor::Plane;

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    h: usize,
    w: usize,
    contrast: String,
    subject: String,
    slice: String,
    norm_max: f64,
}

/// `(payload, sidecar)` paths for a slice. Accepts `name`, `name.mrs`,
/// `name.bin` or `name.json`.
pub fn slice_paths(path: &Path) -> (PathBuf, PathBuf) {
    let base = match path.extension().and_then(|e| e.to_str()) {
        Some("mrs" | "bin" | "json") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let with = |ext: &str| {
        let mut s = base.clone().into_os_string();
        s.push(".");
        s.push(ext);
        PathBuf::from(s)
    };
    (with("bin"), with("json"))
}

pub fn write_slice(img: &SliceImage, path: &Path) -> Result<()> {
    let (bin, json) = slice_paths(path);
    if let Some(dir) = bin.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut payload = Vec::with_capacity(img.pixels.data.len() * 4);
    for v in &img.pixels.data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&bin, payload).map_err(|e| Error::io(&bin, e))?;
    let sidecar = Sidecar {
        h: img.pixels.h,
        w: img.pixels.w,
        contrast: img.contrast.as_str().to_string(),
        subject: img.subject_id.clone(),
        slice: img.slice_id.clone(),
        norm_max: img.norm_max,
    };
    fs::write(&json, serde_json::to_string(&sidecar)?).map_err(|e| Error::io(&json, e))?;
    Ok(())
}

fn read_sidecar(json: &Path) -> Result<Sidecar> {
    let text = fs::read_to_string(json).map_err(|e| Error::io(json, e))?;
    let corrupt = |reason: String| Error::CorruptSidecar {
        path: json.to_path_buf(),
        reason,
    };
    let sc: Sidecar = serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
    if sc.h == 0 || sc.w == 0 {
        return Err(corrupt(format!("zero dimension {}x{}", sc.h, sc.w)));
    }
    if Contrast::parse(&sc.contrast).is_none() {
        return Err(corrupt(format!("unknown contrast {:?}", sc.contrast)));
    }
    Ok(sc)
}

/// Dimensions recorded in a slice's sidecar, without reading the payload.
pub fn read_slice_dims(path: &Path) -> Result<(usize, usize)> {
    let sc = read_sidecar(&slice_paths(path).1)?;
    Ok((sc.h, sc.w))
}

pub fn read_slice(path: &Path) -> Result<SliceImage> {
    let (bin, json) = slice_paths(path);
    let sc = read_sidecar(&json)?;
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let expected = sc.h * sc.w;
    if bytes.len() != expected * 4 {
        return Err(Error::PayloadMismatch {
            path: bin,
            expected,
            actual: bytes.len() / 4,
        });
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(bin.display().to_string()));
    }
    Ok(SliceImage {
        pixels: Plane::new(sc.h, sc.w, data)?,
        contrast: Contrast::parse(&sc.contrast).expect("validated"),
        subject_id: sc.subject,
        slice_id: sc.slice,
        norm_max: sc.norm_max,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// One aligned target/reference slice pair. Paths are relative to the
/// dataset root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub slice_id: String,
    pub target_path: String,
    pub reference_path: String,
    pub dims: [usize; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub split: Split,
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn manifest_path(root: &Path, split: Split) -> PathBuf {
        root.join(format!("{}.json", split.as_str()))
    }

    pub fn load(root: &Path, split: Split) -> Result<Self> {
        let path = Self::manifest_path(root, split);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let entries: Vec<ManifestEntry> = serde_json::from_str(&text)?;
        let m = DatasetManifest {
            split,
            root: root.to_path_buf(),
            entries,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self) -> Result<()> {
        let path = Self::manifest_path(&self.root, self.split);
        let text = serde_json::to_string_pretty(&self.entries)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Checks that every referenced slice exists and both contrasts agree on dims.
    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            for rel in [&e.target_path, &e.reference_path] {
                let dims = read_slice_dims(&self.root.join(rel))?;
                if dims != (e.dims[0], e.dims[1]) {
                    return Err(Error::Dims(format!(
                        "{rel}: sidecar dims {}x{} differ from manifest {}x{}",
                        dims.0, dims.1, e.dims[0], e.dims[1]
                    )));
                }
                if !slice_paths(&self.root.join(rel)).0.exists() {
                    return Err(Error::Missing(format!("payload for {rel}")));
                }
            }
        }
        Ok(())
    }

    pub fn subjects(&self) -> BTreeSet<String> {
        self.entries.iter().map(|e| e.subject_id.clone()).collect()
    }

    pub fn load_pair(&self, idx: usize) -> Result<(SliceImage, SliceImage)> {
        let e = &self.entries[idx];
        let tar = read_slice(&self.root.join(&e.target_path))?;
        let reference = read_slice(&self.root.join(&e.reference_path))
            .map_err(|err| Error::Missing(format!("reference slice for {}/{}: {err}", e.subject_id, e.slice_id)))?;
        if tar.dims() != reference.dims() {
            return Err(Error::Dims(format!(
                "{}/{}: target {:?} vs reference {:?}",
                e.subject_id,
                e.slice_id,
                tar.dims(),
                reference.dims()
            )));
        }
        Ok((tar, reference))
    }
}

/// Subject counts per split from the ratios: floors first, then the
/// remainder by largest fractional part; every split gets at least one.
fn split_counts(n: usize, ratios: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| (r + 1e-9).floor() as usize).collect();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - counts[a] as f64;
        let fb = raw[b] - counts[b] as f64;
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    for i in 0..counts.len() {
        if counts[i] == 0 {
            let donor = (0..counts.len()).max_by_key(|&j| (counts[j], usize::MAX - j)).unwrap();
            counts[donor] -= 1;
            counts[i] = 1;
        }
    }
    counts
}

/// Subject-level train/valid/test split.
pub fn build_splits(
    entries: &[ManifestEntry],
    root: &Path,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<[DatasetManifest; 3]> {
    let r = [ratios.0, ratios.1, ratios.2];
    if r.iter().any(|&v| !(v > 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios must be positive and sum to 1, got {r:?}"
        )));
    }
    let mut subjects: Vec<String> = entries
        .iter()
        .map(|e| e.subject_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if subjects.len() < 3 {
        return Err(Error::NotEnoughSubjects {
            subjects: subjects.len(),
            splits: 3,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    subjects.shuffle(&mut rng);
    let counts = split_counts(subjects.len(), &r);
    let mut start = 0;
    let mut out = Vec::with_capacity(3);
    for (split, count) in Split::ALL.into_iter().zip(counts) {
        let chosen: BTreeSet<&String> = subjects[start..start + count].iter().collect();
        start += count;
        out.push(DatasetManifest {
            split,
            root: root.to_path_buf(),
            entries: entries
                .iter()
                .filter(|e| chosen.contains(&e.subject_id))
                .cloned()
                .collect(),
        });
    }
    Ok(out.try_into().expect("three splits"))
}

/// Parameters for a synthetic phantom dataset on disk.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub seed: u64,
    pub subjects: usize,
    pub slices_per_subject: usize,
    pub dims: (usize, usize),
    pub n_ellipses: usize,
    pub ratios: (f64, f64, f64),
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            seed: 0,
            subjects: 20,
            slices_per_subject: 4,
            dims: (96, 96),
            n_ellipses: 10,
            ratios: (0.8, 0.1, 0.1),
        }
    }
}

pub(crate) fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a combined word
    let mut z = a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_add(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Writes every phantom pair under `root/slices/` and the three split
/// manifests under `root/`. Each subject shares its contrast lookup tables
/// across slices; geometry varies per slice.
pub fn generate_dataset(root: &Path, spec: &DatasetSpec) -> Result<[DatasetManifest; 3]> {
    fs::create_dir_all(root.join("slices")).map_err(|e| Error::io(root, e))?;
    let mut entries = Vec::new();
    for s in 0..spec.subjects {
        let subject_id = format!("sub{s:03}");
        let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, s as u64));
        let (tar_map, ref_map) = random_intensity_maps(&mut rng, spec.n_ellipses);
        for k in 0..spec.slices_per_subject {
            let slice_id = format!("{k:02}");
            let pspec = PhantomSpec {
                seed: mix(mix(spec.seed, s as u64), 1 + k as u64),
                canvas: spec.dims,
                n_ellipses: spec.n_ellipses,
                intensity_map_target: tar_map.clone(),
                intensity_map_reference: ref_map.clone(),
            };
            let pair = generate_phantom_named(&pspec, &subject_id, &slice_id)?;
            let tar_rel = format!("slices/{subject_id}_{slice_id}_tar");
            let ref_rel = format!("slices/{subject_id}_{slice_id}_ref");
            write_slice(&pair.target, &root.join(&tar_rel))?;
            write_slice(&pair.reference, &root.join(&ref_rel))?;
            entries.push(ManifestEntry {
                subject_id: subject_id.clone(),
                slice_id,
                target_path: tar_rel,
                reference_path: ref_rel,
                dims: [spec.dims.0, spec.dims.1],
            });
        }
    }
    let splits = build_splits(&entries, root, spec.ratios, spec.seed)?;
    for m in &splits {
        m.save()?;
    }
    Ok(splits)
}
