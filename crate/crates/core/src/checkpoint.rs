//! Single-file checkpoint archive.
//!
//! Layout: 8-byte magic, `u32` LE format version, `u64` LE header length,
//! JSON header, then every array as raw `f32` little-endian in header order.
//! The header holds the training config, progress counters, the index of
//! arrays (section, name, shape, offset) and the SHA-256 of the payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{DualArbNet, ModelConfig, ParameterSet};
use crate::trainer::{Adam, TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"DARBCKPT";
pub const FORMAT_VERSION: u32 = 1;

const SECTIONS: [&str; 3] = ["params", "adam.m", "adam.v"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub section: String,
    pub name: String,
    pub shape: Vec<usize>,
    /// In floats from the start of the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub epoch: usize,
    pub step: u64,
    pub adam_t: u64,
    /// `None` until a validation pass has run.
    pub best_valid_psnr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: TrainConfig,
    progress: Progress,
    arrays: Vec<ArrayEntry>,
    payload_floats: usize,
    payload_sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn encode(state: &TrainState) -> Result<Vec<u8>> {
    let sets = [&state.net.params, &state.adam.m, &state.adam.v];
    let mut arrays = Vec::new();
    let mut payload: Vec<u8> = Vec::with_capacity(3 * 4 * state.net.params.len());
    let mut offset = 0;
    for (section, set) in SECTIONS.iter().zip(sets) {
        for (spec, data) in set.arrays() {
            arrays.push(ArrayEntry {
                section: section.to_string(),
                name: spec.name,
                shape: spec.shape,
                offset,
            });
            offset += data.len();
            for v in data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config: state.config.clone(),
        progress: Progress {
            epoch: state.epoch,
            step: state.step,
            adam_t: state.adam.t,
            best_valid_psnr: state.best_valid_psnr.is_finite().then_some(state.best_valid_psnr),
        },
        arrays,
        payload_floats: offset,
        payload_sha256: sha256_hex(&payload),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Writes atomically (temporary file, then rename).
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode(state)?;
    let tmp = path.with_extension("ckpt.tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    let out = bytes
        .get(*at..*at + n)
        .ok_or_else(|| Error::CheckpointFormat(format!("truncated in {what}")))?;
    *at += n;
    Ok(out)
}

fn fill(set: &mut ParameterSet<f32>, section: &str, entries: &[ArrayEntry], payload: &[u8]) -> Result<()> {
    for (name, dst) in set.arrays_mut() {
        let e = entries
            .iter()
            .find(|e| e.section == section && e.name == name)
            .ok_or_else(|| Error::ConfigConflict(format!("array {section}/{name} missing from checkpoint")))?;
        let n: usize = e.shape.iter().product();
        if n != dst.len() {
            return Err(Error::ConfigConflict(format!(
                "{section}/{name}: checkpoint has {n} values, model expects {}",
                dst.len()
            )));
        }
        let bytes = payload
            .get(e.offset * 4..(e.offset + n) * 4)
            .ok_or_else(|| Error::CheckpointFormat(format!("{section}/{name} outside payload")))?;
        for (d, c) in dst.iter_mut().zip(bytes.chunks_exact(4)) {
            *d = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        }
    }
    Ok(())
}

/// A loaded checkpoint and the hash of its bytes.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub state: TrainState,
    /// Hex SHA-256 of the whole file.
    pub hash: String,
}

pub fn decode(bytes: &[u8]) -> Result<TrainState> {
    let mut at = 0;
    if take(bytes, &mut at, 8, "magic")? != MAGIC {
        return Err(Error::CheckpointFormat("not a checkpoint (bad magic)".into()));
    }
    let v = take(bytes, &mut at, 4, "version")?;
    let version = u32::from_le_bytes([v[0], v[1], v[2], v[3]]);
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let l = take(bytes, &mut at, 8, "header length")?;
    let len = u64::from_le_bytes(l.try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(take(bytes, &mut at, len, "header")?)
        .map_err(|e| Error::CheckpointFormat(format!("header: {e}")))?;
    let payload = take(bytes, &mut at, header.payload_floats * 4, "payload")?;
    if at != bytes.len() {
        return Err(Error::CheckpointFormat(format!("{} trailing bytes", bytes.len() - at)));
    }
    if sha256_hex(payload) != header.payload_sha256 {
        return Err(Error::CheckpointFormat("payload checksum mismatch".into()));
    }
    let cfg = &header.config.model;
    let mut params = ParameterSet::zeros(cfg);
    fill(&mut params, "params", &header.arrays, payload)?;
    let mut adam = Adam::new(cfg);
    fill(&mut adam.m, "adam.m", &header.arrays, payload)?;
    fill(&mut adam.v, "adam.v", &header.arrays, payload)?;
    adam.t = header.progress.adam_t;
    Ok(TrainState {
        net: DualArbNet::new(cfg.clone(), params)?,
        config: header.config,
        adam,
        epoch: header.progress.epoch,
        step: header.progress.step,
        best_valid_psnr: header.progress.best_valid_psnr.unwrap_or(f64::NEG_INFINITY),
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Checkpoint {
        state: decode(&bytes)?,
        hash: sha256_hex(&bytes),
    })
}

/// Loads and checks that the stored model config equals `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    if &ck.state.config.model != expected {
        return Err(Error::ConfigConflict(format!(
            "checkpoint {} holds {:?}, requested {:?}",
            path.display(),
            ck.state.config.model,
            expected
        )));
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state() -> TrainState {
        let mut cfg = TrainConfig::desk();
        cfg.model = ModelConfig::tiny();
        let mut s = TrainState::new(cfg).unwrap();
        s.adam.m.arrays_mut()[0].1[0] = 0.25;
        s.adam.v.arrays_mut()[1].1[2] = 1e-7;
        s.adam.t = 7;
        s.epoch = 3;
        s.step = 21;
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = state();
        let bytes = encode(&s).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back.net.params, s.net.params);
        assert_eq!(back.adam, s.adam);
        assert_eq!((back.epoch, back.step), (3, 21));
        assert_eq!(back.config, s.config);
        assert_eq!(back.best_valid_psnr, f64::NEG_INFINITY);
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn damaged_archives_are_rejected() {
        let bytes = encode(&state()).unwrap();
        for cut in [0, 5, 12, 30, bytes.len() - 1] {
            assert!(
                matches!(decode(&bytes[..cut]), Err(Error::CheckpointFormat(_))),
                "cut {cut}"
            );
        }
        let mut v = bytes.clone();
        v[8] = 9;
        assert!(matches!(
            decode(&v),
            Err(Error::CheckpointVersion { found: 9, expected: 1 })
        ));
        let mut flipped = bytes.clone();
        let last = flipped.len() - 2;
        flipped[last] ^= 1;
        assert!(matches!(decode(&flipped), Err(Error::CheckpointFormat(_))));
    }

    #[test]
    fn config_conflict_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save_checkpoint(&state(), &path).unwrap();
        assert!(load_checkpoint_for(&path, &ModelConfig::tiny()).is_ok());
        assert!(matches!(
            load_checkpoint_for(&path, &ModelConfig::desk()),
            Err(Error::ConfigConflict(_))
        ));
    }
}
