//! Checkpoint persistence: a keyed flat map from parameter path to shape plus
//! little-endian `f64` data, with a JSON header carrying config and RNG seed.
//!
//! File layout:
//!
//! ```text
//! [0..8)    magic  b"ADFU0001"
//! [8..16)   u64 LE header length H
//! [16..16+H) JSON header { seed, config, entries: [{name, shape}, ...] }
//! [16+H..)  entry data in header order, numel × 8 bytes LE f64 each
//! ```
//!
//! Entries are sorted by name, so identical parameter maps serialize to
//! byte-identical files and round-trip bit-exactly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"ADFU0001";

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Flat, name-keyed snapshot of parameter values.
pub type ParamMap = BTreeMap<String, ParamEntry>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub seed: u64,
    #[serde(default)]
    pub config: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct WireHeader {
    seed: u64,
    #[serde(default)]
    config: serde_json::Value,
    entries: Vec<WireEntry>,
}

#[derive(Serialize, Deserialize)]
struct WireEntry {
    name: String,
    shape: Vec<usize>,
}

/// Copy current values of named parameters into a [`ParamMap`].
pub fn snapshot<S: Scalar>(named: &[(String, Tensor<S>)]) -> ParamMap {
    named
        .iter()
        .map(|(name, t)| {
            (
                name.clone(),
                ParamEntry {
                    shape: t.shape(),
                    data: t.with_data(|d| d.iter().map(|&v| v.as_f64()).collect()),
                },
            )
        })
        .collect()
}

/// Write values from `map` back into the named parameters. Every named
/// parameter must be present with a matching shape; extra map keys are
/// ignored.
pub fn restore<S: Scalar>(named: &[(String, Tensor<S>)], map: &ParamMap) -> Result<()> {
    for (name, t) in named {
        let entry = map.get(name).ok_or_else(|| {
            Error::CheckpointFormat(format!("parameter `{name}` missing from checkpoint"))
        })?;
        if entry.shape != t.shape() {
            return Err(Error::CheckpointFormat(format!(
                "parameter `{name}`: checkpoint shape {:?} vs model shape {:?}",
                entry.shape,
                t.shape()
            )));
        }
        t.set_data(entry.data.iter().map(|&v| S::from_f64(v)).collect());
    }
    Ok(())
}

/// Per-parameter arithmetic mean of several snapshots.
pub fn average(maps: &[ParamMap]) -> Result<ParamMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Data("average of zero checkpoints".into()))?;
    let mut out = first.clone();
    for m in &maps[1..] {
        if m.len() != first.len() {
            return Err(Error::Data("checkpoint key sets differ".into()));
        }
        for (name, entry) in m {
            let acc = out
                .get_mut(name)
                .ok_or_else(|| Error::Data(format!("checkpoint key `{name}` not shared")))?;
            if acc.shape != entry.shape {
                return Err(Error::Data(format!("checkpoint shapes differ for `{name}`")));
            }
            for (a, &v) in acc.data.iter_mut().zip(&entry.data) {
                *a += v;
            }
        }
    }
    let k = maps.len() as f64;
    for entry in out.values_mut() {
        for v in &mut entry.data {
            *v /= k;
        }
    }
    Ok(out)
}

pub fn save(path: &Path, header: &CheckpointHeader, map: &ParamMap) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    let wire = WireHeader {
        seed: header.seed,
        config: header.config.clone(),
        entries: map
            .iter()
            .map(|(name, e)| WireEntry {
                name: name.clone(),
                shape: e.shape.clone(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&wire)
        .map_err(|e| Error::CheckpointFormat(format!("header encode: {e}")))?;
    w.write_all(MAGIC)?;
    w.write_all(&(header_json.len() as u64).to_le_bytes())?;
    w.write_all(&header_json)?;
    for entry in map.values() {
        for &v in &entry.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(CheckpointHeader, ParamMap)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::CheckpointFormat(format!(
            "bad magic in {}: {:?}",
            path.display(),
            magic
        )));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    r.read_exact(&mut header_json)?;
    let wire: WireHeader = serde_json::from_slice(&header_json)
        .map_err(|e| Error::CheckpointFormat(format!("header decode: {e}")))?;

    let mut map = ParamMap::new();
    for entry in &wire.entries {
        let numel: usize = entry.shape.iter().product();
        let mut raw = vec![0u8; numel * 8];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        map.insert(
            entry.name.clone(),
            ParamEntry {
                shape: entry.shape.clone(),
                data,
            },
        );
    }
    Ok((
        CheckpointHeader {
            seed: wire.seed,
            config: wire.config,
        },
        map,
    ))
}

/// Total number of scalars in a snapshot.
pub fn total_scalars(map: &ParamMap) -> usize {
    map.values().map(|e| e.data.len()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_map() -> ParamMap {
        let mut m = ParamMap::new();
        m.insert(
            "fusion/value/dense_w".into(),
            ParamEntry {
                shape: vec![2, 2],
                data: vec![1.0, 1e-6, -0.25, f64::MIN_POSITIVE],
            },
        );
        m.insert(
            "adapter/spk00/down_b".into(),
            ParamEntry {
                shape: vec![3],
                data: vec![0.1, -0.2, 0.3],
            },
        );
        m
    }

    #[test]
    fn file_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let header = CheckpointHeader {
            seed: 7,
            config: serde_json::json!({"d": 2}),
        };
        let map = sample_map();
        save(&path, &header, &map).unwrap();
        let (h2, m2) = load(&path).unwrap();
        assert_eq!(h2.seed, 7);
        assert_eq!(m2, map);
        // bytes are identical across repeated saves
        save(&dir.path().join("b.ckpt"), &header, &map).unwrap();
        let a = std::fs::read(&path).unwrap();
        let b = std::fs::read(dir.path().join("b.ckpt")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn average_of_w_and_minus_w_is_zero() {
        let m = sample_map();
        let mut neg = m.clone();
        for e in neg.values_mut() {
            for v in &mut e.data {
                *v = -*v;
            }
        }
        let avg = average(&[m, neg]).unwrap();
        for e in avg.values() {
            assert!(e.data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn average_of_identical_maps_is_identity() {
        let m = sample_map();
        let avg = average(&[m.clone(), m.clone(), m.clone()]).unwrap();
        // (v+v+v)/3 may round in the last ulp
        for (name, e) in &avg {
            for (a, b) in e.data.iter().zip(&m[name].data) {
                let tol = b.abs() * 1e-15;
                assert!((a - b).abs() <= tol, "{name}: {a} vs {b}");
            }
        }
        // power-of-two counts are exact
        let avg2 = average(&[m.clone(), m.clone()]).unwrap();
        assert_eq!(avg2, m);
    }

    #[test]
    fn restore_checks_presence_and_shape() {
        let t = Tensor::<f64>::zeros(&[2, 2]);
        let named = vec![("fusion/value/dense_w".to_string(), t.clone())];
        let map = sample_map();
        restore(&named, &map).unwrap();
        assert_eq!(t.data(), vec![1.0, 1e-6, -0.25, f64::MIN_POSITIVE]);

        let missing = vec![("nope".to_string(), Tensor::<f64>::zeros(&[1]))];
        assert!(restore(&missing, &map).is_err());
    }
}
