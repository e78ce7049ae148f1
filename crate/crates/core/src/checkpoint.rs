//! Flat binary container of named f64 arrays with a JSON manifest.
//!
//! `<stem>.bin` holds the arrays back to back as little-endian f64;
//! `<stem>.json` lists each array's name, shape and element offset, plus an
//! arbitrary `meta` object supplied by the caller.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::sha256_hex;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub arrays: Vec<ArrayEntry>,
    pub sha256: String,
    pub meta: serde_json::Value,
}

const FORMAT: &str = "gridfault-f64-v1";

pub fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("json"))
}

/// Writes the arrays and manifest; returns the SHA-256 of the binary file.
pub fn save(stem: &Path, arrays: &[(String, &Tensor)], meta: serde_json::Value) -> Result<String> {
    let (bin, json) = paths(stem);
    if let Some(dir) = bin.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let total: usize = arrays.iter().map(|(_, t)| t.len()).sum();
    let mut bytes = Vec::with_capacity(total * 8);
    let mut entries = Vec::with_capacity(arrays.len());
    let mut offset = 0;
    for (name, t) in arrays {
        entries.push(ArrayEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sha = sha256_hex(&bytes);
    fs::write(&bin, &bytes)?;
    let manifest = Manifest {
        format: FORMAT.into(),
        arrays: entries,
        sha256: sha.clone(),
        meta,
    };
    fs::write(&json, serde_json::to_string_pretty(&manifest)?)?;
    Ok(sha)
}

/// Reads back every array in manifest order, verifying the content hash.
pub fn load(stem: &Path) -> Result<(Manifest, Vec<(String, Tensor)>)> {
    let (bin, json) = paths(stem);
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&json)?)?;
    if manifest.format != FORMAT {
        return Err(Error::Data(format!("unknown container format {:?}", manifest.format)));
    }
    let bytes = fs::read(&bin)?;
    if sha256_hex(&bytes) != manifest.sha256 {
        return Err(Error::Data(format!(
            "{} does not match its manifest hash",
            bin.display()
        )));
    }
    if bytes.len() % 8 != 0 {
        return Err(Error::Data("container length is not a multiple of 8".into()));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut out = Vec::with_capacity(manifest.arrays.len());
    for e in &manifest.arrays {
        let n: usize = e.shape.iter().product();
        let slice = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| Error::Data(format!("array {} runs past the end of the container", e.name)))?;
        out.push((e.name.clone(), Tensor::new(e.shape.clone(), slice.to_vec())?));
    }
    Ok((manifest, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        let a = Tensor::matrix(2, 2, vec![1.0, -2.5, 3.0, 1e-300]).unwrap();
        let b = Tensor::vector(vec![7.0]).unwrap();
        save(
            &stem,
            &[("a".into(), &a), ("b".into(), &b)],
            serde_json::json!({"k": 1}),
        )
        .unwrap();
        let (m, arrays) = load(&stem).unwrap();
        assert_eq!(m.meta["k"], 1);
        assert_eq!(arrays[0].1, a);
        assert_eq!(arrays[1].1, b);

        let (bin, _) = paths(&stem);
        let mut bytes = fs::read(&bin).unwrap();
        bytes[0] ^= 1;
        fs::write(&bin, bytes).unwrap();
        assert!(matches!(load(&stem), Err(Error::Data(_))));
    }
}
