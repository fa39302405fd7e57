//! JSONL helpers, config hashing and artifact metadata sidecars.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::types::{DescriptionDict, DictRow, GroundingInstance};

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(row);
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<GroundingInstance>> {
    let instances: Vec<GroundingInstance> = read_jsonl(path)?;
    for inst in &instances {
        inst.validate()?;
    }
    Ok(instances)
}

pub fn save_dataset(path: impl AsRef<Path>, instances: &[GroundingInstance]) -> Result<()> {
    write_jsonl(path, instances)
}

pub fn load_dictionary(path: impl AsRef<Path>) -> Result<DescriptionDict> {
    let rows: Vec<DictRow> = read_jsonl(path)?;
    DescriptionDict::from_rows(rows)
}

pub fn save_dictionary(path: impl AsRef<Path>, dict: &DescriptionDict) -> Result<()> {
    write_jsonl(path, dict.rows())
}

/// Short hex digest of any serializable value's JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    hash_bytes(&json)
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    hex::encode(&digest[..8])
}

/// Provenance written next to JSONL artifacts as `<file>.meta.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub kind: String,
    pub config_hash: String,
    pub seed: u64,
}

pub fn meta_path(artifact: impl AsRef<Path>) -> PathBuf {
    let mut s = artifact.as_ref().as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn write_meta(artifact: impl AsRef<Path>, meta: &ArtifactMeta) -> Result<()> {
    write_json(meta_path(artifact), meta)
}

pub fn read_meta(artifact: impl AsRef<Path>) -> Result<ArtifactMeta> {
    read_json(meta_path(artifact))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip_and_meta() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        write_jsonl(&p, [vec![0.1f64, 1.0 / 3.0], vec![]]).unwrap();
        let back: Vec<Vec<f64>> = read_jsonl(&p).unwrap();
        assert_eq!(back, vec![vec![0.1, 1.0 / 3.0], vec![]]);

        let meta = ArtifactMeta {
            kind: "dataset".into(),
            config_hash: config_hash(&("a", 1)),
            seed: 7,
        };
        write_meta(&p, &meta).unwrap();
        assert_eq!(read_meta(&p).unwrap(), meta);
        assert!(meta_path(&p).to_string_lossy().ends_with("x.jsonl.meta.json"));
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(config_hash(&[1, 2, 3]), config_hash(&[1, 2, 3]));
        assert_ne!(config_hash(&[1, 2, 3]), config_hash(&[1, 2, 4]));
        assert_eq!(config_hash(&0).len(), 16);
    }

    #[test]
    fn bad_line_reports_location() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        fs::write(&p, "[1]\nnot json\n").unwrap();
        let err = read_jsonl::<Vec<f64>>(&p).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
    }
}
