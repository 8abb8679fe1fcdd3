//! Replicate files: single-column CSV, or raw little-endian f64 with a JSON
//! sidecar (`<file>.json`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Replicate;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub rate_hz: f64,
    pub length: usize,
    pub format: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<serde_json::Value>,
}

pub const F64LE: &str = "f64le";

pub fn sidecar_path(data: &Path) -> PathBuf {
    let mut s = data.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn label_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Reads a replicate; `.csv` files are parsed as one sample per line, anything
/// else as raw f64le with a sidecar.
pub fn read_replicate(path: &Path, default_rate_hz: f64) -> Result<Replicate> {
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        read_csv(path, default_rate_hz)
    } else {
        read_f64le(path)
    }
}

pub fn read_csv(path: &Path, rate_hz: f64) -> Result<Replicate> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)?;
    let mut samples = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let field = record.get(0).unwrap_or("");
        let value: f64 = field.parse().map_err(|_| {
            Error::Data(format!(
                "{}: line {}: cannot parse {field:?} as a number",
                path.display(),
                line + 1
            ))
        })?;
        samples.push(value);
    }
    Replicate::new(samples, rate_hz, label_of(path))
}

pub fn read_f64le(path: &Path) -> Result<Replicate> {
    let side: Sidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    if side.format != F64LE {
        return Err(Error::Data(format!("unsupported sample format {:?}", side.format)));
    }
    let bytes = fs::read(path)?;
    if bytes.len() != side.length * 8 {
        return Err(Error::Data(format!(
            "{}: {} bytes on disk, sidecar declares {} samples",
            path.display(),
            bytes.len(),
            side.length
        )));
    }
    let samples = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Replicate::new(samples, side.rate_hz, label_of(path))
}

pub fn encode_f64le(samples: &[f64]) -> Vec<u8> {
    samples.iter().flat_map(|x| x.to_le_bytes()).collect()
}

/// Writes samples and sidecar; returns the path of the sidecar.
pub fn write_f64le(
    path: &Path,
    replicate: &Replicate,
    manifest: Option<serde_json::Value>,
) -> Result<PathBuf> {
    fs::write(path, encode_f64le(&replicate.samples))?;
    let side = Sidecar {
        rate_hz: replicate.rate_hz,
        length: replicate.len(),
        format: F64LE.into(),
        manifest,
    };
    let sp = sidecar_path(path);
    fs::write(&sp, serde_json::to_vec_pretty(&side)?)?;
    Ok(sp)
}

pub fn write_csv(path: &Path, replicate: &Replicate) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for x in &replicate.samples {
        w.write_record([x.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f64le_roundtrip_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rep.f64");
        let r = Replicate::new(vec![1.5, -2.25, 1e-300, 3.0], 200.0, "rep").unwrap();
        write_f64le(&p, &r, None).unwrap();
        let back = read_replicate(&p, 1.0).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn csv_one_sample_per_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sig.csv");
        fs::write(&p, "1.0\n2.5\n# comment\n-3\n").unwrap();
        let r = read_replicate(&p, 100.0).unwrap();
        assert_eq!(r.samples, vec![1.0, 2.5, -3.0]);
        assert_eq!(r.rate_hz, 100.0);
        fs::write(&p, "1.0\nabc\n").unwrap();
        assert!(matches!(read_replicate(&p, 1.0), Err(Error::Data(_))));
    }

    #[test]
    fn truncated_binary_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rep.f64");
        let r = Replicate::new(vec![1.0, 2.0, 3.0], 1.0, "rep").unwrap();
        write_f64le(&p, &r, None).unwrap();
        fs::write(&p, encode_f64le(&[1.0, 2.0])).unwrap();
        assert!(matches!(read_replicate(&p, 1.0), Err(Error::Data(_))));
    }
}
