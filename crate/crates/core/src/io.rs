//! On-disk formats.
//!
//! * Arrays (images, sinograms, parameter vectors) are raw little-endian
//!   `f64` files with a TOML sidecar next to them (`<name>.f64` + `<name>.toml`).
//!   The sidecar always carries `len`, plus whatever fields the writer adds
//!   (shape, seed, spec fields, ...).
//! * Key-value files (fitted hyperparameters, run manifests) are flat TOML.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub type Header = toml::Table;

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("toml")
}

/// Writes `data` as raw little-endian `f64` and a sidecar header.
pub fn write_raw(path: &Path, data: &[f64], header: &Header) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let mut header = header.clone();
    header.insert("len".into(), toml::Value::Integer(data.len() as i64));
    header.insert("dtype".into(), toml::Value::String("f64le".into()));
    write_table(&sidecar_path(path), &header)
}

/// Reads a raw `f64` file and its sidecar; checks the recorded length.
pub fn read_raw(path: &Path) -> Result<(Vec<f64>, Header)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Argument(format!(
            "{} is not a whole number of f64 values",
            path.display()
        )));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let header = read_table(&sidecar_path(path))?;
    if let Some(len) = header.get("len").and_then(|v| v.as_integer()) {
        if len as usize != data.len() {
            return Err(Error::Shape {
                context: "raw file length vs sidecar",
                expected: len as usize,
                got: data.len(),
            });
        }
    }
    Ok((data, header))
}

pub fn write_table(path: &Path, table: &Header) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = toml::to_string(table).map_err(|e| Error::Config {
        path: Some(path.to_owned()),
        message: e.to_string(),
    })?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_table(path: &Path) -> Result<Header> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.parse::<Header>().map_err(|e| Error::Config {
        path: Some(path.to_owned()),
        message: e.to_string(),
    })
}

/// Convenience builder for sidecar headers.
pub fn header<I, K, V>(fields: I) -> Header
where
    I: IntoIterator<Item = (K, V)>,
    K: Into<String>,
    V: Into<toml::Value>,
{
    fields.into_iter().map(|(k, v)| (k.into(), v.into())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_roundtrip_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.f64");
        let data = vec![0.5, -1.25, f64::MAX, 0.0];
        let h = header([("height", 2i64), ("width", 2i64), ("seed", 7i64)]);
        write_raw(&path, &data, &h).unwrap();
        let (back, hdr) = read_raw(&path).unwrap();
        assert_eq!(back, data);
        assert_eq!(hdr["seed"].as_integer(), Some(7));
        assert_eq!(hdr["len"].as_integer(), Some(4));
        // Little-endian layout on disk.
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], &0.5f64.to_le_bytes());
    }

    #[test]
    fn sidecar_length_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.f64");
        write_raw(&path, &[1.0, 2.0], &Header::new()).unwrap();
        std::fs::write(&path, 1.0f64.to_le_bytes()).unwrap();
        assert!(read_raw(&path).is_err());
    }
}
