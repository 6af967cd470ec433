//! Little-endian raw float files.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub fn write_f32(path: &Path, values: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_f64(path: &Path, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_exact(path: &Path, field: &str, expected: usize, width: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::format(field, format!("cannot read {}: {e}", path.display())))?;
    if bytes.len() != expected * width {
        return Err(Error::format(
            field,
            format!(
                "{} holds {} bytes, expected {} ({} values)",
                path.display(),
                bytes.len(),
                expected * width,
                expected
            ),
        ));
    }
    Ok(bytes)
}

/// Read exactly `expected` finite f32 values.
pub fn read_f32(path: &Path, field: &str, expected: usize) -> Result<Vec<f32>> {
    let bytes = read_exact(path, field, expected, 4)?;
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(field, format!("non-finite value at index {i}")));
    }
    Ok(values)
}

/// Read exactly `expected` finite f64 values.
pub fn read_f64(path: &Path, field: &str, expected: usize) -> Result<Vec<f64>> {
    let bytes = read_exact(path, field, expected, 8)?;
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(field, format!("non-finite value at index {i}")));
    }
    Ok(values)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path, field: &str) -> Result<T> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::format(field, format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::format(field, e.to_string()))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}
