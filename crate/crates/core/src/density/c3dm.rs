//! C3DM binary density-map files.
//!
//! Layout, little-endian, no padding:
//!
//! | offset | size  | field                      |
//! |--------|-------|----------------------------|
//! | 0      | 4     | magic `C3DM`               |
//! | 4      | 1     | version (1)                |
//! | 5      | 4     | height (u32)               |
//! | 9      | 4     | width (u32)                |
//! | 13     | 4     | norm_factor (f32)          |
//! | 17     | 4·h·w | values (f32, row-major)    |
//!
//! Values are held as `f64` in memory and narrowed to `f32` on write.

use std::fs;
use std::path::Path;

use super::{DensityError, DensityMap};

pub const C3DM_MAGIC: &[u8; 4] = b"C3DM";
pub const C3DM_VERSION: u8 = 1;
const HEADER_LEN: usize = 17;

pub fn encode_c3dm(map: &DensityMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * map.values().len());
    out.extend_from_slice(C3DM_MAGIC);
    out.push(C3DM_VERSION);
    out.extend_from_slice(&map.height().to_le_bytes());
    out.extend_from_slice(&map.width().to_le_bytes());
    out.extend_from_slice(&(map.norm_factor() as f32).to_le_bytes());
    for &v in map.values() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn format_err(offset: usize, message: impl Into<String>) -> DensityError {
    DensityError::Format {
        offset,
        message: message.into(),
    }
}

fn take<const N: usize>(bytes: &[u8], offset: usize, what: &str) -> Result<[u8; N], DensityError> {
    bytes
        .get(offset..offset + N)
        .map(|s| s.try_into().expect("slice has length N"))
        .ok_or_else(|| {
            format_err(
                bytes.len(),
                format!("truncated while reading {what} (needs bytes {offset}..{})", offset + N),
            )
        })
}

pub fn decode_c3dm(bytes: &[u8]) -> Result<DensityMap, DensityError> {
    let magic: [u8; 4] = take(bytes, 0, "magic")?;
    if &magic != C3DM_MAGIC {
        return Err(format_err(0, "bad magic, expected \"C3DM\""));
    }
    let [version] = take::<1>(bytes, 4, "version")?;
    if version != C3DM_VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let height = u32::from_le_bytes(take(bytes, 5, "height")?);
    let width = u32::from_le_bytes(take(bytes, 9, "width")?);
    let norm_factor = f32::from_le_bytes(take(bytes, 13, "norm_factor")?);
    if !(norm_factor > 0.0 && norm_factor.is_finite()) {
        return Err(format_err(
            13,
            format!("norm_factor must be positive, got {norm_factor}"),
        ));
    }

    let cells = height as usize * width as usize;
    let expected = HEADER_LEN + 4 * cells;
    if bytes.len() < expected {
        let at = bytes.len() - (bytes.len() - HEADER_LEN) % 4;
        return Err(format_err(
            bytes.len(),
            format!(
                "truncated: {height}x{width} map needs {expected} bytes; value {} starting at byte {at} is incomplete or missing",
                (at - HEADER_LEN) / 4
            ),
        ));
    }
    if bytes.len() > expected {
        return Err(format_err(
            expected,
            format!("{} trailing bytes", bytes.len() - expected),
        ));
    }
    let mut values = Vec::with_capacity(cells);
    for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("chunk of 4"));
        if !v.is_finite() {
            return Err(format_err(HEADER_LEN + 4 * i, "non-finite value"));
        }
        values.push(f64::from(v));
    }
    DensityMap::from_values(height, width, values, f64::from(norm_factor))
}

pub fn save_c3dm(map: &DensityMap, path: &Path) -> Result<(), DensityError> {
    fs::write(path, encode_c3dm(map)).map_err(|source| DensityError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_c3dm(path: &Path) -> Result<DensityMap, DensityError> {
    let bytes = fs::read(path).map_err(|source| DensityError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_c3dm(&bytes)
}
