//! On-disk formats: checkpoints, masks, JSONL datasets and JSON reports.

pub mod checkpoint;
pub mod dataset;
pub mod mask_file;
pub mod reports;
pub mod synthetic;

use std::path::Path;

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use dataset::{Dataset, Example};
pub use mask_file::{load_mask, save_mask};
pub use synthetic::{make_synthetic_dataset, PlantedTask, SyntheticKind};

pub const FORMAT_VERSION: u64 = 1;

/// Rejects any `format_version` other than the supported one.
pub(crate) fn check_version(v: u64) -> Result<()> {
    if v != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(v));
    }
    Ok(())
}

pub fn read_file(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    std::fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

/// Writes `bytes` to `path`, creating parent directories.
pub fn write_file(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Serializes a `u64` digest as a 16-digit lowercase hex string.
pub mod hex_u64 {
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    use crate::hash::{from_hex, to_hex};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&to_hex(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let s = String::deserialize(d)?;
        from_hex(&s).ok_or_else(|| D::Error::custom(format!("bad hex digest {s:?}")))
    }
}

/// Pretty JSON with a trailing newline; deterministic for a given value.
pub fn to_json_bytes<T: serde::Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}

/// Reads `format_version` from a JSON document before full parsing so an
/// unknown version gets its own error.
pub(crate) fn peek_version(bytes: &[u8]) -> Result<()> {
    #[derive(serde::Deserialize)]
    struct Versioned {
        format_version: Option<u64>,
    }
    let v: Versioned = serde_json::from_slice(bytes)
        .map_err(|e| Error::Malformed(format!("not a JSON object: {e}")))?;
    match v.format_version {
        Some(v) => check_version(v),
        None => Err(Error::Malformed("missing format_version".into())),
    }
}
