//! File helpers shared by the scene, result and manifest writers.

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a value's JSON serialization.
pub fn hash_json<S: serde::Serialize>(value: &S) -> String {
    sha256_hex(
        serde_json::to_string(value)
            .expect("config serializes")
            .as_bytes(),
    )
}
