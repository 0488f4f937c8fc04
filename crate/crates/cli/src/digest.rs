//! SHA-256 digests for inputs and outputs.

use std::path::Path;

use sha2::{Digest, Sha256};

pub fn hex_digest(bytes: &[u8]) -> String {
    let out = Sha256::digest(bytes);
    out.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> std::io::Result<String> {
    Ok(hex_digest(&std::fs::read(path)?))
}

/// Canonical JSON (sorted keys) digest; stable under key reordering of the
/// source document.
pub fn json_digest(value: &serde_json::Value) -> String {
    hex_digest(canonical_json(value).as_bytes())
}

fn canonical_json(value: &serde_json::Value) -> String {
    // serde_json maps are BTreeMap-backed (sorted) without preserve_order,
    // so plain serialization is canonical.
    serde_json::to_string(value).expect("json serialization")
}
