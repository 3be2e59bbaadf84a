//! Canonical JSON: object keys sorted, floats in shortest round-trip form.

use serde::Serialize;

/// Compact canonical encoding. Used for hashing.
pub fn to_canonical_string<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<String> {
    // `serde_json::Map` is ordered by key, so the detour through `Value`
    // sorts every object regardless of struct field order.
    let v = serde_json::to_value(value)?;
    serde_json::to_string(&v)
}

/// Pretty canonical encoding with a trailing newline. Used for files.
pub fn to_canonical_pretty<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<String> {
    let v = serde_json::to_value(value)?;
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}
