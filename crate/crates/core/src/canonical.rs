//! Canonical text encoding shared by every artifact header.
//!
//! All headers, reports and configs are JSON objects with lexicographically
//! sorted keys and no insignificant whitespace, so equal values always encode
//! to equal bytes.

use serde::Serialize;

/// Serialize `value` as compact JSON with sorted object keys.
pub fn to_canonical_json<T: Serialize>(value: &T) -> serde_json::Result<String> {
    // serde_json's `Map` is a BTreeMap unless `preserve_order` is enabled,
    // so a round trip through `Value` sorts struct fields as well.
    let v = serde_json::to_value(value)?;
    serde_json::to_string(&v)
}

/// Same as [`to_canonical_json`] but indented, for human-facing reports.
pub fn to_canonical_json_pretty<T: Serialize>(value: &T) -> serde_json::Result<String> {
    let v = serde_json::to_value(value)?;
    serde_json::to_string_pretty(&v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Unordered {
        zeta: u32,
        alpha: &'static str,
        mid: Vec<u8>,
    }

    #[test]
    fn keys_are_sorted() {
        let s = to_canonical_json(&Unordered {
            zeta: 1,
            alpha: "a",
            mid: vec![1, 2],
        })
        .unwrap();
        assert_eq!(s, r#"{"alpha":"a","mid":[1,2],"zeta":1}"#);
    }
}
