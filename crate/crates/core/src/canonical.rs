//! Canonical JSON: sorted object keys, two-space indentation and every
//! non-integer number written with 17 significant digits (`{:.16e}`), which
//! round-trips any finite `f64` exactly.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn to_value<T: Serialize>(value: &T) -> Result<Value> {
    serde_json::to_value(value).map_err(Error::from)
}

/// Canonical text of `value`, newline-terminated.
pub fn to_string<T: Serialize>(value: &T) -> Result<String> {
    let v = to_value(value)?;
    let mut out = String::new();
    write_value(&v, 0, &mut out);
    out.push('\n');
    Ok(out)
}

pub fn from_str<T: DeserializeOwned>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(Error::from)
}

/// Hex SHA-256 of the canonical text.
pub fn digest<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(to_string(value)?.as_bytes()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn indent(level: usize, out: &mut String) {
    for _ in 0..level {
        out.push_str("  ");
    }
}

fn write_value(v: &Value, level: usize, out: &mut String) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                out.push_str(&i.to_string());
            } else if let Some(u) = n.as_u64() {
                out.push_str(&u.to_string());
            } else {
                out.push_str(&format_float(n.as_f64().unwrap_or(0.0)));
            }
        }
        Value::String(s) => out.push_str(&Value::String(s.clone()).to_string()),
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return;
            }
            if items.iter().all(|i| matches!(i, Value::Number(_) | Value::Bool(_) | Value::Null)) {
                out.push('[');
                for (k, item) in items.iter().enumerate() {
                    if k > 0 {
                        out.push_str(", ");
                    }
                    write_value(item, level, out);
                }
                out.push(']');
                return;
            }
            out.push_str("[\n");
            for (k, item) in items.iter().enumerate() {
                indent(level + 1, out);
                write_value(item, level + 1, out);
                if k + 1 < items.len() {
                    out.push(',');
                }
                out.push('\n');
            }
            indent(level, out);
            out.push(']');
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push_str("{\n");
            for (k, key) in keys.iter().enumerate() {
                indent(level + 1, out);
                out.push_str(&Value::String((*key).clone()).to_string());
                out.push_str(": ");
                write_value(&map[*key], level + 1, out);
                if k + 1 < keys.len() {
                    out.push(',');
                }
                out.push('\n');
            }
            indent(level, out);
            out.push('}');
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashMap;

    #[test]
    fn keys_are_sorted_and_floats_fixed() {
        let mut m = HashMap::new();
        m.insert("zeta", 0.1);
        m.insert("alpha", 1.0);
        let s = to_string(&m).unwrap();
        assert_eq!(s, "{\n  \"alpha\": 1.0000000000000000e0,\n  \"zeta\": 1.0000000000000001e-1\n}\n");
    }

    #[test]
    fn integers_stay_integers() {
        assert_eq!(to_string(&vec![1u64, 2, 3]).unwrap(), "[1, 2, 3]\n");
        assert_eq!(to_string(&(-4i32)).unwrap(), "-4\n");
    }

    proptest! {
        #[test]
        fn floats_round_trip(xs in proptest::collection::vec(-1e300f64..1e300, 0..20)) {
            let text = to_string(&xs).unwrap();
            let back: Vec<f64> = from_str(&text).unwrap();
            prop_assert_eq!(
                back.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                xs.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
