//! Reproducible machine output: six significant digits, sorted keys.

use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

pub const SIG_DIGITS: usize = 6;

/// Rounds to six significant digits. Non-finite values pass through.
pub fn round_sig(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{:.*e}", SIG_DIGITS - 1, x).parse().unwrap_or(x)
}

/// Text form used in CSV cells and JSON numbers.
pub fn format_sig(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        let r = round_sig(x);
        let s = format!("{r}");
        if s == "-0" {
            "0".into()
        } else {
            s
        }
    }
}

/// Inverse of [`format_sig`].
pub fn parse_sig(s: &str) -> Option<f64> {
    match s {
        "inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        "nan" => Some(f64::NAN),
        _ => s.parse().ok(),
    }
}

fn canonicalize(v: Value) -> Value {
    match v {
        Value::Number(n) => match n.as_f64() {
            Some(f) if n.is_f64() => serde_json::Number::from_f64(round_sig(f)).map_or(Value::Null, Value::Number),
            _ => Value::Number(n),
        },
        Value::Array(a) => Value::Array(a.into_iter().map(canonicalize).collect()),
        // serde_json's default map is ordered by key
        Value::Object(m) => Value::Object(m.into_iter().map(|(k, v)| (k, canonicalize(v))).collect()),
        other => other,
    }
}

/// Pretty JSON with sorted keys and rounded floats, newline terminated.
/// Serde maps non-finite floats to null, so callers that need infinities
/// encode them with [`format_sig`] first (see [`sig_value`]).
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|e| Error::Parse(e.to_string()))?;
    let mut s = serde_json::to_string_pretty(&canonicalize(v)).map_err(|e| Error::Parse(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// A float as a JSON value: a number when finite, otherwise the string
/// `"inf"`, `"-inf"` or `"nan"`.
pub fn sig_value(x: f64) -> Value {
    serde_json::Number::from_f64(round_sig(x)).map_or_else(|| Value::String(format_sig(x)), Value::Number)
}

/// Reads a value written by [`sig_value`].
pub fn value_f64(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => parse_sig(s),
        _ => None,
    }
}

/// Serde adapter for `f64` fields that may be infinite.
pub mod sig_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        serde::Serialize::serialize(&super::sig_value(*x), s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        let v = serde_json::Value::deserialize(d)?;
        super::value_f64(&v).ok_or_else(|| serde::de::Error::custom(format!("expected a number, got {v}")))
    }
}

/// Same as [`sig_f64`] for optional fields.
pub mod sig_f64_opt {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match x {
            Some(x) => serde::Serialize::serialize(&super::sig_value(*x), s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        let v = Option::<serde_json::Value>::deserialize(d)?;
        match v {
            None | Some(serde_json::Value::Null) => Ok(None),
            Some(v) => super::value_f64(&v)
                .map(Some)
                .ok_or_else(|| serde::de::Error::custom(format!("expected a number, got {v}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(format_sig(48.13080360867909), "48.1308");
        assert_eq!(format_sig(0.123456789), "0.123457");
        assert_eq!(format_sig(1234567.0), "1234570");
        assert_eq!(format_sig(f64::INFINITY), "inf");
        assert_eq!(format_sig(-0.0), "0");
        assert_eq!(parse_sig("inf"), Some(f64::INFINITY));
    }

    #[test]
    fn json_is_sorted_and_rounded() {
        let v = serde_json::json!({"b": 1.0 / 3.0, "a": [2.0f64.sqrt(), 3], "inf": sig_value(f64::INFINITY)});
        let s = to_canonical_json(&v).unwrap();
        assert_eq!(s, "{\n  \"a\": [\n    1.41421,\n    3\n  ],\n  \"b\": 0.333333,\n  \"inf\": \"inf\"\n}\n");
    }
}
