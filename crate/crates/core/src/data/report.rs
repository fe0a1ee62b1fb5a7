//! Canonical JSON and TSV output.
//!
//! Canonical JSON has object keys sorted, floats printed with 17 significant
//! digits in exponent form, and a top-level `schema_version`. Reading back a
//! written document yields the same value bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Result, SfpError};

/// Version of every JSON document this crate writes.
pub const SCHEMA_VERSION: u32 = 1;

/// Serializes `DMatrix<f64>` as `{"shape": [rows, cols], "data": [row-major]}`.
pub mod matrix {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Repr {
        shape: [usize; 2],
        data: Vec<f64>,
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let (r, c) = m.shape();
        let data = (0..r).flat_map(|i| (0..c).map(move |j| m[(i, j)])).collect();
        Repr { shape: [r, c], data }.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let repr = Repr::deserialize(d)?;
        let [r, c] = repr.shape;
        if repr.data.len() != r * c {
            return Err(serde::de::Error::custom(format!(
                "matrix data has {} entries for shape {r}x{c}",
                repr.data.len()
            )));
        }
        Ok(DMatrix::from_row_slice(r, c, &repr.data))
    }
}

/// Same as [`matrix`] for `Option<DMatrix<f64>>`.
pub mod opt_matrix {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Wrap(#[serde(with = "super::matrix")] DMatrix<f64>);

    pub fn serialize<S: Serializer>(m: &Option<DMatrix<f64>>, s: S) -> Result<S::Ok, S::Error> {
        m.clone().map(Wrap).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<DMatrix<f64>>, D::Error> {
        Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
    }
}

fn write_value(v: &Value, out: &mut String, indent: usize) {
    let pad = |n: usize| "  ".repeat(n);
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                let _ = write!(out, "{i}");
            } else if let Some(u) = n.as_u64() {
                let _ = write!(out, "{u}");
            } else {
                let f = n.as_f64().unwrap_or(f64::NAN);
                let _ = write!(out, "{f:.16e}");
            }
        }
        Value::String(s) => out.push_str(&serde_json::to_string(s).expect("string encodes")),
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return;
            }
            let scalar = items.iter().all(|x| !x.is_array() && !x.is_object());
            if scalar {
                out.push('[');
                for (i, x) in items.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    write_value(x, out, indent);
                }
                out.push(']');
            } else {
                out.push_str("[\n");
                for (i, x) in items.iter().enumerate() {
                    out.push_str(&pad(indent + 1));
                    write_value(x, out, indent + 1);
                    if i + 1 < items.len() {
                        out.push(',');
                    }
                    out.push('\n');
                }
                out.push_str(&pad(indent));
                out.push(']');
            }
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push_str("{\n");
            for (i, k) in keys.iter().enumerate() {
                out.push_str(&pad(indent + 1));
                out.push_str(&serde_json::to_string(k).expect("key encodes"));
                out.push_str(": ");
                write_value(&map[*k], out, indent + 1);
                if i + 1 < keys.len() {
                    out.push(',');
                }
                out.push('\n');
            }
            out.push_str(&pad(indent));
            out.push('}');
        }
    }
}

/// Canonical JSON text of any serializable value.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    let mut out = String::new();
    write_value(&v, &mut out, 0);
    out.push('\n');
    Ok(out)
}

/// Canonical JSON with `schema_version` injected at the top level.
pub fn to_versioned_json<T: Serialize>(value: &T) -> Result<String> {
    let mut v = serde_json::to_value(value)?;
    match v.as_object_mut() {
        Some(map) => {
            map.insert("schema_version".into(), Value::from(SCHEMA_VERSION));
        }
        None => return Err(SfpError::Input("reports must serialize to JSON objects".into())),
    }
    let mut out = String::new();
    write_value(&v, &mut out, 0);
    out.push('\n');
    Ok(out)
}

/// Parses a versioned document, rejecting other schema versions.
pub fn from_versioned_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    let mut v: Value = serde_json::from_str(text)?;
    let map = v
        .as_object_mut()
        .ok_or_else(|| SfpError::Input("report is not a JSON object".into()))?;
    let found = map
        .remove("schema_version")
        .and_then(|x| x.as_u64())
        .ok_or_else(|| SfpError::Input("report has no schema_version".into()))? as u32;
    if found != SCHEMA_VERSION {
        return Err(SfpError::Schema {
            found,
            expected: SCHEMA_VERSION,
        });
    }
    Ok(serde_json::from_value(v)?)
}

pub fn write_report<T: Serialize>(report: &T, path: &Path) -> Result<()> {
    std::fs::write(path, to_versioned_json(report)?)?;
    Ok(())
}

pub fn read_report<T: DeserializeOwned>(path: &Path) -> Result<T> {
    from_versioned_json(&std::fs::read_to_string(path)?)
}

/// Formats an optional value for TSV output (`NA` when missing).
pub fn tsv_cell(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x:.10e}"),
        _ => "NA".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Doc {
        b: f64,
        a: Vec<f64>,
        #[serde(with = "matrix")]
        m: DMatrix<f64>,
        name: String,
    }

    #[test]
    fn round_trip_is_exact_and_sorted() {
        let doc = Doc {
            b: 0.1 + 0.2,
            a: vec![1.0, -0.0, 1e-300, std::f64::consts::PI],
            m: DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.5]),
            name: "x\"y".into(),
        };
        let text = to_versioned_json(&doc).unwrap();
        let ia = text.find("\"a\"").unwrap();
        let ib = text.find("\"b\"").unwrap();
        assert!(ia < ib);
        assert!(text.contains("\"schema_version\": 1"));
        let back: Doc = from_versioned_json(&text).unwrap();
        assert_eq!(back, doc);
        assert_eq!(to_versioned_json(&back).unwrap(), text);
    }

    #[test]
    fn wrong_version_rejected() {
        let text = "{\"schema_version\": 7, \"b\": 1.0}";
        let err = from_versioned_json::<serde_json::Value>(text).unwrap_err();
        assert!(matches!(err, SfpError::Schema { found: 7, .. }));
    }
}
