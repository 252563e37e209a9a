use serde_json::Value;

use super::StoreError;

/// An immutable artifact payload.
#[derive(Debug, Clone, PartialEq)]
pub enum ArtifactValue {
    Json(Value),
    Bytes(Vec<u8>),
}

impl ArtifactValue {
    pub fn tag(&self) -> &'static str {
        match self {
            ArtifactValue::Json(_) => "json",
            ArtifactValue::Bytes(_) => "bytes",
        }
    }

    pub fn as_json(&self) -> Option<&Value> {
        match self {
            ArtifactValue::Json(v) => Some(v),
            ArtifactValue::Bytes(_) => None,
        }
    }

    /// A json float; NaN and the infinities have no JSON form.
    pub fn from_f64(x: f64) -> Result<ArtifactValue, StoreError> {
        serde_json::Number::from_f64(x)
            .map(|n| ArtifactValue::Json(Value::Number(n)))
            .ok_or_else(|| StoreError::Encoding(format!("{x} is not representable in JSON")))
    }

    /// Parses JSON text (any formatting) into a json artifact.
    pub fn from_json_text(text: &[u8]) -> Result<ArtifactValue, StoreError> {
        serde_json::from_slice(text)
            .map(ArtifactValue::Json)
            .map_err(|e| StoreError::Encoding(e.to_string()))
    }

    /// The payload as materialized for tasks: canonical JSON text or the
    /// raw bytes.
    pub fn payload(&self) -> Vec<u8> {
        match self {
            ArtifactValue::Json(v) => {
                let mut out = Vec::new();
                write_canonical(v, &mut out);
                out
            }
            ArtifactValue::Bytes(b) => b.clone(),
        }
    }
}

/// `tag ++ "\n" ++ payload`, where json payloads are written with sorted
/// keys, no whitespace and shortest round-trip floats.
pub fn canonical_encode(value: &ArtifactValue) -> Vec<u8> {
    let mut out = Vec::with_capacity(16);
    out.extend_from_slice(value.tag().as_bytes());
    out.push(b'\n');
    match value {
        ArtifactValue::Json(v) => write_canonical(v, &mut out),
        ArtifactValue::Bytes(b) => out.extend_from_slice(b),
    }
    out
}

pub fn decode_canonical(bytes: &[u8]) -> Result<ArtifactValue, String> {
    let newline = bytes.iter().position(|&b| b == b'\n').ok_or("missing tag line")?;
    let (tag, payload) = (&bytes[..newline], &bytes[newline + 1..]);
    match tag {
        b"json" => serde_json::from_slice(payload)
            .map(ArtifactValue::Json)
            .map_err(|e| format!("bad json payload: {e}")),
        b"bytes" => Ok(ArtifactValue::Bytes(payload.to_vec())),
        other => Err(format!("unknown tag `{}`", String::from_utf8_lossy(other))),
    }
}

fn write_canonical(value: &Value, out: &mut Vec<u8>) {
    match value {
        Value::Null => out.extend_from_slice(b"null"),
        Value::Bool(true) => out.extend_from_slice(b"true"),
        Value::Bool(false) => out.extend_from_slice(b"false"),
        // serde_json prints integers in minimal decimal and floats via ryu
        // (shortest representation that round-trips).
        // -0.0 compares equal to 0.0, so it must encode identically.
        Value::Number(n) if n.as_f64() == Some(0.0) && n.is_f64() => out.extend_from_slice(b"0.0"),
        Value::Number(n) => serde_json::to_writer(&mut *out, n).expect("write to vec"),
        Value::String(s) => serde_json::to_writer(&mut *out, s).expect("write to vec"),
        Value::Array(items) => {
            out.push(b'[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_canonical(item, out);
            }
            out.push(b']');
        }
        Value::Object(map) => {
            let mut entries: Vec<(&String, &Value)> = map.iter().collect();
            entries.sort_unstable_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
            out.push(b'{');
            for (i, (k, v)) in entries.into_iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                serde_json::to_writer(&mut *out, k).expect("write to vec");
                out.push(b':');
                write_canonical(v, out);
            }
            out.push(b'}');
        }
    }
}
