use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ExchangeError;

/// Highest ONNX operator set the registry accepts.
pub const MAX_OPSET: u64 = 20;

const REQUIRED: [&str; 8] = ["name", "version", "kind", "labels", "input_spec", "preprocessing", "sha256", "created_at"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    LinearHead,
    Mlp,
    ExternalOnnx,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::LinearHead => "linear_head",
            ModelKind::Mlp => "mlp",
            ModelKind::ExternalOnnx => "external_onnx",
        }
    }

    pub fn is_native(self) -> bool {
        self != ModelKind::ExternalOnnx
    }

    /// File extension of the payload.
    pub fn extension(self) -> &'static str {
        if self.is_native() {
            "ecgx"
        } else {
            "onnx"
        }
    }
}

/// Shape of the input every exchanged model consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSpec {
    pub leads: usize,
    pub samples: usize,
    pub rate_hz: f64,
    pub unit: String,
}

impl Default for InputSpec {
    fn default() -> Self {
        InputSpec { leads: 12, samples: 1000, rate_hz: 100.0, unit: "mV".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub name: String,
    pub version: String,
    pub kind: ModelKind,
    pub labels: Vec<String>,
    pub input_spec: InputSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub opset: Option<u64>,
    pub preprocessing: String,
    pub sha256: String,
    pub created_at: DateTime<Utc>,
}

impl ModelManifest {
    /// Manifest describing `payload`, with its hash filled in.
    pub fn describe(name: &str, version: &str, kind: ModelKind, labels: Vec<String>, payload: &[u8], created_at: DateTime<Utc>) -> Self {
        ModelManifest {
            name: name.into(),
            version: version.into(),
            kind,
            labels,
            input_spec: InputSpec::default(),
            opset: None,
            preprocessing: "standard".into(),
            sha256: sha256_hex(payload),
            created_at,
        }
    }

    /// `<name>@<version>`, the file stem used on the server and in the cache.
    pub fn stem(&self) -> String {
        format!("{}@{}", self.name, self.version)
    }

    pub fn payload_file(&self) -> String {
        format!("{}.{}", self.stem(), self.kind.extension())
    }

    pub fn manifest_file(&self) -> String {
        format!("{}.manifest.json", self.stem())
    }

    pub fn check(&self) -> Result<(), ExchangeError> {
        if let Some(op) = self.opset {
            if op > MAX_OPSET {
                return Err(ExchangeError::OpsetTooHigh(op));
            }
            if self.kind.is_native() {
                return Err(ExchangeError::InvalidManifest(format!("opset only applies to external_onnx, not {}", self.kind.name())));
            }
        }
        if self.sha256.len() != 64 || !self.sha256.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) {
            return Err(ExchangeError::BadHash(self.sha256.clone()));
        }
        validate_ident("name", &self.name)?;
        validate_ident("version", &self.version)?;
        if self.labels.is_empty() {
            return Err(ExchangeError::InvalidManifest("labels must not be empty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(dup) = self.labels.iter().find(|l| !seen.insert(l.as_str())) {
            return Err(ExchangeError::InvalidManifest(format!("duplicate label {dup:?}")));
        }
        if self.input_spec != InputSpec::default() {
            return Err(ExchangeError::InvalidManifest(format!("unsupported input spec {:?}", self.input_spec)));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("manifest serializes");
        out.push(b'\n');
        out
    }
}

/// Names become file names on the server, so they are kept to a portable alphabet.
pub fn validate_ident(field: &str, v: &str) -> Result<(), ExchangeError> {
    let ok = !v.is_empty()
        && v.len() <= 128
        && !v.starts_with('.')
        && v.bytes().all(|b| b.is_ascii_alphanumeric() || b"._-".contains(&b));
    if ok {
        Ok(())
    } else {
        Err(ExchangeError::InvalidManifest(format!("{field} {v:?} must be 1-128 characters of [A-Za-z0-9._-] not starting with '.'")))
    }
}

/// Parses and checks a manifest document.
pub fn validate_manifest(doc: &[u8]) -> Result<ModelManifest, ExchangeError> {
    let value: serde_json::Value = serde_json::from_slice(doc).map_err(|e| ExchangeError::InvalidManifest(e.to_string()))?;
    let obj = value.as_object().ok_or_else(|| ExchangeError::InvalidManifest("manifest must be a JSON object".into()))?;
    if let Some(missing) = REQUIRED.iter().find(|k| obj.get(**k).is_none_or(|v| v.is_null())) {
        return Err(ExchangeError::MissingField((*missing).into()));
    }
    // Report an oversized opset before type errors elsewhere mask it.
    if let Some(op) = obj.get("opset").and_then(|v| v.as_u64()) {
        if op > MAX_OPSET {
            return Err(ExchangeError::OpsetTooHigh(op));
        }
    }
    let m: ModelManifest = serde_json::from_value(value).map_err(|e| ExchangeError::InvalidManifest(e.to_string()))?;
    m.check()?;
    Ok(m)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
