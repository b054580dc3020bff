//! Native head payload.
//!
//! ```text
//! offset 0   8 bytes   magic "ECGXHEAD"
//! offset 8   u64 LE    header length H
//! offset 16  H bytes   UTF-8 JSON header
//! 16 + H     8·N bytes weights as f64 LE, N = header.n_weights
//! ```
//!
//! Weights follow the head's parameter order: row-major matrices, each followed by
//! its bias (`W, b` for a linear head, `W1, b1, W2, b2` for the MLP).

use ecgx_core::finetune::{Activation, Head, LinearHead, MlpHead};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::manifest::{sha256_hex, ModelKind, ModelManifest};
use crate::ExchangeError;

fn zeros(rows: usize, cols: usize) -> Array2<f64> {
    Array2::zeros((rows, cols))
}

const MAGIC: &[u8; 8] = b"ECGXHEAD";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    kind: ModelKind,
    input_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hidden: Option<usize>,
    class_names: Vec<String>,
    activation: Activation,
    n_weights: usize,
}

pub fn save_model(head: &Head) -> Vec<u8> {
    let (kind, hidden) = match head {
        Head::Linear(_) => (ModelKind::LinearHead, None),
        Head::Mlp(h) => (ModelKind::Mlp, Some(h.w1.nrows())),
    };
    let params = head.params();
    let header = Header {
        format_version: FORMAT_VERSION,
        kind,
        input_dim: head.input_dim(),
        hidden,
        class_names: head.class_names().to_vec(),
        activation: head.activation(),
        n_weights: params.len(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 8 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

/// Decodes a payload without a manifest; the structure is still fully checked.
pub fn decode_head(bytes: &[u8]) -> Result<Head, ExchangeError> {
    let corrupt = |m: String| ExchangeError::CorruptPayload(m);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing ECGXHEAD magic".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let body = &bytes[16..];
    if hlen > body.len() as u64 {
        return Err(corrupt(format!("header length {hlen} exceeds payload of {} bytes", bytes.len())));
    }
    let (hbytes, wbytes) = body.split_at(hlen as usize);
    let h: Header = serde_json::from_slice(hbytes).map_err(|e| corrupt(format!("header: {e}")))?;
    if h.format_version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format version {}", h.format_version)));
    }
    let c = h.class_names.len();
    let expected = match (h.kind, h.hidden) {
        (ModelKind::LinearHead, None) => c.checked_mul(h.input_dim).and_then(|v| v.checked_add(c)),
        (ModelKind::Mlp, Some(hd)) => hd
            .checked_mul(h.input_dim)
            .and_then(|v| v.checked_add(hd))
            .and_then(|v| v.checked_add(c.checked_mul(hd)?))
            .and_then(|v| v.checked_add(c)),
        (kind, hidden) => return Err(corrupt(format!("kind {} with hidden {hidden:?}", kind.name()))),
    };
    if expected != Some(h.n_weights) || wbytes.len() as u64 != 8 * h.n_weights as u64 {
        return Err(corrupt(format!(
            "{} weight bytes for {} declared weights ({expected:?} expected from the shape)",
            wbytes.len(),
            h.n_weights
        )));
    }
    let weights: Vec<f64> = wbytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let shape_err = |e: ecgx_core::FineTuneError| corrupt(e.to_string());
    let mut head = match h.kind {
        ModelKind::LinearHead => Head::from(LinearHead::new(zeros(c, h.input_dim), vec![0.0; c], h.class_names, h.activation).map_err(shape_err)?),
        _ => {
            let hd = h.hidden.expect("checked above");
            Head::from(
                MlpHead::new(zeros(hd, h.input_dim), vec![0.0; hd], zeros(c, hd), vec![0.0; c], h.class_names, h.activation)
                    .map_err(shape_err)?,
            )
        }
    };
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(corrupt("non-finite weight".into()));
    }
    head.set_params(&weights).map_err(shape_err)?;
    Ok(head)
}

/// Manifest kind describing a native head.
pub fn head_kind(head: &Head) -> ModelKind {
    match head {
        Head::Linear(_) => ModelKind::LinearHead,
        Head::Mlp(_) => ModelKind::Mlp,
    }
}

/// Decodes a payload and checks it against its manifest: hash, kind and labels.
pub fn load_model(bytes: &[u8], manifest: &ModelManifest) -> Result<Head, ExchangeError> {
    if !manifest.kind.is_native() {
        return Err(ExchangeError::NotExecutable(manifest.kind.name().into()));
    }
    let actual = sha256_hex(bytes);
    if actual != manifest.sha256 {
        return Err(ExchangeError::HashMismatch { expected: manifest.sha256.clone(), actual });
    }
    let head = decode_head(bytes)?;
    let kind = head_kind(&head);
    if kind != manifest.kind {
        return Err(ExchangeError::CorruptPayload(format!("payload holds a {} but the manifest says {}", kind.name(), manifest.kind.name())));
    }
    if head.class_names() != manifest.labels.as_slice() {
        return Err(ExchangeError::CorruptPayload(format!(
            "payload classes {:?} differ from manifest labels {:?}",
            head.class_names(),
            manifest.labels
        )));
    }
    Ok(head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ecgx_core::finetune::HeadKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (kind, act) in [(HeadKind::Linear, Activation::Softmax), (HeadKind::Mlp { hidden: 5 }, Activation::Sigmoid)] {
            let head = Head::init(kind, 7, names(3), act, &mut rng);
            let bytes = save_model(&head);
            assert_eq!(decode_head(&bytes).unwrap(), head);
            assert_eq!(save_model(&decode_head(&bytes).unwrap()), bytes);
        }
    }

    #[test]
    fn truncation_and_garbage_are_corrupt() {
        let head = Head::init(HeadKind::Linear, 4, names(2), Activation::Softmax, &mut ChaCha8Rng::seed_from_u64(1));
        let bytes = save_model(&head);
        for cut in [0, 7, 15, 20, bytes.len() - 1] {
            assert!(matches!(decode_head(&bytes[..cut]), Err(ExchangeError::CorruptPayload(_))), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_head(&extra), Err(ExchangeError::CorruptPayload(_))));
        let mut huge = bytes.clone();
        huge[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(decode_head(&huge), Err(ExchangeError::CorruptPayload(_))));
        let mut nan = bytes.clone();
        let n = nan.len();
        nan[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(decode_head(&nan), Err(ExchangeError::CorruptPayload(_))));
    }

    #[test]
    fn manifest_consistency() {
        let head = Head::init(HeadKind::Linear, 4, names(2), Activation::Softmax, &mut ChaCha8Rng::seed_from_u64(1));
        let bytes = save_model(&head);
        let at = "2025-01-01T00:00:00Z".parse().unwrap();
        let m = ModelManifest::describe("h", "1", ModelKind::LinearHead, names(2), &bytes, at);
        assert_eq!(load_model(&bytes, &m).unwrap(), head);

        let relabelled = ModelManifest { labels: vec!["x".into(), "y".into()], ..m.clone() };
        assert!(matches!(load_model(&bytes, &relabelled), Err(ExchangeError::CorruptPayload(_))));
        let wrong_kind = ModelManifest { kind: ModelKind::Mlp, ..m.clone() };
        assert!(matches!(load_model(&bytes, &wrong_kind), Err(ExchangeError::CorruptPayload(_))));
        let onnx = ModelManifest { kind: ModelKind::ExternalOnnx, ..m.clone() };
        assert!(matches!(load_model(&bytes, &onnx), Err(ExchangeError::NotExecutable(_))));
        let mut flipped = bytes.clone();
        flipped[20] ^= 1;
        assert!(matches!(load_model(&flipped, &m), Err(ExchangeError::HashMismatch { .. })));
    }
}
