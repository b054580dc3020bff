//! Minimal XML schema:
//!
//! ```xml
//! <ecg rate="500" gain="1000">
//!   <lead name="I">0 12 25 ...</lead>
//!   <V1>3 4 5 ...</V1>
//! </ecg>
//! ```
//!
//! Each child element names its lead through a `lead` or `name` attribute or its
//! tag. `rate` is required; `gain` (units per mV) marks the samples as ADC units.

use ndarray::Array2;

use super::FormatError;
use crate::signal::{LeadToken, RawRecording, SourceFormat, META_UNITS, UNITS_ADC};

fn number_attr(node: roxmltree::Node<'_, '_>, name: &str) -> Result<Option<f64>, FormatError> {
    node.attribute(name)
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| FormatError::MalformedNumbers(format!("attribute {name}=\"{v}\"")))
        })
        .transpose()
}

pub fn parse_xml(bytes: &[u8]) -> Result<RawRecording, FormatError> {
    let text = std::str::from_utf8(bytes).map_err(|_| FormatError::BadHeader("XML is not UTF-8".into()))?;
    let doc = roxmltree::Document::parse(text).map_err(|e| match e {
        roxmltree::Error::UnexpectedEndOfStream => FormatError::Truncated("XML document ends early".into()),
        other => FormatError::BadHeader(format!("XML: {other}")),
    })?;
    let root = doc.root_element();
    let rate = number_attr(root, "rate")?.ok_or(FormatError::MissingRate)?;
    let gain = number_attr(root, "gain")?;

    let mut names = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for child in root.children().filter(|c| c.is_element()) {
        let tag = child.tag_name().name();
        let label = child.attribute("lead").or_else(|| child.attribute("name")).unwrap_or(tag);
        if matches!(LeadToken::classify(label), LeadToken::Unknown) {
            return Err(FormatError::UnknownLeadElement(label.to_string()));
        }
        let body = child.text().unwrap_or_default();
        let values = body
            .split_whitespace()
            .map(|tok| tok.parse::<f64>().map_err(|_| FormatError::MalformedNumbers(format!("`{tok}` in lead {label}"))))
            .collect::<Result<Vec<f64>, _>>()?;
        if values.is_empty() {
            return Err(FormatError::MalformedNumbers(format!("lead {label} has no samples")));
        }
        if let Some(first) = rows.first() {
            if first.len() != values.len() {
                return Err(FormatError::MalformedNumbers(format!(
                    "lead {label} has {} samples, expected {}",
                    values.len(),
                    first.len()
                )));
            }
        }
        names.push(label.to_string());
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(FormatError::BadHeader("XML root has no lead elements".into()));
    }
    let n = rows[0].len();
    let samples = Array2::from_shape_vec((rows.len(), n), rows.concat()).expect("rows share a length");
    let mut rec = RawRecording::new(names, samples, rate, SourceFormat::Xml)?;
    if let Some(g) = gain {
        rec.adc_gain = Some(g);
        rec.metadata.insert(META_UNITS.into(), UNITS_ADC.into());
    }
    Ok(rec)
}
