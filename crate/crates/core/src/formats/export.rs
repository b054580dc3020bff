//! Writers for recordings and analysis views, plus the JSON reader that
//! inverts the JSON writer.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::csv::RESERVED_KEYS;
use super::{encode_npy, FormatError, META_WARNINGS};
use crate::analysis::{AlignedEcg, FiducialMap, MedianBeat};
use crate::signal::{Lead, RawRecording, SourceFormat, StandardEcg};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportWhat {
    Raw,
    Standard,
    MedianBeats,
    Aligned,
    Fiducials,
}

impl ExportWhat {
    pub fn name(self) -> &'static str {
        match self {
            ExportWhat::Raw => "raw",
            ExportWhat::Standard => "standard",
            ExportWhat::MedianBeats => "median_beats",
            ExportWhat::Aligned => "aligned",
            ExportWhat::Fiducials => "fiducials",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Csv,
    Npy,
    Json,
}

impl ExportFormat {
    pub fn name(self) -> &'static str {
        match self {
            ExportFormat::Csv => "csv",
            ExportFormat::Npy => "npy",
            ExportFormat::Json => "json",
        }
    }

    pub fn from_name(name: &str) -> Option<ExportFormat> {
        match name.to_ascii_lowercase().as_str() {
            "csv" => Some(ExportFormat::Csv),
            "npy" => Some(ExportFormat::Npy),
            "json" => Some(ExportFormat::Json),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportRequest {
    pub what: ExportWhat,
    pub format: ExportFormat,
}

impl ExportRequest {
    pub fn check(&self) -> Result<(), FormatError> {
        if self.what == ExportWhat::Fiducials && self.format == ExportFormat::Npy {
            return Err(FormatError::UnsupportedCombination { what: self.what.name(), format: self.format.name() });
        }
        Ok(())
    }
}

/// Something that can be exported.
#[derive(Debug, Clone, Copy)]
pub enum ExportView<'a> {
    Raw(&'a RawRecording),
    Standard(&'a StandardEcg),
    MedianBeats(&'a MedianBeat),
    Aligned(&'a AlignedEcg),
    Fiducials(&'a FiducialMap),
}

impl ExportView<'_> {
    pub fn what(&self) -> ExportWhat {
        match self {
            ExportView::Raw(_) => ExportWhat::Raw,
            ExportView::Standard(_) => ExportWhat::Standard,
            ExportView::MedianBeats(_) => ExportWhat::MedianBeats,
            ExportView::Aligned(_) => ExportWhat::Aligned,
            ExportView::Fiducials(_) => ExportWhat::Fiducials,
        }
    }
}

/// JSON document for matrix-shaped views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MatrixDoc {
    view: ExportWhat,
    lead_names: Vec<String>,
    sampling_rate_hz: f64,
    samples: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    adc_gain: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    baseline: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    r_position: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    template_rpeaks: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    beats_used: Option<usize>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FiducialDoc {
    view: ExportWhat,
    rate_hz: f64,
    n_samples: usize,
    r_peaks: Vec<usize>,
    #[serde(default)]
    qrs_onsets: Option<Vec<usize>>,
    #[serde(default)]
    qrs_offsets: Option<Vec<usize>>,
}

fn canonical_names() -> Vec<String> {
    Lead::canonical_names()
}

fn matrix_doc(view: &ExportView<'_>) -> Option<MatrixDoc> {
    let rows = |m: &Array2<f64>| m.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>();
    let base = |what, names, rate, m: &Array2<f64>| MatrixDoc {
        view: what,
        lead_names: names,
        sampling_rate_hz: rate,
        samples: rows(m),
        adc_gain: None,
        baseline: None,
        r_position: None,
        template_rpeaks: None,
        beats_used: None,
        metadata: BTreeMap::new(),
    };
    Some(match view {
        ExportView::Raw(rec) => {
            let mut doc = base(ExportWhat::Raw, rec.lead_names.clone(), rec.sampling_rate_hz, &rec.samples);
            doc.adc_gain = rec.adc_gain;
            doc.baseline = rec.baseline.iter().any(|&b| b != 0.0).then(|| rec.baseline.clone());
            doc.metadata = exportable_metadata(&rec.metadata);
            doc
        }
        ExportView::Standard(ecg) => {
            let mut doc = base(ExportWhat::Standard, canonical_names(), ecg.rate_hz(), ecg.samples());
            doc.metadata = ecg.to_raw().metadata;
            doc
        }
        ExportView::MedianBeats(mb) => {
            let mut doc = base(ExportWhat::MedianBeats, canonical_names(), mb.rate_hz, &mb.samples);
            doc.r_position = Some(mb.r_position);
            doc.beats_used = Some(mb.beats_used);
            doc
        }
        ExportView::Aligned(al) => {
            let mut doc = base(ExportWhat::Aligned, canonical_names(), al.rate_hz, &al.samples);
            doc.template_rpeaks = Some(al.template_rpeaks.clone());
            doc.beats_used = Some(al.beats_used);
            doc
        }
        ExportView::Fiducials(_) => return None,
    })
}

/// Metadata that survives a CSV round trip: single-line values under keys the
/// reader does not interpret itself.
fn exportable_metadata(meta: &BTreeMap<String, String>) -> BTreeMap<String, String> {
    meta.iter()
        .filter(|(k, v)| {
            k.as_str() != META_WARNINGS
                && !k.contains(['=', '\n', '#'])
                && !k.trim().is_empty()
                && k.trim() == k.as_str()
                && !v.contains('\n')
                && v.trim() == v.as_str()
        })
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn matrix_csv(doc: &MatrixDoc) -> Vec<u8> {
    let n = doc.samples.first().map_or(0, Vec::len);
    let mut out = String::new();
    let mut comment = |k: &str, v: String| {
        let _ = writeln!(out, "# {k}={v}");
    };
    comment("view", doc.view.name().to_string());
    comment("sampling_rate_hz", doc.sampling_rate_hz.to_string());
    comment("n_samples", n.to_string());
    if let Some(g) = doc.adc_gain {
        comment("adc_gain", g.to_string());
    }
    if let Some(b) = &doc.baseline {
        comment("baseline", join(b));
    }
    if let Some(r) = doc.r_position {
        comment("r_position", r.to_string());
    }
    if let Some(t) = &doc.template_rpeaks {
        comment("template_rpeaks", join(t));
    }
    if let Some(b) = doc.beats_used {
        comment("beats_used", b.to_string());
    }
    for (k, v) in &doc.metadata {
        if k != "view" && !RESERVED_KEYS.contains(&k.as_str()) || k == "units" {
            comment(k, v.clone());
        }
    }
    out.push_str(&doc.lead_names.join(","));
    out.push('\n');
    for t in 0..n {
        let row: Vec<String> = doc.samples.iter().map(|lead| lead[t].to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out.into_bytes()
}

fn fiducial_csv(fid: &FiducialMap) -> Vec<u8> {
    let mut out = format!(
        "# view=fiducials\n# sampling_rate_hz={}\n# n_samples={}\nbeat,r_peak,qrs_onset,qrs_offset\n",
        fid.rate_hz, fid.n_samples
    );
    for (i, r) in fid.r_peaks.iter().enumerate() {
        let bound = |b: &Option<Vec<usize>>| b.as_ref().map_or(String::new(), |v| v[i].to_string());
        let _ = writeln!(out, "{i},{r},{},{}", bound(&fid.qrs_onsets), bound(&fid.qrs_offsets));
    }
    out.into_bytes()
}

pub fn export(view: &ExportView<'_>, format: ExportFormat) -> Result<Vec<u8>, FormatError> {
    ExportRequest { what: view.what(), format }.check()?;
    if let ExportView::Fiducials(fid) = view {
        return Ok(match format {
            ExportFormat::Csv => fiducial_csv(fid),
            ExportFormat::Json => {
                let doc = FiducialDoc {
                    view: ExportWhat::Fiducials,
                    rate_hz: fid.rate_hz,
                    n_samples: fid.n_samples,
                    r_peaks: fid.r_peaks.clone(),
                    qrs_onsets: fid.qrs_onsets.clone(),
                    qrs_offsets: fid.qrs_offsets.clone(),
                };
                serde_json::to_vec_pretty(&doc).expect("fiducials serialize")
            }
            ExportFormat::Npy => unreachable!("rejected by check"),
        });
    }
    let doc = matrix_doc(view).expect("matrix view");
    Ok(match format {
        ExportFormat::Csv => matrix_csv(&doc),
        ExportFormat::Json => serde_json::to_vec(&doc).expect("finite samples serialize"),
        ExportFormat::Npy => {
            let n = doc.samples.first().map_or(0, Vec::len);
            let m = Array2::from_shape_vec((doc.samples.len(), n), doc.samples.concat()).expect("rectangular");
            encode_npy(&m)
        }
    })
}

fn json_error(e: serde_json::Error) -> FormatError {
    if e.is_eof() {
        FormatError::Truncated(format!("JSON: {e}"))
    } else {
        FormatError::BadHeader(format!("JSON: {e}"))
    }
}

/// Reads a matrix-shaped JSON export back into a recording.
pub fn parse_json(bytes: &[u8]) -> Result<RawRecording, FormatError> {
    let value: serde_json::Value = serde_json::from_slice(bytes).map_err(json_error)?;
    if value.get("view").and_then(|v| v.as_str()) == Some("fiducials") {
        return Err(FormatError::BadHeader("fiducial documents do not hold a recording".into()));
    }
    let doc: MatrixDoc = serde_json::from_value(value).map_err(json_error)?;
    let n_leads = doc.samples.len();
    let n = doc.samples.first().map_or(0, Vec::len);
    if n == 0 || doc.samples.iter().any(|r| r.len() != n) {
        return Err(FormatError::MalformedNumbers("sample rows are empty or ragged".into()));
    }
    let m = Array2::from_shape_vec((n_leads, n), doc.samples.concat()).expect("rectangular");
    let mut rec = RawRecording::new(doc.lead_names, m, doc.sampling_rate_hz, SourceFormat::Json)?;
    rec.adc_gain = doc.adc_gain;
    if let Some(b) = doc.baseline {
        if b.len() != n_leads {
            return Err(FormatError::InvalidRecording(format!("{} baseline values for {n_leads} leads", b.len())));
        }
        rec.baseline = b;
    }
    rec.metadata = doc.metadata;
    rec.validate()?;
    Ok(rec)
}

/// Reads a JSON fiducial export.
pub fn parse_fiducials_json(bytes: &[u8]) -> Result<FiducialMap, FormatError> {
    let doc: FiducialDoc = serde_json::from_slice(bytes).map_err(json_error)?;
    let fid = FiducialMap {
        r_peaks: doc.r_peaks,
        qrs_onsets: doc.qrs_onsets,
        qrs_offsets: doc.qrs_offsets,
        rate_hz: doc.rate_hz,
        n_samples: doc.n_samples,
    };
    if !fid.is_valid() {
        return Err(FormatError::InvalidRecording("fiducial indices are not ordered or out of range".into()));
    }
    Ok(fid)
}
