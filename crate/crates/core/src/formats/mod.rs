//! Readers for the supported ECG file formats and writers for exports.
//!
//! Every reader turns bytes into a [`RawRecording`]; nothing here touches the
//! filesystem. Parsers are strict: an unsupported sub-variant is an error, never
//! a best-effort guess.

mod csv;
mod dicom;
mod export;
mod mat;
mod npy;
mod wfdb;
mod xml;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal::RawRecording;
pub use crate::signal::SourceFormat;

pub use self::csv::parse_csv;
pub use self::dicom::parse_dicom;
pub use self::export::{export, parse_fiducials_json, parse_json, ExportFormat, ExportRequest, ExportView, ExportWhat};
pub use self::mat::parse_mat;
pub use self::npy::{encode_npy, parse_npy, parse_npz, NpyArray};
pub use self::wfdb::parse_wfdb;
pub use self::xml::parse_xml;

/// Metadata key carrying parser warnings (newline separated).
pub const META_WARNINGS: &str = "warnings";

/// Rate assumed for containers that carry none (CSV, NumPy, MAT) when no sidecar rate is given.
pub const DEFAULT_RATE_HZ: f64 = 500.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("could not determine the file format")]
    UnknownFormat,
    #[error("input is truncated: {0}")]
    Truncated(String),
    #[error("malformed CSV: {0}")]
    MalformedCsv(String),
    #[error("unsupported NumPy dtype `{0}`")]
    UnsupportedDtype(String),
    #[error("cannot tell leads from samples for shape {0:?}")]
    AmbiguousShape(Vec<usize>),
    #[error("bad header: {0}")]
    BadHeader(String),
    #[error("unsupported WFDB signal format `{0}` (only format 16 is read)")]
    UnsupportedWfdbFormat(String),
    #[error("WFDB header does not match the signal file: {0}")]
    HeaderMismatch(String),
    #[error("unsupported DICOM transfer syntax `{0}`")]
    UnsupportedTransferSyntax(String),
    #[error("DICOM file has no waveform sequence")]
    MissingWaveform,
    #[error("unsupported waveform encoding: {0}")]
    UnsupportedBits(String),
    #[error("unsupported MAT-file: {0}")]
    UnsupportedMatVersion(String),
    #[error("MAT-file contains no numeric 2-D variable")]
    NoNumericVariable,
    #[error("XML root element has no `rate` attribute")]
    MissingRate,
    #[error("XML element `{0}` does not name a lead")]
    UnknownLeadElement(String),
    #[error("malformed numbers: {0}")]
    MalformedNumbers(String),
    #[error("cannot export {what} as {format}")]
    UnsupportedCombination { what: &'static str, format: &'static str },
    #[error("invalid recording: {0}")]
    InvalidRecording(String),
}

impl FormatError {
    /// Stable machine-readable identifier.
    pub fn code(&self) -> &'static str {
        match self {
            FormatError::UnknownFormat => "unknown_format",
            FormatError::Truncated(_) => "truncated_input",
            FormatError::MalformedCsv(_) => "malformed_csv",
            FormatError::UnsupportedDtype(_) => "unsupported_dtype",
            FormatError::AmbiguousShape(_) => "ambiguous_shape",
            FormatError::BadHeader(_) => "bad_header",
            FormatError::UnsupportedWfdbFormat(_) => "unsupported_wfdb_format",
            FormatError::HeaderMismatch(_) => "header_mismatch",
            FormatError::UnsupportedTransferSyntax(_) => "unsupported_transfer_syntax",
            FormatError::MissingWaveform => "missing_waveform",
            FormatError::UnsupportedBits(_) => "unsupported_bits",
            FormatError::UnsupportedMatVersion(_) => "unsupported_mat_version",
            FormatError::NoNumericVariable => "no_numeric_variable",
            FormatError::MissingRate => "missing_rate",
            FormatError::UnknownLeadElement(_) => "unknown_lead_element",
            FormatError::MalformedNumbers(_) => "malformed_numbers",
            FormatError::UnsupportedCombination { .. } => "unsupported_combination",
            FormatError::InvalidRecording(_) => "invalid_recording",
        }
    }

    pub const ALL_CODES: &'static [&'static str] = &[
        "unknown_format",
        "truncated_input",
        "malformed_csv",
        "unsupported_dtype",
        "ambiguous_shape",
        "bad_header",
        "unsupported_wfdb_format",
        "header_mismatch",
        "unsupported_transfer_syntax",
        "missing_waveform",
        "unsupported_bits",
        "unsupported_mat_version",
        "no_numeric_variable",
        "missing_rate",
        "unknown_lead_element",
        "malformed_numbers",
        "unsupported_combination",
        "invalid_recording",
    ];
}

impl From<crate::signal::SignalError> for FormatError {
    fn from(e: crate::signal::SignalError) -> Self {
        FormatError::InvalidRecording(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectedBy {
    Extension,
    MagicBytes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatDescriptor {
    pub format: SourceFormat,
    pub detected_by: DetectedBy,
}

/// Options for formats that do not record their own sampling rate.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ParseOptions {
    /// Rate from sidecar metadata; falls back to [`DEFAULT_RATE_HZ`] with a warning.
    pub sampling_rate_hz: Option<f64>,
}

const NPY_MAGIC: &[u8] = b"\x93NUMPY";
const ZIP_MAGIC: &[u8] = b"PK\x03\x04";
const MAT_MAGIC: &[u8] = b"MATLAB 5.0 MAT-file";
const MAT73_MAGIC: &[u8] = b"MATLAB 7.3 MAT-file";

/// Identifies a format from magic bytes, falling back to the filename extension.
pub fn detect_format(bytes: &[u8], filename_hint: &str) -> Result<FormatDescriptor, FormatError> {
    if bytes.is_empty() {
        return Err(FormatError::UnknownFormat);
    }
    let magic = |format| Ok(FormatDescriptor { format, detected_by: DetectedBy::MagicBytes });
    if bytes.starts_with(NPY_MAGIC) {
        return magic(SourceFormat::Npy);
    }
    if bytes.starts_with(ZIP_MAGIC) {
        return magic(SourceFormat::Npz);
    }
    if bytes.len() >= 132 && &bytes[128..132] == b"DICM" {
        return magic(SourceFormat::Dicom);
    }
    if bytes.starts_with(MAT_MAGIC) || bytes.starts_with(MAT73_MAGIC) {
        return magic(SourceFormat::Mat);
    }
    let first = bytes.iter().copied().find(|b| !b.is_ascii_whitespace());
    match first {
        Some(b'<') => return magic(SourceFormat::Xml),
        Some(b'{') if extension(filename_hint).as_deref() != Some("csv") => return magic(SourceFormat::Json),
        _ => {}
    }
    let format = match extension(filename_hint).as_deref() {
        Some("hea") | Some("dat") => SourceFormat::Wfdb,
        Some("csv") | Some("txt") => SourceFormat::Csv,
        Some("npy") => SourceFormat::Npy,
        Some("npz") => SourceFormat::Npz,
        Some("dcm") => SourceFormat::Dicom,
        Some("mat") => SourceFormat::Mat,
        Some("xml") => SourceFormat::Xml,
        Some("json") => SourceFormat::Json,
        _ => return Err(FormatError::UnknownFormat),
    };
    Ok(FormatDescriptor { format, detected_by: DetectedBy::Extension })
}

fn extension(name: &str) -> Option<String> {
    Path::new(name)
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
}

/// Parses a single-file recording of a known format.
///
/// WFDB needs both header and signal bytes, so it goes through [`parse_wfdb`] instead.
pub fn parse_bytes(format: SourceFormat, bytes: &[u8], opts: &ParseOptions) -> Result<RawRecording, FormatError> {
    match format {
        SourceFormat::Csv => parse_csv(bytes, opts),
        SourceFormat::Npy => parse_npy(bytes, opts),
        SourceFormat::Npz => parse_npz(bytes, opts),
        SourceFormat::Dicom => parse_dicom(bytes),
        SourceFormat::Mat => parse_mat(bytes, opts),
        SourceFormat::Xml => parse_xml(bytes),
        SourceFormat::Json => parse_json(bytes),
        SourceFormat::Wfdb => Err(FormatError::BadHeader(
            "WFDB records need a header and a signal file".into(),
        )),
    }
}

pub(crate) fn add_warning(rec: &mut RawRecording, warning: &str) {
    rec.metadata
        .entry(META_WARNINGS.to_string())
        .and_modify(|w| {
            w.push('\n');
            w.push_str(warning);
        })
        .or_insert_with(|| warning.to_string());
}

/// Warnings a parser attached to a recording.
pub fn warnings(rec: &RawRecording) -> Vec<String> {
    rec.metadata
        .get(META_WARNINGS)
        .map(|w| w.lines().map(str::to_string).collect())
        .unwrap_or_default()
}

pub(crate) fn resolve_rate(rec: &mut RawRecording, opts: &ParseOptions) {
    match opts.sampling_rate_hz {
        Some(rate) => rec.sampling_rate_hz = rate,
        None => {
            rec.sampling_rate_hz = DEFAULT_RATE_HZ;
            add_warning(rec, "sampling rate not recorded in file; assumed 500 Hz");
        }
    }
}

/// Positional lead names for an unlabeled lead axis of 8, 12 or 15 rows.
pub(crate) fn positional_leads(n: usize) -> Option<Vec<String>> {
    use crate::signal::Lead;
    match n {
        8 => Some(Lead::INDEPENDENT.iter().map(|l| l.name().to_string()).collect()),
        12 => Some(Lead::canonical_names()),
        15 => {
            let mut names = Lead::canonical_names();
            names.extend(["VX", "VY", "VZ"].map(String::from));
            Some(names)
        }
        _ => None,
    }
}

pub(crate) fn is_lead_count(n: usize) -> bool {
    matches!(n, 8 | 12 | 15)
}

/// Little-endian cursor shared by the binary readers.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn pos(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.remaining() == 0
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.remaining() < n {
            return Err(FormatError::Truncated(format!(
                "needed {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn skip(&mut self, n: usize) -> Result<(), FormatError> {
        self.take(n).map(|_| ())
    }

    pub(crate) fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
