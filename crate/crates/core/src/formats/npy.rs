//! NumPy `.npy` arrays and `.npz` archives.

use std::io::{Cursor, Read};

use ndarray::Array2;

use super::{is_lead_count, positional_leads, resolve_rate, FormatError, ParseOptions, Reader};
use crate::signal::{RawRecording, SourceFormat, META_UNITS, UNITS_ADC};

const MAGIC: &[u8] = b"\x93NUMPY";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dtype {
    F4,
    F8,
    I2,
    I4,
}

impl Dtype {
    fn parse(descr: &str) -> Result<Dtype, FormatError> {
        match descr {
            "<f4" => Ok(Dtype::F4),
            "<f8" => Ok(Dtype::F8),
            "<i2" => Ok(Dtype::I2),
            "<i4" => Ok(Dtype::I4),
            other => Err(FormatError::UnsupportedDtype(other.to_string())),
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::I2 => 2,
            Dtype::F4 | Dtype::I4 => 4,
            Dtype::F8 => 8,
        }
    }

    fn is_integer(self) -> bool {
        matches!(self, Dtype::I2 | Dtype::I4)
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Dtype::F4 => f32::from_le_bytes(b.try_into().unwrap()) as f64,
            Dtype::F8 => f64::from_le_bytes(b.try_into().unwrap()),
            Dtype::I2 => i16::from_le_bytes(b.try_into().unwrap()) as f64,
            Dtype::I4 => i32::from_le_bytes(b.try_into().unwrap()) as f64,
        }
    }
}

/// A decoded 2-D array in C order.
#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    pub data: Array2<f64>,
    pub integer: bool,
}

struct Header {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

fn parse_header_dict(text: &str) -> Result<Header, FormatError> {
    let bad = |m: &str| FormatError::BadHeader(m.to_string());
    let text = text.trim().trim_end_matches('\n').trim();
    let inner = text
        .strip_prefix('{')
        .and_then(|t| t.strip_suffix('}'))
        .ok_or_else(|| bad("header is not a dict literal"))?;

    let value_after = |key: &str| -> Result<&str, FormatError> {
        let k1 = format!("'{key}'");
        let k2 = format!("\"{key}\"");
        let at = inner
            .find(&k1)
            .map(|i| i + k1.len())
            .or_else(|| inner.find(&k2).map(|i| i + k2.len()))
            .ok_or_else(|| bad(&format!("missing key `{key}`")))?;
        let rest = inner[at..].trim_start();
        rest.strip_prefix(':')
            .map(str::trim_start)
            .ok_or_else(|| bad(&format!("no value for `{key}`")))
    };

    let descr_raw = value_after("descr")?;
    let quote = descr_raw.chars().next().ok_or_else(|| bad("empty descr"))?;
    if quote != '\'' && quote != '"' {
        return Err(bad("descr is not a string"));
    }
    let end = descr_raw[1..].find(quote).ok_or_else(|| bad("unterminated descr"))?;
    let descr = descr_raw[1..1 + end].to_string();

    let fo = value_after("fortran_order")?;
    let fortran_order = if fo.starts_with("True") {
        true
    } else if fo.starts_with("False") {
        false
    } else {
        return Err(bad("fortran_order is not a bool"));
    };

    let shape_raw = value_after("shape")?;
    let shape_raw = shape_raw.strip_prefix('(').ok_or_else(|| bad("shape is not a tuple"))?;
    let close = shape_raw.find(')').ok_or_else(|| bad("unterminated shape"))?;
    let shape = shape_raw[..close]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.trim_end_matches('L').parse::<usize>().map_err(|_| bad("non-integer shape")))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Header { descr, fortran_order, shape })
}

/// Decodes a v1/v2 `.npy` buffer holding a 2-D array.
pub fn decode_npy(bytes: &[u8]) -> Result<NpyArray, FormatError> {
    let mut r = Reader::new(bytes);
    if r.take(MAGIC.len())? != MAGIC {
        return Err(FormatError::BadHeader("missing NUMPY magic".into()));
    }
    let version = r.take(2)?;
    let header_len = match version[0] {
        1 => r.u16()? as usize,
        2 | 3 => r.u32()? as usize,
        v => return Err(FormatError::BadHeader(format!("unsupported npy version {v}"))),
    };
    let header_bytes = r.take(header_len)?;
    let header_text =
        std::str::from_utf8(header_bytes).map_err(|_| FormatError::BadHeader("header is not text".into()))?;
    let header = parse_header_dict(header_text)?;
    let dtype = Dtype::parse(&header.descr)?;
    let (rows, cols) = match header.shape.as_slice() {
        [r, c] => (*r, *c),
        _ => return Err(FormatError::AmbiguousShape(header.shape.clone())),
    };
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| FormatError::BadHeader("shape overflows".into()))?;
    let need = count * dtype.size();
    if r.remaining() != need {
        return Err(FormatError::Truncated(format!(
            "shape {:?} needs {need} data bytes, found {}",
            header.shape,
            r.remaining()
        )));
    }
    let values: Vec<f64> = r.take(need)?.chunks_exact(dtype.size()).map(|b| dtype.decode(b)).collect();
    let data = if header.fortran_order {
        Array2::from_shape_vec((cols, rows), values).expect("size checked").reversed_axes().as_standard_layout().to_owned()
    } else {
        Array2::from_shape_vec((rows, cols), values).expect("size checked")
    };
    Ok(NpyArray { data, integer: dtype.is_integer() })
}

/// Encodes a matrix as a v1.0 `<f8` C-order `.npy`.
pub fn encode_npy(data: &Array2<f64>) -> Vec<u8> {
    let (rows, cols) = data.dim();
    let dict = format!("{{'descr': '<f8', 'fortran_order': False, 'shape': ({rows}, {cols}), }}");
    // magic + version + u16 length + dict + padding + newline is a multiple of 64
    let unpadded = MAGIC.len() + 2 + 2 + dict.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    let mut header = dict.into_bytes();
    header.extend(std::iter::repeat_n(b' ', pad));
    header.push(b'\n');

    let mut out = Vec::with_capacity(10 + header.len() + rows * cols * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(&header);
    for v in data.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Lead axis is whichever axis has 8, 12 or 15 entries; rows win a tie.
pub(crate) fn orient(data: Array2<f64>) -> Result<Array2<f64>, FormatError> {
    let (rows, cols) = data.dim();
    if is_lead_count(rows) {
        Ok(data)
    } else if is_lead_count(cols) {
        Ok(data.reversed_axes().as_standard_layout().to_owned())
    } else {
        Err(FormatError::AmbiguousShape(vec![rows, cols]))
    }
}

pub(crate) fn recording_from_array(
    array: NpyArray,
    format: SourceFormat,
    opts: &ParseOptions,
) -> Result<RawRecording, FormatError> {
    let samples = orient(array.data)?;
    let names = positional_leads(samples.nrows()).expect("orientation guarantees a lead count");
    let mut rec = RawRecording::new(names, samples, 1.0, format)?;
    if array.integer {
        rec.metadata.insert(META_UNITS.into(), UNITS_ADC.into());
    }
    resolve_rate(&mut rec, opts);
    Ok(rec)
}

pub fn parse_npy(bytes: &[u8], opts: &ParseOptions) -> Result<RawRecording, FormatError> {
    recording_from_array(decode_npy(bytes)?, SourceFormat::Npy, opts)
}

/// Reads the entry named `ecg` or `signal`, else the first `.npy` entry.
pub fn parse_npz(bytes: &[u8], opts: &ParseOptions) -> Result<RawRecording, FormatError> {
    let mut archive = zip::ZipArchive::new(Cursor::new(bytes))
        .map_err(|e| FormatError::Truncated(format!("bad zip archive: {e}")))?;
    let names: Vec<String> = archive.file_names().map(str::to_string).collect();
    let preferred = ["ecg.npy", "signal.npy", "ecg", "signal"];
    let chosen = preferred
        .iter()
        .find_map(|p| names.iter().find(|n| n.as_str() == *p))
        .or_else(|| {
            let mut npys: Vec<&String> = names.iter().filter(|n| n.ends_with(".npy")).collect();
            npys.sort_by_key(|n| archive_index(&names, n));
            npys.first().copied()
        })
        .cloned()
        .ok_or_else(|| FormatError::BadHeader("archive holds no .npy entry".into()))?;
    let mut entry = archive
        .by_name(&chosen)
        .map_err(|e| FormatError::Truncated(format!("cannot open `{chosen}`: {e}")))?;
    let mut buf = Vec::with_capacity(entry.size() as usize);
    entry
        .read_to_end(&mut buf)
        .map_err(|e| FormatError::Truncated(format!("cannot read `{chosen}`: {e}")))?;
    let mut rec = recording_from_array(decode_npy(&buf)?, SourceFormat::Npz, opts)?;
    rec.metadata.insert("npz_entry".into(), chosen);
    Ok(rec)
}

fn archive_index(names: &[String], name: &str) -> usize {
    names.iter().position(|n| n == name).unwrap_or(usize::MAX)
}
