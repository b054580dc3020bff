//! MATLAB level-5 MAT-files (little endian, uncompressed).

use ndarray::Array2;

use super::npy::orient;
use super::{positional_leads, resolve_rate, FormatError, ParseOptions, Reader};
use crate::signal::{RawRecording, SourceFormat, META_UNITS, UNITS_ADC};

const MI_INT8: u32 = 1;
const MI_UINT8: u32 = 2;
const MI_INT16: u32 = 3;
const MI_UINT16: u32 = 4;
const MI_INT32: u32 = 5;
const MI_UINT32: u32 = 6;
const MI_SINGLE: u32 = 7;
const MI_DOUBLE: u32 = 9;
const MI_INT64: u32 = 12;
const MI_UINT64: u32 = 13;
const MI_MATRIX: u32 = 14;
const MI_COMPRESSED: u32 = 15;

const MX_DOUBLE: u8 = 6;
const MX_SINGLE: u8 = 7;
const MX_UINT32: u8 = 13;

const COMPLEX_FLAG: u32 = 0x0800;

/// Variable names read as the sampling rate when they hold a scalar.
const RATE_NAMES: &[&str] = &["fs", "Fs", "FS", "sampling_rate", "sampling_rate_hz", "freq", "frequency"];

struct Variable {
    name: String,
    dims: Vec<usize>,
    /// Column-major values.
    values: Vec<f64>,
    integer: bool,
}

/// Reads one tag, handling the packed small-element form.
fn read_element<'a>(r: &mut Reader<'a>) -> Result<(u32, &'a [u8]), FormatError> {
    let first = r.u32()?;
    if first >> 16 != 0 {
        let (ty, n) = (first & 0xFFFF, (first >> 16) as usize);
        if n > 4 {
            return Err(FormatError::BadHeader(format!("small element claims {n} bytes")));
        }
        let body = r.take(4)?;
        return Ok((ty, &body[..n]));
    }
    let n = r.u32()? as usize;
    let body = r.take(n)?;
    let pad = (8 - n % 8) % 8;
    // the final element of a file may omit trailing padding
    r.skip(pad.min(r.remaining()))?;
    Ok((first, body))
}

fn numeric_values(ty: u32, body: &[u8]) -> Result<Vec<f64>, FormatError> {
    fn chunks<const N: usize>(body: &[u8], f: impl Fn([u8; N]) -> f64) -> Result<Vec<f64>, FormatError> {
        if body.len() % N != 0 {
            return Err(FormatError::Truncated(format!("{} bytes is not a multiple of {N}", body.len())));
        }
        Ok(body.chunks_exact(N).map(|c| f(c.try_into().unwrap())).collect())
    }
    match ty {
        MI_INT8 => chunks::<1>(body, |b| i8::from_le_bytes(b) as f64),
        MI_UINT8 => chunks::<1>(body, |b| b[0] as f64),
        MI_INT16 => chunks::<2>(body, |b| i16::from_le_bytes(b) as f64),
        MI_UINT16 => chunks::<2>(body, |b| u16::from_le_bytes(b) as f64),
        MI_INT32 => chunks::<4>(body, |b| i32::from_le_bytes(b) as f64),
        MI_UINT32 => chunks::<4>(body, |b| u32::from_le_bytes(b) as f64),
        MI_SINGLE => chunks::<4>(body, |b| f32::from_le_bytes(b) as f64),
        MI_DOUBLE => chunks::<8>(body, f64::from_le_bytes),
        MI_INT64 => chunks::<8>(body, |b| i64::from_le_bytes(b) as f64),
        MI_UINT64 => chunks::<8>(body, |b| u64::from_le_bytes(b) as f64),
        other => Err(FormatError::BadHeader(format!("unexpected data type {other}"))),
    }
}

/// Decodes a miMATRIX body. Returns `None` for non-numeric classes.
fn read_matrix(body: &[u8]) -> Result<Option<Variable>, FormatError> {
    if body.is_empty() {
        return Ok(None);
    }
    let mut r = Reader::new(body);
    let (ty, flags) = read_element(&mut r)?;
    if ty != MI_UINT32 || flags.len() < 8 {
        return Err(FormatError::BadHeader("matrix without array flags".into()));
    }
    let flag_word = u32::from_le_bytes(flags[..4].try_into().unwrap());
    let class = (flag_word & 0xFF) as u8;
    if !(MX_DOUBLE..=MX_UINT32).contains(&class) {
        return Ok(None);
    }
    if flag_word & COMPLEX_FLAG != 0 {
        return Ok(None);
    }
    let (ty, dims_raw) = read_element(&mut r)?;
    if ty != MI_INT32 {
        return Err(FormatError::BadHeader("bad dimensions element".into()));
    }
    let dims: Vec<usize> = numeric_values(MI_INT32, dims_raw)?
        .into_iter()
        .map(|d| if d < 0.0 { Err(FormatError::BadHeader("negative dimension".into())) } else { Ok(d as usize) })
        .collect::<Result<_, _>>()?;
    let (_, name_raw) = read_element(&mut r)?;
    let name = String::from_utf8_lossy(name_raw).to_string();
    let (ty, real) = read_element(&mut r)?;
    let values = numeric_values(ty, real)?;
    let count: usize = dims.iter().product();
    if values.len() != count {
        return Err(FormatError::Truncated(format!(
            "variable `{name}` declares {count} values, holds {}",
            values.len()
        )));
    }
    let integer = !matches!(class, MX_DOUBLE | MX_SINGLE);
    Ok(Some(Variable { name, dims, values, integer }))
}

pub fn parse_mat(bytes: &[u8], opts: &ParseOptions) -> Result<RawRecording, FormatError> {
    if bytes.starts_with(b"MATLAB 7.3") {
        return Err(FormatError::UnsupportedMatVersion("v7.3 (HDF5) files are not supported".into()));
    }
    let mut r = Reader::new(bytes);
    let header = r.take(128)?;
    if !header.starts_with(b"MATLAB 5.0 MAT-file") {
        return Err(FormatError::UnsupportedMatVersion("missing level 5 header text".into()));
    }
    let endian = &header[126..128];
    if endian == b"MI" {
        return Err(FormatError::UnsupportedMatVersion("big-endian files are not supported".into()));
    }
    if endian != b"IM" {
        return Err(FormatError::BadHeader("bad endian indicator".into()));
    }
    let version = u16::from_le_bytes([header[124], header[125]]);
    if version != 0x0100 {
        return Err(FormatError::UnsupportedMatVersion(format!("version word {version:#06x}")));
    }

    let mut signal: Option<Variable> = None;
    let mut rate: Option<f64> = None;
    while !r.is_empty() {
        let (ty, body) = read_element(&mut r)?;
        match ty {
            MI_COMPRESSED => {
                return Err(FormatError::UnsupportedMatVersion("compressed variables (v7) are not supported".into()))
            }
            MI_MATRIX => {
                let Some(var) = read_matrix(body)? else { continue };
                if var.values.len() == 1 {
                    if rate.is_none() && RATE_NAMES.contains(&var.name.as_str()) {
                        rate = Some(var.values[0]);
                    }
                } else if signal.is_none() && var.dims.len() == 2 {
                    signal = Some(var);
                }
            }
            _ => {}
        }
    }

    let var = signal.ok_or(FormatError::NoNumericVariable)?;
    let (rows, cols) = (var.dims[0], var.dims[1]);
    let data = Array2::from_shape_fn((rows, cols), |(i, j)| var.values[i + j * rows]);
    let samples = orient(data)?;
    let names = positional_leads(samples.nrows()).expect("orientation guarantees a lead count");
    let mut rec = RawRecording::new(names, samples, 1.0, SourceFormat::Mat)?;
    if var.integer {
        rec.metadata.insert(META_UNITS.into(), UNITS_ADC.into());
    }
    rec.metadata.insert("mat_variable".into(), var.name);
    match rate {
        Some(fs) if fs > 0.0 && opts.sampling_rate_hz.is_none() => rec.sampling_rate_hz = fs,
        _ => resolve_rate(&mut rec, opts),
    }
    Ok(rec)
}
