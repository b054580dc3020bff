//! DICOM waveform objects (explicit VR little endian, 16-bit signed samples).

use ndarray::Array2;

use super::{FormatError, Reader};
use crate::signal::{RawRecording, SourceFormat, META_UNITS, UNITS_ADC};

const EXPLICIT_VR_LE: &str = "1.2.840.10008.1.2.1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Tag(u16, u16);

const TRANSFER_SYNTAX: Tag = Tag(0x0002, 0x0010);
const CODE_VALUE: Tag = Tag(0x0008, 0x0100);
const CODE_MEANING: Tag = Tag(0x0008, 0x0104);
const CHANNEL_COUNT: Tag = Tag(0x003A, 0x0005);
const SAMPLE_COUNT: Tag = Tag(0x003A, 0x0010);
const SAMPLING_FREQUENCY: Tag = Tag(0x003A, 0x001A);
const CHANNEL_DEFINITIONS: Tag = Tag(0x003A, 0x0200);
const CHANNEL_SOURCE: Tag = Tag(0x003A, 0x0208);
const CHANNEL_SENSITIVITY: Tag = Tag(0x003A, 0x0210);
const SENSITIVITY_UNITS: Tag = Tag(0x003A, 0x0211);
const SENSITIVITY_CORRECTION: Tag = Tag(0x003A, 0x0212);
const CHANNEL_BASELINE: Tag = Tag(0x003A, 0x0213);
const WAVEFORM_SEQUENCE: Tag = Tag(0x5400, 0x0100);
const BITS_ALLOCATED: Tag = Tag(0x5400, 0x1004);
const SAMPLE_INTERPRETATION: Tag = Tag(0x5400, 0x1006);
const WAVEFORM_DATA: Tag = Tag(0x5400, 0x1010);

const ITEM: Tag = Tag(0xFFFE, 0xE000);
const ITEM_END: Tag = Tag(0xFFFE, 0xE00D);
const SEQUENCE_END: Tag = Tag(0xFFFE, 0xE0DD);
const UNDEFINED: u32 = 0xFFFF_FFFF;

#[derive(Debug)]
enum Value<'a> {
    Bytes(&'a [u8]),
    Items(Vec<Dataset<'a>>),
}

#[derive(Debug)]
struct Element<'a> {
    tag: Tag,
    value: Value<'a>,
}

#[derive(Debug, Default)]
struct Dataset<'a> {
    elements: Vec<Element<'a>>,
}

impl<'a> Dataset<'a> {
    fn get(&self, tag: Tag) -> Option<&Value<'a>> {
        self.elements.iter().find(|e| e.tag == tag).map(|e| &e.value)
    }

    fn bytes(&self, tag: Tag) -> Option<&'a [u8]> {
        match self.get(tag) {
            Some(Value::Bytes(b)) => Some(b),
            _ => None,
        }
    }

    fn items(&self, tag: Tag) -> Option<&[Dataset<'a>]> {
        match self.get(tag) {
            Some(Value::Items(items)) => Some(items),
            _ => None,
        }
    }

    fn string(&self, tag: Tag) -> Option<String> {
        self.bytes(tag)
            .map(|b| String::from_utf8_lossy(b).trim_matches(|c: char| c == '\0' || c.is_whitespace()).to_string())
    }

    /// First value of a decimal string (DS) element.
    fn decimal(&self, tag: Tag) -> Result<Option<f64>, FormatError> {
        self.string(tag)
            .map(|s| {
                let first = s.split('\\').next().unwrap_or_default().trim().to_string();
                first
                    .parse::<f64>()
                    .map_err(|_| FormatError::BadHeader(format!("bad decimal `{s}` in {tag:?}")))
            })
            .transpose()
    }

    fn u16(&self, tag: Tag) -> Option<u16> {
        self.bytes(tag).filter(|b| b.len() >= 2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&self, tag: Tag) -> Option<u32> {
        self.bytes(tag).filter(|b| b.len() >= 4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn long_length_vr(vr: &[u8]) -> bool {
    matches!(vr, b"OB" | b"OD" | b"OF" | b"OL" | b"OV" | b"OW" | b"SQ" | b"SV" | b"UC" | b"UN" | b"UR" | b"UT" | b"UV")
}

fn read_tag(r: &mut Reader<'_>) -> Result<Tag, FormatError> {
    Ok(Tag(r.u16()?, r.u16()?))
}

/// Reads explicit-VR elements until the buffer ends or, inside an undefined-length
/// item, until the item delimiter.
fn read_dataset<'a>(r: &mut Reader<'a>, until_item_end: bool, depth: usize) -> Result<Dataset<'a>, FormatError> {
    if depth > 16 {
        return Err(FormatError::BadHeader("sequences nested too deeply".into()));
    }
    let mut ds = Dataset::default();
    loop {
        if r.is_empty() {
            if until_item_end {
                return Err(FormatError::Truncated("item has no delimiter".into()));
            }
            return Ok(ds);
        }
        let tag = read_tag(r)?;
        if tag == ITEM_END {
            r.skip(4)?;
            if until_item_end {
                return Ok(ds);
            }
            return Err(FormatError::BadHeader("stray item delimiter".into()));
        }
        let vr = r.take(2)?;
        if !vr.iter().all(u8::is_ascii_uppercase) {
            return Err(FormatError::UnsupportedTransferSyntax(
                "element without explicit VR (implicit VR data?)".into(),
            ));
        }
        let len = if long_length_vr(vr) {
            r.skip(2)?;
            r.u32()?
        } else {
            r.u16()? as u32
        };
        let value = if vr == b"SQ" {
            Value::Items(read_sequence(r, len, depth)?)
        } else {
            if len == UNDEFINED {
                return Err(FormatError::UnsupportedTransferSyntax("encapsulated pixel/waveform data".into()));
            }
            Value::Bytes(r.take(len as usize)?)
        };
        ds.elements.push(Element { tag, value });
    }
}

fn read_sequence<'a>(r: &mut Reader<'a>, len: u32, depth: usize) -> Result<Vec<Dataset<'a>>, FormatError> {
    let mut items = Vec::new();
    if len == UNDEFINED {
        loop {
            let tag = read_tag(r)?;
            let item_len = r.u32()?;
            match tag {
                SEQUENCE_END => return Ok(items),
                ITEM => items.push(read_item(r, item_len, depth)?),
                other => return Err(FormatError::BadHeader(format!("unexpected {other:?} in sequence"))),
            }
        }
    }
    let body = r.take(len as usize)?;
    let mut inner = Reader::new(body);
    while !inner.is_empty() {
        let tag = read_tag(&mut inner)?;
        let item_len = inner.u32()?;
        if tag != ITEM {
            return Err(FormatError::BadHeader(format!("unexpected {tag:?} in sequence")));
        }
        items.push(read_item(&mut inner, item_len, depth)?);
    }
    Ok(items)
}

fn read_item<'a>(r: &mut Reader<'a>, len: u32, depth: usize) -> Result<Dataset<'a>, FormatError> {
    if len == UNDEFINED {
        read_dataset(r, true, depth + 1)
    } else {
        let body = r.take(len as usize)?;
        read_dataset(&mut Reader::new(body), false, depth + 1)
    }
}

/// Lead label from a channel source code meaning such as `"Lead aVR"` or `"Lead I (Einthoven)"`.
fn lead_label(meaning: &str) -> String {
    let without_note = meaning.split('(').next().unwrap_or(meaning);
    let trimmed = without_note.trim();
    let trimmed = trimmed
        .strip_prefix("Lead ")
        .or_else(|| trimmed.strip_prefix("lead "))
        .unwrap_or(trimmed);
    trimmed.trim().to_string()
}

/// Decodes the first multiplex group of a DICOM waveform object.
pub fn parse_dicom(bytes: &[u8]) -> Result<RawRecording, FormatError> {
    let mut r = Reader::new(bytes);
    r.skip(128)?;
    if r.take(4)? != b"DICM" {
        return Err(FormatError::BadHeader("missing DICM preamble".into()));
    }

    // file meta group is always explicit VR little endian
    let mut transfer_syntax = None;
    loop {
        if r.remaining() < 2 {
            break;
        }
        let group = u16::from_le_bytes([bytes[r.pos()], bytes[r.pos() + 1]]);
        if group != 0x0002 {
            break;
        }
        let tag = read_tag(&mut r)?;
        let vr = r.take(2)?;
        let len = if long_length_vr(vr) {
            r.skip(2)?;
            r.u32()? as usize
        } else {
            r.u16()? as usize
        };
        let value = r.take(len)?;
        if tag == TRANSFER_SYNTAX {
            transfer_syntax = Some(String::from_utf8_lossy(value).trim_end_matches(['\0', ' ']).to_string());
        }
    }
    let ts = transfer_syntax.ok_or_else(|| FormatError::BadHeader("no transfer syntax in file meta".into()))?;
    if ts != EXPLICIT_VR_LE {
        return Err(FormatError::UnsupportedTransferSyntax(ts));
    }

    let dataset = read_dataset(&mut r, false, 0)?;
    let group = dataset
        .items(WAVEFORM_SEQUENCE)
        .and_then(|items| items.first())
        .ok_or(FormatError::MissingWaveform)?;

    let n_channels = group
        .u16(CHANNEL_COUNT)
        .ok_or_else(|| FormatError::BadHeader("missing channel count".into()))? as usize;
    let n_samples = group
        .u32(SAMPLE_COUNT)
        .ok_or_else(|| FormatError::BadHeader("missing sample count".into()))? as usize;
    let rate = group
        .decimal(SAMPLING_FREQUENCY)?
        .ok_or_else(|| FormatError::BadHeader("missing sampling frequency".into()))?;
    let bits = group
        .u16(BITS_ALLOCATED)
        .ok_or_else(|| FormatError::UnsupportedBits("bits allocated missing".into()))?;
    if bits != 16 {
        return Err(FormatError::UnsupportedBits(format!("{bits} bits allocated")));
    }
    let interpretation = group.string(SAMPLE_INTERPRETATION).unwrap_or_default();
    if interpretation != "SS" {
        return Err(FormatError::UnsupportedBits(format!("sample interpretation `{interpretation}`")));
    }
    let channels = group
        .items(CHANNEL_DEFINITIONS)
        .ok_or_else(|| FormatError::BadHeader("missing channel definition sequence".into()))?;
    if channels.len() != n_channels || n_channels == 0 || n_samples == 0 {
        return Err(FormatError::BadHeader(format!(
            "{} channel definitions for {n_channels} channels",
            channels.len()
        )));
    }
    let data = group.bytes(WAVEFORM_DATA).ok_or(FormatError::MissingWaveform)?;
    let need = n_channels * n_samples * 2;
    if data.len() < need {
        return Err(FormatError::Truncated(format!("waveform data has {} of {need} bytes", data.len())));
    }

    let mut names = Vec::with_capacity(n_channels);
    let mut mv_per_unit = Vec::with_capacity(n_channels);
    let mut baselines = Vec::with_capacity(n_channels);
    for (i, ch) in channels.iter().enumerate() {
        let meaning = ch
            .items(CHANNEL_SOURCE)
            .and_then(|s| s.first())
            .and_then(|s| s.string(CODE_MEANING))
            .unwrap_or_else(|| format!("channel{i}"));
        names.push(lead_label(&meaning));
        let sensitivity = ch.decimal(CHANNEL_SENSITIVITY)?.unwrap_or(1.0);
        let correction = ch.decimal(SENSITIVITY_CORRECTION)?.unwrap_or(1.0);
        let unit = ch
            .items(SENSITIVITY_UNITS)
            .and_then(|u| u.first())
            .and_then(|u| u.string(CODE_VALUE))
            .unwrap_or_else(|| "mV".to_string());
        let to_mv = match unit.as_str() {
            "mV" => 1.0,
            "uV" | "µV" => 1e-3,
            "V" => 1e3,
            other => return Err(FormatError::BadHeader(format!("unsupported sensitivity unit `{other}`"))),
        };
        let per_unit = sensitivity * correction * to_mv;
        if !(per_unit > 0.0) {
            return Err(FormatError::BadHeader(format!("non-positive sensitivity on channel {i}")));
        }
        mv_per_unit.push(per_unit);
        // The channel baseline is an offset in sensitivity units added after scaling;
        // stored as the equivalent offset in sample units, it is subtracted before.
        let offset_mv = ch.decimal(CHANNEL_BASELINE)?.unwrap_or(0.0) * to_mv;
        baselines.push(if offset_mv == 0.0 { 0.0 } else { -offset_mv / per_unit });
    }

    let mut samples = Array2::<f64>::zeros((n_channels, n_samples));
    for (k, chunk) in data[..need].chunks_exact(2).enumerate() {
        samples[[k % n_channels, k / n_channels]] = i16::from_le_bytes([chunk[0], chunk[1]]) as f64;
    }

    let uniform = mv_per_unit.iter().all(|&s| (s - mv_per_unit[0]).abs() <= 1e-12 * s.abs());
    let mut rec = RawRecording::new(names, samples, rate, SourceFormat::Dicom)?;
    if uniform {
        rec.adc_gain = Some(1.0 / mv_per_unit[0]);
        rec.baseline = baselines;
        rec.metadata.insert(META_UNITS.into(), UNITS_ADC.into());
    } else {
        // channels disagree on sensitivity: convert to millivolts here
        for (i, mut row) in rec.samples.rows_mut().into_iter().enumerate() {
            let (s, b) = (mv_per_unit[i], baselines[i]);
            row.mapv_inplace(|v| (v - b) * s);
        }
        rec.metadata.insert(META_UNITS.into(), "mV".into());
    }
    rec.metadata.insert("transfer_syntax".into(), ts);
    Ok(rec)
}
