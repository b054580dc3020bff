//! PhysioNet WFDB records: a `.hea` text header plus a format-16 `.dat` signal file.

use ndarray::Array2;

use super::FormatError;
use crate::signal::{RawRecording, SourceFormat, META_UNITS, UNITS_ADC};

/// Gain WFDB assumes when the header gives 0 or omits it.
const WFDB_DEFAULT_GAIN: f64 = 200.0;

#[derive(Debug)]
struct SignalSpec {
    file: String,
    gain: f64,
    baseline: f64,
    units: Option<String>,
    description: String,
}

fn parse_signal_line(line: &str, index: usize) -> Result<SignalSpec, FormatError> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() < 2 {
        return Err(FormatError::BadHeader(format!("signal line {index} is incomplete")));
    }
    let format_field = fields[1];
    let format_digits: String = format_field.chars().take_while(|c| c.is_ascii_digit()).collect();
    if format_digits != "16" || format_field.len() != 2 {
        return Err(FormatError::UnsupportedWfdbFormat(format_field.to_string()));
    }

    // adc_zero (field 5) is the default baseline
    let adc_zero: f64 = fields
        .get(4)
        .map(|z| z.parse().map_err(|_| FormatError::BadHeader(format!("bad adc zero `{z}`"))))
        .transpose()?
        .unwrap_or(0.0);

    let (gain, baseline, units) = match fields.get(2) {
        None => (WFDB_DEFAULT_GAIN, adc_zero, None),
        Some(spec) => {
            let (gain_part, units) = match spec.split_once('/') {
                Some((g, u)) => (g, Some(u.to_string())),
                None => (*spec, None),
            };
            let (gain_str, baseline) = match gain_part.split_once('(') {
                Some((g, rest)) => {
                    let b = rest
                        .strip_suffix(')')
                        .ok_or_else(|| FormatError::BadHeader(format!("bad baseline in `{spec}`")))?;
                    let b: f64 = b.parse().map_err(|_| FormatError::BadHeader(format!("bad baseline `{b}`")))?;
                    (g, b)
                }
                None => (gain_part, adc_zero),
            };
            let gain: f64 = gain_str
                .parse()
                .map_err(|_| FormatError::BadHeader(format!("bad gain `{gain_str}`")))?;
            let gain = if gain == 0.0 { WFDB_DEFAULT_GAIN } else { gain };
            (gain, baseline, units)
        }
    };
    if gain < 0.0 {
        return Err(FormatError::BadHeader(format!("negative gain on signal {index}")));
    }
    let description = if fields.len() > 8 { fields[8..].join(" ") } else { format!("sig{index}") };
    Ok(SignalSpec { file: fields[0].to_string(), gain, baseline, units, description })
}

/// Decodes a WFDB record. Samples are stored as `raw - baseline` with the
/// per-record gain kept in `adc_gain`.
pub fn parse_wfdb(header_bytes: &[u8], dat_bytes: &[u8]) -> Result<RawRecording, FormatError> {
    let text = std::str::from_utf8(header_bytes).map_err(|_| FormatError::BadHeader("header is not text".into()))?;
    let mut lines = text
        .split_inclusive('\n')
        .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'));

    let record_line = lines.next().ok_or_else(|| FormatError::BadHeader("empty header".into()))?;
    let fields: Vec<&str> = record_line.split_whitespace().collect();
    if fields.len() < 4 {
        return Err(FormatError::BadHeader(
            "record line must be `name n_sig fs n_samples`".into(),
        ));
    }
    if fields[0].contains('/') {
        return Err(FormatError::BadHeader("multi-segment records are not supported".into()));
    }
    let n_sig: usize = fields[1].parse().map_err(|_| FormatError::BadHeader(format!("bad n_sig `{}`", fields[1])))?;
    let fs_str = fields[2].split('/').next().unwrap_or_default();
    let fs_str = fs_str.split('(').next().unwrap_or_default();
    let fs: f64 = fs_str.parse().map_err(|_| FormatError::BadHeader(format!("bad frequency `{}`", fields[2])))?;
    if !(fs > 0.0) {
        return Err(FormatError::BadHeader(format!("non-positive frequency {fs}")));
    }
    let n_samples: usize = fields[3]
        .parse()
        .map_err(|_| FormatError::BadHeader(format!("bad sample count `{}`", fields[3])))?;
    if n_sig == 0 || n_samples == 0 {
        return Err(FormatError::BadHeader("record has no signals or samples".into()));
    }

    let mut specs = Vec::with_capacity(n_sig);
    for i in 0..n_sig {
        let line = lines
            .next()
            .ok_or_else(|| FormatError::Truncated(format!("header lists {} of {n_sig} signals", specs.len())))?;
        if !line.ends_with('\n') {
            return Err(FormatError::Truncated(format!("signal line {i} is not terminated")));
        }
        specs.push(parse_signal_line(line, i)?);
    }
    if specs.iter().any(|s| s.file != specs[0].file) {
        return Err(FormatError::BadHeader("signals spread over several files are not supported".into()));
    }
    let gain = specs[0].gain;

    let expected = n_sig * n_samples * 2;
    if dat_bytes.len() != expected {
        return Err(FormatError::HeaderMismatch(format!(
            "{n_sig} signals x {n_samples} samples need {expected} bytes, signal file has {}",
            dat_bytes.len()
        )));
    }

    let mut samples = Array2::<f64>::zeros((n_sig, n_samples));
    for (k, chunk) in dat_bytes.chunks_exact(2).enumerate() {
        let raw = i16::from_le_bytes([chunk[0], chunk[1]]) as f64;
        let (t, sig) = (k / n_sig, k % n_sig);
        samples[[sig, t]] = raw - specs[sig].baseline;
    }
    // fold differing per-signal gains into the samples so one record gain applies
    for (sig, spec) in specs.iter().enumerate() {
        if spec.gain != gain {
            let factor = gain / spec.gain;
            samples.row_mut(sig).mapv_inplace(|v| v * factor);
        }
    }

    let names = specs.iter().map(|s| s.description.clone()).collect();
    let mut rec = RawRecording::new(names, samples, fs, SourceFormat::Wfdb)?;
    rec.adc_gain = Some(gain);
    rec.metadata.insert(META_UNITS.into(), UNITS_ADC.into());
    rec.metadata.insert("record_name".into(), fields[0].to_string());
    let baselines: Vec<String> = specs.iter().map(|s| s.baseline.to_string()).collect();
    rec.metadata.insert("baseline".into(), baselines.join(","));
    if let Some(units) = specs[0].units.as_ref() {
        rec.metadata.insert("physical_units".into(), units.clone());
    }
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_signal_record() -> (String, Vec<u8>) {
        let header = "rec 2 500 3\n\
                      rec.dat 16 200(0)/mV 16 0 100 0 0 I\n\
                      rec.dat 16 200(0)/mV 16 0 -100 0 0 II\n";
        let raw: [i16; 6] = [100, -100, 50, -50, 0, 7];
        let dat = raw.iter().flat_map(|v| v.to_le_bytes()).collect();
        (header.to_string(), dat)
    }

    #[test]
    fn decodes_interleaved_samples() {
        let (h, d) = two_signal_record();
        let rec = parse_wfdb(h.as_bytes(), &d).unwrap();
        assert_eq!(rec.lead_names, vec!["I", "II"]);
        assert_eq!(rec.sampling_rate_hz, 500.0);
        assert_eq!(rec.adc_gain, Some(200.0));
        assert_eq!(rec.samples.row(0).to_vec(), vec![100.0, 50.0, 0.0]);
        assert_eq!(rec.samples.row(1).to_vec(), vec![-100.0, -50.0, 7.0]);
    }

    #[test]
    fn baseline_is_subtracted() {
        let header = "r 1 250 2\nr.dat 16 1000(24)/mV 16 0 0 0 0 V1\n";
        let dat: Vec<u8> = [1024i16, 24].iter().flat_map(|v| v.to_le_bytes()).collect();
        let rec = parse_wfdb(header.as_bytes(), &dat).unwrap();
        assert_eq!(rec.samples.row(0).to_vec(), vec![1000.0, 0.0]);
    }

    #[test]
    fn rejects_other_formats() {
        let header = "r 1 360 2\nr.dat 212 200 11 1024 0 0 0 MLII\n";
        assert_eq!(parse_wfdb(header.as_bytes(), &[0; 3]), Err(FormatError::UnsupportedWfdbFormat("212".into())));
    }

    #[test]
    fn length_mismatch() {
        let (h, mut d) = two_signal_record();
        d.pop();
        assert!(matches!(parse_wfdb(h.as_bytes(), &d), Err(FormatError::HeaderMismatch(_))));
        let h4 = h.replacen("rec 2 500 3", "rec 2 500 4", 1);
        assert!(matches!(parse_wfdb(h4.as_bytes(), &d), Err(FormatError::HeaderMismatch(_))));
    }

    #[test]
    fn missing_signal_lines() {
        let (h, d) = two_signal_record();
        let cut: String = h.lines().take(2).map(|l| format!("{l}\n")).collect();
        assert!(matches!(parse_wfdb(cut.as_bytes(), &d), Err(FormatError::Truncated(_))));
    }

    #[test]
    fn comments_are_skipped() {
        let (h, d) = two_signal_record();
        let with_comments = format!("# made by hand\n{h}# age: 60\n");
        assert_eq!(parse_wfdb(with_comments.as_bytes(), &d).unwrap().n_leads(), 2);
    }
}
