//! Delimited text: one column per lead, one row per sample.
//!
//! Leading `# key=value` comment lines carry optional metadata
//! (`sampling_rate_hz`, `adc_gain`, `units`, `baseline`, `n_samples`); other
//! keys are copied into the recording metadata. When `n_samples` is
//! declared the body must have exactly that many rows and end with a newline,
//! which lets truncated files be rejected.

use std::collections::BTreeMap;

use ndarray::Array2;

use super::{add_warning, is_lead_count, positional_leads, resolve_rate, FormatError, ParseOptions};
use crate::signal::{LeadToken, RawRecording, SourceFormat, META_UNITS, UNITS_ADC};

/// Comment keys interpreted by the reader; any other key is kept as metadata.
pub(crate) const RESERVED_KEYS: &[&str] = &["sampling_rate_hz", "n_samples", "adc_gain", "units", "baseline"];

const TIME_COLUMNS: &[&str] = &["time", "t", "index", "sample", "samples"];

pub fn parse_csv(bytes: &[u8], opts: &ParseOptions) -> Result<RawRecording, FormatError> {
    let text = std::str::from_utf8(bytes).map_err(|e| FormatError::MalformedCsv(format!("not UTF-8: {e}")))?;
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);

    let mut meta = BTreeMap::new();
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).peekable();
    while let Some((_, line)) = lines.peek() {
        let Some(comment) = line.trim_start().strip_prefix('#') else { break };
        if let Some((k, v)) = comment.split_once('=') {
            meta.insert(k.trim().to_string(), v.trim().to_string());
        }
        lines.next();
    }

    let Some(&(_, first)) = lines.peek() else {
        return Err(FormatError::MalformedCsv("no data rows".into()));
    };
    let delim = if first.contains(';') && !first.contains(',') { ';' } else { ',' };
    let split = |line: &str| -> Vec<String> { line.split(delim).map(|c| c.trim().trim_matches('"').to_string()).collect() };

    let first_cells = split(first);
    let has_header = first_cells.iter().any(|c| c.parse::<f64>().is_err());
    let header = if has_header {
        lines.next();
        Some(first_cells)
    } else {
        None
    };

    // drop a leading time/index column when it is labeled as such
    let skip_first = header
        .as_ref()
        .and_then(|h| h.first())
        .is_some_and(|c| TIME_COLUMNS.contains(&c.to_ascii_lowercase().as_str()));
    let offset = usize::from(skip_first);

    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (lineno, line) in lines {
        let cells = split(line);
        match width {
            None => {
                width = Some(cells.len());
                columns = vec![Vec::new(); cells.len().saturating_sub(offset)];
            }
            Some(w) if w != cells.len() => {
                return Err(FormatError::MalformedCsv(format!(
                    "line {}: expected {w} cells, found {}",
                    lineno + 1,
                    cells.len()
                )));
            }
            _ => {}
        }
        for (col, cell) in cells.iter().skip(offset).enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| FormatError::MalformedCsv(format!("line {}: `{cell}` is not a number", lineno + 1)))?;
            columns[col].push(v);
        }
    }
    let n_samples = columns.first().map_or(0, Vec::len);
    if n_samples == 0 || columns.is_empty() {
        return Err(FormatError::MalformedCsv("no data rows".into()));
    }

    if let Some(declared) = meta.get("n_samples") {
        let declared: usize = declared
            .parse()
            .map_err(|_| FormatError::MalformedCsv(format!("bad n_samples `{declared}`")))?;
        if declared != n_samples || !text.ends_with('\n') {
            return Err(FormatError::Truncated(format!(
                "declared {declared} rows, found {n_samples}{}",
                if text.ends_with('\n') { "" } else { " (no final newline)" }
            )));
        }
    }

    let n_cols = columns.len();
    let by_name = header.as_ref().and_then(|h| {
        let names: Vec<String> = h.iter().skip(offset).cloned().collect();
        let all_leads = names.len() == n_cols
            && names.iter().all(|n| !matches!(LeadToken::classify(n), LeadToken::Unknown));
        all_leads.then_some(names)
    });
    let renamed_positionally = header.is_some() && by_name.is_none();
    let lead_names = match by_name {
        Some(names) => names,
        None if is_lead_count(n_cols) => positional_leads(n_cols).expect("lead count checked"),
        None => {
            return Err(FormatError::MalformedCsv(format!(
                "{n_cols} columns without recognizable lead names"
            )))
        }
    };

    let flat: Vec<f64> = columns.into_iter().flatten().collect();
    let samples = Array2::from_shape_vec((n_cols, n_samples), flat).expect("columns share a length");
    let mut rec = RawRecording::new(lead_names, samples, 1.0, SourceFormat::Csv)?;

    let declared_rate = meta
        .get("sampling_rate_hz")
        .map(|r| r.parse::<f64>().map_err(|_| FormatError::MalformedCsv(format!("bad sampling_rate_hz `{r}`"))))
        .transpose()?;
    resolve_rate(&mut rec, &ParseOptions { sampling_rate_hz: opts.sampling_rate_hz.or(declared_rate) });
    if let Some(g) = meta.get("adc_gain") {
        let g: f64 = g.parse().map_err(|_| FormatError::MalformedCsv(format!("bad adc_gain `{g}`")))?;
        rec.adc_gain = Some(g);
        rec.metadata.insert(META_UNITS.into(), UNITS_ADC.into());
    }
    if let Some(units) = meta.get("units") {
        rec.metadata.insert(META_UNITS.into(), units.clone());
    }
    if let Some(b) = meta.get("baseline") {
        let baseline = b
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<Vec<f64>, _>>()
            .map_err(|_| FormatError::MalformedCsv(format!("bad baseline `{b}`")))?;
        if baseline.len() != rec.n_leads() {
            return Err(FormatError::MalformedCsv(format!("{} baseline values for {} leads", baseline.len(), rec.n_leads())));
        }
        rec.baseline = baseline;
    }
    for (k, v) in meta.iter().filter(|(k, _)| !RESERVED_KEYS.contains(&k.as_str())) {
        rec.metadata.insert(k.clone(), v.clone());
    }
    if renamed_positionally {
        add_warning(&mut rec, "header names are not leads; columns assigned positionally");
    }
    rec.validate()?;
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats::warnings;
    use crate::signal::Lead;

    fn twelve_lead_csv(rows: usize, header: bool) -> String {
        let mut s = String::new();
        if header {
            s.push_str(&Lead::canonical_names().join(","));
            s.push('\n');
        }
        for r in 0..rows {
            let row: Vec<String> = (0..12).map(|c| format!("{}", r as f64 * 0.5 + c as f64)).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    #[test]
    fn header_maps_leads() {
        let rec = parse_csv(twelve_lead_csv(1000, true).as_bytes(), &ParseOptions::default()).unwrap();
        assert_eq!(rec.n_leads(), 12);
        assert_eq!(rec.n_samples(), 1000);
        assert_eq!(rec.lead_names, Lead::canonical_names());
        assert_eq!(rec.samples[[3, 2]], 4.0);
        assert_eq!(rec.sampling_rate_hz, 500.0);
        assert_eq!(warnings(&rec).len(), 1);
    }

    #[test]
    fn headerless_is_positional() {
        let rec = parse_csv(twelve_lead_csv(20, false).as_bytes(), &ParseOptions { sampling_rate_hz: Some(250.0) }).unwrap();
        assert_eq!(rec.lead_names, Lead::canonical_names());
        assert_eq!(rec.sampling_rate_hz, 250.0);
        assert!(warnings(&rec).is_empty());
    }

    #[test]
    fn semicolons_and_time_column() {
        let csv = "time;II;I;V1;V2;V3;V4;V5;V6\n0;1;2;3;4;5;6;7;8\n0.002;1;2;3;4;5;6;7;8\n";
        let rec = parse_csv(csv.as_bytes(), &ParseOptions::default()).unwrap();
        assert_eq!(rec.n_leads(), 8);
        assert_eq!(rec.lead_names[0], "II");
        assert_eq!(rec.samples[[1, 0]], 2.0);
    }

    #[test]
    fn bad_cells_and_ragged_rows() {
        let bad = "I,II\n1,abc\n";
        assert!(matches!(parse_csv(bad.as_bytes(), &ParseOptions::default()), Err(FormatError::MalformedCsv(_))));
        let ragged = "I,II\n1,2\n3\n";
        assert!(matches!(parse_csv(ragged.as_bytes(), &ParseOptions::default()), Err(FormatError::MalformedCsv(_))));
        assert!(matches!(parse_csv(b"", &ParseOptions::default()), Err(FormatError::MalformedCsv(_))));
        let seven = "1,2,3,4,5,6,7\n";
        assert!(matches!(parse_csv(seven.as_bytes(), &ParseOptions::default()), Err(FormatError::MalformedCsv(_))));
    }

    #[test]
    fn declared_row_count_is_enforced() {
        let csv = format!("# sampling_rate_hz=100\n# n_samples=3\n{}", twelve_lead_csv(3, true));
        let rec = parse_csv(csv.as_bytes(), &ParseOptions::default()).unwrap();
        assert_eq!(rec.sampling_rate_hz, 100.0);
        let cut = &csv[..csv.len() - 1];
        assert!(matches!(parse_csv(cut.as_bytes(), &ParseOptions::default()), Err(FormatError::Truncated(_))));
    }

    #[test]
    fn declared_gain_marks_adc_units() {
        let csv = format!("# adc_gain=200\n{}", twelve_lead_csv(2, true));
        let rec = parse_csv(csv.as_bytes(), &ParseOptions::default()).unwrap();
        assert_eq!(rec.effective_gain(), 200.0);
    }
}
