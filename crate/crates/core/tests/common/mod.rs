#![allow(dead_code)]

use std::path::PathBuf;

use ecgx_core::formats::{detect_format, parse_bytes, parse_wfdb, FormatError, ParseOptions};
use ecgx_core::RawRecording;
use serde::Deserialize;

pub fn fixture_dir() -> PathBuf {
    // Resolves from any sibling crate that includes this module by path.
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

pub fn read_fixture(name: &str) -> Vec<u8> {
    std::fs::read(fixture_dir().join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[derive(Debug, Deserialize)]
pub struct Expected {
    pub lead_names: Vec<String>,
    pub sampling_rate_hz: f64,
    pub n_samples: usize,
    pub adc_gain: Option<f64>,
    pub baseline: Option<Vec<f64>>,
    pub units: String,
    pub sum: Vec<f64>,
    pub sumsq: Vec<f64>,
    pub probes: Vec<(usize, usize, f64)>,
    pub mv_sum: Option<Vec<f64>>,
}

pub fn expected() -> std::collections::BTreeMap<String, Expected> {
    serde_json::from_slice(&read_fixture("expected.json")).expect("expected.json parses")
}

/// Fixture names whose content is one file (WFDB is the exception).
pub const SINGLE_FILE: &[&str] = &[
    "rec250.csv",
    "rec500_f8.npy",
    "rec500_i2_columns.npy",
    "rec500_8lead.npz",
    "rec500.dcm",
    "mixed_sensitivity.dcm",
    "baseline_offset.dcm",
    "rec500_int16.mat",
    "rec250_double_columns.mat",
    "rec500.xml",
];

pub fn parse_fixture(name: &str) -> Result<RawRecording, FormatError> {
    if name == "rec500.hea" {
        return parse_wfdb(&read_fixture("rec500.hea"), &read_fixture("rec500.dat"));
    }
    let bytes = read_fixture(name);
    let fmt = detect_format(&bytes, name)?.format;
    parse_bytes(fmt, &bytes, &ParseOptions::default())
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

/// Compares a parsed recording to the independent decoder's summary.
pub fn matches_expected(rec: &RawRecording, exp: &Expected) -> Result<(), String> {
    if rec.lead_names != exp.lead_names {
        return Err(format!("leads {:?} vs {:?}", rec.lead_names, exp.lead_names));
    }
    if rec.sampling_rate_hz != exp.sampling_rate_hz || rec.n_samples() != exp.n_samples {
        return Err(format!("rate/len {} {} vs {} {}", rec.sampling_rate_hz, rec.n_samples(), exp.sampling_rate_hz, exp.n_samples));
    }
    if let Some(g) = exp.adc_gain {
        match rec.adc_gain {
            Some(got) if rel_close(got, g, 1e-12) => {}
            other => return Err(format!("gain {other:?} vs {g}")),
        }
    }
    if let Some(b) = &exp.baseline {
        if &rec.baseline != b {
            return Err(format!("baseline {:?} vs {b:?}", rec.baseline));
        }
    }
    if (exp.units == "adc") != rec.is_raw_adc() {
        return Err(format!("units: expected {}", exp.units));
    }
    for (lead, row) in rec.samples.rows().into_iter().enumerate() {
        let s: f64 = row.sum();
        let s2: f64 = row.iter().map(|v| v * v).sum();
        if !rel_close(s, exp.sum[lead], 1e-9) || !rel_close(s2, exp.sumsq[lead], 1e-9) {
            return Err(format!("lead {lead}: sum {s} vs {}, sumsq {s2} vs {}", exp.sum[lead], exp.sumsq[lead]));
        }
    }
    for &(lead, idx, v) in &exp.probes {
        if (rec.samples[[lead, idx]] - v).abs() > 1e-12 {
            return Err(format!("probe [{lead},{idx}] {} vs {v}", rec.samples[[lead, idx]]));
        }
    }
    if let Some(mv) = &exp.mv_sum {
        let gain = rec.effective_gain();
        for (lead, row) in rec.samples.rows().into_iter().enumerate() {
            let s: f64 = row.iter().map(|v| (v - rec.baseline[lead]) / gain).sum();
            if !rel_close(s, mv[lead], 1e-9) {
                return Err(format!("lead {lead}: mV sum {s} vs {}", mv[lead]));
            }
        }
    }
    Ok(())
}
