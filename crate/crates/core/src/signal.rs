//! Canonical ECG representation and the normalization pipeline.
//!
//! Every recording, whatever file it came from, is brought to a [`StandardEcg`]:
//! twelve leads in the order I, II, III, aVR, aVL, aVF, V1..V6, sampled at
//! 100 Hz, ten seconds long, in millivolts.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array2, ArrayView1, Axis};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default gain, in ADC units per millivolt, assumed for raw integer data.
pub const DEFAULT_ADC_GAIN: f64 = 1000.0;

/// Metadata key marking samples as raw ADC units rather than millivolts.
pub const META_UNITS: &str = "units";
/// Value of [`META_UNITS`] for raw converter counts.
pub const UNITS_ADC: &str = "adc";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignalError {
    #[error("unknown lead name `{0}`")]
    UnknownLead(String),
    #[error("incomplete lead set: need all 12 leads or I, II, V1-V6 (found {0:?})")]
    IncompleteLeadSet(Vec<String>),
    #[error("duplicate lead `{0}`")]
    DuplicateLead(String),
    #[error("sampling rate must be positive (got {0})")]
    BadRate(f64),
    #[error("ADC gain must be positive (got {0})")]
    NonPositiveGain(f64),
    #[error("signal needs at least {min} samples (got {got})")]
    TooShort { min: usize, got: usize },
    #[error("invalid recording: {0}")]
    InvalidRecording(String),
    #[error("invalid normalization options: {0}")]
    InvalidOptions(String),
}

impl SignalError {
    pub fn code(&self) -> &'static str {
        match self {
            SignalError::UnknownLead(_) => "unknown_lead",
            SignalError::IncompleteLeadSet(_) => "incomplete_lead_set",
            SignalError::DuplicateLead(_) => "duplicate_lead",
            SignalError::BadRate(_) => "bad_rate",
            SignalError::NonPositiveGain(_) => "non_positive_gain",
            SignalError::TooShort { .. } => "signal_too_short",
            SignalError::InvalidRecording(_) => "invalid_recording",
            SignalError::InvalidOptions(_) => "invalid_options",
        }
    }
}

/// The twelve standard leads, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Lead {
    I,
    II,
    III,
    #[serde(rename = "aVR")]
    AVR,
    #[serde(rename = "aVL")]
    AVL,
    #[serde(rename = "aVF")]
    AVF,
    V1,
    V2,
    V3,
    V4,
    V5,
    V6,
}

impl Lead {
    pub const ALL: [Lead; 12] = [
        Lead::I,
        Lead::II,
        Lead::III,
        Lead::AVR,
        Lead::AVL,
        Lead::AVF,
        Lead::V1,
        Lead::V2,
        Lead::V3,
        Lead::V4,
        Lead::V5,
        Lead::V6,
    ];

    /// The eight independent leads from which the other four are derived.
    pub const INDEPENDENT: [Lead; 8] = [
        Lead::I,
        Lead::II,
        Lead::V1,
        Lead::V2,
        Lead::V3,
        Lead::V4,
        Lead::V5,
        Lead::V6,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Lead::I => "I",
            Lead::II => "II",
            Lead::III => "III",
            Lead::AVR => "aVR",
            Lead::AVL => "aVL",
            Lead::AVF => "aVF",
            Lead::V1 => "V1",
            Lead::V2 => "V2",
            Lead::V3 => "V3",
            Lead::V4 => "V4",
            Lead::V5 => "V5",
            Lead::V6 => "V6",
        }
    }

    /// Case-insensitive lookup. Accepts an optional `lead` prefix and ignores
    /// spaces, dashes and underscores, so `"Lead aVR"`, `"AVR"` and `"avr"` all match.
    pub fn parse(name: &str) -> Option<Lead> {
        match LeadToken::classify(name) {
            LeadToken::Standard(lead) => Some(lead),
            _ => None,
        }
    }

    pub fn canonical_names() -> Vec<String> {
        Lead::ALL.iter().map(|l| l.name().to_string()).collect()
    }
}

impl fmt::Display for Lead {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Result of classifying a lead label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum LeadToken {
    Standard(Lead),
    /// Frank orthogonal leads (VX, VY, VZ) found in 15-lead exports; recognised and dropped.
    Frank,
    Unknown,
}

impl LeadToken {
    pub(crate) fn classify(name: &str) -> LeadToken {
        let mut key: String = name
            .chars()
            .filter(|c| !matches!(c, ' ' | '-' | '_'))
            .collect::<String>()
            .to_ascii_uppercase();
        if let Some(rest) = key.strip_prefix("LEAD") {
            key = rest.to_string();
        }
        let lead = match key.as_str() {
            "I" => Lead::I,
            "II" => Lead::II,
            "III" => Lead::III,
            "AVR" => Lead::AVR,
            "AVL" => Lead::AVL,
            "AVF" => Lead::AVF,
            "V1" => Lead::V1,
            "V2" => Lead::V2,
            "V3" => Lead::V3,
            "V4" => Lead::V4,
            "V5" => Lead::V5,
            "V6" => Lead::V6,
            "VX" | "VY" | "VZ" => return LeadToken::Frank,
            _ => return LeadToken::Unknown,
        };
        LeadToken::Standard(lead)
    }
}

/// Which file format a recording was parsed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceFormat {
    Csv,
    Npy,
    Npz,
    Wfdb,
    Dicom,
    Mat,
    Xml,
    Json,
}

impl SourceFormat {
    pub fn name(self) -> &'static str {
        match self {
            SourceFormat::Csv => "csv",
            SourceFormat::Npy => "npy",
            SourceFormat::Npz => "npz",
            SourceFormat::Wfdb => "wfdb",
            SourceFormat::Dicom => "dicom",
            SourceFormat::Mat => "mat",
            SourceFormat::Xml => "xml",
            SourceFormat::Json => "json",
        }
    }

    pub fn from_name(name: &str) -> Option<SourceFormat> {
        Some(match name.to_ascii_lowercase().as_str() {
            "csv" => SourceFormat::Csv,
            "npy" => SourceFormat::Npy,
            "npz" => SourceFormat::Npz,
            "wfdb" | "dat" | "hea" => SourceFormat::Wfdb,
            "dicom" | "dcm" => SourceFormat::Dicom,
            "mat" => SourceFormat::Mat,
            "xml" => SourceFormat::Xml,
            "json" => SourceFormat::Json,
            _ => return None,
        })
    }
}

impl fmt::Display for SourceFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A parsed multi-lead signal in source units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecording {
    pub lead_names: Vec<String>,
    /// `[n_leads × n_samples]`.
    pub samples: Array2<f64>,
    pub sampling_rate_hz: f64,
    /// Converter units per millivolt, when the source declares one.
    pub adc_gain: Option<f64>,
    /// Per-lead offset subtracted before dividing by the gain.
    pub baseline: Vec<f64>,
    pub source_format: SourceFormat,
    pub metadata: BTreeMap<String, String>,
}

impl RawRecording {
    /// Builds a recording with zero baseline, no gain and empty metadata, checking invariants.
    pub fn new(
        lead_names: Vec<String>,
        samples: Array2<f64>,
        sampling_rate_hz: f64,
        source_format: SourceFormat,
    ) -> Result<Self, SignalError> {
        let n = samples.nrows();
        let rec = RawRecording {
            lead_names,
            samples,
            sampling_rate_hz,
            adc_gain: None,
            baseline: vec![0.0; n],
            source_format,
            metadata: BTreeMap::new(),
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn n_leads(&self) -> usize {
        self.samples.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.samples.ncols()
    }

    pub fn validate(&self) -> Result<(), SignalError> {
        if self.samples.nrows() == 0 || self.samples.ncols() == 0 {
            return Err(SignalError::InvalidRecording("empty sample matrix".into()));
        }
        if !(self.sampling_rate_hz > 0.0) || !self.sampling_rate_hz.is_finite() {
            return Err(SignalError::BadRate(self.sampling_rate_hz));
        }
        if self.lead_names.len() != self.samples.nrows() {
            return Err(SignalError::InvalidRecording(format!(
                "{} lead names for {} rows",
                self.lead_names.len(),
                self.samples.nrows()
            )));
        }
        if self.baseline.len() != self.samples.nrows() {
            return Err(SignalError::InvalidRecording(format!(
                "{} baseline offsets for {} rows",
                self.baseline.len(),
                self.samples.nrows()
            )));
        }
        for (i, name) in self.lead_names.iter().enumerate() {
            if self.lead_names[..i].iter().any(|other| other == name) {
                return Err(SignalError::DuplicateLead(name.clone()));
            }
        }
        if let Some(g) = self.adc_gain {
            if !(g > 0.0) {
                return Err(SignalError::NonPositiveGain(g));
            }
        }
        Ok(())
    }

    /// Whether the samples are declared to be raw converter counts.
    pub fn is_raw_adc(&self) -> bool {
        self.metadata.get(META_UNITS).map(String::as_str) == Some(UNITS_ADC)
    }

    /// Gain actually applied by [`scale_to_mv`]: the declared gain, else 1000 for
    /// raw ADC data, else 1 (already millivolts).
    pub fn effective_gain(&self) -> f64 {
        match self.adc_gain {
            Some(g) => g,
            None if self.is_raw_adc() => DEFAULT_ADC_GAIN,
            None => 1.0,
        }
    }
}

/// Twelve canonical leads in millivolts at a fixed rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardEcg {
    samples: Array2<f64>,
    rate_hz: f64,
}

impl StandardEcg {
    pub const N_LEADS: usize = 12;
    pub const RATE_HZ: f64 = 100.0;
    pub const N_SAMPLES: usize = 1000;

    pub fn new(samples: Array2<f64>, rate_hz: f64) -> Result<Self, SignalError> {
        if samples.nrows() != Self::N_LEADS {
            return Err(SignalError::InvalidRecording(format!(
                "expected 12 leads, got {}",
                samples.nrows()
            )));
        }
        if samples.ncols() == 0 {
            return Err(SignalError::InvalidRecording("no samples".into()));
        }
        if !(rate_hz > 0.0) {
            return Err(SignalError::BadRate(rate_hz));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(SignalError::InvalidRecording("non-finite sample".into()));
        }
        Ok(StandardEcg { samples, rate_hz })
    }

    pub fn samples(&self) -> &Array2<f64> {
        &self.samples
    }

    pub fn into_samples(self) -> Array2<f64> {
        self.samples
    }

    pub fn rate_hz(&self) -> f64 {
        self.rate_hz
    }

    pub fn n_samples(&self) -> usize {
        self.samples.ncols()
    }

    pub fn lead(&self, lead: Lead) -> ArrayView1<'_, f64> {
        self.samples.row(lead.index())
    }

    /// Back to a [`RawRecording`] in millivolts, e.g. for export.
    pub fn to_raw(&self) -> RawRecording {
        let mut rec = RawRecording {
            lead_names: Lead::canonical_names(),
            samples: self.samples.clone(),
            sampling_rate_hz: self.rate_hz,
            adc_gain: None,
            baseline: vec![0.0; 12],
            source_format: SourceFormat::Npy,
            metadata: BTreeMap::new(),
        };
        rec.metadata.insert(META_UNITS.into(), "mV".into());
        rec
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NormalizationOptions {
    pub target_rate_hz: f64,
    pub target_samples: usize,
    pub adc_gain_target: f64,
    pub baseline_window_ms: f64,
    pub clip_low_quantile: f64,
    pub clip_high_quantile: f64,
    pub enable_baseline_removal: bool,
    pub enable_clipping: bool,
}

impl Default for NormalizationOptions {
    fn default() -> Self {
        NormalizationOptions {
            target_rate_hz: StandardEcg::RATE_HZ,
            target_samples: StandardEcg::N_SAMPLES,
            adc_gain_target: DEFAULT_ADC_GAIN,
            baseline_window_ms: 200.0,
            clip_low_quantile: 0.01,
            clip_high_quantile: 0.99,
            enable_baseline_removal: true,
            enable_clipping: true,
        }
    }
}

impl NormalizationOptions {
    /// Only the structural stages: lead canonicalization, scaling, resampling, duration fit.
    pub fn structural_only() -> Self {
        NormalizationOptions {
            enable_baseline_removal: false,
            enable_clipping: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), SignalError> {
        if !(self.target_rate_hz > 0.0) {
            return Err(SignalError::BadRate(self.target_rate_hz));
        }
        if self.target_samples == 0 {
            return Err(SignalError::InvalidOptions("target_samples must be positive".into()));
        }
        if !(self.adc_gain_target > 0.0) {
            return Err(SignalError::NonPositiveGain(self.adc_gain_target));
        }
        if !(self.baseline_window_ms > 0.0) {
            return Err(SignalError::InvalidOptions("baseline_window_ms must be positive".into()));
        }
        let (lo, hi) = (self.clip_low_quantile, self.clip_high_quantile);
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(SignalError::InvalidOptions(format!(
                "clip quantiles must satisfy 0 <= low < high <= 1 (got {lo}, {hi})"
            )));
        }
        Ok(())
    }
}

/// Reorders leads canonically, deriving III, aVR, aVL and aVF from I and II when only
/// the eight independent leads are present.
///
/// Frank leads (VX/VY/VZ) are dropped. The per-lead baselines are carried through the
/// same linear maps, so `(value - baseline)` stays consistent for derived leads.
pub fn canonicalize_leads(rec: &RawRecording) -> Result<RawRecording, SignalError> {
    let mut slots: [Option<usize>; 12] = [None; 12];
    for (row, name) in rec.lead_names.iter().enumerate() {
        match LeadToken::classify(name) {
            LeadToken::Standard(lead) => {
                if slots[lead.index()].is_some() {
                    return Err(SignalError::DuplicateLead(name.clone()));
                }
                slots[lead.index()] = Some(row);
            }
            LeadToken::Frank => {}
            LeadToken::Unknown => return Err(SignalError::UnknownLead(name.clone())),
        }
    }
    if Lead::INDEPENDENT.iter().any(|l| slots[l.index()].is_none()) {
        let found = Lead::ALL
            .iter()
            .filter(|l| slots[l.index()].is_some())
            .map(|l| l.name().to_string())
            .collect();
        return Err(SignalError::IncompleteLeadSet(found));
    }

    let n = rec.n_samples();
    let mut out = Array2::<f64>::zeros((12, n));
    let mut baseline = vec![0.0; 12];
    for lead in Lead::ALL {
        if let Some(row) = slots[lead.index()] {
            out.row_mut(lead.index()).assign(&rec.samples.row(row));
            baseline[lead.index()] = rec.baseline[row];
        }
    }
    let i = out.row(Lead::I.index()).to_owned();
    let ii = out.row(Lead::II.index()).to_owned();
    let (bi, bii) = (baseline[Lead::I.index()], baseline[Lead::II.index()]);
    // Einthoven: III = II - I. Goldberger: aVR = -(I + II)/2, aVL = I - II/2, aVF = II - I/2.
    let derived: [(Lead, f64, f64); 4] = [
        (Lead::III, -1.0, 1.0),
        (Lead::AVR, -0.5, -0.5),
        (Lead::AVL, 1.0, -0.5),
        (Lead::AVF, -0.5, 1.0),
    ];
    for (lead, ci, cii) in derived {
        if slots[lead.index()].is_none() {
            let row = &i * ci + &ii * cii;
            out.row_mut(lead.index()).assign(&row);
            baseline[lead.index()] = ci * bi + cii * bii;
        }
    }

    Ok(RawRecording {
        lead_names: Lead::canonical_names(),
        samples: out,
        sampling_rate_hz: rec.sampling_rate_hz,
        adc_gain: rec.adc_gain,
        baseline,
        source_format: rec.source_format,
        metadata: rec.metadata.clone(),
    })
}

/// `(value - baseline[lead]) / gain`.
pub fn scale_to_mv(samples: &Array2<f64>, adc_gain: f64, baseline: &[f64]) -> Result<Array2<f64>, SignalError> {
    if !(adc_gain > 0.0) || !adc_gain.is_finite() {
        return Err(SignalError::NonPositiveGain(adc_gain));
    }
    if baseline.len() != samples.nrows() {
        return Err(SignalError::InvalidRecording(format!(
            "{} baseline offsets for {} rows",
            baseline.len(),
            samples.nrows()
        )));
    }
    let mut out = samples.clone();
    for (mut row, &b) in out.axis_iter_mut(Axis(0)).zip(baseline) {
        row.mapv_inplace(|v| (v - b) / adc_gain);
    }
    Ok(out)
}

/// Output length of [`resample_fft`].
pub fn resampled_len(len: usize, from_hz: f64, to_hz: f64) -> usize {
    (len as f64 * to_hz / from_hz).round() as usize
}

/// Fourier-domain resampling: forward transform, truncate or zero-pad the spectrum to
/// the new length, inverse transform, rescale by `new_len / old_len`.
///
/// The Nyquist bin of an even-length spectrum is folded (downsampling) or split
/// between the positive and negative halves (upsampling) so real signals stay real.
pub fn resample_fft(signal: &[f64], from_hz: f64, to_hz: f64) -> Result<Vec<f64>, SignalError> {
    if !(from_hz > 0.0) || !from_hz.is_finite() {
        return Err(SignalError::BadRate(from_hz));
    }
    if !(to_hz > 0.0) || !to_hz.is_finite() {
        return Err(SignalError::BadRate(to_hz));
    }
    if signal.len() < 2 {
        return Err(SignalError::TooShort { min: 2, got: signal.len() });
    }
    let n = signal.len();
    let m = resampled_len(n, from_hz, to_hz);
    if m == n {
        return Ok(signal.to_vec());
    }
    if m == 0 {
        return Err(SignalError::TooShort { min: 2, got: 0 });
    }

    let mut planner = FftPlanner::<f64>::new();
    let mut spectrum: Vec<Complex<f64>> = signal.iter().map(|&v| Complex::new(v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut spectrum);

    let keep = n.min(m);
    let half = keep / 2 + 1;
    let mut out = vec![Complex::new(0.0, 0.0); m];
    out[..half].copy_from_slice(&spectrum[..half]);
    if keep > 2 {
        let neg = keep - half;
        out[m - neg..].copy_from_slice(&spectrum[n - neg..]);
    }
    if keep % 2 == 0 {
        let nyq = keep / 2;
        if m < n {
            // fold the discarded negative Nyquist component into the kept one
            out[nyq] = spectrum[nyq] + spectrum[n - nyq];
        } else {
            let split = spectrum[nyq] * 0.5;
            out[nyq] = split;
            out[m - nyq] = split;
        }
    }

    planner.plan_fft_inverse(m).process(&mut out);
    // inverse FFT is unnormalized: divide by m, then rescale by m / n
    let scale = 1.0 / n as f64;
    Ok(out.iter().map(|c| c.re * scale).collect())
}

/// Crops to the first `target_samples` columns or pads at the end by repeating the last column.
pub fn fit_duration(signal: &Array2<f64>, target_samples: usize) -> Array2<f64> {
    let (rows, cols) = signal.dim();
    if cols == target_samples {
        return signal.clone();
    }
    Array2::from_shape_fn((rows, target_samples), |(r, c)| {
        signal[[r, c.min(cols.saturating_sub(1))]]
    })
}

/// Moving-median window length in samples: rounded, then bumped to the next odd number.
pub fn median_window_len(window_ms: f64, rate_hz: f64) -> usize {
    let w = (window_ms * rate_hz / 1000.0).round().max(1.0) as usize;
    if w % 2 == 0 {
        w + 1
    } else {
        w
    }
}

/// Subtracts a centered moving median. Windows are truncated at the edges; an
/// even-sized window takes the mean of its two central values.
pub fn remove_baseline_wander(signal: &[f64], rate_hz: f64, window_ms: f64) -> Result<Vec<f64>, SignalError> {
    if !(rate_hz > 0.0) {
        return Err(SignalError::BadRate(rate_hz));
    }
    if !(window_ms > 0.0) {
        return Err(SignalError::InvalidOptions("baseline window must be positive".into()));
    }
    let w = median_window_len(window_ms, rate_hz);
    Ok(remove_baseline_with_window(signal, w))
}

pub(crate) fn remove_baseline_with_window(signal: &[f64], w: usize) -> Vec<f64> {
    let half = w / 2;
    let n = signal.len();
    let mut scratch = Vec::with_capacity(w);
    (0..n)
        .map(|t| {
            let lo = t.saturating_sub(half);
            let hi = (t + half + 1).min(n);
            scratch.clear();
            scratch.extend_from_slice(&signal[lo..hi]);
            signal[t] - median_in_place(&mut scratch)
        })
        .collect()
}

/// Median of a non-empty slice (reorders it).
pub(crate) fn median_in_place(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Quantile by linear interpolation between order statistics at index `q·(n−1)`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Clamps the signal into its own `[Q(q_low), Q(q_high)]` range.
pub fn clip_quantiles(signal: &[f64], q_low: f64, q_high: f64) -> Result<Vec<f64>, SignalError> {
    if !(0.0 <= q_low && q_low < q_high && q_high <= 1.0) {
        return Err(SignalError::InvalidOptions(format!(
            "clip quantiles must satisfy 0 <= low < high <= 1 (got {q_low}, {q_high})"
        )));
    }
    if signal.is_empty() {
        return Ok(Vec::new());
    }
    let mut sorted = signal.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let lo = quantile_sorted(&sorted, q_low);
    let hi = quantile_sorted(&sorted, q_high);
    Ok(signal.iter().map(|&v| v.clamp(lo, hi)).collect())
}

fn map_rows<F>(m: &Array2<f64>, mut f: F) -> Result<Array2<f64>, SignalError>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>, SignalError>,
{
    let rows = m
        .rows()
        .into_iter()
        .map(|row| f(&row.to_vec()))
        .collect::<Result<Vec<_>, _>>()?;
    let cols = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(Array2::from_shape_vec((m.nrows(), cols), flat).expect("rows share a length"))
}

/// Full loading pipeline: canonicalize → scale → resample → fit → (baseline removal) → (clipping).
pub fn normalize(rec: &RawRecording, opts: &NormalizationOptions) -> Result<StandardEcg, SignalError> {
    opts.validate()?;
    rec.validate()?;
    let canon = canonicalize_leads(rec)?;
    let mv = scale_to_mv(&canon.samples, canon.effective_gain(), &canon.baseline)?;
    let resampled = if canon.sampling_rate_hz == opts.target_rate_hz {
        mv
    } else {
        map_rows(&mv, |row| resample_fft(row, canon.sampling_rate_hz, opts.target_rate_hz))?
    };
    let mut out = fit_duration(&resampled, opts.target_samples);
    if opts.enable_baseline_removal {
        let w = median_window_len(opts.baseline_window_ms, opts.target_rate_hz);
        out = map_rows(&out, |row| Ok(remove_baseline_with_window(row, w)))?;
    }
    if opts.enable_clipping {
        out = map_rows(&out, |row| clip_quantiles(row, opts.clip_low_quantile, opts.clip_high_quantile))?;
    }
    StandardEcg::new(out, opts.target_rate_hz)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array1};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn names(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    fn eight_lead(i: f64, ii: f64, n: usize) -> RawRecording {
        let leads = ["I", "II", "V1", "V2", "V3", "V4", "V5", "V6"];
        let mut samples = Array2::zeros((8, n));
        samples.row_mut(0).fill(i);
        samples.row_mut(1).fill(ii);
        for r in 2..8 {
            samples.row_mut(r).fill(r as f64);
        }
        RawRecording::new(names(&leads), samples, 100.0, SourceFormat::Csv).unwrap()
    }

    #[test]
    fn lead_names_parse_loosely() {
        assert_eq!(Lead::parse("AVR"), Some(Lead::AVR));
        assert_eq!(Lead::parse("Lead aVL"), Some(Lead::AVL));
        assert_eq!(Lead::parse("v6"), Some(Lead::V6));
        assert_eq!(Lead::parse("X1"), None);
        assert_eq!(Lead::parse("MLII"), None);
    }

    #[test]
    fn canonical_input_is_unchanged() {
        let samples = Array2::from_shape_fn((12, 50), |(r, c)| (r * 100 + c) as f64);
        let rec = RawRecording::new(Lead::canonical_names(), samples.clone(), 100.0, SourceFormat::Npy).unwrap();
        let out = canonicalize_leads(&rec).unwrap();
        assert_eq!(out.samples, samples);
        assert_eq!(out.lead_names, Lead::canonical_names());
    }

    #[test]
    fn shuffled_twelve_leads_are_reordered() {
        let mut order: Vec<Lead> = Lead::ALL.to_vec();
        order.reverse();
        let samples = Array2::from_shape_fn((12, 4), |(r, _)| order[r].index() as f64);
        let lead_names = order.iter().map(|l| l.name().to_ascii_uppercase()).collect();
        let rec = RawRecording::new(lead_names, samples, 250.0, SourceFormat::Csv).unwrap();
        let out = canonicalize_leads(&rec).unwrap();
        for lead in Lead::ALL {
            assert!(out.samples.row(lead.index()).iter().all(|&v| v == lead.index() as f64));
        }
    }

    #[test]
    fn eight_leads_derive_limb_leads() {
        let out = canonicalize_leads(&eight_lead(1.0, 2.0, 10)).unwrap();
        let expect = [(Lead::III, 1.0), (Lead::AVR, -1.5), (Lead::AVL, 0.0), (Lead::AVF, 1.5)];
        for (lead, v) in expect {
            assert!(out.samples.row(lead.index()).iter().all(|&x| x == v), "{lead}");
        }
        assert!(out.samples.row(Lead::V3.index()).iter().all(|&x| x == 4.0));
    }

    #[test]
    fn unknown_and_incomplete_leads_fail() {
        let rec = RawRecording::new(names(&["I", "X1"]), Array2::zeros((2, 4)), 100.0, SourceFormat::Csv).unwrap();
        assert_eq!(canonicalize_leads(&rec), Err(SignalError::UnknownLead("X1".into())));
        let rec = RawRecording::new(names(&["I", "II", "V1"]), Array2::zeros((3, 4)), 100.0, SourceFormat::Csv).unwrap();
        assert!(matches!(canonicalize_leads(&rec), Err(SignalError::IncompleteLeadSet(_))));
    }

    #[test]
    fn frank_leads_are_dropped() {
        let mut leads = Lead::canonical_names();
        leads.extend(names(&["vx", "vy", "vz"]));
        let rec = RawRecording::new(leads, Array2::ones((15, 8)), 100.0, SourceFormat::Npy).unwrap();
        assert_eq!(canonicalize_leads(&rec).unwrap().n_leads(), 12);
    }

    #[test]
    fn scale_examples() {
        let s = array![[2000.0, 1024.0]];
        assert_eq!(scale_to_mv(&s, 1000.0, &[0.0]).unwrap()[[0, 0]], 2.0);
        assert_abs_diff_eq!(scale_to_mv(&s, 200.0, &[0.0]).unwrap()[[0, 1]], 5.12, epsilon = 1e-12);
        assert_eq!(scale_to_mv(&s, 1.0, &[0.0]).unwrap(), s);
        assert_eq!(scale_to_mv(&s, 0.0, &[0.0]), Err(SignalError::NonPositiveGain(0.0)));
        assert_eq!(scale_to_mv(&array![[110.0]], 10.0, &[10.0]).unwrap()[[0, 0]], 10.0);
    }

    #[test]
    fn effective_gain_follows_units() {
        let mut rec = eight_lead(0.0, 0.0, 4);
        assert_eq!(rec.effective_gain(), 1.0);
        rec.metadata.insert(META_UNITS.into(), UNITS_ADC.into());
        assert_eq!(rec.effective_gain(), 1000.0);
        rec.adc_gain = Some(200.0);
        assert_eq!(rec.effective_gain(), 200.0);
    }

    #[test]
    fn resample_preserves_dc() {
        let x = vec![3.0; 5000];
        let y = resample_fft(&x, 500.0, 100.0).unwrap();
        assert_eq!(y.len(), 1000);
        assert!(y.iter().all(|v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn resample_sine_matches_analytic_grid() {
        let x: Vec<f64> = (0..5000).map(|i| (2.0 * PI * 5.0 * i as f64 / 500.0).sin()).collect();
        let y = resample_fft(&x, 500.0, 100.0).unwrap();
        let err = y[50..950]
            .iter()
            .enumerate()
            .map(|(k, v)| (v - (2.0 * PI * 5.0 * (k + 50) as f64 / 100.0).sin()).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-6, "max interior error {err}");
    }

    #[test]
    fn resample_up_then_down_roundtrips() {
        let x: Vec<f64> = (0..100).map(|i| (2.0 * PI * 3.0 * i as f64 / 100.0).cos()).collect();
        let up = resample_fft(&x, 100.0, 250.0).unwrap();
        assert_eq!(up.len(), 250);
        let back = resample_fft(&up, 250.0, 100.0).unwrap();
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn resample_rejects_bad_rates() {
        assert_eq!(resample_fft(&[1.0, 2.0], 0.0, 100.0), Err(SignalError::BadRate(0.0)));
        assert_eq!(resample_fft(&[1.0, 2.0], 100.0, -1.0), Err(SignalError::BadRate(-1.0)));
        assert!(matches!(resample_fft(&[1.0], 100.0, 50.0), Err(SignalError::TooShort { .. })));
    }

    #[test]
    fn fit_duration_crops_and_pads() {
        let long = Array2::from_shape_fn((12, 1200), |(r, c)| (r + c) as f64);
        let cropped = fit_duration(&long, 1000);
        assert_eq!(cropped, long.slice(ndarray::s![.., ..1000]).to_owned());

        let mut short = Array2::from_shape_fn((12, 800), |(r, c)| (r * c) as f64);
        short.column_mut(799).fill(0.5);
        let padded = fit_duration(&short, 1000);
        assert_eq!(padded.dim(), (12, 1000));
        assert!(padded.slice(ndarray::s![.., 800..]).iter().all(|&v| v == 0.5));
        assert_eq!(fit_duration(&cropped, 1000), cropped);
    }

    #[test]
    fn median_window_rounds_to_odd() {
        assert_eq!(median_window_len(200.0, 100.0), 21);
        assert_eq!(median_window_len(200.0, 500.0), 101);
        assert_eq!(median_window_len(30.0, 100.0), 3);
    }

    #[test]
    fn baseline_removal_fixtures() {
        let impulse = remove_baseline_with_window(&[0.0, 0.0, 10.0, 0.0, 0.0], 3);
        assert_eq!(impulse, vec![0.0, 0.0, 10.0, 0.0, 0.0]);
        let ramp = remove_baseline_with_window(&[1.0, 2.0, 3.0, 4.0, 5.0], 3);
        assert_eq!(ramp, vec![-0.5, 0.0, 0.0, 0.0, 0.5]);
        let flat = remove_baseline_wander(&[4.2; 50], 100.0, 200.0).unwrap();
        assert!(flat.iter().all(|&v| v == 0.0));
        // 30 ms at 100 Hz gives the same 3-sample window
        assert_eq!(remove_baseline_wander(&[1.0, 2.0, 3.0, 4.0, 5.0], 100.0, 30.0).unwrap(), ramp);
    }

    #[test]
    fn clip_fixtures() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        let c = clip_quantiles(&v, 0.01, 0.99).unwrap();
        assert_abs_diff_eq!(c[0], 1.99, epsilon = 1e-12);
        assert_abs_diff_eq!(c[99], 99.01, epsilon = 1e-12);
        assert_eq!(c[50], 51.0);
        assert_eq!(clip_quantiles(&[2.5; 7], 0.01, 0.99).unwrap(), vec![2.5; 7]);
        assert_eq!(clip_quantiles(&v, 0.0, 1.0).unwrap(), v);
        assert!(clip_quantiles(&v, 0.5, 0.5).is_err());
    }

    #[test]
    fn normalize_standard_input_is_identity() {
        let samples = Array2::from_shape_fn((12, 1000), |(r, c)| ((r + 1) as f64 * c as f64 * 0.01).sin());
        let rec = RawRecording::new(Lead::canonical_names(), samples.clone(), 100.0, SourceFormat::Npy).unwrap();
        let out = normalize(&rec, &NormalizationOptions::structural_only()).unwrap();
        let diff = (out.samples() - &samples).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
        assert!(diff <= 1e-9);
    }

    #[test]
    fn normalize_adc_input_at_500hz() {
        let samples = Array2::from_shape_fn((12, 5000), |(_, c)| 1000.0 * (2.0 * PI * c as f64 / 500.0).sin());
        let mut rec = RawRecording::new(Lead::canonical_names(), samples, 500.0, SourceFormat::Wfdb).unwrap();
        rec.adc_gain = Some(1000.0);
        let out = normalize(&rec, &NormalizationOptions::structural_only()).unwrap();
        assert_eq!(out.samples().dim(), (12, 1000));
        let peak = out.samples().iter().fold(0.0f64, |a, &b| a.max(b));
        assert!((peak - 1.0).abs() < 1e-3, "peak {peak}");
    }

    #[test]
    fn clip_second_pass_moves_fractional_quantiles() {
        // Q(0.01) of [0, 48] sits between order statistics; clipping pulls the
        // upper statistic down, so a second pass tightens the bound again.
        let once = clip_quantiles(&[0.0, 48.0], 0.0, 0.01).unwrap();
        assert!((once[1] - 0.48).abs() < 1e-12);
        let twice = clip_quantiles(&once, 0.0, 0.01).unwrap();
        assert!((twice[1] - 0.0048).abs() < 1e-12);
    }

    #[test]
    fn normalize_rejects_bad_options() {
        let rec = eight_lead(1.0, 1.0, 100);
        let opts = NormalizationOptions { clip_low_quantile: 0.9, clip_high_quantile: 0.1, ..Default::default() };
        assert!(matches!(normalize(&rec, &opts), Err(SignalError::InvalidOptions(_))));
    }

    proptest! {
        #[test]
        fn baseline_removal_is_shift_invariant(
            x in proptest::collection::vec(-5.0f64..5.0, 1..80),
            c in -100.0f64..100.0,
        ) {
            let a = remove_baseline_wander(&x, 100.0, 200.0).unwrap();
            let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
            let b = remove_baseline_wander(&shifted, 100.0, 200.0).unwrap();
            for (p, q) in a.iter().zip(&b) {
                prop_assert!((p - q).abs() < 1e-9);
            }
        }

        #[test]
        fn clip_is_bounded(
            x in proptest::collection::vec(-50.0f64..50.0, 1..200),
            lo in 0.0f64..0.5,
            width in 0.01f64..0.5,
        ) {
            let hi = (lo + width).min(1.0);
            let once = clip_quantiles(&x, lo, hi).unwrap();
            let mut sorted = x.clone();
            sorted.sort_by(f64::total_cmp);
            let (qlo, qhi) = (quantile_sorted(&sorted, lo), quantile_sorted(&sorted, hi));
            prop_assert!(once.iter().all(|&v| v >= qlo && v <= qhi));
        }

        // Idempotence is exact when both quantiles land on order statistics,
        // i.e. q * (n - 1) is integral.
        #[test]
        fn clip_is_idempotent_on_order_statistics(
            x in proptest::collection::vec(-50.0f64..50.0, 2..200),
            a in 0.0f64..1.0,
            b in 0.0f64..1.0,
        ) {
            let last = x.len() - 1;
            let (i, j) = ((a * last as f64) as usize, (b * last as f64) as usize);
            let (i, j) = (i.min(j), i.max(j));
            prop_assume!(i < j);
            let (lo, hi) = (i as f64 / last as f64, j as f64 / last as f64);
            let once = clip_quantiles(&x, lo, hi).unwrap();
            let twice = clip_quantiles(&once, lo, hi).unwrap();
            for (p, q) in once.iter().zip(&twice) {
                prop_assert!((p - q).abs() < 1e-12);
            }
        }

        #[test]
        fn identities_hold(x in proptest::collection::vec(-10.0f64..10.0, 2..64)) {
            prop_assert_eq!(resample_fft(&x, 100.0, 100.0).unwrap(), x.clone());
            prop_assert_eq!(clip_quantiles(&x, 0.0, 1.0).unwrap(), x.clone());
            let m = Array2::from_shape_vec((1, x.len()), x.clone()).unwrap();
            prop_assert_eq!(fit_duration(&m, x.len()), m.clone());
            prop_assert_eq!(scale_to_mv(&m, 1.0, &[0.0]).unwrap(), m);
        }

        #[test]
        fn normalize_shape_is_fixed(n in 200usize..3000, rate in prop_oneof![Just(100.0), Just(250.0), Just(500.0), Just(1000.0)], eight in any::<bool>()) {
            let rows = if eight { 8 } else { 12 };
            let leads: Vec<String> = if eight {
                Lead::INDEPENDENT.iter().map(|l| l.name().to_string()).collect()
            } else {
                Lead::canonical_names()
            };
            let samples = Array2::from_shape_fn((rows, n), |(r, c)| ((r + 1) as f64 * c as f64 * 0.013).sin());
            let rec = RawRecording::new(leads, samples, rate, SourceFormat::Csv).unwrap();
            let out = normalize(&rec, &NormalizationOptions::default()).unwrap();
            prop_assert_eq!(out.samples().dim(), (12, 1000));
        }

        #[test]
        fn window_periodic_tones_survive_downsampling(cycles in 1u32..490, phase in 0.0f64..(2.0 * PI)) {
            // tones with a whole number of cycles in the 10 s window, below the 50 Hz Nyquist
            let f = cycles as f64 / 10.0;
            let x: Vec<f64> = (0..5000).map(|i| (2.0 * PI * f * i as f64 / 500.0 + phase).sin()).collect();
            let y = resample_fft(&x, 500.0, 100.0).unwrap();
            let truth = Array1::from_shape_fn(1000, |k| (2.0 * PI * f * k as f64 / 100.0 + phase).sin());
            for k in 50..950 {
                prop_assert!((y[k] - truth[k]).abs() <= 1e-6);
            }
        }
    }
}
