//! Beat-level analysis on a [`StandardEcg`]: R-peak detection (Pan–Tompkins on
//! lead II), QRS windows, R-peak alignment onto a fixed template grid, and
//! median beats.

use ndarray::{s, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal::{median_in_place, Lead, StandardEcg};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("no beats found")]
    NoBeatsFound,
    #[error("need at least {needed} beats, found {found}")]
    TooFewBeats { needed: usize, found: usize },
    #[error("invalid analysis options: {0}")]
    InvalidOptions(String),
}

impl AnalysisError {
    pub fn code(&self) -> &'static str {
        match self {
            AnalysisError::NoBeatsFound => "no_beats_found",
            AnalysisError::TooFewBeats { .. } => "too_few_beats",
            AnalysisError::InvalidOptions(_) => "invalid_options",
        }
    }
}

/// Beat locations on lead II.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiducialMap {
    /// Strictly increasing sample indices.
    pub r_peaks: Vec<usize>,
    pub qrs_onsets: Option<Vec<usize>>,
    pub qrs_offsets: Option<Vec<usize>>,
    pub rate_hz: f64,
    pub n_samples: usize,
}

impl FiducialMap {
    pub fn from_peaks(mut r_peaks: Vec<usize>, rate_hz: f64, n_samples: usize) -> Self {
        r_peaks.sort_unstable();
        r_peaks.dedup();
        r_peaks.retain(|&p| p < n_samples);
        FiducialMap { r_peaks, qrs_onsets: None, qrs_offsets: None, rate_hz, n_samples }
    }

    pub fn is_valid(&self) -> bool {
        let increasing = self.r_peaks.windows(2).all(|w| w[0] < w[1]);
        let in_range = self.r_peaks.iter().all(|&p| p < self.n_samples);
        let bounds_ok = match (&self.qrs_onsets, &self.qrs_offsets) {
            (None, None) => true,
            (Some(on), Some(off)) => {
                on.len() == self.r_peaks.len()
                    && off.len() == self.r_peaks.len()
                    && self
                        .r_peaks
                        .iter()
                        .zip(on.iter().zip(off))
                        .all(|(&r, (&a, &b))| a < r && r < b && b < self.n_samples)
            }
            _ => false,
        };
        increasing && in_range && bounds_ok
    }
}

/// A signal whose R-peaks sit on a fixed template grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedEcg {
    pub samples: Array2<f64>,
    pub template_rpeaks: Vec<usize>,
    pub beats_used: usize,
    pub rate_hz: f64,
}

/// Per-lead representative beat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedianBeat {
    /// `[12 × W]`.
    pub samples: Array2<f64>,
    pub r_position: usize,
    pub beats_used: usize,
    pub rate_hz: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorOptions {
    pub band_low_hz: f64,
    pub band_high_hz: f64,
    pub integration_ms: f64,
    pub refractory_ms: f64,
    pub refine_ms: f64,
}

impl Default for DetectorOptions {
    fn default() -> Self {
        DetectorOptions { band_low_hz: 5.0, band_high_hz: 15.0, integration_ms: 150.0, refractory_ms: 200.0, refine_ms: 50.0 }
    }
}

/// Centered moving mean with truncated windows at the edges.
fn moving_mean(x: &[f64], w: usize) -> Vec<f64> {
    let n = x.len();
    let half = w / 2;
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    for &v in x {
        prefix.push(prefix.last().unwrap() + v);
    }
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + w - half).min(n);
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

/// Odd boxcar length whose -3 dB point sits near `cutoff_hz`.
fn boxcar_len(rate_hz: f64, cutoff_hz: f64) -> usize {
    let l = (0.443 * rate_hz / cutoff_hz).round().max(1.0) as usize;
    l | 1
}

/// The Pan–Tompkins feature signal: band-pass, derivative, squaring, integration.
pub fn integrated_signal(x: &[f64], rate_hz: f64, opts: &DetectorOptions) -> Vec<f64> {
    let n = x.len();
    let low = moving_mean(x, boxcar_len(rate_hz, opts.band_high_hz));
    let wide = moving_mean(x, boxcar_len(rate_hz, opts.band_low_hz));
    let band: Vec<f64> = low.iter().zip(&wide).map(|(a, b)| a - b).collect();
    let at = |i: isize| band[i.clamp(0, n as isize - 1) as usize];
    let squared: Vec<f64> = (0..n as isize)
        .map(|i| {
            let d = (2.0 * at(i + 2) + at(i + 1) - at(i - 1) - 2.0 * at(i - 2)) * rate_hz / 8.0;
            d * d
        })
        .collect();
    let w = ((opts.integration_ms * rate_hz / 1000.0).round() as usize).max(1);
    moving_mean(&squared, w)
}

/// Local maxima of the integrated signal, thinned to one per refractory period.
fn candidate_peaks(mwi: &[f64], refractory: usize) -> Vec<usize> {
    let n = mwi.len();
    let mut out: Vec<usize> = Vec::new();
    for i in 1..n.saturating_sub(1) {
        if mwi[i] > mwi[i - 1] && mwi[i] >= mwi[i + 1] {
            match out.last() {
                Some(&last) if i - last < refractory => {
                    if mwi[i] > mwi[last] {
                        *out.last_mut().unwrap() = i;
                    }
                }
                _ => out.push(i),
            }
        }
    }
    out
}

/// Adaptive dual-threshold classification with searchback. Returns detections
/// on the integrated signal.
fn classify_peaks(mwi: &[f64], candidates: &[usize], rate_hz: f64, refractory: usize) -> Vec<usize> {
    let learn = ((2.0 * rate_hz) as usize).min(mwi.len());
    let head = &mwi[..learn];
    let mut spki = 0.25 * head.iter().cloned().fold(0.0, f64::max);
    let mut npki = 0.5 * head.iter().sum::<f64>() / learn.max(1) as f64;
    let mut qrs: Vec<usize> = Vec::new();
    let mut noise: Vec<usize> = Vec::new();

    for &c in candidates {
        let th1 = npki + 0.25 * (spki - npki);
        let v = mwi[c];
        let refractory_ok = qrs.last().is_none_or(|&l| c - l >= refractory);
        if v > th1 && refractory_ok {
            qrs.push(c);
            spki = 0.125 * v + 0.875 * spki;
        } else {
            noise.push(c);
            npki = 0.125 * v + 0.875 * npki;
        }

        // searchback when the gap since the last beat exceeds 1.66 mean RR
        if qrs.len() >= 2 {
            let recent = &qrs[qrs.len().saturating_sub(9)..];
            let mean_rr = (recent[recent.len() - 1] - recent[0]) as f64 / (recent.len() - 1) as f64;
            let last = *qrs.last().unwrap();
            if (c - last) as f64 > 1.66 * mean_rr {
                let th2 = 0.5 * (npki + 0.25 * (spki - npki));
                let missed = noise
                    .iter()
                    .copied()
                    .filter(|&p| p > last + refractory && c >= p + refractory && mwi[p] > th2)
                    .max_by(|&a, &b| mwi[a].total_cmp(&mwi[b]));
                if let Some(p) = missed {
                    let pos = qrs.partition_point(|&q| q < p);
                    qrs.insert(pos, p);
                    noise.retain(|&q| q != p);
                    spki = 0.25 * mwi[p] + 0.75 * spki;
                }
            }
        }
    }
    qrs
}

/// R-peaks of an arbitrary single-lead signal.
pub fn detect_rpeaks_signal(x: &[f64], rate_hz: f64, opts: &DetectorOptions) -> Result<FiducialMap, AnalysisError> {
    if !(rate_hz > 0.0) || x.len() < 3 {
        return Err(AnalysisError::InvalidOptions("need a positive rate and at least 3 samples".into()));
    }
    let n = x.len();
    let first = x[0];
    if x.iter().all(|&v| v == first) {
        return Err(AnalysisError::NoBeatsFound);
    }
    let mwi = integrated_signal(x, rate_hz, opts);
    let refractory = ((opts.refractory_ms * rate_hz / 1000.0).round() as usize).max(1);
    let detections = classify_peaks(&mwi, &candidate_peaks(&mwi, refractory), rate_hz, refractory);

    let reach = (opts.refine_ms * rate_hz / 1000.0).round() as usize;
    let mut peaks: Vec<usize> = detections
        .iter()
        .map(|&d| {
            let lo = d.saturating_sub(reach);
            let hi = (d + reach + 1).min(n);
            (lo..hi).fold(lo, |best, i| if x[i] > x[best] { i } else { best })
        })
        .collect();
    peaks.sort_unstable();
    // refinement can pull two detections onto one maximum
    let mut thinned: Vec<usize> = Vec::with_capacity(peaks.len());
    for p in peaks {
        match thinned.last() {
            Some(&last) if p - last < refractory => {
                if x[p] > x[last] {
                    *thinned.last_mut().unwrap() = p;
                }
            }
            _ => thinned.push(p),
        }
    }
    if thinned.is_empty() {
        return Err(AnalysisError::NoBeatsFound);
    }

    let mut fid = FiducialMap::from_peaks(thinned, rate_hz, n);
    let (onsets, offsets) = qrs_bounds(&mwi, &fid.r_peaks);
    fid.qrs_onsets = Some(onsets);
    fid.qrs_offsets = Some(offsets);
    if !fid.is_valid() {
        fid.qrs_onsets = None;
        fid.qrs_offsets = None;
    }
    Ok(fid)
}

/// QRS bounds as the crossings of 30 % of the local integrated-signal peak.
fn qrs_bounds(mwi: &[f64], peaks: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let n = mwi.len();
    peaks
        .iter()
        .map(|&r| {
            let level = 0.3 * mwi[r];
            let mut on = r.saturating_sub(1);
            while on > 0 && mwi[on] >= level {
                on -= 1;
            }
            let mut off = (r + 1).min(n - 1);
            while off < n - 1 && mwi[off] >= level {
                off += 1;
            }
            (on, off)
        })
        .unzip()
}

/// R-peaks on lead II with the default detector settings.
pub fn detect_rpeaks(ecg: &StandardEcg) -> Result<FiducialMap, AnalysisError> {
    let lead = ecg.lead(Lead::II).to_vec();
    detect_rpeaks_signal(&lead, ecg.rate_hz(), &DetectorOptions::default())
}

/// One `[12 × W]` window per R-peak, centered on the peak; windows that would
/// cross either edge are dropped.
pub fn extract_qrs_windows(ecg: &StandardEcg, fid: &FiducialMap, window_ms: f64) -> Vec<Array2<f64>> {
    let w = ((window_ms * ecg.rate_hz() / 1000.0).round() as usize).max(1);
    let half = w / 2;
    let n = ecg.n_samples();
    fid.r_peaks
        .iter()
        .filter(|&&r| r >= half && r - half + w <= n)
        .map(|&r| ecg.samples().slice(s![.., r - half..r - half + w]).to_owned())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RlignOptions {
    pub target_bpm: f64,
    pub first_peak_s: f64,
}

impl Default for RlignOptions {
    fn default() -> Self {
        RlignOptions { target_bpm: 60.0, first_peak_s: 0.5 }
    }
}

/// Template R-peak positions for a signal of `n` samples.
pub fn template_rpeaks(n: usize, rate_hz: f64, opts: &RlignOptions) -> Vec<usize> {
    let period = 60.0 / opts.target_bpm;
    (0..)
        .map(|k| ((opts.first_peak_s + k as f64 * period) * rate_hz).round() as usize)
        .take_while(|&p| p < n)
        .collect()
}

/// Linear interpolation of `x` at fractional position `pos`, clamped to the edges.
fn interp(x: ArrayView1<'_, f64>, pos: f64) -> f64 {
    let last = x.len() - 1;
    if pos <= 0.0 {
        return x[0];
    }
    if pos >= last as f64 {
        return x[last];
    }
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if frac == 0.0 {
        x[i]
    } else {
        x[i] * (1.0 - frac) + x[i + 1] * frac
    }
}

/// Moves the detected R-peaks onto the template grid by linearly resampling each
/// inter-peak segment. Parts before the first and after the last used peak are
/// shifted unchanged, padded with the edge value.
pub fn rlign_transform(ecg: &StandardEcg, fid: &FiducialMap, opts: &RlignOptions) -> Result<AlignedEcg, AnalysisError> {
    if !(opts.target_bpm > 0.0) || !(opts.first_peak_s >= 0.0) {
        return Err(AnalysisError::InvalidOptions("target bpm must be positive".into()));
    }
    let found = fid.r_peaks.len();
    if found < 2 {
        return Err(AnalysisError::TooFewBeats { needed: 2, found });
    }
    let n = ecg.n_samples();
    let template = template_rpeaks(n, ecg.rate_hz(), opts);
    if template.len() < 2 {
        return Err(AnalysisError::InvalidOptions("template grid holds fewer than 2 beats".into()));
    }
    let used = found.min(template.len());
    let peaks = &fid.r_peaks[..used];
    let targets = &template[..used];

    let src = ecg.samples();
    let mut out = Array2::<f64>::zeros((src.nrows(), n));
    for (lead, mut row) in out.rows_mut().into_iter().enumerate() {
        let x = src.row(lead);
        let shifted = |t: usize, anchor_out: usize, anchor_in: usize| -> f64 {
            let pos = anchor_in as f64 + t as f64 - anchor_out as f64;
            x[pos.clamp(0.0, (n - 1) as f64) as usize]
        };
        for t in 0..targets[0] {
            row[t] = shifted(t, targets[0], peaks[0]);
        }
        for seg in 0..used - 1 {
            let (t0, t1) = (targets[seg], targets[seg + 1]);
            let (p0, p1) = (peaks[seg], peaks[seg + 1]);
            let ratio = (p1 - p0) as f64 / (t1 - t0) as f64;
            for k in 0..t1 - t0 {
                row[t0 + k] = interp(x, p0 as f64 + k as f64 * ratio);
            }
        }
        let (t_last, p_last) = (targets[used - 1], peaks[used - 1]);
        for t in t_last..n {
            row[t] = shifted(t, t_last, p_last);
        }
    }
    Ok(AlignedEcg { samples: out, template_rpeaks: template, beats_used: used, rate_hz: ecg.rate_hz() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeatWindow {
    pub pre_ms: f64,
    pub post_ms: f64,
}

impl Default for BeatWindow {
    fn default() -> Self {
        BeatWindow { pre_ms: 200.0, post_ms: 400.0 }
    }
}

/// Per-lead, per-sample median over all complete beat windows.
pub fn median_beat(ecg: &StandardEcg, fid: &FiducialMap, window: &BeatWindow) -> Result<MedianBeat, AnalysisError> {
    let rate = ecg.rate_hz();
    let pre = (window.pre_ms * rate / 1000.0).round() as usize;
    let post = (window.post_ms * rate / 1000.0).round() as usize;
    let w = pre + post;
    if w == 0 {
        return Err(AnalysisError::InvalidOptions("empty beat window".into()));
    }
    let n = ecg.n_samples();
    let starts: Vec<usize> = fid.r_peaks.iter().filter(|&&r| r >= pre && r + post <= n).map(|&r| r - pre).collect();
    if starts.is_empty() {
        return Err(AnalysisError::TooFewBeats { needed: 1, found: 0 });
    }
    let src = ecg.samples();
    let mut out = Array2::<f64>::zeros((src.nrows(), w));
    let mut column = vec![0.0; starts.len()];
    for lead in 0..src.nrows() {
        for k in 0..w {
            for (slot, &s0) in column.iter_mut().zip(&starts) {
                *slot = src[[lead, s0 + k]];
            }
            out[[lead, k]] = median_in_place(&mut column);
        }
    }
    Ok(MedianBeat { samples: out, r_position: pre, beats_used: starts.len(), rate_hz: rate })
}
