//! Synthetic ECGs with known ground truth, for fixtures, property tests and benchmarks.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::signal::{Lead, StandardEcg};

/// Gaussian bumps on a flat line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpikeTrain {
    pub bpm: f64,
    pub duration_s: f64,
    pub rate_hz: f64,
    pub amplitude_mv: f64,
    pub width_s: f64,
    pub first_peak_s: f64,
    /// A beat is placed only if this much signal follows it.
    pub tail_s: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for SpikeTrain {
    fn default() -> Self {
        SpikeTrain {
            bpm: 60.0,
            duration_s: 10.0,
            rate_hz: 100.0,
            amplitude_mv: 1.0,
            width_s: 0.02,
            first_peak_s: 0.1,
            tail_s: 0.4,
            noise_sd: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticLead {
    pub signal: Vec<f64>,
    pub r_peaks: Vec<usize>,
}

/// Beat centre times in seconds for a regular rhythm.
pub fn beat_times(bpm: f64, first_s: f64, duration_s: f64, tail_s: f64) -> Vec<f64> {
    let period = 60.0 / bpm;
    (0..).map(|k| first_s + k as f64 * period).take_while(|&t| t + tail_s <= duration_s).collect()
}

pub fn spike_train(spec: &SpikeTrain) -> SyntheticLead {
    let n = (spec.duration_s * spec.rate_hz).round() as usize;
    let times = beat_times(spec.bpm, spec.first_peak_s, spec.duration_s, spec.tail_s);
    let mut signal = vec![0.0; n];
    for (i, v) in signal.iter_mut().enumerate() {
        let t = i as f64 / spec.rate_hz;
        *v = times
            .iter()
            .map(|&c| spec.amplitude_mv * (-(t - c).powi(2) / (2.0 * spec.width_s.powi(2))).exp())
            .sum();
    }
    if spec.noise_sd > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let noise = Normal::new(0.0, spec.noise_sd).expect("finite noise level");
        for v in &mut signal {
            *v += noise.sample(&mut rng);
        }
    }
    let r_peaks = times.iter().map(|&c| (c * spec.rate_hz).round() as usize).collect();
    SyntheticLead { signal, r_peaks }
}

/// Beat morphologies used as synthetic diagnostic classes.
type Gaussian = (f64, f64, f64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BeatShape {
    Normal,
    WideQrs,
    InvertedT,
}

impl BeatShape {
    pub const ALL: [BeatShape; 3] = [BeatShape::Normal, BeatShape::WideQrs, BeatShape::InvertedT];

    pub fn name(self) -> &'static str {
        match self {
            BeatShape::Normal => "normal",
            BeatShape::WideQrs => "wide_qrs",
            BeatShape::InvertedT => "inverted_t",
        }
    }

    /// Gaussian components `(offset from R in s, amplitude in mV, width in s)`
    /// split into depolarisation (P, QRS) and repolarisation (T) parts.
    fn components(self) -> (Vec<Gaussian>, Vec<Gaussian>) {
        let p = (-0.16, 0.15, 0.025);
        let t_wave = (0.28, 0.3, 0.05);
        match self {
            BeatShape::Normal => (vec![p, (-0.025, -0.1, 0.01), (0.0, 1.0, 0.012), (0.03, -0.25, 0.012)], vec![t_wave]),
            BeatShape::WideQrs => (
                vec![p, (0.0, 1.0, 0.03), (0.07, -0.4, 0.03), (0.12, 0.2, 0.02)],
                vec![(0.32, -0.2, 0.06)],
            ),
            BeatShape::InvertedT => (
                vec![p, (-0.025, -0.1, 0.01), (0.0, 1.0, 0.012), (0.03, -0.25, 0.012)],
                vec![(0.28, -0.35, 0.05)],
            ),
        }
    }
}

/// `(depolarisation gain, repolarisation gain)` of the independent leads.
const LEAD_GAINS: [(Lead, f64, f64); 8] = [
    (Lead::I, 0.6, 0.5),
    (Lead::II, 1.0, 1.0),
    (Lead::V1, -0.5, 0.2),
    (Lead::V2, 0.7, 0.6),
    (Lead::V3, 1.0, 0.7),
    (Lead::V4, 1.3, 0.8),
    (Lead::V5, 1.1, 0.6),
    (Lead::V6, 0.8, 0.5),
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EcgSpec {
    pub shape: BeatShape,
    pub bpm: f64,
    pub first_peak_s: f64,
    pub amplitude_scale: f64,
    pub noise_sd: f64,
    /// Peak amplitude of a 0.3 Hz baseline drift.
    pub wander_mv: f64,
    pub seed: u64,
}

impl Default for EcgSpec {
    fn default() -> Self {
        EcgSpec { shape: BeatShape::Normal, bpm: 60.0, first_peak_s: 0.5, amplitude_scale: 1.0, noise_sd: 0.0, wander_mv: 0.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticEcg {
    pub ecg: StandardEcg,
    pub r_peaks: Vec<usize>,
}

/// A 10 s, 100 Hz, 12-lead recording. Limb leads III, aVR, aVL and aVF are derived
/// from I and II so the set is physically consistent.
pub fn synthetic_ecg(spec: &EcgSpec) -> SyntheticEcg {
    let rate = StandardEcg::RATE_HZ;
    let n = StandardEcg::N_SAMPLES;
    let duration = n as f64 / rate;
    let times = beat_times(spec.bpm, spec.first_peak_s, duration, 0.4);
    let (depol, repol) = spec.shape.components();
    let wave = |parts: &[(f64, f64, f64)], t: f64| -> f64 {
        times
            .iter()
            .flat_map(|&c| parts.iter().map(move |&(off, amp, w)| amp * (-(t - c - off).powi(2) / (2.0 * w * w)).exp()))
            .sum()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sd.max(0.0)).expect("finite noise level");
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);

    let mut m = Array2::<f64>::zeros((12, n));
    for i in 0..n {
        let t = i as f64 / rate;
        let (d, r) = (wave(&depol, t), wave(&repol, t));
        let drift = spec.wander_mv * (std::f64::consts::TAU * 0.3 * t + phase).sin();
        for &(lead, gd, gr) in &LEAD_GAINS {
            let mut v = spec.amplitude_scale * (gd * d + gr * r) + drift;
            if spec.noise_sd > 0.0 {
                v += noise.sample(&mut rng);
            }
            m[[lead.index(), i]] = v;
        }
        let (l1, l2) = (m[[Lead::I.index(), i]], m[[Lead::II.index(), i]]);
        m[[Lead::III.index(), i]] = l2 - l1;
        m[[Lead::AVR.index(), i]] = -(l1 + l2) / 2.0;
        m[[Lead::AVL.index(), i]] = l1 - l2 / 2.0;
        m[[Lead::AVF.index(), i]] = l2 - l1 / 2.0;
    }
    let r_peaks = times.iter().map(|&c| (c * rate).round() as usize).collect();
    SyntheticEcg { ecg: StandardEcg::new(m, rate).expect("synthetic signal is finite"), r_peaks }
}

/// A recording of the given shape with randomised rate, phase, amplitude and noise.
pub fn random_ecg<R: Rng + ?Sized>(shape: BeatShape, rng: &mut R) -> SyntheticEcg {
    let spec = EcgSpec {
        shape,
        bpm: rng.random_range(55.0..95.0),
        first_peak_s: rng.random_range(0.3..0.7),
        amplitude_scale: rng.random_range(0.8..1.2),
        noise_sd: 0.02,
        wander_mv: rng.random_range(0.0..0.1),
        seed: rng.random(),
    };
    synthetic_ecg(&spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beat_counts() {
        assert_eq!(beat_times(60.0, 0.1, 10.0, 0.4).len(), 10);
        assert_eq!(beat_times(80.0, 0.1, 10.0, 0.4).len(), 13);
    }

    #[test]
    fn einthoven_consistent() {
        let s = synthetic_ecg(&EcgSpec { noise_sd: 0.05, seed: 3, ..EcgSpec::default() });
        let m = s.ecg.samples();
        for i in 0..1000 {
            let (l1, l2, l3) = (m[[0, i]], m[[1, i]], m[[2, i]]);
            assert!((l3 - (l2 - l1)).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic() {
        let spec = EcgSpec { shape: BeatShape::WideQrs, noise_sd: 0.02, seed: 11, ..EcgSpec::default() };
        assert_eq!(synthetic_ecg(&spec), synthetic_ecg(&spec));
    }
}
