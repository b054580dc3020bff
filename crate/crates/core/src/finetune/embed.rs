use crate::analysis::{detect_rpeaks, median_beat, AnalysisError, BeatWindow};
use crate::signal::StandardEcg;

/// Embedding width, matching the latent size of the pretrained encoders.
pub const EMBED_DIM: usize = 512;

/// Deterministic stand-in encoder: the per-lead median beat, flattened lead by
/// lead, linearly resampled to `EMBED_DIM` values and standardised.
pub fn embed(ecg: &StandardEcg) -> Result<Vec<f64>, AnalysisError> {
    let fid = detect_rpeaks(ecg)?;
    let beat = median_beat(ecg, &fid, &BeatWindow::default())?;
    let flat: Vec<f64> = beat.samples.iter().copied().collect();
    Ok(standardize(resample_linear(&flat, EMBED_DIM)))
}

pub fn embed_all(ecgs: &[StandardEcg]) -> Result<Vec<Vec<f64>>, AnalysisError> {
    ecgs.iter().map(embed).collect()
}

fn resample_linear(x: &[f64], m: usize) -> Vec<f64> {
    match x.len() {
        0 => vec![0.0; m],
        1 => vec![x[0]; m],
        n => {
            let step = (n - 1) as f64 / (m - 1).max(1) as f64;
            (0..m)
                .map(|j| {
                    let pos = j as f64 * step;
                    let i = (pos.floor() as usize).min(n - 2);
                    let f = pos - i as f64;
                    x[i] + f * (x[i + 1] - x[i])
                })
                .collect()
        }
    }
}

fn standardize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd < 1e-12 {
        v.iter_mut().for_each(|x| *x = 0.0);
    } else {
        v.iter_mut().for_each(|x| *x = (*x - mean) / sd);
    }
    v
}
