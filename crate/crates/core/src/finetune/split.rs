use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::FineTuneError;

/// Splits indices so each class keeps its share in the validation part. Every
/// class needs at least two samples so both parts can hold one.
pub fn stratified_split<S: AsRef<str>>(
    labels: &[S],
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), FineTuneError> {
    split_groups(labels, val_fraction, seed, true)
}

/// With `strict == false` singleton groups go to the training part.
pub(crate) fn split_groups<S: AsRef<str>>(
    keys: &[S],
    val_fraction: f64,
    seed: u64,
    strict: bool,
) -> Result<(Vec<usize>, Vec<usize>), FineTuneError> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(FineTuneError::InvalidConfig("val_fraction must lie in (0, 1)".into()));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        groups.entry(k.as_ref()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (class, mut idx) in groups {
        let n = idx.len();
        if n < 2 {
            if strict {
                return Err(FineTuneError::ClassTooSmall { class: class.to_string(), count: n });
            }
            train.extend(idx);
            continue;
        }
        idx.shuffle(&mut rng);
        let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}
