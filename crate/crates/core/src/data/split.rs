use chrono::Datelike;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::sample::GridSample;
use crate::error::{Error, Result};

/// Indices into the sample list for each partition. Every index appears in
/// exactly one partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    /// Present when the training portion was halved for conformal calibration.
    pub calib: Option<Vec<usize>>,
    pub val: Vec<usize>,
}

pub const MIN_SPLIT_SAMPLES: usize = 10;

/// Shuffled whole-day split. With `calib`, the training fraction is halved:
/// the first half (after shuffling) trains, the second calibrates.
pub fn split(n_samples: usize, train_frac: f64, calib: bool, seed: u64) -> Result<Split> {
    if n_samples < MIN_SPLIT_SAMPLES {
        return Err(Error::Invalid(format!(
            "split needs at least {MIN_SPLIT_SAMPLES} samples, got {n_samples}"
        )));
    }
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::Invalid(format!("train fraction {train_frac} outside (0, 1)")));
    }
    let mut order: Vec<usize> = (0..n_samples).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n_samples as f64 * train_frac).round() as usize).clamp(1, n_samples - 1);
    let val = order[n_train..].to_vec();
    let head = &order[..n_train];
    Ok(if calib {
        let half = n_train / 2;
        Split {
            train: head[..half].to_vec(),
            calib: Some(head[half..].to_vec()),
            val,
        }
    } else {
        Split {
            train: head.to_vec(),
            calib: None,
            val,
        }
    })
}

/// Separates the latest calendar month (the held-out test month) from the
/// rest. Returns `(rest, test)` as index lists in date order.
pub fn holdout_last_month(samples: &[GridSample]) -> (Vec<usize>, Vec<usize>) {
    let Some(last) = samples.iter().map(|s| s.date).max() else {
        return (vec![], vec![]);
    };
    let key = (last.year(), last.month());
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.sort_by_key(|&i| samples[i].date);
    idx.into_iter()
        .partition(|&i| (samples[i].date.year(), samples[i].date.month()) != key)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ninety_ten() {
        let s = split(100, 0.9, false, 3).unwrap();
        assert_eq!((s.train.len(), s.val.len()), (90, 10));
        assert!(s.calib.is_none());
    }

    #[test]
    fn calibration_halves() {
        let s = split(100, 0.9, true, 3).unwrap();
        assert_eq!(
            (s.train.len(), s.calib.as_ref().unwrap().len(), s.val.len()),
            (45, 45, 10)
        );
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(split(57, 0.9, true, 8).unwrap(), split(57, 0.9, true, 8).unwrap());
        assert_ne!(split(57, 0.9, true, 8).unwrap(), split(57, 0.9, true, 9).unwrap());
    }

    #[test]
    fn too_few_samples() {
        assert!(split(9, 0.9, false, 0).is_err());
    }
}
