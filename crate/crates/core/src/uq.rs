//! Uncertainty backends: Monte-Carlo dropout decomposition and split-conformal
//! calibration of quantile intervals.

use chrono::Datelike;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Tensor;
use crate::data::{batch, GridSample};
use crate::error::{Error, Result};
use crate::grid::{Grid, Unit};
use crate::model::{self, Head, UNetParams};

/// Default number of stochastic passes.
pub const DEFAULT_PASSES: usize = 30;
/// Default miscoverage rate (90% intervals).
pub const DEFAULT_ALPHA: f64 = 0.1;
/// Minimum pooled station-pixel count accepted by [`cqr_calibrate`].
pub const MIN_CALIBRATION_PIXELS: usize = 20;
/// Samples per forward batch during inference.
const INFERENCE_BATCH: usize = 16;

/// Per-pixel MC-Dropout predictive decomposition.
#[derive(Clone, Debug)]
pub struct McdPrediction {
    pub mean: Grid,
    /// Population variance of the pass means (ppb^2).
    pub epistemic: Grid,
    /// Mean of the pass variances (ppb^2).
    pub aleatoric: Grid,
    pub passes: usize,
}

impl McdPrediction {
    /// Aggregates `(mu_t, sigma2_t)` pass outputs in pass order.
    pub fn from_passes(passes: &[(Grid, Grid)]) -> Result<Self> {
        if passes.len() < 2 {
            return Err(Error::Contract(format!(
                "MC-Dropout needs at least 2 passes, got {}",
                passes.len()
            )));
        }
        let (h, w) = (passes[0].0.height(), passes[0].0.width());
        for (mu, var) in passes {
            mu.check_shape(&passes[0].0, "mc_dropout")?;
            var.check_shape(&passes[0].0, "mc_dropout")?;
        }
        let t = passes.len() as f64;
        let n = h * w;
        let mut mean = vec![0f32; n];
        let mut epi = vec![0f32; n];
        let mut ale = vec![0f32; n];
        for i in 0..n {
            let m = passes.iter().map(|(mu, _)| mu.data()[i] as f64).sum::<f64>() / t;
            let v = passes
                .iter()
                .map(|(mu, _)| (mu.data()[i] as f64 - m).powi(2))
                .sum::<f64>()
                / t;
            let a = passes.iter().map(|(_, s2)| s2.data()[i] as f64).sum::<f64>() / t;
            mean[i] = m as f32;
            epi[i] = v as f32;
            ale[i] = a as f32;
        }
        Ok(Self {
            mean: Grid::new(h, w, mean, Unit::Ppb)?,
            epistemic: Grid::new(h, w, epi, Unit::PpbSquared)?,
            aleatoric: Grid::new(h, w, ale, Unit::PpbSquared)?,
            passes: passes.len(),
        })
    }

    /// `epistemic + aleatoric` per pixel.
    pub fn total_variance(&self) -> Grid {
        let data = self
            .epistemic
            .data()
            .iter()
            .zip(self.aleatoric.data())
            .map(|(&e, &a)| e + a)
            .collect();
        Grid::new(self.mean.height(), self.mean.width(), data, Unit::PpbSquared).expect("same shape")
    }
}

/// Dropout mask stream for pass `pass` under base seed `seed`.
pub fn pass_rng(seed: u64, pass: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(pass as u64 + 1);
    rng
}

/// Runs `passes` stochastic forward passes (dropout active) over a batch
/// `x: [N, C, H, W]`. Pass `t` draws its masks from [`pass_rng`]`(seed, t)`;
/// passes may run concurrently and are reduced in pass order.
pub fn mc_dropout_predict(
    params: &UNetParams,
    x: &Tensor,
    passes: usize,
    seed: u64,
) -> Result<Vec<McdPrediction>> {
    if params.config().head != Head::Gaussian {
        return Err(Error::Contract("MC-Dropout needs a Gaussian head".into()));
    }
    if passes < 2 {
        return Err(Error::Contract(format!(
            "MC-Dropout needs at least 2 passes, got {passes}"
        )));
    }
    let outs: Vec<Vec<(Grid, Grid)>> = (0..passes)
        .into_par_iter()
        .map(|t| {
            let mut rng = pass_rng(seed, t);
            model::predict_gaussian(params, x, true, &mut rng)
        })
        .collect::<Result<_>>()?;
    let n = x.shape()[0];
    (0..n)
        .map(|s| {
            let per_sample: Vec<(Grid, Grid)> = outs.iter().map(|o| o[s].clone()).collect();
            McdPrediction::from_passes(&per_sample)
        })
        .collect()
}

/// MC-Dropout over a list of samples. Each day's passes use a seed derived
/// from `seed` and its date, so a day's prediction does not depend on which
/// other days are requested alongside it.
pub fn mc_dropout_samples(
    params: &UNetParams,
    samples: &[&GridSample],
    passes: usize,
    seed: u64,
) -> Result<Vec<McdPrediction>> {
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let (x, _, _) = batch(std::slice::from_ref(s))?;
        let day = s.date.num_days_from_ce() as u64;
        out.extend(mc_dropout_predict(params, &x, passes, seed ^ (day << 32))?);
    }
    Ok(out)
}

/// Conformalized quantile interval for one sample.
#[derive(Clone, Debug)]
pub struct CqrPrediction {
    pub lo: Grid,
    pub mid: Grid,
    pub hi: Grid,
    pub interval_length: Grid,
    pub qhat: f64,
    pub alpha: f64,
}

impl CqrPrediction {
    /// `lo = q_lo - qhat`, `hi = q_hi + qhat`, `mid` unchanged.
    pub fn from_raw(raw: &[Grid; 3], qhat: f64, alpha: f64) -> Result<Self> {
        if !qhat.is_finite() {
            return Err(Error::Contract(format!("conformal correction {qhat} is not finite")));
        }
        let [q_lo, q_mid, q_hi] = raw;
        q_lo.check_shape(q_hi, "cqr_predict")?;
        q_lo.check_shape(q_mid, "cqr_predict")?;
        let (h, w) = (q_lo.height(), q_lo.width());
        let lo: Vec<f32> = q_lo.data().iter().map(|&v| (v as f64 - qhat) as f32).collect();
        let hi: Vec<f32> = q_hi.data().iter().map(|&v| (v as f64 + qhat) as f32).collect();
        let len = lo.iter().zip(&hi).map(|(&l, &u)| u - l).collect();
        Ok(Self {
            lo: Grid::new(h, w, lo, Unit::Ppb)?,
            mid: q_mid.clone(),
            hi: Grid::new(h, w, hi, Unit::Ppb)?,
            interval_length: Grid::new(h, w, len, Unit::Ppb)?,
            qhat,
            alpha,
        })
    }
}

/// `E = max(q_lo - y, y - q_hi)` at every masked pixel, in pixel order.
pub fn conformity_scores(raw: &[Grid; 3], sample: &GridSample) -> Vec<f64> {
    let [lo, _, hi] = raw;
    sample
        .mask
        .indices()
        .map(|i| {
            let y = sample.y.data()[i] as f64;
            (lo.data()[i] as f64 - y).max(y - hi.data()[i] as f64)
        })
        .collect()
}

/// 1-based rank `ceil((n + 1)(1 - alpha))` of the split-conformal quantile.
/// A 1e-9 guard absorbs binary rounding of `1 - alpha`.
pub fn conformal_rank(n: usize, alpha: f64) -> usize {
    ((n as f64 + 1.0) * (1.0 - alpha) - 1e-9).ceil().max(1.0) as usize
}

/// Smallest `n` for which [`conformal_rank`] does not exceed `n`.
pub fn min_calibration_size(alpha: f64) -> usize {
    (1..).find(|&n| conformal_rank(n, alpha) <= n).expect("alpha > 0")
}

/// The `ceil((n+1)(1-alpha))`-th smallest score.
pub fn conformal_quantile(scores: &[f64], alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Invalid(format!("alpha {alpha} outside (0, 1)")));
    }
    let n = scores.len();
    let k = conformal_rank(n, alpha);
    if k > n {
        return Err(Error::Calibration {
            n,
            min_n: min_calibration_size(alpha),
            alpha,
        });
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[k - 1])
}

fn raw_quantiles(params: &UNetParams, samples: &[&GridSample]) -> Result<Vec<[Grid; 3]>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(INFERENCE_BATCH) {
        let (x, _, _) = batch(chunk)?;
        out.extend(model::predict_quantiles(params, &x)?);
    }
    Ok(out)
}

/// Pooled conformity scores of every masked pixel of every calibration sample.
pub fn calibration_scores(params: &UNetParams, calib: &[&GridSample]) -> Result<Vec<f64>> {
    let raw = raw_quantiles(params, calib)?;
    Ok(raw
        .iter()
        .zip(calib)
        .flat_map(|(r, s)| conformity_scores(r, s))
        .collect())
}

/// Global conformal correction from a calibration set.
pub fn cqr_calibrate(params: &UNetParams, calib: &[&GridSample], alpha: f64) -> Result<f64> {
    let scores = calibration_scores(params, calib)?;
    let min_n = min_calibration_size(alpha).max(MIN_CALIBRATION_PIXELS);
    if scores.len() < min_n {
        return Err(Error::Calibration {
            n: scores.len(),
            min_n,
            alpha,
        });
    }
    conformal_quantile(&scores, alpha)
}

/// Conformalized intervals for a batch `x: [N, C, H, W]`.
pub fn cqr_predict(params: &UNetParams, x: &Tensor, qhat: f64, alpha: f64) -> Result<Vec<CqrPrediction>> {
    model::predict_quantiles(params, x)?
        .iter()
        .map(|raw| CqrPrediction::from_raw(raw, qhat, alpha))
        .collect()
}

/// [`cqr_predict`] over a list of samples.
pub fn cqr_predict_samples(
    params: &UNetParams,
    samples: &[&GridSample],
    qhat: f64,
    alpha: f64,
) -> Result<Vec<CqrPrediction>> {
    raw_quantiles(params, samples)?
        .iter()
        .map(|raw| CqrPrediction::from_raw(raw, qhat, alpha))
        .collect()
}

/// Raw (unconformalized) head outputs for a list of samples.
pub fn quantile_heads(params: &UNetParams, samples: &[&GridSample]) -> Result<Vec<[Grid; 3]>> {
    raw_quantiles(params, samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(v: &[f32]) -> Grid {
        Grid::new(1, v.len(), v.to_vec(), Unit::Ppb).unwrap()
    }

    #[test]
    fn order_statistic_examples() {
        let s: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(conformal_quantile(&s, 0.1).unwrap(), 10.0);
        let s: Vec<f64> = (1..=99).map(f64::from).collect();
        assert_eq!(conformal_quantile(&s, 0.1).unwrap(), 90.0);
        assert_eq!(conformal_rank(10, 0.1), 10);
        assert_eq!(conformal_rank(99, 0.1), 90);
    }

    #[test]
    fn too_few_scores_report_the_minimum() {
        let s: Vec<f64> = (1..=8).map(f64::from).collect();
        match conformal_quantile(&s, 0.1) {
            Err(Error::Calibration { n, min_n, .. }) => {
                assert_eq!(n, 8);
                assert_eq!(min_n, 9);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn two_pass_closed_form() {
        let passes = vec![
            (g(&[1.0, 5.0]), g(&[2.0, 1.0])),
            (g(&[3.0, 5.0]), g(&[4.0, 1.0])),
        ];
        let p = McdPrediction::from_passes(&passes).unwrap();
        assert_eq!(p.mean.data(), &[2.0, 5.0]);
        assert_eq!(p.epistemic.data(), &[1.0, 0.0]);
        assert_eq!(p.aleatoric.data(), &[3.0, 1.0]);
        assert_eq!(p.total_variance().data(), &[4.0, 1.0]);
        assert!(McdPrediction::from_passes(&passes[..1]).is_err());
    }

    #[test]
    fn additive_interval_construction() {
        let raw = [g(&[-1.0, 0.0]), g(&[0.0, 1.0]), g(&[2.0, 3.0])];
        let p0 = CqrPrediction::from_raw(&raw, 0.0, 0.1).unwrap();
        assert_eq!(p0.lo.data(), raw[0].data());
        assert_eq!(p0.hi.data(), raw[2].data());
        let p5 = CqrPrediction::from_raw(&raw, 5.0, 0.1).unwrap();
        for (a, b) in p5.interval_length.data().iter().zip(p0.interval_length.data()) {
            assert_eq!(a - b, 10.0);
        }
        assert_eq!(p5.mid.data(), raw[1].data());
        assert!(CqrPrediction::from_raw(&raw, f64::INFINITY, 0.1).is_err());
    }
}
