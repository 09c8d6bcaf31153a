mod common;

use common::gradcheck::random_tensor;
use common::oracles::mean_var;
use griduq::model::{Head, ModelConfig, UNetParams, DEFAULT_QUANTILES};
use griduq::uq::{
    conformal_quantile, conformity_scores, cqr_calibrate, cqr_predict, mc_dropout_predict,
    min_calibration_size, McdPrediction,
};
use griduq::data::{generate_synthetic, GridSample, NoiseProfile, RegionSpec, SyntheticConfig};
use griduq::{Error, Grid, Unit};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(head: Head, dropout: f32) -> ModelConfig {
    ModelConfig {
        base_width: 4,
        depth: 2,
        dropout_rate: dropout,
        ..ModelConfig::new(6, head)
    }
}

#[test]
fn zero_dropout_has_exactly_zero_epistemic() {
    let p = UNetParams::build(&small(Head::Gaussian, 0.0), 1).unwrap();
    let x = random_tensor(&mut ChaCha8Rng::seed_from_u64(1), &[2, 6, 10, 12], -2.0, 2.0, 0.0);
    for pred in mc_dropout_predict(&p, &x, 30, 5).unwrap() {
        assert!(pred.epistemic.data().iter().all(|&v| v == 0.0));
        assert_eq!(pred.passes, 30);
    }
}

#[test]
fn active_dropout_gives_positive_epistemic_almost_everywhere() {
    let p = UNetParams::build(&small(Head::Gaussian, 0.1), 1).unwrap();
    let x = random_tensor(&mut ChaCha8Rng::seed_from_u64(1), &[2, 6, 10, 12], -2.0, 2.0, 0.0);
    let preds = mc_dropout_predict(&p, &x, 30, 5).unwrap();
    let total: usize = preds.iter().map(|p| p.epistemic.len()).sum();
    let positive: usize = preds
        .iter()
        .map(|p| p.epistemic.data().iter().filter(|&&v| v > 0.0).count())
        .sum();
    assert!(positive as f64 / total as f64 > 0.99, "{positive}/{total}");
}

#[test]
fn decomposition_matches_population_moments_of_the_passes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = 7;
    let passes: Vec<(Grid, Grid)> = (0..t)
        .map(|_| {
            let mu = (0..6).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let var = (0..6).map(|_| rng.gen_range(0.1..4.0)).collect();
            (
                Grid::new(2, 3, mu, Unit::Ppb).unwrap(),
                Grid::new(2, 3, var, Unit::PpbSquared).unwrap(),
            )
        })
        .collect();
    let pred = McdPrediction::from_passes(&passes).unwrap();
    for i in 0..6 {
        let mus: Vec<f64> = passes.iter().map(|(m, _)| m.data()[i] as f64).collect();
        let vars: Vec<f64> = passes.iter().map(|(_, v)| v.data()[i] as f64).collect();
        let (m, v) = mean_var(&mus);
        let (a, _) = mean_var(&vars);
        assert!((pred.mean.data()[i] as f64 - m).abs() < 1e-5);
        assert!((pred.epistemic.data()[i] as f64 - v).abs() < 1e-5);
        assert!((pred.aleatoric.data()[i] as f64 - a).abs() < 1e-5);
    }
}

#[test]
fn mc_passes_are_reproducible_per_seed() {
    let p = UNetParams::build(&small(Head::Gaussian, 0.2), 2).unwrap();
    let x = random_tensor(&mut ChaCha8Rng::seed_from_u64(2), &[1, 6, 8, 8], -1.0, 1.0, 0.0);
    let a = mc_dropout_predict(&p, &x, 5, 9).unwrap();
    let b = mc_dropout_predict(&p, &x, 5, 9).unwrap();
    let c = mc_dropout_predict(&p, &x, 5, 10).unwrap();
    assert!(a[0].epistemic.bits_eq(&b[0].epistemic));
    assert!(!a[0].epistemic.bits_eq(&c[0].epistemic));
    assert!(matches!(mc_dropout_predict(&p, &x, 1, 9), Err(Error::Contract(_))));
}

#[test]
fn conformal_quantile_reference_values() {
    let ten: Vec<f64> = (1..=10).map(f64::from).collect();
    assert_eq!(conformal_quantile(&ten, 0.1).unwrap(), 10.0);
    let ninety_nine: Vec<f64> = (1..=99).map(f64::from).collect();
    assert_eq!(conformal_quantile(&ninety_nine, 0.1).unwrap(), 90.0);
    assert_eq!(min_calibration_size(0.1), 9);
}

/// With exchangeable scores, the split-conformal bound covers a fresh score
/// with probability in [1 - alpha, 1 - alpha + 1/(n+1)].
#[test]
fn exchangeable_scores_reach_nominal_coverage() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n, trials, alpha) = (199, 4000, 0.1);
    let mut hits = 0;
    for _ in 0..trials {
        let scores: Vec<f64> = (0..n).map(|_| rng.gen::<f64>().ln() * -2.0).collect();
        let q = conformal_quantile(&scores, alpha).unwrap();
        let fresh = rng.gen::<f64>().ln() * -2.0;
        hits += usize::from(fresh <= q);
    }
    let cov = hits as f64 / trials as f64;
    // Expected 0.9 <= E[cov] <= 0.905; binomial sd ~ 0.0047.
    assert!((0.885..=0.92).contains(&cov), "{cov}");
}

fn toy_calibration_set(days: usize) -> Vec<GridSample> {
    generate_synthetic(&SyntheticConfig {
        region: RegionSpec::synthetic(8, 8),
        n_days: days,
        channels: 28,
        noise: NoiseProfile::Homoscedastic(1.0),
        station_density: 0.3,
        seed: 4,
    })
    .unwrap()
    .dataset
    .samples
}

#[test]
fn calibration_rejects_too_few_pixels_and_reports_the_minimum() {
    let cfg = ModelConfig {
        base_width: 2,
        depth: 1,
        ..ModelConfig::new(28, Head::QuantileTriplet(DEFAULT_QUANTILES))
    };
    let p = UNetParams::build(&cfg, 0).unwrap();
    let mut days = toy_calibration_set(3);
    for d in &mut days {
        let keep = d.mask.indices().next().unwrap();
        let cells = (0..64).map(|i| i == keep).collect();
        d.mask = griduq::Mask::new(8, 8, cells).unwrap();
    }
    let refs: Vec<&GridSample> = days.iter().collect();
    match cqr_calibrate(&p, &refs, 0.1) {
        Err(Error::Calibration { n, min_n, .. }) => assert_eq!((n, min_n), (3, 20)),
        other => panic!("{other:?}"),
    }
}

#[test]
fn calibrated_intervals_cover_the_calibration_scores() {
    let cfg = ModelConfig {
        base_width: 2,
        depth: 1,
        ..ModelConfig::new(28, Head::QuantileTriplet(DEFAULT_QUANTILES))
    };
    let p = UNetParams::build(&cfg, 0).unwrap();
    let days = toy_calibration_set(6);
    let refs: Vec<&GridSample> = days.iter().collect();
    let qhat = cqr_calibrate(&p, &refs, 0.1).unwrap();
    let x = griduq::autodiff::Tensor::stack(&refs.iter().map(|s| &s.x).collect::<Vec<_>>()).unwrap();
    let preds = cqr_predict(&p, &x, qhat, 0.1).unwrap();
    let mut inside = 0;
    let mut total = 0;
    for (pred, s) in preds.iter().zip(&days) {
        for i in s.mask.indices() {
            let y = s.y.data()[i];
            inside += usize::from(pred.lo.data()[i] <= y && y <= pred.hi.data()[i]);
            total += 1;
        }
    }
    // In-sample coverage is at least ceil((n+1)(1-alpha))/n by construction;
    // one boundary pixel may flip when the bound is rounded to f32.
    assert!((inside + 1) as f64 / total as f64 >= 0.9, "{inside}/{total}");
    let scores: Vec<f64> = preds
        .iter()
        .zip(&days)
        .flat_map(|(p, s)| conformity_scores(&[p.lo.clone(), p.mid.clone(), p.hi.clone()], s))
        .collect();
    // Against the widened bounds every score drops by exactly qhat.
    let k = scores.iter().filter(|&&e| e <= 1e-4).count();
    assert!(k + 1 >= inside);
}

proptest! {
    #[test]
    fn qhat_is_monotone_nonincreasing_in_alpha(
        scores in proptest::collection::vec(-100.0f64..100.0, 20..200),
        a in 0.05f64..0.5,
        b in 0.05f64..0.5,
    ) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let q_lo = conformal_quantile(&scores, lo).unwrap();
        let q_hi = conformal_quantile(&scores, hi).unwrap();
        prop_assert!(q_lo >= q_hi);
    }

    #[test]
    fn qhat_is_one_of_the_scores(scores in proptest::collection::vec(-1e3f64..1e3, 20..100)) {
        let q = conformal_quantile(&scores, 0.1).unwrap();
        prop_assert!(scores.contains(&q));
    }
}
