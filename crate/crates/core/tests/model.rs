mod common;

use common::gradcheck::random_tensor;
use griduq::autodiff::{Tape, Tensor};
use griduq::model::{
    forward, forward_graph, predict_gaussian, predict_quantiles, Head, ModelConfig, UNetParams,
    DEFAULT_QUANTILES,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(in_channels: usize, head: Head) -> ModelConfig {
    ModelConfig {
        base_width: 4,
        depth: 2,
        ..ModelConfig::new(in_channels, head)
    }
}

#[test]
fn spatial_dims_are_preserved_for_both_regions_and_channel_sets() {
    for &(h, w) in &[(31, 49), (31, 27)] {
        for &c in &[28, 51] {
            for head in [Head::Gaussian, Head::QuantileTriplet(DEFAULT_QUANTILES)] {
                let p = UNetParams::build(&ModelConfig::new(c, head), 1).unwrap();
                let x = Tensor::zeros(&[2, c, h, w]);
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let out = forward(&p, &x, false, &mut rng).unwrap();
                assert_eq!(out.shape(), &[2, head.channels(), h, w]);
            }
        }
    }
}

#[test]
fn default_model_size_is_desk_scale() {
    let p = UNetParams::build(&ModelConfig::new(28, Head::Gaussian), 0).unwrap();
    let n = p.num_scalars();
    assert!((1_000_000..3_000_000).contains(&n), "{n} parameters");
}

#[test]
fn gaussian_variance_is_positive_and_quantile_head_has_three_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_tensor(&mut rng, &[3, 5, 9, 13], -3.0, 3.0, 0.0);
    let g = UNetParams::build(&small(5, Head::Gaussian), 3).unwrap();
    for (mu, var) in predict_gaussian(&g, &x, true, &mut rng).unwrap() {
        assert_eq!((mu.height(), mu.width()), (9, 13));
        assert!(var.data().iter().all(|&v| v >= 1e-6 && v.is_finite()));
    }
    let q = UNetParams::build(&small(5, Head::QuantileTriplet(DEFAULT_QUANTILES)), 3).unwrap();
    let preds = predict_quantiles(&q, &x).unwrap();
    assert_eq!(preds.len(), 3);
    assert!(preds.iter().all(|p| p.iter().all(|g| g.len() == 9 * 13)));
}

#[test]
fn inactive_dropout_is_deterministic_and_ignores_the_rng() {
    let p = UNetParams::build(&small(4, Head::Gaussian), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_tensor(&mut rng, &[1, 4, 8, 8], -1.0, 1.0, 0.0);
    let a = forward(&p, &x, false, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = forward(&p, &x, false, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert!(a.bits_eq(&b));
    let c = forward(&p, &x, true, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let d = forward(&p, &x, true, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert!(!c.bits_eq(&d));
}

#[test]
fn checkpoint_names_restore_the_same_network() {
    let cfg = small(3, Head::QuantileTriplet(DEFAULT_QUANTILES));
    let p = UNetParams::build(&cfg, 8).unwrap();
    let named: Vec<(String, Tensor)> = p
        .named()
        .into_iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    let q = UNetParams::from_named(&cfg, &named).unwrap();
    assert_eq!(p, q);
    assert!(UNetParams::from_named(&cfg, &named[1..]).is_err());
}

/// End-to-end reverse-mode gradient of a tiny network against central
/// differences on a subset of weights.
#[test]
fn whole_network_gradient_matches_finite_differences() {
    let cfg = ModelConfig {
        base_width: 2,
        depth: 1,
        dropout_rate: 0.0,
        ..ModelConfig::new(2, Head::Gaussian)
    };
    let p = UNetParams::build(&cfg, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_tensor(&mut rng, &[1, 2, 4, 6], -1.0, 1.0, 0.0);
    let loss_of = |params: &UNetParams| -> (f64, Vec<Vec<f32>>) {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, true);
        let xv = tape.constant(x.clone());
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let out = forward_graph(&mut tape, &cfg, &vars, xv, false, &mut r).unwrap();
        let sq = tape.square(out);
        let l = tape.sum(sq);
        let g = tape.backward(l).unwrap();
        let grads = vars.iter().map(|&v| g.get(v).unwrap().to_vec()).collect();
        (tape.value(l).data()[0] as f64, grads)
    };
    let (base, analytic) = loss_of(&p);
    let mut worst = 0f64;
    let (mut checked, mut skipped) = (0, 0);
    for (k, name) in p.names().iter().enumerate() {
        let n = p.tensors()[k].numel();
        for j in (0..n).step_by((n / 3).max(1)) {
            let mut up = p.clone();
            let mut dn = p.clone();
            let orig = p.tensors()[k].data()[j];
            let eps = 1e-2f32;
            up.tensors_mut()[k].data_mut()[j] = orig + eps;
            dn.tensors_mut()[k].data_mut()[j] = orig - eps;
            let h_up = ((orig + eps) as f64) - orig as f64;
            let h_dn = orig as f64 - ((orig - eps) as f64);
            let (l_up, l_dn) = (loss_of(&up).0, loss_of(&dn).0);
            let fwd = (l_up - base) / h_up;
            let bwd = (base - l_dn) / h_dn;
            // One-sided slopes that disagree mean a ReLU or max-pool switch
            // lies inside the stencil, where central differences are meaningless.
            let curvature_ok = (fwd - bwd).abs() <= 0.05 * fwd.abs().max(bwd.abs()).max(1e-1);
            if !curvature_ok {
                skipped += 1;
                continue;
            }
            let fd = (l_up - l_dn) / (h_up + h_dn);
            let a = analytic[k][j] as f64;
            let err = (a - fd).abs() / fd.abs().max(a.abs()).max(1e-2);
            assert!(err < 2e-2, "{name}[{j}]: analytic {a} vs fd {fd}");
            worst = worst.max(err);
            checked += 1;
        }
    }
    assert!(checked >= 3 * skipped, "{checked} checked, {skipped} skipped");
    println!("worst relative error {worst:.2e} over {checked} entries, {skipped} near kinks");
}
