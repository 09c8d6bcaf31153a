//! Central finite-difference gradient checker.
//!
//! The scalar under test is `L = sum_i r_i * f(inputs)_i` for a fixed random
//! weighting `r`, evaluated from the forward value alone with f64
//! accumulation. The reverse-mode gradient comes from the tape.

use griduq::autodiff::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-3;

/// Maximum relative error between reverse-mode and finite-difference
/// gradients, per input tensor `||analytic - numeric||_inf / ||numeric||_inf`.
pub fn max_rel_error<F>(inputs: &[Tensor], build: F, seed: u64) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).shape().to_vec()
    };
    let numel: usize = out_shape.iter().product();
    let weights = Tensor::new(
        out_shape,
        (0..numel).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
    )
    .unwrap();

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).unwrap();

    let objective = |ins: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).dot(&weights)
    };

    let mut worst = 0f64;
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).unwrap().to_vec();
        let mut numeric = vec![0f64; analytic.len()];
        let mut ins = inputs.to_vec();
        for j in 0..analytic.len() {
            let orig = ins[k].data()[j];
            // Divide by the step actually representable in f32.
            let hi = (orig as f64 + FD_EPS) as f32;
            let lo = (orig as f64 - FD_EPS) as f32;
            ins[k].data_mut()[j] = hi;
            let up = objective(&ins);
            ins[k].data_mut()[j] = lo;
            let down = objective(&ins);
            ins[k].data_mut()[j] = orig;
            numeric[j] = (up - down) / (hi as f64 - lo as f64);
        }
        let scale = numeric.iter().fold(0f64, |m, v| m.max(v.abs())).max(1e-6);
        let err = analytic
            .iter()
            .zip(&numeric)
            .fold(0f64, |m, (&a, &n)| m.max((a as f64 - n).abs()));
        worst = worst.max(err / scale);
    }
    worst
}

/// Uniform values in `[lo, hi)` whose magnitude is at least `min_abs`,
/// keeping finite differences away from kinks at zero.
pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32, min_abs: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.gen_range(lo..hi);
            if v.abs() >= min_abs {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values on a 0.05 lattice, so every pooling window has a unique
/// maximum separated by far more than the finite-difference step.
pub fn distinct_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut vals: Vec<f32> = (0..n).map(|i| i as f32 * 0.05 - n as f32 * 0.025).collect();
    vals.shuffle(rng);
    Tensor::new(shape.to_vec(), vals).unwrap()
}

/// Runs every tape kernel through [`max_rel_error`] on `cases` random
/// shapes/seeds each. Returns `(kernel, worst error over cases)`.
pub fn kernel_suite(cases: u64) -> Vec<(&'static str, f64)> {
    type Setup = fn(&mut ChaCha8Rng) -> Vec<Tensor>;
    type Build = fn(&mut Tape, &[Var]) -> Var;
    fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize) {
        (
            rng.gen_range(1..=2),
            rng.gen_range(1..=3),
            rng.gen_range(2..=5),
            rng.gen_range(2..=5),
        )
    }
    fn ew(rng: &mut ChaCha8Rng) -> Vec<usize> {
        let (n, c, h, w) = dims(rng);
        vec![n, c, h, w]
    }
    let kernels: Vec<(&'static str, Setup, Build)> = vec![
        (
            "conv2d",
            |rng| {
                let (n, c, h, w) = dims(rng);
                let co = rng.gen_range(1..=3);
                let k = rng.gen_range(1..=3);
                vec![
                    random_tensor(rng, &[n, c, h + 2, w + 2], -1.0, 1.0, 0.0),
                    random_tensor(rng, &[co, c, k, k], -1.0, 1.0, 0.0),
                    random_tensor(rng, &[co], -1.0, 1.0, 0.0),
                ]
            },
            |t, v| t.conv2d(v[0], v[1], v[2], 1, 1).unwrap(),
        ),
        (
            "conv2d_stride2",
            |rng| {
                let (n, c, h, w) = dims(rng);
                let co = rng.gen_range(1..=3);
                vec![
                    random_tensor(rng, &[n, c, 2 * h + 1, 2 * w + 1], -1.0, 1.0, 0.0),
                    random_tensor(rng, &[co, c, 3, 3], -1.0, 1.0, 0.0),
                    random_tensor(rng, &[co], -1.0, 1.0, 0.0),
                ]
            },
            |t, v| t.conv2d(v[0], v[1], v[2], 2, 0).unwrap(),
        ),
        (
            "conv_transpose2d",
            |rng| {
                let (n, c, h, w) = dims(rng);
                let co = rng.gen_range(1..=3);
                vec![
                    random_tensor(rng, &[n, c, h, w], -1.0, 1.0, 0.0),
                    random_tensor(rng, &[c, co, 2, 2], -1.0, 1.0, 0.0),
                    random_tensor(rng, &[co], -1.0, 1.0, 0.0),
                ]
            },
            |t, v| t.conv_transpose2d(v[0], v[1], v[2], 2).unwrap(),
        ),
        (
            "conv_transpose2d_stride1",
            |rng| {
                let (n, c, h, w) = dims(rng);
                let co = rng.gen_range(1..=3);
                vec![
                    random_tensor(rng, &[n, c, h, w], -1.0, 1.0, 0.0),
                    random_tensor(rng, &[c, co, 3, 2], -1.0, 1.0, 0.0),
                    random_tensor(rng, &[co], -1.0, 1.0, 0.0),
                ]
            },
            |t, v| t.conv_transpose2d(v[0], v[1], v[2], 1).unwrap(),
        ),
        (
            "maxpool2d",
            |rng| {
                let (n, c, h, w) = dims(rng);
                vec![distinct_tensor(rng, &[n, c, 2 * h, 2 * w])]
            },
            |t, v| t.maxpool2d(v[0], 2).unwrap(),
        ),
        (
            "relu",
            |rng| {
                let s = ew(rng);
                vec![random_tensor(rng, &s, -2.0, 2.0, 0.05)]
            },
            |t, v| t.relu(v[0]),
        ),
        (
            "concat_channels",
            |rng| {
                let (n, c, h, w) = dims(rng);
                vec![
                    random_tensor(rng, &[n, c, h, w], -1.0, 1.0, 0.0),
                    random_tensor(rng, &[n, c + 1, h, w], -1.0, 1.0, 0.0),
                ]
            },
            |t, v| t.concat_channels(v[0], v[1]).unwrap(),
        ),
        (
            "channels",
            |rng| {
                let (n, _, h, w) = dims(rng);
                vec![random_tensor(rng, &[n, 3, h, w], -1.0, 1.0, 0.0)]
            },
            |t, v| t.channels(v[0], 1, 2).unwrap(),
        ),
        (
            "add",
            |rng| {
                let s = ew(rng);
                vec![random_tensor(rng, &s, -1.0, 1.0, 0.0), random_tensor(rng, &s, -1.0, 1.0, 0.0)]
            },
            |t, v| t.add(v[0], v[1]).unwrap(),
        ),
        (
            "sub",
            |rng| {
                let s = ew(rng);
                vec![random_tensor(rng, &s, -1.0, 1.0, 0.0), random_tensor(rng, &s, -1.0, 1.0, 0.0)]
            },
            |t, v| t.sub(v[0], v[1]).unwrap(),
        ),
        (
            "mul",
            |rng| {
                let s = ew(rng);
                vec![random_tensor(rng, &s, -1.0, 1.0, 0.0), random_tensor(rng, &s, -1.0, 1.0, 0.0)]
            },
            |t, v| t.mul(v[0], v[1]).unwrap(),
        ),
        (
            "div",
            |rng| {
                let s = ew(rng);
                vec![random_tensor(rng, &s, -1.0, 1.0, 0.0), random_tensor(rng, &s, 0.5, 2.0, 0.0)]
            },
            |t, v| t.div(v[0], v[1]).unwrap(),
        ),
        (
            "exp",
            |rng| {
                let s = ew(rng);
                vec![random_tensor(rng, &s, -2.0, 2.0, 0.0)]
            },
            |t, v| t.exp(v[0]),
        ),
        (
            "ln",
            |rng| {
                let s = ew(rng);
                vec![random_tensor(rng, &s, 0.5, 3.0, 0.0)]
            },
            |t, v| t.ln(v[0]),
        ),
        (
            "softplus",
            |rng| {
                let s = ew(rng);
                vec![random_tensor(rng, &s, -4.0, 4.0, 0.0)]
            },
            |t, v| t.softplus(v[0]),
        ),
        (
            "square",
            |rng| {
                let s = ew(rng);
                vec![random_tensor(rng, &s, -2.0, 2.0, 0.0)]
            },
            |t, v| t.square(v[0]),
        ),
        (
            "scale_shift",
            |rng| {
                let s = ew(rng);
                vec![random_tensor(rng, &s, -2.0, 2.0, 0.0)]
            },
            |t, v| {
                let a = t.scale(v[0], -1.7);
                t.shift(a, 0.3)
            },
        ),
        (
            "dropout",
            |rng| {
                let s = ew(rng);
                vec![random_tensor(rng, &s, -2.0, 2.0, 0.0)]
            },
            |t, v| {
                let mut r = ChaCha8Rng::seed_from_u64(99);
                t.dropout(v[0], 0.3, true, &mut r).unwrap()
            },
        ),
        (
            "mean_masked",
            |rng| {
                let s = ew(rng);
                vec![random_tensor(rng, &s, -2.0, 2.0, 0.0)]
            },
            |t, v| {
                let n = t.value(v[0]).numel();
                let mask: Vec<bool> = (0..n).map(|i| i % 3 != 1).collect();
                t.mean_masked(v[0], &mask).unwrap()
            },
        ),
        (
            "sum",
            |rng| {
                let s = ew(rng);
                vec![random_tensor(rng, &s, -2.0, 2.0, 0.0)]
            },
            |t, v| t.sum(v[0]),
        ),
        (
            "pad_crop",
            |rng| {
                let (n, c, h, w) = dims(rng);
                vec![random_tensor(rng, &[n, c, h + 1, w + 1], -1.0, 1.0, 0.0)]
            },
            |t, v| {
                let s = t.value(v[0]).shape().to_vec();
                let p = t.pad_to(v[0], s[2] + 2, s[3] + 3).unwrap();
                let p = t.scale(p, 2.0);
                t.crop_to(p, s[2] - 1, s[3]).unwrap()
            },
        ),
    ];
    kernels
        .into_iter()
        .map(|(name, setup, build)| {
            let worst = (0..cases)
                .map(|seed| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + 13);
                    let inputs = setup(&mut rng);
                    max_rel_error(&inputs, build, seed)
                })
                .fold(0f64, f64::max);
            (name, worst)
        })
        .collect()
}
