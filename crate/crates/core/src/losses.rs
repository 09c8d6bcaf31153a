//! Masked training objectives averaged over station pixels only.
//!
//! Each loss comes in two forms: a value-only version over [`Grid`]s
//! (f64 accumulation) and a tape version used for training. Target values at
//! unmasked pixels are never read; the tape versions substitute zeros there so
//! the NaN sentinel cannot leak into gradients.

use std::f64::consts::PI;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Mean over masked pixels of `0.5 * [ln(2 pi s2) + (y - mu)^2 / s2]`.
pub fn gaussian_nll(mu: &Grid, sigma2: &Grid, y: &Grid, mask: &Mask) -> Result<f64> {
    mu.check_shape(sigma2, "gaussian_nll")?;
    mu.check_shape(y, "gaussian_nll")?;
    mask.check_grid(mu, "gaussian_nll")?;
    let mut sum = 0f64;
    let mut n = 0usize;
    for i in mask.indices() {
        let s2 = sigma2.data()[i] as f64;
        if !(s2 > 0.0) {
            return Err(Error::Contract(format!(
                "gaussian_nll: variance {s2} at pixel {i} is not positive"
            )));
        }
        let r = y.data()[i] as f64 - mu.data()[i] as f64;
        sum += 0.5 * ((2.0 * PI * s2).ln() + r * r / s2);
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyMask("gaussian_nll"));
    }
    Ok(sum / n as f64)
}

/// Pinball loss `rho_tau(u) = u (tau - 1[u < 0])`, `u = y - q`.
pub fn pinball_scalar(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        u * (tau - 1.0)
    } else {
        u * tau
    }
}

/// Mean pinball loss over masked pixels.
pub fn pinball(q_pred: &Grid, y: &Grid, tau: f64, mask: &Mask) -> Result<f64> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Contract(format!("quantile level {tau} outside (0, 1)")));
    }
    q_pred.check_shape(y, "pinball")?;
    mask.check_grid(q_pred, "pinball")?;
    let mut sum = 0f64;
    let mut n = 0usize;
    for i in mask.indices() {
        sum += pinball_scalar(y.data()[i] as f64 - q_pred.data()[i] as f64, tau);
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyMask("pinball"));
    }
    Ok(sum / n as f64)
}

/// Unweighted sum of the pinball losses of each quantile head.
pub fn quantile_loss(preds: &[Grid; 3], taus: &[f64; 3], y: &Grid, mask: &Mask) -> Result<f64> {
    preds
        .iter()
        .zip(taus)
        .map(|(q, &t)| pinball(q, y, t, mask))
        .sum()
}

/// Target tensor with zeros at unmasked positions, plus the flat mask.
pub fn sanitized_target(y: &[f32], mask: &[bool], shape: &[usize]) -> Result<Tensor> {
    if y.len() != mask.len() {
        return Err(Error::dim(
            "target",
            format!("{} target values vs {} mask cells", y.len(), mask.len()),
        ));
    }
    let data = y
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m { v } else { 0.0 })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Tape version of [`gaussian_nll`]. `mu`, `sigma2` and `y` share a shape
/// and `mask` has one entry per element.
pub fn gaussian_nll_graph(tape: &mut Tape, mu: Var, sigma2: Var, y: Var, mask: &[bool]) -> Result<Var> {
    let r = tape.sub(y, mu)?;
    let r2 = tape.square(r);
    let ratio = tape.div(r2, sigma2)?;
    let log_var = tape.ln(sigma2);
    let s = tape.add(log_var, ratio)?;
    let half = tape.scale(s, 0.5);
    let per_pixel = tape.shift(half, HALF_LN_2PI as f32);
    tape.mean_masked(per_pixel, mask)
}

/// Tape version of [`pinball`]: `mean(tau * u + relu(-u))`.
pub fn pinball_graph(tape: &mut Tape, q: Var, y: Var, tau: f64, mask: &[bool]) -> Result<Var> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Contract(format!("quantile level {tau} outside (0, 1)")));
    }
    let u = tape.sub(y, q)?;
    let lin = tape.scale(u, tau as f32);
    let neg = tape.scale(u, -1.0);
    let hinge = tape.relu(neg);
    let per_pixel = tape.add(lin, hinge)?;
    tape.mean_masked(per_pixel, mask)
}
