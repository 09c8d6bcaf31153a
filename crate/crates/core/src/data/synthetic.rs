//! Synthetic stand-in for the real feature/target rasters.
//!
//! Inputs are smooth random fields: two static geography-like channels (a
//! west-east ramp and a smooth field), dynamic channels built from three
//! low-frequency sinusoids whose phases are redrawn every day, and, for the
//! 51-channel layout, extra static land-use-like fields. Every channel has
//! its own affine "physical unit" scaling. The noiseless target is
//! `15 * tanh((0.8 f2 + 0.6 f3 - 0.5 f4) / 1.2)` ppb over the unit-variance
//! fields of channels 2..4; noise follows the chosen profile. Stations are
//! a fixed, spatially clustered Bernoulli pattern.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::format::Dataset;
use super::region::RegionSpec;
use super::sample::GridSample;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::grid::{Grid, Mask, Unit};

/// Number of leading time-invariant channels.
pub const STATIC_CHANNELS: usize = 2;
/// Channels that drive the target.
pub const TARGET_CHANNELS: [usize; 3] = [2, 3, 4];
const TARGET_WEIGHTS: [f64; 3] = [0.8, 0.6, -0.5];
const TARGET_AMPLITUDE: f64 = 15.0;
const TARGET_SOFTNESS: f64 = 1.2;
const DEFAULT_HETERO_BASE: f32 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseProfile {
    /// Constant noise std (ppb) everywhere.
    Homoscedastic(f32),
    /// Noise std `base` on the western half and `2 * base` on the eastern half.
    Heteroscedastic { base: f32 },
}

impl NoiseProfile {
    pub fn sigma_grid(&self, region: &RegionSpec) -> Grid {
        let mut g = Grid::filled(region.height, region.width, 0.0, Unit::Ppb);
        for r in 0..region.height {
            for c in 0..region.width {
                let s = match *self {
                    NoiseProfile::Homoscedastic(s) => s,
                    NoiseProfile::Heteroscedastic { base } => {
                        if region.is_right_half(c) {
                            2.0 * base
                        } else {
                            base
                        }
                    }
                };
                g.set(r, c, s);
            }
        }
        g
    }
}

impl fmt::Display for NoiseProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseProfile::Homoscedastic(s) => write!(f, "homo:{s}"),
            NoiseProfile::Heteroscedastic { base } => write!(f, "hetero:{base}"),
        }
    }
}

impl FromStr for NoiseProfile {
    type Err = Error;

    /// `homo:SIGMA`, `hetero` or `hetero:BASE`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Invalid(format!("noise profile {s:?} (homo:SIGMA | hetero[:BASE])"));
        let parse_sigma = |v: &str| -> Result<f32> {
            let x: f32 = v.parse().map_err(|_| bad())?;
            if x >= 0.0 && x.is_finite() {
                Ok(x)
            } else {
                Err(bad())
            }
        };
        match s.split_once(':') {
            Some(("homo", v)) => Ok(NoiseProfile::Homoscedastic(parse_sigma(v)?)),
            Some(("hetero", v)) => Ok(NoiseProfile::Heteroscedastic { base: parse_sigma(v)? }),
            None if s == "hetero" => Ok(NoiseProfile::Heteroscedastic {
                base: DEFAULT_HETERO_BASE,
            }),
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    pub region: RegionSpec,
    pub n_days: usize,
    pub channels: usize,
    pub noise: NoiseProfile,
    pub station_density: f64,
    pub seed: u64,
}

/// A generated dataset plus the quantities an oracle needs.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub dataset: Dataset,
    /// Noiseless target per day, defined at every pixel.
    pub truth: Vec<Grid>,
    /// Noise std per pixel.
    pub sigma: Grid,
}

/// One sinusoidal component: wave numbers (cycles per domain) and amplitude.
#[derive(Clone, Copy, Debug)]
struct Wave {
    fu: f64,
    fv: f64,
    amp: f64,
}

fn waves(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [Wave; 3] {
    std::array::from_fn(|_| {
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        Wave {
            fu: rng.gen_range(lo..hi),
            fv: sign * rng.gen_range(lo..hi),
            amp: (2.0f64 / 3.0).sqrt(),
        }
    })
}

fn field(ws: &[Wave; 3], phases: &[f64; 3], u: f64, v: f64) -> f64 {
    ws.iter()
        .zip(phases)
        .map(|(w, &p)| w.amp * (TAU * (w.fu * u + w.fv * v) + p).sin())
        .sum()
}

fn unit_coords(region: &RegionSpec, r: usize, c: usize) -> (f64, f64) {
    let u = c as f64 / (region.width.max(2) - 1) as f64;
    let v = r as f64 / (region.height.max(2) - 1) as f64;
    (u, v)
}

/// The noiseless target from unit-variance fields of [`TARGET_CHANNELS`].
pub fn target_function(f: [f64; 3]) -> f64 {
    let s: f64 = f.iter().zip(TARGET_WEIGHTS).map(|(x, w)| x * w).sum();
    TARGET_AMPLITUDE * (s / TARGET_SOFTNESS).tanh()
}

/// Consecutive June days starting in 2005 (30 per year).
pub fn synthetic_date(day: usize) -> NaiveDate {
    NaiveDate::from_ymd_opt(2005 + (day / 30) as i32, 6, 1 + (day % 30) as u32).expect("valid June day")
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    if cfg.channels != 28 && cfg.channels != 51 {
        return Err(Error::Invalid(format!("channels must be 28 or 51, got {}", cfg.channels)));
    }
    if !(cfg.station_density > 0.0 && cfg.station_density <= 1.0) {
        return Err(Error::Invalid(format!(
            "station density {} outside (0, 1]",
            cfg.station_density
        )));
    }
    let region = &cfg.region;
    let (h, w) = (region.height, region.width);
    let plane = h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let is_static = |ch: usize| ch < STATIC_CHANNELS || ch >= 28;
    let channel_waves: Vec<[Wave; 3]> = (0..cfg.channels).map(|_| waves(&mut rng, 0.2, 1.2)).collect();
    let static_phases: Vec<[f64; 3]> = (0..cfg.channels)
        .map(|_| std::array::from_fn(|_| rng.gen_range(0.0..TAU)))
        .collect();
    let affine: Vec<(f64, f64)> = (0..cfg.channels)
        .map(|_| (rng.gen_range(-50.0..50.0), 10f64.powf(rng.gen_range(-1.0..2.0))))
        .collect();

    // Station pattern: Bernoulli with intensity tilted by a smooth field.
    let cluster_waves = waves(&mut rng, 1.0, 3.0);
    let cluster_phases: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..TAU));
    let weights: Vec<f64> = (0..plane)
        .map(|i| {
            let (u, v) = unit_coords(region, i / w, i % w);
            (1.5 * field(&cluster_waves, &cluster_phases, u, v)).exp()
        })
        .collect();
    let mean_w = weights.iter().sum::<f64>() / plane as f64;
    let mut cells: Vec<bool> = weights
        .iter()
        .map(|&wt| {
            let p = (cfg.station_density * wt / mean_w).min(1.0);
            let draw: f64 = rng.gen();
            cfg.station_density >= 1.0 || draw < p
        })
        .collect();
    if !cells.iter().any(|&c| c) {
        let best = weights
            .iter()
            .enumerate()
            .fold(0, |b, (i, &v)| if v > weights[b] { i } else { b });
        cells[best] = true;
    }
    let mask = Mask::new(h, w, cells)?;
    let sigma = cfg.noise.sigma_grid(region);

    let static_field = |ch: usize, r: usize, c: usize| -> f64 {
        let (u, v) = unit_coords(region, r, c);
        if ch == 0 {
            2.0 * u - 1.0
        } else {
            field(&channel_waves[ch], &static_phases[ch], u, v)
        }
    };

    let mut samples = Vec::with_capacity(cfg.n_days);
    let mut truth = Vec::with_capacity(cfg.n_days);
    let mut unit = vec![0f64; cfg.channels * plane];
    for day in 0..cfg.n_days {
        for ch in 0..cfg.channels {
            let phases: [f64; 3] = if is_static(ch) {
                static_phases[ch]
            } else {
                std::array::from_fn(|_| rng.gen_range(0.0..TAU))
            };
            for r in 0..h {
                for c in 0..w {
                    let (u, v) = unit_coords(region, r, c);
                    unit[ch * plane + r * w + c] = if is_static(ch) {
                        static_field(ch, r, c)
                    } else {
                        field(&channel_waves[ch], &phases, u, v)
                    };
                }
            }
        }
        let x: Vec<f32> = unit
            .iter()
            .enumerate()
            .map(|(i, &f)| {
                let (off, scale) = affine[i / plane];
                (off + scale * f) as f32
            })
            .collect();
        let mut t = Vec::with_capacity(plane);
        let mut y = Vec::with_capacity(plane);
        for i in 0..plane {
            let f = TARGET_CHANNELS.map(|ch| unit[ch * plane + i]);
            let clean = target_function(f);
            let z: f64 = StandardNormal.sample(&mut rng);
            t.push(clean as f32);
            y.push((clean + sigma.data()[i] as f64 * z) as f32);
        }
        truth.push(Grid::new(h, w, t, Unit::Ppb)?);
        samples.push(GridSample::new(
            synthetic_date(day),
            Tensor::new(vec![cfg.channels, h, w], x)?,
            Grid::new(h, w, y, Unit::Ppb)?,
            mask.clone(),
        )?);
    }

    let mut extra = BTreeMap::new();
    extra.insert("generator".into(), "synthetic".into());
    extra.insert("gen.seed".into(), cfg.seed.to_string());
    extra.insert("gen.noise".into(), cfg.noise.to_string());
    extra.insert("gen.density".into(), cfg.station_density.to_string());
    let channel_names = (0..cfg.channels)
        .map(|ch| {
            if ch == 0 {
                "static_ramp".to_string()
            } else if is_static(ch) {
                format!("static_{ch:02}")
            } else {
                format!("dyn_{ch:02}")
            }
        })
        .collect();
    Ok(SyntheticDataset {
        dataset: Dataset {
            region: region.clone(),
            channel_names,
            samples,
            extra,
        },
        truth,
        sigma,
    })
}
