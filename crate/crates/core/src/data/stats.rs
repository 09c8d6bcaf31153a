use log::warn;

use super::sample::GridSample;
use crate::error::{Error, Result};

/// Below this population std a channel is treated as constant.
const DEGENERATE_STD: f64 = 1e-12;

/// Per-channel mean and std over a training split.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl ChannelStats {
    /// Two-pass population statistics over every pixel of every sample.
    /// Constant channels get `std = 1` and a warning.
    pub fn compute(samples: &[&GridSample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Contract("channel statistics of zero samples".into()))?;
        let c = first.channels();
        if let Some(bad) = samples.iter().find(|s| s.channels() != c) {
            return Err(Error::dim(
                "channel_stats",
                format!("{} channels vs {c} in the first sample", bad.channels()),
            ));
        }
        let plane = |s: &GridSample, ch: usize| {
            let p = s.height() * s.width();
            (ch * p, (ch + 1) * p)
        };
        let count: usize = samples.iter().map(|s| s.height() * s.width()).sum();
        let mut mean = Vec::with_capacity(c);
        let mut std = Vec::with_capacity(c);
        for ch in 0..c {
            let mut sum = 0f64;
            for s in samples {
                let (a, b) = plane(s, ch);
                sum += s.x.data()[a..b].iter().map(|&v| v as f64).sum::<f64>();
            }
            let m = sum / count as f64;
            let mut ss = 0f64;
            for s in samples {
                let (a, b) = plane(s, ch);
                ss += s.x.data()[a..b]
                    .iter()
                    .map(|&v| (v as f64 - m).powi(2))
                    .sum::<f64>();
            }
            let mut sd = (ss / count as f64).sqrt();
            if sd < DEGENERATE_STD {
                warn!("channel {ch} is constant over the training split; leaving it unscaled");
                sd = 1.0;
            }
            mean.push(m as f32);
            std.push(sd as f32);
        }
        Ok(Self { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// `x' = (x - mean_c) / std_c` per channel; targets untouched.
pub fn standardize(samples: &mut [GridSample], stats: &ChannelStats) -> Result<()> {
    for s in samples.iter_mut() {
        standardize_one(s, stats)?;
    }
    Ok(())
}

pub fn standardize_one(s: &mut GridSample, stats: &ChannelStats) -> Result<()> {
    if s.channels() != stats.channels() {
        return Err(Error::dim(
            "standardize",
            format!("sample has {} channels, stats {}", s.channels(), stats.channels()),
        ));
    }
    let p = s.height() * s.width();
    for (ch, chunk) in s.x.data_mut().chunks_mut(p).enumerate() {
        let (m, sd) = (stats.mean[ch] as f64, stats.std[ch] as f64);
        for v in chunk {
            *v = ((*v as f64 - m) / sd) as f32;
        }
    }
    Ok(())
}
