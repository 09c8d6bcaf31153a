use chrono::NaiveDate;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};

/// Sentinel stored at unmasked target pixels (quiet NaN).
pub const TARGET_SENTINEL_BITS: u32 = 0x7FC0_0000;

pub fn target_sentinel() -> f32 {
    f32::from_bits(TARGET_SENTINEL_BITS)
}

/// One daily example: input stack, bias target and station mask.
#[derive(Clone, Debug)]
pub struct GridSample {
    pub date: NaiveDate,
    /// `[C, H, W]`
    pub x: Tensor,
    /// Bias in ppb; sentinel at unmasked pixels.
    pub y: Grid,
    pub mask: Mask,
}

impl GridSample {
    pub fn new(date: NaiveDate, x: Tensor, y: Grid, mask: Mask) -> Result<Self> {
        let (h, w) = match x.shape() {
            [_, h, w] => (*h, *w),
            s => return Err(Error::dim("sample", format!("x must be [C,H,W], got {s:?}"))),
        };
        if (y.height(), y.width()) != (h, w) || (mask.height(), mask.width()) != (h, w) {
            return Err(Error::dim(
                "sample",
                format!(
                    "x is {h}x{w}, y {}x{}, mask {}x{}",
                    y.height(),
                    y.width(),
                    mask.height(),
                    mask.width()
                ),
            ));
        }
        let mut y = y;
        for (v, &m) in y.data_mut().iter_mut().zip(mask.cells()) {
            if !m {
                *v = target_sentinel();
            } else if !v.is_finite() {
                return Err(Error::Contract(format!("non-finite target {v} at a masked pixel")));
            }
        }
        Ok(Self { date, x, y, mask })
    }

    pub fn channels(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.y.height()
    }

    pub fn width(&self) -> usize {
        self.y.width()
    }

    pub fn bits_eq(&self, other: &GridSample) -> bool {
        self.date == other.date
            && self.x.bits_eq(&other.x)
            && self.y.bits_eq(&other.y)
            && self.mask == other.mask
    }
}

/// Stacks samples into a batch `x: [N, C, H, W]`, a zero-filled target
/// `[N, 1, H, W]` and the flat mask.
pub fn batch(samples: &[&GridSample]) -> Result<(Tensor, Tensor, Vec<bool>)> {
    let xs: Vec<&Tensor> = samples.iter().map(|s| &s.x).collect();
    let x = Tensor::stack(&xs)?;
    let first = samples
        .first()
        .ok_or_else(|| Error::Contract("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut y = Vec::with_capacity(samples.len() * h * w);
    let mut mask = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        for (&v, &m) in s.y.data().iter().zip(s.mask.cells()) {
            y.push(if m { v } else { 0.0 });
            mask.push(m);
        }
    }
    let y = Tensor::new(vec![samples.len(), 1, h, w], y)?;
    Ok((x, y, mask))
}
