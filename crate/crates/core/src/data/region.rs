use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RegionName {
    NorthAmerica,
    Europe,
    Synthetic,
}

impl RegionName {
    pub fn code(self) -> &'static str {
        match self {
            RegionName::NorthAmerica => "na",
            RegionName::Europe => "eu",
            RegionName::Synthetic => "synth",
        }
    }
}

impl fmt::Display for RegionName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for RegionName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "na" => Ok(RegionName::NorthAmerica),
            "eu" => Ok(RegionName::Europe),
            "synth" => Ok(RegionName::Synthetic),
            other => Err(Error::Invalid(format!("unknown region {other:?} (na|eu|synth)"))),
        }
    }
}

/// Grid extent and geo-transform. `lat0` is the northern edge of row 0 and
/// `lon0` the western edge of column 0; cells are square in degrees.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionSpec {
    pub name: RegionName,
    pub height: usize,
    pub width: usize,
    pub lat0: f64,
    pub lon0: f64,
    pub cell_size: f64,
}

/// Cell size of the emulator grid in degrees.
pub const CELL_DEGREES: f64 = 1.125;

impl RegionSpec {
    /// 31 x 49 cells over North America.
    pub fn north_america() -> Self {
        Self {
            name: RegionName::NorthAmerica,
            height: 31,
            width: 49,
            lat0: 55.1,
            lon0: -126.5625,
            cell_size: CELL_DEGREES,
        }
    }

    /// 31 x 27 cells over Europe.
    pub fn europe() -> Self {
        Self {
            name: RegionName::Europe,
            height: 31,
            width: 27,
            lat0: 71.0,
            lon0: -10.0,
            cell_size: CELL_DEGREES,
        }
    }

    pub fn synthetic(height: usize, width: usize) -> Self {
        Self {
            name: RegionName::Synthetic,
            height,
            width,
            lat0: 50.0,
            lon0: 0.0,
            cell_size: CELL_DEGREES,
        }
    }

    pub fn for_name(name: RegionName) -> Self {
        match name {
            RegionName::NorthAmerica => Self::north_america(),
            RegionName::Europe => Self::europe(),
            RegionName::Synthetic => Self::synthetic(24, 24),
        }
    }

    /// Cell containing `(lat, lon)`.
    pub fn cell_of(&self, lat: f64, lon: f64) -> Result<(usize, usize)> {
        let r = ((self.lat0 - lat) / self.cell_size).floor();
        let c = ((lon - self.lon0) / self.cell_size).floor();
        if !(r >= 0.0 && c >= 0.0 && (r as usize) < self.height && (c as usize) < self.width) {
            return Err(Error::OutOfBounds {
                lat,
                lon,
                region: self.name.to_string(),
            });
        }
        Ok((r as usize, c as usize))
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.lat0 - (row as f64 + 0.5) * self.cell_size,
            self.lon0 + (col as f64 + 0.5) * self.cell_size,
        )
    }

    /// Columns `width/2 ..` form the eastern ("right") half.
    pub fn is_right_half(&self, col: usize) -> bool {
        col >= self.width / 2
    }
}
