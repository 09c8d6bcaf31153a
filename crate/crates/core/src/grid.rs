//! Single-channel rasters and station masks.

use std::fmt;

use crate::error::{Error, Result};

/// Physical unit carried by a [`Grid`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Unit {
    Ppb,
    PpbSquared,
    Dimensionless,
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Unit::Ppb => "ppb",
            Unit::PpbSquared => "ppb^2",
            Unit::Dimensionless => "1",
        };
        f.write_str(s)
    }
}

/// An H x W array of 32-bit values, row 0 northmost.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    height: usize,
    width: usize,
    data: Vec<f32>,
    unit: Unit,
}

impl Grid {
    pub fn new(height: usize, width: usize, data: Vec<f32>, unit: Unit) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dim(
                "grid",
                format!("{} values for a {height}x{width} grid", data.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
            unit,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32, unit: Unit) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
            unit,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn unit(&self) -> Unit {
        self.unit
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        self.data[row * self.width + col] = value;
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Bitwise equality, treating NaN payloads as ordinary bit patterns.
    pub fn bits_eq(&self, other: &Grid) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.unit == other.unit
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub(crate) fn check_shape(&self, other: &Grid, op: &'static str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::dim(
                op,
                format!(
                    "grid {}x{} vs {}x{}",
                    self.height, self.width, other.height, other.width
                ),
            ))
        }
    }
}

/// Station coverage: `true` where a ground-truth value exists.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    cells: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != height * width {
            return Err(Error::dim(
                "mask",
                format!("{} cells for a {height}x{width} mask", cells.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            cells,
        })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            cells: vec![true; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// Flat indices of covered cells, row-major.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.cells
            .iter()
            .enumerate()
            .filter_map(|(i, &c)| c.then_some(i))
    }

    pub(crate) fn check_grid(&self, grid: &Grid, op: &'static str) -> Result<()> {
        if self.height == grid.height() && self.width == grid.width() {
            Ok(())
        } else {
            Err(Error::dim(
                op,
                format!(
                    "mask {}x{} vs grid {}x{}",
                    self.height,
                    self.width,
                    grid.height(),
                    grid.width()
                ),
            ))
        }
    }
}
