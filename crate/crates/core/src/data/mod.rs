//! Raster datasets: in-memory samples, the GUQD on-disk format, splitting,
//! standardization, station lookup and the synthetic generator.

mod format;
mod region;
mod sample;
mod split;
mod stats;
mod synthetic;

use chrono::NaiveDate;
use log::warn;

pub use format::{
    day_path, decode_day, encode_day, parse_manifest, read_dataset, write_dataset, Dataset,
    MAGIC as DATASET_MAGIC, MANIFEST, VERSION as DATASET_VERSION,
};
pub use region::{RegionName, RegionSpec, CELL_DEGREES};
pub use sample::{batch, target_sentinel, GridSample, TARGET_SENTINEL_BITS};
pub use split::{holdout_last_month, split, Split, MIN_SPLIT_SAMPLES};
pub use stats::{standardize, standardize_one, ChannelStats};
pub use synthetic::{
    generate_synthetic, synthetic_date, target_function, NoiseProfile, SyntheticConfig,
    SyntheticDataset, STATIC_CHANNELS, TARGET_CHANNELS,
};

use crate::error::Result;

/// Target values at the cell nearest `(lat, lon)`, only on days where that
/// cell has a station.
pub fn station_series(
    samples: &[GridSample],
    region: &RegionSpec,
    lat: f64,
    lon: f64,
) -> Result<Vec<(NaiveDate, f32)>> {
    let (r, c) = region.cell_of(lat, lon)?;
    let series: Vec<(NaiveDate, f32)> = samples
        .iter()
        .filter(|s| s.mask.get(r, c))
        .map(|s| (s.date, s.y.get(r, c)))
        .collect();
    if series.is_empty() {
        warn!("cell ({r}, {c}) nearest ({lat}, {lon}) has no station data");
    }
    Ok(series)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn series_follows_mask() {
        let d = generate_synthetic(&SyntheticConfig {
            region: RegionSpec::synthetic(10, 10),
            n_days: 6,
            channels: 28,
            noise: NoiseProfile::Homoscedastic(1.0),
            station_density: 0.3,
            seed: 2,
        })
        .unwrap()
        .dataset;
        let m = &d.samples[0].mask;
        let covered = m.indices().next().unwrap();
        let uncovered = (0..100).find(|&i| !m.cells()[i]).unwrap();
        let (lat, lon) = d.region.cell_center(covered / 10, covered % 10);
        assert_eq!(station_series(&d.samples, &d.region, lat, lon).unwrap().len(), 6);
        let (lat, lon) = d.region.cell_center(uncovered / 10, uncovered % 10);
        assert!(station_series(&d.samples, &d.region, lat, lon).unwrap().is_empty());
        assert!(station_series(&d.samples, &d.region, -80.0, 0.0).is_err());
    }
}
