//! GUQD dataset directories.
//!
//! A dataset is a directory holding `manifest.txt` (`key=value` lines) and
//! one `YYYY-MM-DD.guq` file per day: `"GUQD"`, version `u16`, `C u16`,
//! `H u16`, `W u16`, then `C + 2` little-endian binary32 planes of `H*W`
//! values (inputs, target, mask as 0/1). Unmasked target pixels hold the
//! bit pattern `0x7FC00000`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;

use super::region::{RegionName, RegionSpec};
use super::sample::{GridSample, TARGET_SENTINEL_BITS};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::grid::{Grid, Mask, Unit};

pub const MAGIC: &[u8; 4] = b"GUQD";
pub const VERSION: u16 = 1;
pub const MANIFEST: &str = "manifest.txt";
const DATE_FMT: &str = "%Y-%m-%d";

/// A loaded dataset: region, channel names, samples sorted by date, and any
/// extra manifest keys (e.g. generator parameters).
#[derive(Clone, Debug)]
pub struct Dataset {
    pub region: RegionSpec,
    pub channel_names: Vec<String>,
    pub samples: Vec<GridSample>,
    pub extra: BTreeMap<String, String>,
}

impl Dataset {
    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }
}

pub fn encode_day(sample: &GridSample) -> Vec<u8> {
    let (c, h, w) = (sample.channels(), sample.height(), sample.width());
    let mut buf = Vec::with_capacity(12 + (c + 2) * h * w * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for d in [c, h, w] {
        buf.extend_from_slice(&(d as u16).to_le_bytes());
    }
    for v in sample.x.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for (&v, &m) in sample.y.data().iter().zip(sample.mask.cells()) {
        let bits = if m { v.to_bits() } else { TARGET_SENTINEL_BITS };
        buf.extend_from_slice(&bits.to_le_bytes());
    }
    for &m in sample.mask.cells() {
        buf.extend_from_slice(&(if m { 1.0f32 } else { 0.0 }).to_le_bytes());
    }
    buf
}

pub fn decode_day(path: &Path, date: NaiveDate, buf: &[u8]) -> Result<GridSample> {
    let bad = |d: String| Error::format(path, d);
    if buf.len() < 12 || &buf[..4] != MAGIC {
        return Err(bad("bad magic (expected GUQD)".into()));
    }
    let u16_at = |o: usize| u16::from_le_bytes([buf[o], buf[o + 1]]) as usize;
    let version = u16_at(4) as u16;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let (c, h, w) = (u16_at(6), u16_at(8), u16_at(10));
    let plane = h * w;
    let expected = 12 + (c + 2) * plane * 4;
    if buf.len() != expected {
        return Err(bad(format!("size {} bytes, header implies {expected}", buf.len())));
    }
    let vals: Vec<f32> = buf[12..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let x = Tensor::new(vec![c, h, w], vals[..c * plane].to_vec())?;
    let y = Grid::new(h, w, vals[c * plane..(c + 1) * plane].to_vec(), Unit::Ppb)?;
    let mut cells = Vec::with_capacity(plane);
    for &m in &vals[(c + 1) * plane..] {
        match m {
            v if v == 1.0 => cells.push(true),
            v if v == 0.0 => cells.push(false),
            v => return Err(bad(format!("mask plane holds {v}, expected 0 or 1"))),
        }
    }
    let mask = Mask::new(h, w, cells)?;
    GridSample::new(date, x, y, mask).map_err(|e| bad(e.to_string()))
}

fn manifest_text(ds: &Dataset) -> String {
    let r = &ds.region;
    let mut lines = vec![
        format!("region={}", r.name),
        format!("H={}", r.height),
        format!("W={}", r.width),
        format!("channels={}", ds.channels()),
        format!("n_days={}", ds.samples.len()),
        format!("channel_names={}", ds.channel_names.join(",")),
        format!("lat0={}", r.lat0),
        format!("lon0={}", r.lon0),
        format!("cell_size={}", r.cell_size),
    ];
    lines.extend(ds.extra.iter().map(|(k, v)| format!("{k}={v}")));
    lines.join("\n") + "\n"
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in &ds.samples {
        if s.channels() != ds.channels() || s.height() != ds.region.height || s.width() != ds.region.width {
            return Err(Error::dim(
                "write_dataset",
                format!("sample {} does not match the manifest dims", s.date),
            ));
        }
    }
    let manifest = dir.join(MANIFEST);
    fs::write(&manifest, manifest_text(ds)).map_err(|e| Error::io(&manifest, e))?;
    for s in &ds.samples {
        let path = day_path(dir, s.date);
        fs::write(&path, encode_day(s)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn day_path(dir: &Path, date: NaiveDate) -> PathBuf {
    dir.join(format!("{}.guq", date.format(DATE_FMT)))
}

pub fn parse_manifest(path: &Path, text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("line {}: expected key=value", i + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn take_key<T: std::str::FromStr>(path: &Path, map: &mut BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = map
        .remove(key)
        .ok_or_else(|| Error::format(path, format!("manifest lacks {key}")))?;
    raw.parse()
        .map_err(|_| Error::format(path, format!("cannot parse {key}={raw}")))
}

/// Reads a GUQD directory. Any malformed file aborts the whole load.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut map = parse_manifest(&mpath, &text)?;
    let name: RegionName = take_key::<String>(&mpath, &mut map, "region")?
        .parse()
        .map_err(|e: Error| Error::format(&mpath, e.to_string()))?;
    let region = RegionSpec {
        name,
        height: take_key(&mpath, &mut map, "H")?,
        width: take_key(&mpath, &mut map, "W")?,
        lat0: take_key(&mpath, &mut map, "lat0")?,
        lon0: take_key(&mpath, &mut map, "lon0")?,
        cell_size: take_key(&mpath, &mut map, "cell_size")?,
    };
    let channels: usize = take_key(&mpath, &mut map, "channels")?;
    let n_days: usize = take_key(&mpath, &mut map, "n_days")?;
    let names: String = take_key(&mpath, &mut map, "channel_names")?;
    let channel_names: Vec<String> = names.split(',').map(str::to_string).collect();
    if channel_names.len() != channels {
        return Err(Error::format(
            &mpath,
            format!("{} channel names for {channels} channels", channel_names.len()),
        ));
    }

    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("guq") {
            files.push(path);
        }
    }
    files.sort();
    let mut samples = Vec::with_capacity(files.len());
    for path in files {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let date = NaiveDate::parse_from_str(stem, DATE_FMT)
            .map_err(|e| Error::format(&path, format!("unparseable date {stem:?}: {e}")))?;
        let buf = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let s = decode_day(&path, date, &buf)?;
        if s.channels() != channels || s.height() != region.height || s.width() != region.width {
            return Err(Error::format(
                &path,
                format!(
                    "dims C={} H={} W={} differ from manifest C={channels} H={} W={}",
                    s.channels(),
                    s.height(),
                    s.width(),
                    region.height,
                    region.width
                ),
            ));
        }
        samples.push(s);
    }
    if samples.len() != n_days {
        return Err(Error::format(
            &mpath,
            format!("manifest says n_days={n_days}, found {} day files", samples.len()),
        ));
    }
    samples.sort_by_key(|s| s.date);
    Ok(Dataset {
        region,
        channel_names,
        samples,
        extra: map,
    })
}
