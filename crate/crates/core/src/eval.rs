//! Evaluation metrics, station ranking, spatial extrapolation and
//! heatmap/CSV export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use rayon::prelude::*;

use crate::data::{standardize_one, Dataset, GridSample, RegionSpec};
use crate::error::{Error, Result};
use crate::grid::{Grid, Mask, Unit};
use crate::train::{mean_variance, LoadedModel, RunSet, UqMethod};
use crate::uq::{self, CqrPrediction, McdPrediction};

/// `sqrt(mean((pred - y)^2))` over masked pixels.
pub fn masked_rmse(pred: &Grid, y: &Grid, mask: &Mask) -> Result<f64> {
    pred.check_shape(y, "masked_rmse")?;
    mask.check_grid(pred, "masked_rmse")?;
    let (sum, n) = squared_error(pred, y, mask);
    if n == 0 {
        return Err(Error::EmptyMask("masked_rmse"));
    }
    Ok((sum / n as f64).sqrt())
}

fn squared_error(pred: &Grid, y: &Grid, mask: &Mask) -> (f64, usize) {
    mask.indices().fold((0.0, 0), |(s, n), i| {
        let d = pred.data()[i] as f64 - y.data()[i] as f64;
        (s + d * d, n + 1)
    })
}

/// RMSE over every masked pixel of every sample, pooled.
pub fn pooled_rmse(preds: &[Grid], samples: &[&GridSample]) -> Result<f64> {
    if preds.len() != samples.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} samples",
            preds.len(),
            samples.len()
        )));
    }
    let mut sum = 0.0;
    let mut n = 0;
    for (p, s) in preds.iter().zip(samples) {
        p.check_shape(&s.y, "pooled_rmse")?;
        let (ds, dn) = squared_error(p, &s.y, &s.mask);
        sum += ds;
        n += dn;
    }
    if n == 0 {
        return Err(Error::EmptyMask("pooled_rmse"));
    }
    Ok((sum / n as f64).sqrt())
}

/// Extremes and mean across cells.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellStats {
    pub max: f64,
    pub min: f64,
    pub avg: f64,
}

/// Per-cell mean over the days on which the cell is masked. Cells never
/// masked are `None`.
pub fn time_mean_per_cell(grids: &[&Grid], masks: &[&Mask]) -> Result<Vec<Option<f64>>> {
    let first = grids
        .first()
        .ok_or_else(|| Error::Contract("time mean of zero grids".into()))?;
    if grids.len() != masks.len() {
        return Err(Error::Contract(format!("{} grids for {} masks", grids.len(), masks.len())));
    }
    let n = first.len();
    let mut sum = vec![0f64; n];
    let mut count = vec![0usize; n];
    for (g, m) in grids.iter().zip(masks) {
        g.check_shape(first, "time_mean")?;
        m.check_grid(g, "time_mean")?;
        for i in m.indices() {
            sum[i] += g.data()[i] as f64;
            count[i] += 1;
        }
    }
    Ok(sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
        .collect())
}

/// Max, min and mean of per-cell time means over masked cells.
pub fn cell_stats(grids: &[&Grid], masks: &[&Mask]) -> Result<CellStats> {
    let means: Vec<f64> = time_mean_per_cell(grids, masks)?.into_iter().flatten().collect();
    if means.is_empty() {
        return Err(Error::EmptyMask("cell_stats"));
    }
    Ok(CellStats {
        max: means.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        min: means.iter().copied().fold(f64::INFINITY, f64::min),
        avg: means.iter().sum::<f64>() / means.len() as f64,
    })
}

pub fn interval_stats(preds: &[CqrPrediction], masks: &[&Mask]) -> Result<CellStats> {
    let g: Vec<&Grid> = preds.iter().map(|p| &p.interval_length).collect();
    cell_stats(&g, masks)
}

pub fn epistemic_stats(preds: &[McdPrediction], masks: &[&Mask]) -> Result<CellStats> {
    let g: Vec<&Grid> = preds.iter().map(|p| &p.epistemic).collect();
    cell_stats(&g, masks)
}

/// Fraction of masked (pixel, day) pairs with `lo <= y <= hi`.
pub fn empirical_coverage(preds: &[CqrPrediction], samples: &[&GridSample]) -> Result<f64> {
    if preds.len() != samples.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} samples",
            preds.len(),
            samples.len()
        )));
    }
    let mut hit = 0usize;
    let mut n = 0usize;
    for (p, s) in preds.iter().zip(samples) {
        p.lo.check_shape(&s.y, "coverage")?;
        for i in s.mask.indices() {
            let y = s.y.data()[i];
            hit += usize::from(p.lo.data()[i] <= y && y <= p.hi.data()[i]);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask("empirical_coverage"));
    }
    Ok(hit as f64 / n as f64)
}

/// Fraction of masked (pixel, day) pairs whose raw heads are out of order
/// (`q_lo > q_mid` or `q_mid > q_hi`).
pub fn crossing_rate(raw: &[[Grid; 3]], masks: &[&Mask]) -> Result<f64> {
    let mut bad = 0usize;
    let mut n = 0usize;
    for ([lo, mid, hi], m) in raw.iter().zip(masks) {
        m.check_grid(lo, "crossing_rate")?;
        for i in m.indices() {
            let (a, b, c) = (lo.data()[i], mid.data()[i], hi.data()[i]);
            bad += usize::from(a > b || b > c);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask("crossing_rate"));
    }
    Ok(bad as f64 / n as f64)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Contract(format!(
            "spearman needs two equal-length series of at least 2 values, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let (ma, va) = mean_variance(&ra);
    let (mb, vb) = mean_variance(&rb);
    let cov = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / a.len() as f64;
    Ok(cov / (va * vb).sqrt())
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start;
        while end + 1 < idx.len() && v[idx[end + 1]] == v[idx[start]] {
            end += 1;
        }
        let r = (start + end) as f64 / 2.0 + 1.0;
        for &k in &idx[start..=end] {
            ranks[k] = r;
        }
        start = end + 1;
    }
    ranks
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankEntry {
    pub row: usize,
    pub col: usize,
    pub lat: f64,
    pub lon: f64,
    pub score: f64,
    pub rmse: f64,
}

/// Masked cells sorted by descending mean UQ score.
#[derive(Clone, Debug, PartialEq)]
pub struct StationRank {
    pub method: UqMethod,
    pub entries: Vec<RankEntry>,
}

impl StationRank {
    pub fn top(&self, k: usize) -> &[RankEntry] {
        &self.entries[..k.min(self.entries.len())]
    }

    pub fn bottom(&self, k: usize) -> &[RankEntry] {
        &self.entries[self.entries.len().saturating_sub(k)..]
    }

    /// `end,rank,row,col,lat,lon,mean_uq,rmse` for the `k` highest and `k`
    /// lowest cells.
    pub fn to_csv(&self, k: usize) -> String {
        let mut out = String::from("end,rank,row,col,lat,lon,mean_uq,rmse\n");
        let n = self.entries.len();
        for (i, e) in self.top(k).iter().enumerate() {
            row_csv(&mut out, "max", i + 1, e);
        }
        for (i, e) in self.bottom(k).iter().rev().enumerate() {
            row_csv(&mut out, "min", n - i, e);
        }
        out
    }
}

fn row_csv(out: &mut String, end: &str, rank: usize, e: &RankEntry) {
    let _ = writeln!(
        out,
        "{end},{rank},{},{},{:.6},{:.6},{:.8e},{:.8e}",
        e.row, e.col, e.lat, e.lon, e.score, e.rmse
    );
}

/// Ranks masked cells by their time-mean UQ score. `pred` gives the point
/// prediction per sample for the per-cell RMSE column. Ties are broken by
/// `(row, col)` ascending.
pub fn rank_stations(
    method: UqMethod,
    uq: &[Grid],
    pred: &[Grid],
    samples: &[&GridSample],
    region: &RegionSpec,
) -> Result<StationRank> {
    if uq.len() != samples.len() || pred.len() != samples.len() {
        return Err(Error::Contract("rank_stations inputs differ in length".into()));
    }
    let masks: Vec<&Mask> = samples.iter().map(|s| &s.mask).collect();
    let uq_refs: Vec<&Grid> = uq.iter().collect();
    let score = time_mean_per_cell(&uq_refs, &masks)?;
    let w = samples[0].width();
    let mut sq = vec![0f64; score.len()];
    let mut cnt = vec![0usize; score.len()];
    for (p, s) in pred.iter().zip(samples) {
        p.check_shape(&s.y, "rank_stations")?;
        for i in s.mask.indices() {
            sq[i] += (p.data()[i] as f64 - s.y.data()[i] as f64).powi(2);
            cnt[i] += 1;
        }
    }
    let mut entries: Vec<RankEntry> = score
        .iter()
        .enumerate()
        .filter_map(|(i, s)| {
            s.map(|score| {
                let (row, col) = (i / w, i % w);
                let (lat, lon) = region.cell_center(row, col);
                RankEntry {
                    row,
                    col,
                    lat,
                    lon,
                    score,
                    rmse: (sq[i] / cnt[i] as f64).sqrt(),
                }
            })
        })
        .collect();
    if entries.is_empty() {
        return Err(Error::EmptyMask("rank_stations"));
    }
    entries.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.row.cmp(&b.row))
            .then(a.col.cmp(&b.col))
    });
    Ok(StationRank { method, entries })
}

/// Predictions of one model over a list of (standardized) samples.
#[derive(Clone, Debug)]
pub enum Predictions {
    Mcd(Vec<McdPrediction>),
    Cqr {
        preds: Vec<CqrPrediction>,
        raw: Vec<[Grid; 3]>,
    },
}

impl Predictions {
    pub fn len(&self) -> usize {
        match self {
            Predictions::Mcd(p) => p.len(),
            Predictions::Cqr { preds, .. } => preds.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// MC mean or the median head.
    pub fn point(&self, i: usize) -> &Grid {
        match self {
            Predictions::Mcd(p) => &p[i].mean,
            Predictions::Cqr { preds, .. } => &preds[i].mid,
        }
    }

    /// Epistemic variance (MCD) or calibrated interval length (CQR).
    pub fn uq_score(&self, i: usize) -> &Grid {
        match self {
            Predictions::Mcd(p) => &p[i].epistemic,
            Predictions::Cqr { preds, .. } => &preds[i].interval_length,
        }
    }

    /// Lower and upper bounds. MCD bounds are `mean -/+ z * sqrt(total var)`
    /// with `z` the two-sided normal quantile for `alpha`.
    pub fn bounds(&self, i: usize, alpha: f64) -> (Grid, Grid) {
        match self {
            Predictions::Cqr { preds, .. } => (preds[i].lo.clone(), preds[i].hi.clone()),
            Predictions::Mcd(p) => {
                let z = normal_quantile(1.0 - alpha / 2.0);
                let total = p[i].total_variance();
                let mut lo = p[i].mean.clone();
                let mut hi = p[i].mean.clone();
                for ((l, h), v) in lo.data_mut().iter_mut().zip(hi.data_mut()).zip(total.data()) {
                    let d = (z * (*v as f64).sqrt()) as f32;
                    *l -= d;
                    *h += d;
                }
                (lo, hi)
            }
        }
    }
}

fn normal_quantile(p: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(p)
}

/// Standardizes raw samples with the model's own statistics and predicts.
/// MC passes are seeded by `mc_seed`.
pub fn predict_model(
    model: &LoadedModel,
    method: UqMethod,
    passes: usize,
    alpha: f64,
    samples: &[&GridSample],
    mc_seed: u64,
) -> Result<Predictions> {
    let std: Vec<GridSample> = samples
        .iter()
        .map(|s| {
            let mut s = (*s).clone();
            standardize_one(&mut s, &model.stats)?;
            Ok(s)
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&GridSample> = std.iter().collect();
    match method {
        UqMethod::Mcd => Ok(Predictions::Mcd(uq::mc_dropout_samples(&model.params, &refs, passes, mc_seed)?)),
        UqMethod::Cqr => {
            let qhat = model
                .qhat
                .ok_or_else(|| Error::Contract(format!("seed {} has no conformal correction", model.seed)))?;
            let raw = uq::quantile_heads(&model.params, &refs)?;
            let preds = raw
                .iter()
                .map(|r| CqrPrediction::from_raw(r, qhat, alpha))
                .collect::<Result<_>>()?;
            Ok(Predictions::Cqr { preds, raw })
        }
    }
}

/// Per-seed evaluation results.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedMetrics {
    pub seed: u64,
    pub rmse: f64,
    pub interval: Option<CellStats>,
    pub epistemic: Option<CellStats>,
    pub aleatoric: Option<CellStats>,
    pub coverage: Option<f64>,
    pub crossing_rate: Option<f64>,
    pub qhat: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub region: String,
    pub uq_method: UqMethod,
    pub n_channels: usize,
    pub n_test_days: usize,
    pub alpha: f64,
    pub rmse_mean: f64,
    pub rmse_variance: f64,
    pub interval: Option<CellStats>,
    pub epistemic: Option<CellStats>,
    pub aleatoric: Option<CellStats>,
    pub coverage: Option<f64>,
    pub crossing_rate: Option<f64>,
    pub per_seed: Vec<SeedMetrics>,
}

fn mean_stats(items: &[CellStats]) -> CellStats {
    let n = items.len() as f64;
    CellStats {
        max: items.iter().map(|s| s.max).sum::<f64>() / n,
        min: items.iter().map(|s| s.min).sum::<f64>() / n,
        avg: items.iter().map(|s| s.avg).sum::<f64>() / n,
    }
}

fn mean_opt<T: Copy>(items: &[SeedMetrics], f: impl Fn(&SeedMetrics) -> Option<T>) -> Option<Vec<T>> {
    items.iter().map(f).collect()
}

impl MetricsReport {
    /// Aggregates per-seed metrics; triples and rates are seed means.
    pub fn from_seeds(
        region: &str,
        uq_method: UqMethod,
        n_channels: usize,
        n_test_days: usize,
        alpha: f64,
        per_seed: Vec<SeedMetrics>,
    ) -> Result<Self> {
        if per_seed.is_empty() {
            return Err(Error::Contract("report over zero seeds".into()));
        }
        let rmse: Vec<f64> = per_seed.iter().map(|s| s.rmse).collect();
        let (rmse_mean, rmse_variance) = mean_variance(&rmse);
        let avg = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        Ok(Self {
            region: region.to_string(),
            uq_method,
            n_channels,
            n_test_days,
            alpha,
            rmse_mean,
            rmse_variance,
            interval: mean_opt(&per_seed, |s| s.interval).map(|v| mean_stats(&v)),
            epistemic: mean_opt(&per_seed, |s| s.epistemic).map(|v| mean_stats(&v)),
            aleatoric: mean_opt(&per_seed, |s| s.aleatoric).map(|v| mean_stats(&v)),
            coverage: mean_opt(&per_seed, |s| s.coverage).map(avg),
            crossing_rate: mean_opt(&per_seed, |s| s.crossing_rate).map(avg),
            per_seed,
        })
    }

    /// `key=value` lines, a blank line, then a per-seed CSV table.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        kv("region", self.region.clone());
        kv("uq_method", self.uq_method.to_string());
        kv("n_channels", self.n_channels.to_string());
        kv("n_seeds", self.per_seed.len().to_string());
        kv("n_test_days", self.n_test_days.to_string());
        kv("alpha", self.alpha.to_string());
        kv("rmse_ppb_mean", fmt(self.rmse_mean));
        kv("rmse_ppb_variance", fmt(self.rmse_variance));
        kv("rmse_ppb_std", fmt(self.rmse_variance.sqrt()));
        if let Some(s) = self.interval {
            kv("interval_ppb_max", fmt(s.max));
            kv("interval_ppb_min", fmt(s.min));
            kv("interval_ppb_avg", fmt(s.avg));
        }
        if let Some(s) = self.epistemic {
            kv("epistemic_ppb2_max", fmt(s.max));
            kv("epistemic_ppb2_min", fmt(s.min));
            kv("epistemic_ppb2_avg", fmt(s.avg));
        }
        if let Some(s) = self.aleatoric {
            kv("aleatoric_ppb2_max", fmt(s.max));
            kv("aleatoric_ppb2_min", fmt(s.min));
            kv("aleatoric_ppb2_avg", fmt(s.avg));
        }
        if let Some(c) = self.coverage {
            kv("coverage", fmt(c));
        }
        if let Some(c) = self.crossing_rate {
            kv("crossing_rate", fmt(c));
        }
        out.push('\n');
        out.push_str("seed,rmse_ppb,qhat_ppb,coverage,crossing_rate,interval_avg_ppb,epistemic_avg_ppb2\n");
        let opt = |v: Option<f64>| v.map(fmt).unwrap_or_default();
        for s in &self.per_seed {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                s.seed,
                fmt(s.rmse),
                opt(s.qhat),
                opt(s.coverage),
                opt(s.crossing_rate),
                opt(s.interval.map(|i| i.avg)),
                opt(s.epistemic.map(|e| e.avg)),
            );
        }
        out
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

/// Test-month samples of a dataset in date order.
pub fn test_samples(ds: &Dataset) -> Vec<&GridSample> {
    let (_, test) = crate::data::holdout_last_month(&ds.samples);
    test.iter().map(|&i| &ds.samples[i]).collect()
}

/// Evaluates every model of a run set on the test month.
pub fn evaluate(runs: &RunSet, ds: &Dataset) -> Result<MetricsReport> {
    if runs.in_channels != ds.channels() {
        return Err(Error::dim(
            "evaluate",
            format!("models expect {} channels, dataset has {}", runs.in_channels, ds.channels()),
        ));
    }
    let test = test_samples(ds);
    if test.is_empty() {
        return Err(Error::Invalid("dataset has no test month".into()));
    }
    let masks: Vec<&Mask> = test.iter().map(|s| &s.mask).collect();
    let cfg = &runs.config;
    let per_seed = runs
        .models
        .iter()
        .map(|m| {
            let p = predict_model(m, cfg.uq, cfg.passes, cfg.alpha, &test, m.seed)?;
            let points: Vec<Grid> = (0..p.len()).map(|i| p.point(i).clone()).collect();
            let rmse = pooled_rmse(&points, &test)?;
            let mut sm = SeedMetrics {
                seed: m.seed,
                rmse,
                interval: None,
                epistemic: None,
                aleatoric: None,
                coverage: None,
                crossing_rate: None,
                qhat: m.qhat,
            };
            match &p {
                Predictions::Mcd(mp) => {
                    sm.epistemic = Some(epistemic_stats(mp, &masks)?);
                    let ale: Vec<&Grid> = mp.iter().map(|x| &x.aleatoric).collect();
                    sm.aleatoric = Some(cell_stats(&ale, &masks)?);
                }
                Predictions::Cqr { preds, raw } => {
                    sm.interval = Some(interval_stats(preds, &masks)?);
                    sm.coverage = Some(empirical_coverage(preds, &test)?);
                    sm.crossing_rate = Some(crossing_rate(raw, &masks)?);
                }
            }
            Ok(sm)
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_seeds(&runs.region, cfg.uq, ds.channels(), test.len(), cfg.alpha, per_seed)
}

/// Seed-averaged point predictions and UQ scores over `samples`.
pub fn ensemble(runs: &RunSet, samples: &[&GridSample]) -> Result<(Vec<Grid>, Vec<Grid>)> {
    let cfg = &runs.config;
    let all: Vec<Predictions> = runs
        .models
        .iter()
        .map(|m| predict_model(m, cfg.uq, cfg.passes, cfg.alpha, samples, m.seed))
        .collect::<Result<_>>()?;
    let avg = |pick: &dyn Fn(&Predictions, usize) -> Grid, i: usize| {
        let mut acc = pick(&all[0], i);
        let mut sum: Vec<f64> = acc.data().iter().map(|&v| v as f64).collect();
        for p in &all[1..] {
            for (s, &v) in sum.iter_mut().zip(pick(p, i).data()) {
                *s += v as f64;
            }
        }
        let n = all.len() as f64;
        for (a, s) in acc.data_mut().iter_mut().zip(&sum) {
            *a = (s / n) as f32;
        }
        acc
    };
    let points = (0..samples.len()).map(|i| avg(&|p, i| p.point(i).clone(), i)).collect();
    let scores = (0..samples.len()).map(|i| avg(&|p, i| p.uq_score(i).clone(), i)).collect();
    Ok((points, scores))
}

/// One full-grid map from [`extrapolate`].
#[derive(Clone, Debug)]
pub struct DayMap {
    pub date: NaiveDate,
    pub name: &'static str,
    pub grid: Grid,
}

/// Full-grid prediction and UQ maps for test-month days whose day of month
/// is in `days`, from the first model of the run set.
pub fn extrapolate(runs: &RunSet, ds: &Dataset, days: &[u32]) -> Result<Vec<DayMap>> {
    let test = test_samples(ds);
    let chosen: Vec<&GridSample> = test.iter().copied().filter(|s| days.contains(&s.date.day())).collect();
    for d in days {
        if !chosen.iter().any(|s| s.date.day() == *d) {
            log::warn!("test month has no day {d}");
        }
    }
    if chosen.is_empty() {
        return Ok(Vec::new());
    }
    let cfg = &runs.config;
    let model = &runs.models[0];
    let p = predict_model(model, cfg.uq, cfg.passes, cfg.alpha, &chosen, model.seed)?;
    let mut maps = Vec::new();
    for (i, s) in chosen.iter().enumerate() {
        let date = s.date;
        match &p {
            Predictions::Mcd(mp) => {
                maps.push(DayMap { date, name: "mean", grid: mp[i].mean.clone() });
                maps.push(DayMap { date, name: "epistemic", grid: mp[i].epistemic.clone() });
                maps.push(DayMap { date, name: "aleatoric", grid: mp[i].aleatoric.clone() });
            }
            Predictions::Cqr { preds, .. } => {
                maps.push(DayMap { date, name: "mid", grid: preds[i].mid.clone() });
                maps.push(DayMap { date, name: "lo", grid: preds[i].lo.clone() });
                maps.push(DayMap { date, name: "hi", grid: preds[i].hi.clone() });
                maps.push(DayMap { date, name: "interval", grid: preds[i].interval_length.clone() });
            }
        }
    }
    Ok(maps)
}

/// `date,y,mid,lo,hi` rows at the station nearest `(lat, lon)` over the
/// test month, from the first model of the run set.
pub fn series_csv(runs: &RunSet, ds: &Dataset, lat: f64, lon: f64) -> Result<String> {
    let (r, c) = ds.region.cell_of(lat, lon)?;
    let test: Vec<GridSample> = test_samples(ds).into_iter().cloned().collect();
    let obs = crate::data::station_series(&test, &ds.region, lat, lon)?;
    let days: Vec<&GridSample> = test.iter().filter(|s| s.mask.get(r, c)).collect();
    let mut out = String::from("date,y,mid,lo,hi\n");
    if days.is_empty() {
        return Ok(out);
    }
    let cfg = &runs.config;
    let model = &runs.models[0];
    let p = predict_model(model, cfg.uq, cfg.passes, cfg.alpha, &days, model.seed)?;
    for (i, (date, y)) in obs.iter().enumerate() {
        let (lo, hi) = p.bounds(i, cfg.alpha);
        let _ = writeln!(
            out,
            "{},{:.8e},{:.8e},{:.8e},{:.8e}",
            date.format("%Y-%m-%d"),
            y,
            p.point(i).get(r, c),
            lo.get(r, c),
            hi.get(r, c)
        );
    }
    Ok(out)
}

/// Colour scale for [`export_heatmap`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Scale {
    /// Finite min and max of the grid.
    Auto,
    Fixed(f64, f64),
}

/// Colour used for non-finite cells.
pub const NAN_COLOR: [u8; 3] = [128, 128, 128];

const RDBU: [[u8; 3]; 11] = [
    [5, 48, 97],
    [33, 102, 172],
    [67, 147, 195],
    [146, 197, 222],
    [209, 229, 240],
    [247, 247, 247],
    [253, 219, 199],
    [244, 165, 130],
    [214, 96, 77],
    [178, 24, 43],
    [103, 0, 31],
];

/// Blue (0) through white (0.5) to red (1).
pub fn diverging_color(t: f64) -> [u8; 3] {
    if !t.is_finite() {
        return NAN_COLOR;
    }
    let x = t.clamp(0.0, 1.0) * (RDBU.len() - 1) as f64;
    let i = (x.floor() as usize).min(RDBU.len() - 2);
    let f = x - i as f64;
    std::array::from_fn(|k| {
        let (a, b) = (RDBU[i][k] as f64, RDBU[i + 1][k] as f64);
        (a + (b - a) * f).round() as u8
    })
}

/// Binary P6 pixmap, row 0 first.
pub fn heatmap_bytes(grid: &Grid, scale: Scale) -> Vec<u8> {
    let (lo, hi) = match scale {
        Scale::Fixed(lo, hi) => (lo, hi),
        Scale::Auto => grid
            .data()
            .iter()
            .filter(|v| v.is_finite())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v as f64), b.max(v as f64))),
    };
    let mut out = format!("P6\n{} {}\n255\n", grid.width(), grid.height()).into_bytes();
    for &v in grid.data() {
        let c = if !v.is_finite() {
            NAN_COLOR
        } else if !(hi > lo) {
            diverging_color(0.5)
        } else {
            diverging_color((v as f64 - lo) / (hi - lo))
        };
        out.extend_from_slice(&c);
    }
    out
}

pub fn export_heatmap(grid: &Grid, path: &Path, scale: Scale) -> Result<()> {
    fs::write(path, heatmap_bytes(grid, scale)).map_err(|e| Error::io(path, e))
}

/// `row,col,lat,lon,value` with one line per cell; values carry 9
/// significant digits so f32 grids re-parse exactly.
pub fn grid_csv(grid: &Grid, region: &RegionSpec) -> String {
    let mut out = String::from("row,col,lat,lon,value\n");
    for r in 0..grid.height() {
        for c in 0..grid.width() {
            let (lat, lon) = region.cell_center(r, c);
            let _ = writeln!(out, "{r},{c},{lat:.6},{lon:.6},{:.8e}", grid.get(r, c));
        }
    }
    out
}

pub fn export_csv(grid: &Grid, region: &RegionSpec, path: &Path) -> Result<()> {
    fs::write(path, grid_csv(grid, region)).map_err(|e| Error::io(path, e))
}

/// Parses [`grid_csv`] output back into a grid of the given unit.
pub fn parse_grid_csv(path: &Path, text: &str, unit: Unit) -> Result<Grid> {
    let mut lines = text.lines();
    if lines.next() != Some("row,col,lat,lon,value") {
        return Err(Error::format(path, "missing header row,col,lat,lon,value"));
    }
    let mut cells = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::format(path, format!("line {}: malformed record", i + 2));
        if f.len() != 5 {
            return Err(bad());
        }
        let r: usize = f[0].parse().map_err(|_| bad())?;
        let c: usize = f[1].parse().map_err(|_| bad())?;
        let v: f32 = f[4].parse().map_err(|_| bad())?;
        cells.push((r, c, v));
    }
    let h = cells.iter().map(|x| x.0 + 1).max().unwrap_or(0);
    let w = cells.iter().map(|x| x.1 + 1).max().unwrap_or(0);
    if cells.len() != h * w {
        return Err(Error::format(path, format!("{} records for a {h}x{w} grid", cells.len())));
    }
    let mut g = Grid::filled(h, w, f32::NAN, unit);
    for (r, c, v) in cells {
        g.set(r, c, v);
    }
    Ok(g)
}

/// Writes one `.ppm` and one `.csv` per map into `dir`.
pub fn write_maps(maps: &[DayMap], region: &RegionSpec, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    maps.par_iter().try_for_each(|m| {
        let stem = format!("{}_{}", m.date.format("%Y-%m-%d"), m.name);
        export_heatmap(&m.grid, &dir.join(format!("{stem}.ppm")), Scale::Auto)?;
        export_csv(&m.grid, region, &dir.join(format!("{stem}.csv")))
    })
}
