//! Training loops for the Gaussian (MC-Dropout) and quantile (CQR) models,
//! multi-seed orchestration and run-directory I/O.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{
    adam_step, clip_global_norm, load_checkpoint, save_checkpoint, AdamConfig, AdamState, Tape,
    Tensor,
};
use crate::data::{
    batch, holdout_last_month, split, standardize_one, ChannelStats, Dataset, GridSample,
};
use crate::error::{Error, Result};
use crate::losses::{gaussian_nll_graph, pinball_graph};
use crate::model::{forward_graph, Head, ModelConfig, UNetParams, DEFAULT_QUANTILES};
use crate::uq;

pub const RUNS_LOG: &str = "runs.log";
pub const MODEL_CFG: &str = "model.cfg";
const NORM_MEAN: &str = "norm.mean";
const NORM_STD: &str = "norm.std";

const SHUFFLE_STREAM: u64 = 1 << 32;
const DROPOUT_STREAM: u64 = 2 << 32;

/// Which uncertainty backend a run trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UqMethod {
    Mcd,
    Cqr,
}

impl UqMethod {
    pub fn code(self) -> &'static str {
        match self {
            UqMethod::Mcd => "mcd",
            UqMethod::Cqr => "cqr",
        }
    }
}

impl fmt::Display for UqMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for UqMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mcd" => Ok(UqMethod::Mcd),
            "cqr" => Ok(UqMethod::Cqr),
            other => Err(Error::Invalid(format!("unknown UQ method '{other}' (expected mcd or cqr)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub uq: UqMethod,
    pub epochs: usize,
    pub lr: f64,
    pub dropout_rate: f32,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    pub alpha: f64,
    /// MC-Dropout passes at inference.
    pub passes: usize,
    pub base_width: usize,
    pub depth: usize,
    pub train_frac: f64,
    pub clip_norm: f64,
    pub quantiles: [f64; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            uq: UqMethod::Mcd,
            epochs: 200,
            lr: 1e-3,
            dropout_rate: 0.1,
            batch_size: 8,
            seeds: vec![0, 1, 2, 3, 4],
            alpha: uq::DEFAULT_ALPHA,
            passes: uq::DEFAULT_PASSES,
            base_width: 32,
            depth: 3,
            train_frac: 0.9,
            clip_norm: 5.0,
            quantiles: DEFAULT_QUANTILES,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Invalid("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch size must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Invalid("at least one seed is required".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Invalid(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Invalid(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        if self.passes < 2 {
            return Err(Error::Invalid(format!("need at least 2 MC passes, got {}", self.passes)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Invalid("clip norm must be positive".into()));
        }
        Ok(())
    }

    pub fn head(&self) -> Head {
        match self.uq {
            UqMethod::Mcd => Head::Gaussian,
            UqMethod::Cqr => Head::QuantileTriplet(self.quantiles),
        }
    }

    pub fn model_config(&self, in_channels: usize) -> ModelConfig {
        ModelConfig {
            in_channels,
            base_width: self.base_width,
            depth: self.depth,
            dropout_rate: self.dropout_rate,
            head: self.head(),
        }
    }

    /// `model.cfg` contents, one `key=value` per line.
    pub fn to_cfg(&self, in_channels: usize, region: &str) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let q = self.quantiles;
        format!(
            "uq={}\nregion={region}\nin_channels={in_channels}\nbase_width={}\ndepth={}\n\
             dropout={}\nquantiles={},{},{}\nalpha={}\npasses={}\nepochs={}\nlr={}\nbatch={}\n\
             train_frac={}\nclip_norm={}\nseeds={}\n",
            self.uq,
            self.base_width,
            self.depth,
            self.dropout_rate,
            q[0],
            q[1],
            q[2],
            self.alpha,
            self.passes,
            self.epochs,
            self.lr,
            self.batch_size,
            self.train_frac,
            self.clip_norm,
            seeds.join(",")
        )
    }

    /// Inverse of [`TrainConfig::to_cfg`]; returns the config and the input
    /// channel count.
    pub fn from_cfg(path: &Path, text: &str) -> Result<(Self, usize)> {
        let kv = crate::data::parse_manifest(path, text)?;
        let get = |k: &str| {
            kv.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::format(path, format!("missing key '{k}'")))
        };
        fn num<T: FromStr>(path: &Path, k: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::format(path, format!("bad value '{v}' for '{k}'")))
        }
        let q: Vec<f64> = get("quantiles")?
            .split(',')
            .map(|v| num(path, "quantiles", v))
            .collect::<Result<_>>()?;
        let quantiles: [f64; 3] = q
            .try_into()
            .map_err(|_| Error::format(path, "quantiles needs three levels"))?;
        let seeds = get("seeds")?
            .split(',')
            .map(|v| num(path, "seeds", v))
            .collect::<Result<_>>()?;
        let cfg = TrainConfig {
            uq: get("uq")?.parse()?,
            epochs: num(path, "epochs", get("epochs")?)?,
            lr: num(path, "lr", get("lr")?)?,
            dropout_rate: num(path, "dropout", get("dropout")?)?,
            batch_size: num(path, "batch", get("batch")?)?,
            seeds,
            alpha: num(path, "alpha", get("alpha")?)?,
            passes: num(path, "passes", get("passes")?)?,
            base_width: num(path, "base_width", get("base_width")?)?,
            depth: num(path, "depth", get("depth")?)?,
            train_frac: num(path, "train_frac", get("train_frac")?)?,
            clip_norm: num(path, "clip_norm", get("clip_norm")?)?,
            quantiles,
        };
        let in_channels = num(path, "in_channels", get("in_channels")?)?;
        Ok((cfg, in_channels))
    }
}

/// Day indices of a dataset assigned to each role for one seed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub train: Vec<usize>,
    pub calib: Vec<usize>,
    pub val: Vec<usize>,
    /// The held-out latest month.
    pub test: Vec<usize>,
}

/// Holds out the latest month, then splits the remaining days by `seed`
/// (halving the training share when `calib`).
pub fn partition(samples: &[GridSample], train_frac: f64, calib: bool, seed: u64) -> Result<Partition> {
    let (rest, test) = holdout_last_month(samples);
    let s = split(rest.len(), train_frac, calib, seed)?;
    let pick = |ix: &[usize]| ix.iter().map(|&i| rest[i]).collect::<Vec<_>>();
    Ok(Partition {
        train: pick(&s.train),
        calib: s.calib.as_deref().map(pick).unwrap_or_default(),
        val: pick(&s.val),
        test,
    })
}

/// Standardized copies of `samples[idx]`.
pub fn standardized(samples: &[GridSample], idx: &[usize], stats: &ChannelStats) -> Result<Vec<GridSample>> {
    idx.iter()
        .map(|&i| {
            let mut s = samples[i].clone();
            standardize_one(&mut s, stats)?;
            Ok(s)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Outcome of [`fit`].
#[derive(Clone, Debug)]
pub struct Fit {
    pub best: UNetParams,
    pub last: UNetParams,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub history: Vec<EpochLog>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn batch_loss(
    tape: &mut Tape,
    cfg: &ModelConfig,
    vars: &[crate::autodiff::Var],
    chunk: &[&GridSample],
    dropout: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Option<(crate::autodiff::Var, usize)>> {
    let (x, y, mask) = batch(chunk)?;
    let n_masked = mask.iter().filter(|&&m| m).count();
    if n_masked == 0 {
        return Ok(None);
    }
    let xv = tape.constant(x);
    let out = forward_graph(tape, cfg, vars, xv, dropout, rng)?;
    let yv = tape.constant(y);
    let loss = match cfg.head {
        Head::Gaussian => {
            let mu = tape.channels(out, 0, 1)?;
            let s = tape.channels(out, 1, 1)?;
            let sp = tape.softplus(s);
            let var = tape.shift(sp, crate::model::VARIANCE_FLOOR);
            gaussian_nll_graph(tape, mu, var, yv, &mask)?
        }
        Head::QuantileTriplet(taus) => {
            let mut total = None;
            for (c, &tau) in taus.iter().enumerate() {
                let q = tape.channels(out, c, 1)?;
                let l = pinball_graph(tape, q, yv, tau, &mask)?;
                total = Some(match total {
                    None => l,
                    Some(t) => tape.add(t, l)?,
                });
            }
            total.expect("three levels")
        }
    };
    Ok(Some((loss, n_masked)))
}

/// Masked-pixel-weighted training loss over `samples`, dropout inactive.
pub fn evaluate_loss(params: &UNetParams, samples: &[&GridSample], batch_size: usize) -> Result<f64> {
    let mut rng = stream_rng(0, 0);
    let mut sum = 0f64;
    let mut count = 0usize;
    for chunk in samples.chunks(batch_size.max(1)) {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, false);
        if let Some((loss, n)) = batch_loss(&mut tape, params.config(), &vars, chunk, false, &mut rng)? {
            sum += tape.value(loss).data()[0] as f64 * n as f64;
            count += n;
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask("evaluate_loss"));
    }
    Ok(sum / count as f64)
}

/// Trains from scratch on already-standardized samples. `val` may be empty,
/// in which case the final weights are also the best.
pub fn fit(cfg: &TrainConfig, model: &ModelConfig, train: &[&GridSample], val: &[&GridSample], seed: u64) -> Result<Fit> {
    cfg.validate()?;
    model.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("training split is empty".into()));
    }
    if let Some(s) = train.iter().find(|s| s.channels() != model.in_channels) {
        return Err(Error::dim(
            "train",
            format!("samples have {} channels, model expects {}", s.channels(), model.in_channels),
        ));
    }
    let mut params = UNetParams::build(model, seed)?;
    let mut adam = AdamState::new(params.tensors().iter().map(Tensor::numel));
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut drop_rng = stream_rng(seed, DROPOUT_STREAM);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = params.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;

    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut stream_rng(seed, SHUFFLE_STREAM | epoch as u64));
        let mut sum = 0f64;
        let mut count = 0usize;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let chunk: Vec<&GridSample> = idx.iter().map(|&i| train[i]).collect();
            let mut tape = Tape::new();
            let vars = params.register(&mut tape, true);
            let Some((loss, n)) = batch_loss(&mut tape, model, &vars, &chunk, true, &mut drop_rng)? else {
                debug!("epoch {epoch} batch {b}: no station pixels, skipped");
                continue;
            };
            let value = tape.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, batch: b });
            }
            let mut grads = tape.backward(loss)?;
            let mut g: Vec<Vec<f32>> = vars
                .iter()
                .map(|&v| grads.take(v).unwrap_or_else(|| vec![0.0; tape.value(v).numel()]))
                .collect();
            let norm = clip_global_norm(&mut g, cfg.clip_norm);
            if !norm.is_finite() {
                return Err(Error::Divergence { epoch, batch: b });
            }
            let mut slices: Vec<&mut [f32]> = params.tensors_mut().iter_mut().map(Tensor::data_mut).collect();
            let gs: Vec<&[f32]> = g.iter().map(Vec::as_slice).collect();
            adam_step(&mut slices, &gs, &mut adam, &adam_cfg)?;
            sum += value * n as f64;
            count += n;
        }
        if count == 0 {
            return Err(Error::EmptyMask("training split"));
        }
        let train_loss = sum / count as f64;
        let val_loss = if val.is_empty() {
            train_loss
        } else {
            evaluate_loss(&params, val, cfg.batch_size)?
        };
        if !val_loss.is_finite() {
            return Err(Error::Divergence { epoch, batch: 0 });
        }
        if val_loss < best_val || val.is_empty() {
            best_val = val_loss;
            best_epoch = epoch;
            best = params.clone();
        }
        debug!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        history.push(EpochLog { train_loss, val_loss });
    }
    Ok(Fit {
        best,
        last: params,
        best_epoch,
        best_val_loss: best_val,
        history,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub seed: u64,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub checkpoint: Option<PathBuf>,
    pub qhat: Option<f64>,
    pub wall_seconds: f64,
}

impl RunRecord {
    /// One `runs.log` line. The checkpoint is named relative to the run
    /// directory so the directory can be moved.
    pub fn log_line(&self, uq: UqMethod) -> String {
        let ckpt = self
            .checkpoint
            .as_ref()
            .map(|p| p.file_name().unwrap_or(p.as_os_str()).to_string_lossy().into_owned())
            .unwrap_or_else(|| "-".into());
        let qhat = self.qhat.map(|q| q.to_string()).unwrap_or_else(|| "-".into());
        format!(
            "uq={uq} seed={} final_train_loss={} final_val_loss={} best_val_loss={} best_epoch={} \
             checkpoint={ckpt} qhat={qhat} wall_seconds={:.3}",
            self.seed,
            self.final_train_loss,
            self.final_val_loss,
            self.best_val_loss,
            self.best_epoch,
            self.wall_seconds
        )
    }
}

/// Everything produced by [`train_one`].
#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub record: RunRecord,
    pub best: UNetParams,
    pub last: UNetParams,
    pub stats: ChannelStats,
    pub partition: Partition,
    pub history: Vec<EpochLog>,
}

/// Full single-seed run: partition, standardize on the training split,
/// fit, and calibrate (CQR) on the calibration split.
pub fn train_one(cfg: &TrainConfig, ds: &Dataset, seed: u64) -> Result<TrainedRun> {
    let start = Instant::now();
    cfg.validate()?;
    let model = cfg.model_config(ds.channels());
    let part = partition(&ds.samples, cfg.train_frac, cfg.uq == UqMethod::Cqr, seed)?;
    let raw_train: Vec<&GridSample> = part.train.iter().map(|&i| &ds.samples[i]).collect();
    let stats = ChannelStats::compute(&raw_train)?;
    let train = standardized(&ds.samples, &part.train, &stats)?;
    let val = standardized(&ds.samples, &part.val, &stats)?;
    let train_refs: Vec<&GridSample> = train.iter().collect();
    let val_refs: Vec<&GridSample> = val.iter().collect();
    info!(
        "seed {seed}: {} train / {} calib / {} val / {} test days",
        part.train.len(),
        part.calib.len(),
        part.val.len(),
        part.test.len()
    );
    let fit = fit(cfg, &model, &train_refs, &val_refs, seed)?;
    let qhat = match cfg.uq {
        UqMethod::Mcd => None,
        UqMethod::Cqr => {
            let calib = standardized(&ds.samples, &part.calib, &stats)?;
            let refs: Vec<&GridSample> = calib.iter().collect();
            Some(uq::cqr_calibrate(&fit.best, &refs, cfg.alpha)?)
        }
    };
    let last = fit.history.last().expect("epochs >= 1");
    let record = RunRecord {
        seed,
        final_train_loss: last.train_loss,
        final_val_loss: last.val_loss,
        best_val_loss: fit.best_val_loss,
        best_epoch: fit.best_epoch,
        checkpoint: None,
        qhat,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok(TrainedRun {
        record,
        best: fit.best,
        last: fit.last,
        stats,
        partition: part,
        history: fit.history,
    })
}

/// Exact population mean and variance.
pub fn mean_variance(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n)
}

#[derive(Debug)]
pub struct SeedSweep {
    pub runs: Vec<TrainedRun>,
    pub failures: Vec<(u64, Error)>,
    /// Population mean and variance of best validation loss over finished runs.
    pub val_loss: (f64, f64),
}

impl SeedSweep {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Trains every seed, concurrently unless `sequential`. Failed seeds are
/// reported in `failures`; finished runs are kept in seed-list order.
pub fn train_all_seeds(cfg: &TrainConfig, ds: &Dataset, sequential: bool) -> Result<SeedSweep> {
    cfg.validate()?;
    let run = |&seed: &u64| (seed, train_one(cfg, ds, seed));
    let results: Vec<(u64, Result<TrainedRun>)> = if sequential {
        cfg.seeds.iter().map(run).collect()
    } else {
        cfg.seeds.par_iter().map(run).collect()
    };
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (seed, r) in results {
        match r {
            Ok(t) => runs.push(t),
            Err(e) => {
                warn!("seed {seed} failed: {e}");
                failures.push((seed, e));
            }
        }
    }
    let losses: Vec<f64> = runs.iter().map(|r| r.record.best_val_loss).collect();
    Ok(SeedSweep {
        runs,
        failures,
        val_loss: mean_variance(&losses),
    })
}

pub fn checkpoint_path(dir: &Path, seed: u64, which: &str) -> PathBuf {
    dir.join(format!("seed{seed}.{which}.guqw"))
}

fn calib_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("seed{seed}.calib"))
}

fn save_params(path: &Path, params: &UNetParams, stats: &ChannelStats) -> Result<()> {
    let c = stats.channels();
    let mean = Tensor::new(vec![c], stats.mean.clone())?;
    let std = Tensor::new(vec![c], stats.std.clone())?;
    let mut named = params.named();
    named.push((NORM_MEAN, &mean));
    named.push((NORM_STD, &std));
    save_checkpoint(path, &named)
}

/// Writes `model.cfg` (once per directory) and a run's checkpoints, then
/// appends its record to `runs.log`. Returns the record with its
/// checkpoint path filled in.
pub fn write_run(dir: &Path, cfg: &TrainConfig, ds: &Dataset, run: &TrainedRun) -> Result<RunRecord> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg_path = dir.join(MODEL_CFG);
    let text = cfg.to_cfg(ds.channels(), ds.region.name.code());
    fs::write(&cfg_path, text).map_err(|e| Error::io(&cfg_path, e))?;
    let seed = run.record.seed;
    let best = checkpoint_path(dir, seed, "best");
    save_params(&best, &run.best, &run.stats)?;
    save_params(&checkpoint_path(dir, seed, "final"), &run.last, &run.stats)?;
    if let Some(q) = run.record.qhat {
        let p = calib_path(dir, seed);
        let body = format!("alpha={}\nqhat={q}\n", cfg.alpha);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    let mut record = run.record.clone();
    record.checkpoint = Some(best);
    let log = dir.join(RUNS_LOG);
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log)
        .map_err(|e| Error::io(&log, e))?;
    writeln!(f, "{}", record.log_line(cfg.uq)).map_err(|e| Error::io(&log, e))?;
    Ok(record)
}

/// A trained model restored from a run directory.
#[derive(Clone, Debug)]
pub struct LoadedModel {
    pub seed: u64,
    pub params: UNetParams,
    pub stats: ChannelStats,
    pub qhat: Option<f64>,
}

/// The configuration and every available best checkpoint of a run directory.
#[derive(Clone, Debug)]
pub struct RunSet {
    pub config: TrainConfig,
    pub in_channels: usize,
    pub region: String,
    pub models: Vec<LoadedModel>,
}

pub fn load_model(path: &Path, model: &ModelConfig, seed: u64, qhat: Option<f64>) -> Result<LoadedModel> {
    let named = load_checkpoint(path)?;
    let find = |k: &str| {
        named
            .iter()
            .find(|(n, _)| n == k)
            .map(|(_, t)| t.data().to_vec())
            .ok_or_else(|| Error::format(path, format!("checkpoint lacks '{k}'")))
    };
    let stats = ChannelStats {
        mean: find(NORM_MEAN)?,
        std: find(NORM_STD)?,
    };
    let params = UNetParams::from_named(model, &named)?;
    Ok(LoadedModel {
        seed,
        params,
        stats,
        qhat,
    })
}

impl RunSet {
    /// Loads `model.cfg` and the best checkpoint of every listed seed that
    /// has one. Seeds without a checkpoint are skipped with a warning.
    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join(MODEL_CFG);
        let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let (config, in_channels) = TrainConfig::from_cfg(&cfg_path, &text)?;
        let region = crate::data::parse_manifest(&cfg_path, &text)?
            .get("region")
            .cloned()
            .unwrap_or_default();
        let model = config.model_config(in_channels);
        let mut models = Vec::new();
        for &seed in &config.seeds {
            let path = checkpoint_path(dir, seed, "best");
            if !path.exists() {
                warn!("no checkpoint for seed {seed} in {}", dir.display());
                continue;
            }
            let qhat = if config.uq == UqMethod::Cqr {
                let p = calib_path(dir, seed);
                let t = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                let kv = crate::data::parse_manifest(&p, &t)?;
                let q = kv
                    .get("qhat")
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| Error::format(&p, "missing or bad qhat"))?;
                Some(q)
            } else {
                None
            };
            models.push(load_model(&path, &model, seed, qhat)?);
        }
        if models.is_empty() {
            return Err(Error::Invalid(format!("no trained models in {}", dir.display())));
        }
        Ok(Self {
            config,
            in_channels,
            region,
            models,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn population_mean_variance() {
        let (m, v) = mean_variance(&[10.71, 10.81]);
        assert!((m - 10.76).abs() < 1e-12);
        assert!((v - 0.0025).abs() < 1e-12);
        assert_eq!(mean_variance(&[3.0; 5]), (3.0, 0.0));
    }

    #[test]
    fn config_round_trips_through_text() {
        let cfg = TrainConfig {
            uq: UqMethod::Cqr,
            seeds: vec![7, 11],
            lr: 3e-4,
            ..TrainConfig::default()
        };
        let text = cfg.to_cfg(51, "eu");
        let (back, c) = TrainConfig::from_cfg(Path::new("model.cfg"), &text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(c, 51);
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { seeds: vec![], ..TrainConfig::default() },
            TrainConfig { alpha: 1.0, ..TrainConfig::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
        assert!("qr".parse::<UqMethod>().is_err());
        assert_eq!("CQR".parse::<UqMethod>().unwrap(), UqMethod::Cqr);
    }
}
