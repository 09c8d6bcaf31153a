//! U-Net encoder-decoder with swappable predictive heads.
//!
//! Encoder level `l` has width `base_width * 2^l`; each block is two 3x3
//! convolutions with ReLU followed by dropout. Decoder levels upsample with a
//! 2x2 stride-2 transposed convolution, concatenate the skip connection and
//! fuse with two 3x3 convolutions. A final 1x1 convolution emits the head
//! channels. Inputs are zero-padded on the bottom/right edges to a multiple
//! of `2^depth` and the output is cropped back.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{kernels::softplus, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::{Grid, Unit};

/// Floor added to the softplus variance output (ppb^2).
pub const VARIANCE_FLOOR: f32 = 1e-6;

pub const DEFAULT_QUANTILES: [f64; 3] = [0.05, 0.5, 0.95];

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Head {
    /// Two channels: mean and raw variance `s`, with `sigma^2 = softplus(s) + 1e-6`.
    Gaussian,
    /// One channel per quantile level, in increasing order.
    QuantileTriplet([f64; 3]),
}

impl Head {
    pub fn channels(&self) -> usize {
        match self {
            Head::Gaussian => 2,
            Head::QuantileTriplet(_) => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub dropout_rate: f32,
    pub head: Head,
}

impl ModelConfig {
    pub fn new(in_channels: usize, head: Head) -> Self {
        Self {
            in_channels,
            base_width: 32,
            depth: 3,
            dropout_rate: 0.1,
            head,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_width == 0 || self.depth == 0 {
            return Err(Error::Invalid(format!(
                "in_channels, base_width and depth must be >= 1 (got {}, {}, {})",
                self.in_channels, self.base_width, self.depth
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Invalid(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if let Head::QuantileTriplet(t) = self.head {
            let ok = t.iter().all(|&q| q > 0.0 && q < 1.0) && t[0] < t[1] && t[1] < t[2];
            if !ok {
                return Err(Error::Invalid(format!(
                    "quantile levels {t:?} must be strictly increasing in (0, 1)"
                )));
            }
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Spatial dims after padding to a multiple of `2^depth`.
    pub fn padded_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let m = 1usize << self.depth;
        (h.div_ceil(m) * m, w.div_ceil(m) * m)
    }

    /// Names, shapes and fan-in of every parameter tensor, in canonical order.
    fn layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = Vec::new();
        let mut conv = |name: String, cin: usize, cout: usize, k: usize| {
            out.push((format!("{name}.weight"), vec![cout, cin, k, k], cin * k * k));
            out.push((format!("{name}.bias"), vec![cout], 0));
        };
        let mut cin = self.in_channels;
        for l in 0..self.depth {
            let w = self.width(l);
            conv(format!("enc{l}.conv1"), cin, w, 3);
            conv(format!("enc{l}.conv2"), w, w, 3);
            cin = w;
        }
        let wb = self.width(self.depth);
        conv("mid.conv1".into(), cin, wb, 3);
        conv("mid.conv2".into(), wb, wb, 3);
        let mut below = wb;
        let mut layers = Vec::new();
        for l in (0..self.depth).rev() {
            let w = self.width(l);
            layers.push((format!("dec{l}.up.weight"), vec![below, w, 2, 2], below));
            layers.push((format!("dec{l}.up.bias"), vec![w], 0));
            layers.push((format!("dec{l}.conv1.weight"), vec![w, 2 * w, 3, 3], 2 * w * 9));
            layers.push((format!("dec{l}.conv1.bias"), vec![w], 0));
            layers.push((format!("dec{l}.conv2.weight"), vec![w, w, 3, 3], w * 9));
            layers.push((format!("dec{l}.conv2.bias"), vec![w], 0));
            below = w;
        }
        out.extend(layers);
        let heads = self.head.channels();
        out.push(("head.weight".into(), vec![heads, below, 1, 1], below));
        out.push(("head.bias".into(), vec![heads], 0));
        out
    }
}

/// All learnable weights of a U-Net, named for checkpointing.
#[derive(Clone, Debug, PartialEq)]
pub struct UNetParams {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl UNetParams {
    /// He-uniform weights, zero biases; deterministic for a given seed.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, fan_in) in config.layout() {
            let numel: usize = shape.iter().product();
            let data = if fan_in == 0 {
                vec![0.0; numel]
            } else {
                let bound = (6.0 / fan_in as f64).sqrt() as f32;
                (0..numel).map(|_| rng.gen_range(-bound..bound)).collect()
            };
            tensors.push(Tensor::new(shape, data)?);
            names.push(name);
        }
        Ok(Self {
            config: config.clone(),
            names,
            tensors,
        })
    }

    /// Rebuilds parameters from named tensors (e.g. a loaded checkpoint).
    /// Tensors with unknown names are ignored.
    pub fn from_named(config: &ModelConfig, named: &[(String, Tensor)]) -> Result<Self> {
        config.validate()?;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, _) in config.layout() {
            let t = named
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Contract(format!("checkpoint lacks tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::dim(
                    "from_named",
                    format!("{name}: shape {:?}, expected {shape:?}", t.shape()),
                ));
            }
            names.push(name);
            tensors.push(t.clone());
        }
        Ok(Self {
            config: config.clone(),
            names,
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn named(&self) -> Vec<(&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Places every tensor on `tape` (as trainable leaves when `trainable`).
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }
}

/// Records a U-Net forward pass on `tape`. `params` come from
/// [`UNetParams::register`]; `x` is `[N, C, H, W]`.
pub fn forward_graph(
    tape: &mut Tape,
    config: &ModelConfig,
    params: &[Var],
    x: Var,
    dropout_active: bool,
    rng: &mut dyn RngCore,
) -> Result<Var> {
    let (_, c, h, w) = tape.value(x).dims4("forward")?;
    if c != config.in_channels {
        return Err(Error::dim(
            "forward",
            format!("input has {c} channels (axis C), model expects {}", config.in_channels),
        ));
    }
    let p = config.dropout_rate;
    let mut it = params.iter().copied();
    let mut next = || it.next().ok_or_else(|| Error::Contract("parameter list too short".into()));

    let (ph, pw) = config.padded_dims(h, w);
    let mut cur = tape.pad_to(x, ph, pw)?;

    let block = |tape: &mut Tape, input: Var, next: &mut dyn FnMut() -> Result<Var>, rng: &mut dyn RngCore| -> Result<Var> {
        let (w1, b1) = (next()?, next()?);
        let y = tape.conv2d(input, w1, b1, 1, 1)?;
        let y = tape.relu(y);
        let (w2, b2) = (next()?, next()?);
        let y = tape.conv2d(y, w2, b2, 1, 1)?;
        let y = tape.relu(y);
        tape.dropout(y, p, dropout_active, rng)
    };

    let mut skips = Vec::with_capacity(config.depth);
    for _ in 0..config.depth {
        let y = block(tape, cur, &mut next, rng)?;
        skips.push(y);
        cur = tape.maxpool2d(y, 2)?;
    }
    cur = block(tape, cur, &mut next, rng)?;
    for skip in skips.into_iter().rev() {
        let (uw, ub) = (next()?, next()?);
        let up = tape.conv_transpose2d(cur, uw, ub, 2)?;
        let cat = tape.concat_channels(skip, up)?;
        cur = block(tape, cat, &mut next, rng)?;
    }
    let (hw, hb) = (next()?, next()?);
    let out = tape.conv2d(cur, hw, hb, 1, 0)?;
    tape.crop_to(out, h, w)
}

/// Raw head output `[N, heads, H, W]` for a batch `x: [N, C, H, W]`.
pub fn forward(
    params: &UNetParams,
    x: &Tensor,
    dropout_active: bool,
    rng: &mut dyn RngCore,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let xv = tape.constant(x.clone());
    let out = forward_graph(&mut tape, &params.config, &vars, xv, dropout_active, rng)?;
    Ok(tape.value(out).clone())
}

fn plane_grid(t: &Tensor, sample: usize, channel: usize, unit: Unit) -> Grid {
    let s = t.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let off = (sample * c + channel) * h * w;
    Grid::new(h, w, t.data()[off..off + h * w].to_vec(), unit).expect("plane size")
}

/// Per-sample `(mu, sigma2)` grids from a Gaussian-head model.
pub fn predict_gaussian(
    params: &UNetParams,
    x: &Tensor,
    dropout_active: bool,
    rng: &mut dyn RngCore,
) -> Result<Vec<(Grid, Grid)>> {
    if params.config.head != Head::Gaussian {
        return Err(Error::Contract("predict_gaussian needs a Gaussian head".into()));
    }
    let out = forward(params, x, dropout_active, rng)?;
    Ok(split_gaussian(&out))
}

pub(crate) fn split_gaussian(out: &Tensor) -> Vec<(Grid, Grid)> {
    (0..out.shape()[0])
        .map(|s| {
            let mu = plane_grid(out, s, 0, Unit::Ppb);
            let mut var = plane_grid(out, s, 1, Unit::PpbSquared);
            var.data_mut()
                .iter_mut()
                .for_each(|v| *v = softplus(*v) + VARIANCE_FLOOR);
            (mu, var)
        })
        .collect()
}

/// Per-sample `[q_lo, q_mid, q_hi]` grids from a quantile-head model,
/// dropout inactive. Channels are returned in level order, unsorted.
pub fn predict_quantiles(params: &UNetParams, x: &Tensor) -> Result<Vec<[Grid; 3]>> {
    if !matches!(params.config.head, Head::QuantileTriplet(_)) {
        return Err(Error::Contract("predict_quantiles needs a quantile head".into()));
    }
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let out = forward(params, x, false, &mut rng)?;
    Ok((0..out.shape()[0])
        .map(|s| std::array::from_fn(|c| plane_grid(&out, s, c, Unit::Ppb)))
        .collect())
}
