//! Denoising-diffusion machinery: noise schedule, forward corruption,
//! a small convolutional noise predictor, and deterministic DDIM transport
//! in both directions (generation and inversion) built on one shared rule.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CdlError, Result};
use crate::tensor::{Leaves, ParamStore, Tape, Tensor, Var};

/// Discrete variance schedule. Index convention: `beta(t)` and
/// `alpha_bar(t)` take `t` in `1..=len()`, and `alpha_bar(0) == 1.0`
/// (the clean-data endpoint).
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 1 {
            return Err(CdlError::Config("schedule needs at least one step".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(CdlError::Config(format!(
                "betas must satisfy 0 < {beta_start} <= {beta_end} < 1"
            )));
        }
        let mut betas = Vec::with_capacity(steps);
        for i in 0..steps {
            let frac = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
            betas.push(beta_start + (beta_end - beta_start) * frac);
        }
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for &b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self { betas, alpha_bar })
    }

    /// The conventional 1e-4 to 0.02 ramp.
    pub fn default_linear(steps: usize) -> Result<Self> {
        Self::linear(steps, 1e-4, 0.02)
    }

    /// Number of diffusion steps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn beta(&self, t: usize) -> f64 {
        assert!((1..=self.len()).contains(&t), "beta({t}) out of 1..={}", self.len());
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.len(), "alpha_bar({t}) out of 0..={}", self.len());
        self.alpha_bar[t]
    }

    /// Forward corruption: `sqrt(abar_t) x0 + sqrt(1-abar_t) eps`.
    pub fn q_sample(&self, x0: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        if x0.shape() != eps.shape() {
            return Err(CdlError::Shape(format!(
                "q_sample: x0 {:?} vs eps {:?}",
                x0.shape(),
                eps.shape()
            )));
        }
        let ab = self.alpha_bar(t);
        let (ca, ce) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut out = x0.clone();
        out.data_mut().iter_mut().zip(eps.data()).for_each(|(o, &e)| {
            *o = ca * *o + ce * e;
        });
        Ok(out)
    }

    /// Per-sample corruption for a batch `[n, ...]` with one `t` per sample.
    pub fn q_sample_batch(&self, x0: &Tensor, eps: &Tensor, ts: &[usize]) -> Result<Tensor> {
        if x0.shape() != eps.shape() {
            return Err(CdlError::Shape("q_sample_batch: x0/eps shapes differ".into()));
        }
        let n = *x0.shape().first().unwrap_or(&0);
        if n != ts.len() || n == 0 {
            return Err(CdlError::Shape(format!(
                "q_sample_batch: {} timesteps for batch of {n}",
                ts.len()
            )));
        }
        let per = x0.numel() / n;
        let mut out = x0.clone();
        for (i, &t) in ts.iter().enumerate() {
            let ab = self.alpha_bar(t);
            let (ca, ce) = (ab.sqrt(), (1.0 - ab).sqrt());
            let lo = i * per;
            for j in lo..lo + per {
                out.data_mut()[j] = ca * x0.data()[j] + ce * eps.data()[j];
            }
        }
        Ok(out)
    }

    /// Evenly spaced sub-schedule with `steps + 1` entries, descending from
    /// `T` to 0: entry `k` (from the end) is `round(T k / steps)`.
    pub fn sub_schedule(&self, steps: usize) -> Result<Vec<usize>> {
        let t_max = self.len();
        if steps < 1 || steps > t_max {
            return Err(CdlError::Config(format!(
                "sub-schedule of {steps} steps over {t_max}"
            )));
        }
        let out: Vec<usize> = (0..=steps)
            .rev()
            .map(|k| ((t_max * k) as f64 / steps as f64).round() as usize)
            .collect();
        debug_assert!(out.windows(2).all(|w| w[0] > w[1]));
        Ok(out)
    }
}

/// Deterministic transport between any two noise levels given the current
/// noise estimate: predict `x0`, then re-noise to the target level. The same
/// rule runs generation (`t_from > t_to`) and inversion (`t_from < t_to`).
pub fn ddim_transfer(
    schedule: &NoiseSchedule,
    x: &Tensor,
    eps_hat: &Tensor,
    t_from: usize,
    t_to: usize,
) -> Result<Tensor> {
    if x.shape() != eps_hat.shape() {
        return Err(CdlError::Shape(format!(
            "ddim_transfer: x {:?} vs eps {:?}",
            x.shape(),
            eps_hat.shape()
        )));
    }
    let ab_from = schedule.alpha_bar(t_from);
    let ab_to = schedule.alpha_bar(t_to);
    let (sa_from, se_from) = (ab_from.sqrt(), (1.0 - ab_from).sqrt());
    let (sa_to, se_to) = (ab_to.sqrt(), (1.0 - ab_to).sqrt());
    let mut out = x.clone();
    out.data_mut().iter_mut().zip(eps_hat.data()).for_each(|(o, &e)| {
        let x0_pred = (*o - se_from * e) / sa_from;
        *o = sa_to * x0_pred + se_to * e;
    });
    Ok(out)
}

/// One generation step; requires `t_from > t_to`.
pub fn ddim_step(
    schedule: &NoiseSchedule,
    x: &Tensor,
    eps_hat: &Tensor,
    t_from: usize,
    t_to: usize,
) -> Result<Tensor> {
    if t_from <= t_to {
        return Err(CdlError::Config(format!("ddim_step: {t_from} -> {t_to} not descending")));
    }
    ddim_transfer(schedule, x, eps_hat, t_from, t_to)
}

/// One inversion step; requires `t_from < t_to`.
pub fn ddim_invert_step(
    schedule: &NoiseSchedule,
    x: &Tensor,
    eps_hat: &Tensor,
    t_from: usize,
    t_to: usize,
) -> Result<Tensor> {
    if t_from >= t_to {
        return Err(CdlError::Config(format!(
            "ddim_invert_step: {t_from} -> {t_to} not ascending"
        )));
    }
    ddim_transfer(schedule, x, eps_hat, t_from, t_to)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpsNetConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub time_embed_dim: usize,
}

impl Default for EpsNetConfig {
    fn default() -> Self {
        Self { image_size: 32, base_channels: 8, channel_mults: vec![1, 2, 2], time_embed_dim: 32 }
    }
}

/// Small U-shaped noise predictor. Residual conv blocks with per-sample
/// timestep conditioning, 2x pooling between resolutions, nearest upsampling
/// with skip concatenation on the way back. The final projection starts at
/// zero so an untrained net predicts exactly zero noise.
pub struct EpsNet {
    cfg: EpsNetConfig,
    prefix: String,
}

/// Sinusoidal features of a batch of timesteps: `[n, dim]`.
pub fn timestep_embedding(ts: &[f64], dim: usize) -> Result<Tensor> {
    if dim < 2 || dim % 2 != 0 {
        return Err(CdlError::Config(format!("time embedding dim {dim} must be even, >= 2")));
    }
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = if half == 1 {
                1.0
            } else {
                (-(i as f64) * (10_000.0f64).ln() / (half - 1) as f64).exp()
            };
            data.push((t * freq).sin());
        }
        for i in 0..half {
            let freq = if half == 1 {
                1.0
            } else {
                (-(i as f64) * (10_000.0f64).ln() / (half - 1) as f64).exp()
            };
            data.push((t * freq).cos());
        }
    }
    Tensor::from_vec(vec![ts.len(), dim], data)
}

/// Inserts a conv parameter pair (`He` fan-in scaling) under `name`.
pub(crate) fn init_conv(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    name: &str,
    out_c: usize,
    in_c: usize,
    k: usize,
    zero: bool,
) -> Result<()> {
    let fan_in = (in_c * k * k) as f64;
    let std = if zero { 0.0 } else { (2.0 / fan_in).sqrt() };
    let normal = Normal::new(0.0, 1.0).map_err(|e| CdlError::Numeric(e.to_string()))?;
    let w: Vec<f64> =
        (0..out_c * in_c * k * k).map(|_| normal.sample(rng) * std).collect();
    store.insert(&format!("{name}.w"), Tensor::from_vec(vec![out_c, in_c, k, k], w)?)?;
    store.insert(&format!("{name}.b"), Tensor::zeros(&[out_c]))?;
    Ok(())
}

/// Inserts a linear parameter pair (`[in, out]` weight) under `name`.
pub(crate) fn init_linear(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    name: &str,
    in_d: usize,
    out_d: usize,
) -> Result<()> {
    let std = 1.0 / (in_d as f64).sqrt();
    let normal = Normal::new(0.0, 1.0).map_err(|e| CdlError::Numeric(e.to_string()))?;
    let w: Vec<f64> = (0..in_d * out_d).map(|_| normal.sample(rng) * std).collect();
    store.insert(&format!("{name}.w"), Tensor::from_vec(vec![in_d, out_d], w)?)?;
    store.insert(&format!("{name}.b"), Tensor::zeros(&[out_d]))?;
    Ok(())
}

pub(crate) fn apply_conv(
    tape: &mut Tape,
    leaves: &mut Leaves,
    name: &str,
    x: Var,
    pad: usize,
) -> Result<Var> {
    let w = leaves.get(tape, &format!("{name}.w"))?;
    let b = leaves.get(tape, &format!("{name}.b"))?;
    tape.conv2d(x, w, b, pad)
}

pub(crate) fn apply_linear(
    tape: &mut Tape,
    leaves: &mut Leaves,
    name: &str,
    x: Var,
) -> Result<Var> {
    let w = leaves.get(tape, &format!("{name}.w"))?;
    let b = leaves.get(tape, &format!("{name}.b"))?;
    let h = tape.matmul(x, w)?;
    tape.add_row(h, b)
}

/// Registers one residual conv block: two 3x3 convs, a timestep projection,
/// and a 1x1 skip when the channel count changes.
pub(crate) fn init_res_block(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    name: &str,
    in_c: usize,
    out_c: usize,
    time_dim: usize,
) -> Result<()> {
    init_conv(store, rng, &format!("{name}.conv1"), out_c, in_c, 3, false)?;
    init_conv(store, rng, &format!("{name}.conv2"), out_c, out_c, 3, false)?;
    init_linear(store, rng, &format!("{name}.t"), time_dim, out_c)?;
    if in_c != out_c {
        init_conv(store, rng, &format!("{name}.skip"), out_c, in_c, 1, false)?;
    }
    Ok(())
}

/// Applies the residual block registered under `name`.
pub(crate) fn res_block(
    tape: &mut Tape,
    leaves: &mut Leaves,
    name: &str,
    x: Var,
    temb: Var,
) -> Result<Var> {
    let in_c = tape.shape(x)[1];
    let out_c = leaves.store().get(&format!("{name}.conv1.w"))?.shape()[0];
    let a = tape.silu(x)?;
    let mut h = apply_conv(tape, leaves, &format!("{name}.conv1"), a, 1)?;
    let tproj = apply_linear(tape, leaves, &format!("{name}.t"), temb)?;
    h = tape.add_chan(h, tproj)?;
    let h2 = tape.silu(h)?;
    h = apply_conv(tape, leaves, &format!("{name}.conv2"), h2, 1)?;
    let skip = if in_c == out_c {
        x
    } else {
        apply_conv(tape, leaves, &format!("{name}.skip"), x, 0)?
    };
    tape.add(h, skip)
}

impl EpsNet {
    pub fn new(cfg: EpsNetConfig, prefix: &str) -> Result<Self> {
        if cfg.channel_mults.is_empty() {
            return Err(CdlError::Config("channel_mults must be non-empty".into()));
        }
        let down = 1usize << (cfg.channel_mults.len() - 1);
        if cfg.image_size % down != 0 || cfg.image_size / down < 2 {
            return Err(CdlError::Config(format!(
                "image size {} not divisible into {} resolutions",
                cfg.image_size,
                cfg.channel_mults.len()
            )));
        }
        if cfg.base_channels == 0 {
            return Err(CdlError::Config("base_channels must be positive".into()));
        }
        Ok(Self { cfg, prefix: prefix.to_string() })
    }

    pub fn config(&self) -> &EpsNetConfig {
        &self.cfg
    }

    fn stage_channels(&self) -> Vec<usize> {
        self.cfg.channel_mults.iter().map(|m| m * self.cfg.base_channels).collect()
    }

    fn name(&self, tail: &str) -> String {
        format!("{}.{tail}", self.prefix)
    }

    /// Registers all parameters in `store` under the net's prefix.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let c = self.stage_channels();
        let te = self.cfg.time_embed_dim;
        init_linear(store, rng, &self.name("temb"), te, te)?;
        init_conv(store, rng, &self.name("in"), c[0], 1, 3, false)?;
        let mut prev = c[0];
        for (s, &cs) in c.iter().enumerate() {
            init_res_block(store, rng, &self.name(&format!("down{s}")), prev, cs, te)?;
            prev = cs;
        }
        init_res_block(store, rng, &self.name("mid"), prev, prev, te)?;
        for s in (0..c.len() - 1).rev() {
            let cin = c[s + 1] + c[s];
            init_res_block(store, rng, &self.name(&format!("up{s}")), cin, c[s], te)?;
        }
        init_conv(store, rng, &self.name("out"), 1, c[0], 3, true)?;
        Ok(())
    }

    /// Predicts the noise in `x` (`[n,1,h,w]`) at per-sample timesteps `ts`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        leaves: &mut Leaves,
        x: Var,
        ts: &[usize],
    ) -> Result<Var> {
        let sx = tape.shape(x).to_vec();
        if sx.len() != 4 || sx[1] != 1 || sx[2] != self.cfg.image_size || sx[3] != sx[2] {
            return Err(CdlError::Shape(format!(
                "noise predictor expects [n,1,{0},{0}], got {sx:?}",
                self.cfg.image_size
            )));
        }
        if sx[0] != ts.len() {
            return Err(CdlError::Shape(format!(
                "{} timesteps for batch of {}",
                ts.len(),
                sx[0]
            )));
        }
        let tf: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
        let emb = tape.constant(timestep_embedding(&tf, self.cfg.time_embed_dim)?)?;
        let temb0 = apply_linear(tape, leaves, &self.name("temb"), emb)?;
        let temb = tape.silu(temb0)?;

        let c = self.stage_channels();
        let mut h = apply_conv(tape, leaves, &self.name("in"), x, 1)?;
        let mut skips = Vec::with_capacity(c.len());
        for s in 0..c.len() {
            h = res_block(tape, leaves, &self.name(&format!("down{s}")), h, temb)?;
            if s + 1 < c.len() {
                skips.push(h);
                h = tape.avg_pool2(h)?;
            }
        }
        h = res_block(tape, leaves, &self.name("mid"), h, temb)?;
        for s in (0..c.len() - 1).rev() {
            h = tape.upsample2(h)?;
            h = tape.concat_chan(h, skips[s])?;
            h = res_block(tape, leaves, &self.name(&format!("up{s}")), h, temb)?;
        }
        let a = tape.silu(h)?;
        apply_conv(tape, leaves, &self.name("out"), a, 1)
    }

    /// Plain (fresh-tape) prediction on concrete pixels.
    pub fn predict(&self, store: &ParamStore, x: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut leaves = Leaves::new(store);
        let xv = tape.constant(x.clone())?;
        let out = self.forward(&mut tape, &mut leaves, xv, ts)?;
        Ok(tape.value(out).clone())
    }
}

/// Noise-prediction training loss: mean squared error between the true and
/// predicted noise over the whole batch tensor.
pub fn ddpm_loss(
    tape: &mut Tape,
    net: &EpsNet,
    leaves: &mut Leaves,
    schedule: &NoiseSchedule,
    x0: &Tensor,
    eps: &Tensor,
    ts: &[usize],
) -> Result<Var> {
    let xt = schedule.q_sample_batch(x0, eps, ts)?;
    let xt = tape.constant(xt)?;
    let eps_hat = net.forward(tape, leaves, xt, ts)?;
    let target = tape.constant(eps.clone())?;
    let diff = tape.sub(eps_hat, target)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean_all(sq)
}

/// Deterministic generation from pure noise down the sub-schedule.
pub fn ddim_sample(
    net: &EpsNet,
    store: &ParamStore,
    schedule: &NoiseSchedule,
    steps: usize,
    x_init: Tensor,
) -> Result<Tensor> {
    let sub = schedule.sub_schedule(steps)?;
    let n = x_init.shape()[0];
    let mut x = x_init;
    for pair in sub.windows(2) {
        let (t_from, t_to) = (pair[0], pair[1]);
        let eps_hat = net.predict(store, &x, &vec![t_from; n])?;
        x = ddim_step(schedule, &x, &eps_hat, t_from, t_to)?;
    }
    Ok(x)
}

/// Deterministic inversion of a clean image up the sub-schedule. The noise
/// estimate at each hop is taken at the current (lower) timestep, including
/// the very first hop at `t = 0`.
pub fn ddim_invert(
    net: &EpsNet,
    store: &ParamStore,
    schedule: &NoiseSchedule,
    steps: usize,
    x0: Tensor,
) -> Result<Tensor> {
    let mut sub = schedule.sub_schedule(steps)?;
    sub.reverse();
    let n = x0.shape()[0];
    let mut x = x0;
    for pair in sub.windows(2) {
        let (t_from, t_to) = (pair[0], pair[1]);
        let eps_hat = net.predict(store, &x, &vec![t_from; n])?;
        x = ddim_invert_step(schedule, &x, &eps_hat, t_from, t_to)?;
    }
    Ok(x)
}
