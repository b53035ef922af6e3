//! Joint training: noise-prediction, projector, and structural losses on
//! shared batch draws, stepped by independent Adam instances with EMA
//! shadows, a dual update of the acyclicity multiplier each epoch, and
//! bit-exact stop/resume through checkpoints.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::diffusion::{ddpm_loss, EpsNet, EpsNetConfig, NoiseSchedule};
use crate::heads::{
    acyclicity_value, column_stats, extract_graph, nscm_loss, projector_loss, CausalGraph,
    Lagrangian, Nscm, NscmConfig, Projector, ProjectorBatch, ProjectorConfig,
};
use crate::rng::stream;
use crate::tensor::{AdamConfig, Leaves, ParamStore, Tape, Tensor};
use crate::world::{world_by_id, Dataset};
use crate::{CdlError, Result};

const CHECKPOINT_VERSION: f64 = 1.0;

/// One line of the loss log.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub iteration: usize,
    pub l_diff: f64,
    pub l_h: f64,
    pub l_s: f64,
    pub h: f64,
    pub rho: f64,
    pub beta_mult: f64,
}

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut out = String::from("iteration,l_diff,l_h,l_s,h,rho,beta_mult\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.iteration, r.l_diff, r.l_h, r.l_s, r.h, r.rho, r.beta_mult
        ));
    }
    out
}

/// Structure summary extracted from the trained adjacency.
#[derive(Debug, Clone)]
pub struct GraphReport {
    pub adjacency: Tensor,
    pub h: f64,
    /// Thresholded edge list; `None` when the thresholded support is cyclic.
    pub edges: Option<Vec<(usize, usize)>>,
}

/// All mutable training state: the three networks' parameter stores, the
/// Lagrangian multiplier, and the iteration cursor.
pub struct TrainState {
    pub cfg: TrainConfig,
    pub eps: EpsNet,
    pub proj: Projector,
    pub nscm: Nscm,
    pub eps_store: ParamStore,
    pub proj_store: ParamStore,
    pub nscm_store: ParamStore,
    pub lag: Lagrangian,
    pub schedule: NoiseSchedule,
    pub iteration: usize,
    pub rows: Vec<LossRow>,
    /// Residual scale of the projector at t = 0 on the validation split,
    /// set by [`TrainState::calibrate_delta`].
    pub delta: Option<f64>,
}

/// One iteration's batch and corruption draws, derived solely from
/// (seed, iteration) so a resumed run replays the identical sequence.
pub(crate) struct BatchDraws {
    pub x0: Tensor,
    pub z: Tensor,
    pub t1: Vec<usize>,
    pub t2: Vec<usize>,
    pub eps1: Tensor,
    pub eps2: Tensor,
}

pub(crate) fn make_batch(
    cfg: &TrainConfig,
    dataset: &Dataset,
    train_idx: &[usize],
    iteration: usize,
) -> Result<BatchDraws> {
    let b = cfg.batch_size.min(train_idx.len());
    let s = cfg.image_size;
    let d = dataset.meta.node_count;

    let mut rng_b = stream(cfg.seed, "batch", iteration as u64);
    let idx: Vec<usize> = (0..b).map(|_| train_idx[rng_b.gen_range(0..train_idx.len())]).collect();

    let mut pixels = Vec::with_capacity(b * s * s);
    let mut factors = Vec::with_capacity(b * d);
    for &i in &idx {
        pixels.extend_from_slice(&dataset.images[i]);
        factors.extend_from_slice(&dataset.records[i].factors);
    }
    let x0 = Tensor::from_vec(vec![b, 1, s, s], pixels)?;
    let z = Tensor::from_vec(vec![b, d], factors)?;

    let mut rng_t = stream(cfg.seed, "time", iteration as u64);
    let t1: Vec<usize> = (0..b).map(|_| rng_t.gen_range(0..cfg.timesteps)).collect();
    let t2: Vec<usize> = (0..b).map(|_| rng_t.gen_range(0..cfg.timesteps)).collect();

    let mut rng_e = stream(cfg.seed, "noise", iteration as u64);
    let draw = |rng: &mut crate::rng::Substream| -> Result<Tensor> {
        let data: Vec<f64> = (0..b * s * s).map(|_| rng.sample(StandardNormal)).collect();
        Tensor::from_vec(vec![b, 1, s, s], data)
    };
    let eps1 = draw(&mut rng_e)?;
    let eps2 = draw(&mut rng_e)?;
    Ok(BatchDraws { x0, z, t1, t2, eps1, eps2 })
}

impl TrainState {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let d = world_by_id(&cfg.world, 0.05)?.node_count();

        let eps = EpsNet::new(
            EpsNetConfig {
                image_size: cfg.image_size,
                base_channels: cfg.base_channels,
                channel_mults: cfg.channel_mults.clone(),
                time_embed_dim: cfg.time_embed_dim,
            },
            "e",
        )?;
        let proj = Projector::new(
            ProjectorConfig {
                image_size: cfg.image_size,
                base_channels: cfg.base_channels,
                channel_mults: cfg.channel_mults.clone(),
                time_embed_dim: cfg.time_embed_dim,
                factor_dim: d,
            },
            "p",
        )?;
        let nscm = Nscm::new(NscmConfig { factor_dim: d, hidden: cfg.nscm_hidden }, "s")?;

        let mut eps_store = ParamStore::new(cfg.ema_rate)?;
        let mut proj_store = ParamStore::new(cfg.ema_rate)?;
        let mut nscm_store = ParamStore::new(cfg.ema_rate)?;
        eps.init(&mut eps_store, &mut stream(cfg.seed, "init-eps", 0))?;
        proj.init(&mut proj_store, &mut stream(cfg.seed, "init-proj", 0))?;
        nscm.init(&mut nscm_store, &mut stream(cfg.seed, "init-nscm", 0))?;
        if cfg.gate_init != 0.0 {
            let mut gates = Tensor::full(&[d, d][..], cfg.gate_init);
            for i in 0..d {
                gates.data_mut()[i * d + i] = 0.0;
            }
            nscm_store.reinit(&nscm.adjacency_name(), gates)?;
        }

        let schedule = NoiseSchedule::default_linear(cfg.timesteps)?;
        let lag = Lagrangian::new(cfg.rho0, cfg.beta0);
        Ok(Self {
            cfg,
            eps,
            proj,
            nscm,
            eps_store,
            proj_store,
            nscm_store,
            lag,
            schedule,
            iteration: 0,
            rows: Vec::new(),
            delta: None,
        })
    }

    /// Deterministic train/validation index split.
    pub fn splits(&self, n: usize) -> (Vec<usize>, Vec<usize>) {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(self.cfg.seed, "split", 0));
        if n < 2 {
            return (order, Vec::new());
        }
        let val_n = ((n as f64 * self.cfg.val_fraction).round() as usize).clamp(1, n - 1);
        let val = order.split_off(n - val_n);
        (order, val)
    }

    fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        if dataset.is_empty() {
            return Err(CdlError::Config("training dataset is empty".into()));
        }
        if dataset.meta.world_id != self.cfg.world {
            return Err(CdlError::Config(format!(
                "dataset world '{}' does not match config world '{}'",
                dataset.meta.world_id, self.cfg.world
            )));
        }
        if dataset.meta.image_size != self.cfg.image_size {
            return Err(CdlError::Config(format!(
                "dataset images are {}px, config expects {}px",
                dataset.meta.image_size, self.cfg.image_size
            )));
        }
        Ok(())
    }

    /// Runs iterations until the cursor reaches `target`.
    pub fn run_until(&mut self, dataset: &Dataset, target: usize) -> Result<()> {
        self.check_dataset(dataset)?;
        let (train_idx, _) = self.splits(dataset.len());
        if dataset.len() >= 2 {
            let d = dataset.meta.node_count;
            let mut flat = Vec::with_capacity(dataset.len() * d);
            for r in &dataset.records {
                flat.extend_from_slice(&r.factors);
            }
            let all = Tensor::from_vec(vec![dataset.len(), d], flat)?;
            let (mu, sigma) = column_stats(&all)?;
            self.nscm.set_standardization(&mut self.nscm_store, &mu, &sigma)?;
        }
        while self.iteration < target {
            self.step_once(dataset, &train_idx)?;
        }
        Ok(())
    }

    fn step_once(&mut self, dataset: &Dataset, train_idx: &[usize]) -> Result<()> {
        let i = self.iteration;
        self.step_inner(dataset, train_idx).map_err(|e| match e {
            CdlError::Numeric(m) => CdlError::Numeric(format!("{m} (iteration {i})")),
            other => other,
        })
    }

    fn step_inner(&mut self, dataset: &Dataset, train_idx: &[usize]) -> Result<()> {
        let i = self.iteration;
        let cfg = &self.cfg;
        let draws = make_batch(cfg, dataset, train_idx, i)?;

        let mut tape = Tape::new();
        let mut leaves = Leaves::new(&self.eps_store);
        let loss = ddpm_loss(
            &mut tape,
            &self.eps,
            &mut leaves,
            &self.schedule,
            &draws.x0,
            &draws.eps1,
            &draws.t1,
        )?;
        let l_diff = tape.value(loss).item()?;
        if !l_diff.is_finite() {
            return Err(CdlError::Numeric(format!(
                "non-finite diffusion loss {l_diff}"
            )));
        }
        tape.backward(loss)?;
        let grads = leaves.grads(&tape);
        let adam = AdamConfig { lr: cfg.lr_eps, clip: Some(cfg.grad_clip), ..AdamConfig::default() };
        self.eps_store.adam_step(&grads, &adam)?;

        let mut tape = Tape::new();
        let mut leaves = Leaves::new(&self.proj_store);
        let batch = ProjectorBatch {
            x0: &draws.x0,
            z: &draws.z,
            t1: &draws.t1,
            t2: &draws.t2,
            eps1: &draws.eps1,
            eps2: &draws.eps2,
        };
        let parts = projector_loss(
            &mut tape,
            &self.proj,
            &mut leaves,
            &self.schedule,
            &batch,
            cfg.tau,
            cfg.contrast_weight,
        )?;
        let l_h = tape.value(parts.total).item()?;
        if !l_h.is_finite() {
            return Err(CdlError::Numeric(format!(
                "non-finite projector loss {l_h}"
            )));
        }
        tape.backward(parts.total)?;
        let grads = leaves.grads(&tape);
        let adam = AdamConfig { lr: cfg.lr_proj, clip: Some(cfg.grad_clip), ..AdamConfig::default() };
        self.proj_store.adam_step(&grads, &adam)?;

        let mut tape = Tape::new();
        let mut leaves = Leaves::new(&self.nscm_store);
        let sparts = nscm_loss(
            &mut tape,
            &self.nscm,
            &mut leaves,
            &draws.z,
            cfg.alpha,
            cfg.weight_decay,
            &self.lag,
            cfg.squared_penalty,
        )?;
        let l_s = tape.value(sparts.total).item()?;
        if !l_s.is_finite() {
            return Err(CdlError::Numeric(format!(
                "non-finite structural loss {l_s}"
            )));
        }
        tape.backward(sparts.total)?;
        let grads = leaves.grads(&tape);
        let adam = AdamConfig { lr: cfg.lr_nscm, clip: Some(cfg.grad_clip), ..AdamConfig::default() };
        self.nscm_store.adam_step(&grads, &adam)?;

        if (i + 1) % cfg.epoch_iters == 0 {
            self.lag.update(sparts.h);
        }
        if (i + 1) % cfg.log_every == 0 {
            self.rows.push(LossRow {
                iteration: i + 1,
                l_diff,
                l_h,
                l_s,
                h: sparts.h,
                rho: self.lag.rho,
                beta_mult: self.lag.beta,
            });
        }
        self.iteration = i + 1;
        Ok(())
    }

    /// Root-mean-square residual of the projector at t = 0 over the
    /// validation split, floored away from zero. This is the scale the
    /// guidance objective divides by.
    pub fn calibrate_delta(&mut self, dataset: &Dataset) -> Result<f64> {
        self.check_dataset(dataset)?;
        let (_, val_idx) = self.splits(dataset.len());
        if val_idx.is_empty() {
            return Err(CdlError::Config("no validation samples to calibrate on".into()));
        }
        let eval = self.proj_store.eval_clone();
        let s = self.cfg.image_size;
        let d = dataset.meta.node_count;
        let mut sq_sum = 0.0;
        for chunk in val_idx.chunks(16) {
            let mut pixels = Vec::with_capacity(chunk.len() * s * s);
            for &i in chunk {
                pixels.extend_from_slice(&dataset.images[i]);
            }
            let x = Tensor::from_vec(vec![chunk.len(), 1, s, s], pixels)?;
            let z_hat = self.proj.project(&eval, &x, &vec![0; chunk.len()])?;
            for (row, &i) in chunk.iter().enumerate() {
                for j in 0..d {
                    let e = z_hat.data()[row * d + j] - dataset.records[i].factors[j];
                    sq_sum += e * e;
                }
            }
        }
        let rms = (sq_sum / (val_idx.len() * d) as f64).sqrt();
        let delta = rms.max(1e-6);
        self.delta = Some(delta);
        Ok(delta)
    }

    /// Evaluation-time parameters: EMA shadows of all three components
    /// merged into one store.
    pub fn inference_store(&self) -> Result<ParamStore> {
        let mut store = self.eps_store.eval_clone();
        store.absorb(&self.proj_store.eval_clone())?;
        store.absorb(&self.nscm_store.eval_clone())?;
        Ok(store)
    }

    pub fn graph(&self, threshold: f64) -> Result<CausalGraph> {
        extract_graph(&self.nscm, &self.nscm_store.eval_clone(), threshold)
    }

    pub fn graph_report(&self, threshold: f64) -> Result<GraphReport> {
        let eval = self.nscm_store.eval_clone();
        let adjacency = self.nscm.adjacency(&eval)?;
        let h = acyclicity_value(&self.nscm, &eval)?;
        let edges = extract_graph(&self.nscm, &eval, threshold).ok().map(|g| g.edges());
        Ok(GraphReport { adjacency, h, edges })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ck = Checkpoint::new();
        ck.insert_scalar("meta.version", CHECKPOINT_VERSION)?;
        ck.insert_scalar("meta.iteration", self.iteration as f64)?;
        let (rho, beta, prev_h) = self.lag.state();
        ck.insert_scalar("meta.rho", rho)?;
        ck.insert_scalar("meta.beta", beta)?;
        ck.insert_scalar("meta.h_prev_set", if prev_h.is_some() { 1.0 } else { 0.0 })?;
        ck.insert_scalar("meta.h_prev", prev_h.unwrap_or(0.0))?;
        if let Some(delta) = self.delta {
            ck.insert_scalar("meta.delta", delta)?;
        }
        ck.insert_bytes("meta.config", self.cfg.to_json()?.as_bytes())?;
        ck.add_store("eps", &self.eps_store)?;
        ck.add_store("proj", &self.proj_store)?;
        ck.add_store("nscm", &self.nscm_store)?;
        ck.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::read(path)?;
        let version = ck.scalar("meta.version")?;
        if version != CHECKPOINT_VERSION {
            return Err(CdlError::Format(format!(
                "checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let cfg_bytes = ck.bytes("meta.config")?;
        let cfg_text = std::str::from_utf8(&cfg_bytes)
            .map_err(|e| CdlError::Format(format!("checkpoint config not utf-8: {e}")))?;
        let cfg = TrainConfig::from_json(cfg_text)?;
        let mut state = Self::new(cfg)?;
        state.eps_store = ck.load_store("eps")?;
        state.proj_store = ck.load_store("proj")?;
        state.nscm_store = ck.load_store("nscm")?;
        state.iteration = ck.scalar("meta.iteration")? as usize;
        let prev_h = if ck.scalar("meta.h_prev_set")? != 0.0 {
            Some(ck.scalar("meta.h_prev")?)
        } else {
            None
        };
        state.lag =
            Lagrangian::from_state(ck.scalar("meta.rho")?, ck.scalar("meta.beta")?, prev_h);
        state.delta = if ck.contains("meta.delta") {
            Some(ck.scalar("meta.delta")?)
        } else {
            None
        };
        Ok(state)
    }
}

/// Fresh run to `cfg.iterations`, with the residual scale calibrated at the
/// end.
pub fn train(cfg: &TrainConfig, dataset: &Dataset) -> Result<TrainState> {
    let mut state = TrainState::new(cfg.clone())?;
    state.run_until(dataset, cfg.iterations)?;
    state.calibrate_delta(dataset)?;
    Ok(state)
}
