//! Causal heads that ride on the diffusion backbone: a projector that reads
//! generative factors out of noisy images, and a structural model over those
//! factors with a learnable weighted adjacency. Includes their training
//! losses, the augmented-Lagrangian state for the acyclicity constraint, and
//! hard-graph extraction.

use std::collections::BTreeSet;

use rand::Rng;

use crate::diffusion::{
    apply_conv, apply_linear, init_conv, init_linear, init_res_block, res_block,
    timestep_embedding, NoiseSchedule,
};
use crate::error::{CdlError, Result};
use crate::rng::stream;
use crate::tensor::{AdamConfig, Leaves, ParamStore, Tape, Tensor, Var};

/// Timestep weighting for factor supervision: early (clean) timesteps count
/// more, decaying to `exp(-1)` at the final step.
pub fn timestep_weight(t: usize, t_max: usize) -> f64 {
    (-(t as f64) / t_max as f64).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub time_embed_dim: usize,
    pub factor_dim: usize,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            base_channels: 8,
            channel_mults: vec![1, 2, 4],
            time_embed_dim: 32,
            factor_dim: 4,
        }
    }
}

/// Convolutional factor reader. A timestep-conditioned encoder pools into a
/// global embedding `u`, and a linear head maps `u` to the factor estimate.
/// Both outputs are exposed: `u` feeds the contrastive term, the factor
/// estimate feeds supervision and guidance.
pub struct Projector {
    cfg: ProjectorConfig,
    prefix: String,
}

impl Projector {
    pub fn new(cfg: ProjectorConfig, prefix: &str) -> Result<Self> {
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
        if cfg.factor_dim == 0 || cfg.base_channels == 0 {
            return Err(CdlError::Config("factor_dim and base_channels must be positive".into()));
        }
        Ok(Self { cfg, prefix: prefix.to_string() })
    }

    pub fn config(&self) -> &ProjectorConfig {
        &self.cfg
    }

    /// Width of the pooled embedding `u`.
    pub fn embed_width(&self) -> usize {
        self.cfg.base_channels * self.cfg.channel_mults.last().unwrap()
    }

    fn name(&self, tail: &str) -> String {
        format!("{}.{tail}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let c: Vec<usize> =
            self.cfg.channel_mults.iter().map(|m| m * self.cfg.base_channels).collect();
        let te = self.cfg.time_embed_dim;
        init_linear(store, rng, &self.name("temb"), te, te)?;
        init_conv(store, rng, &self.name("in"), c[0], 1, 3, false)?;
        let mut prev = c[0];
        for (s, &cs) in c.iter().enumerate() {
            init_res_block(store, rng, &self.name(&format!("enc{s}")), prev, cs, te)?;
            prev = cs;
        }
        init_linear(store, rng, &self.name("head"), prev, self.cfg.factor_dim)?;
        Ok(())
    }

    /// Maps noisy images `[n,1,h,w]` at per-sample timesteps to
    /// `(embedding [n,c], factors [n,d])`. Gradients flow back to `x`, which
    /// is what guidance differentiates.
    pub fn forward(
        &self,
        tape: &mut Tape,
        leaves: &mut Leaves,
        x: Var,
        ts: &[usize],
    ) -> Result<(Var, Var)> {
        let sx = tape.shape(x).to_vec();
        if sx.len() != 4 || sx[1] != 1 || sx[2] != self.cfg.image_size || sx[3] != sx[2] {
            return Err(CdlError::Shape(format!(
                "projector expects [n,1,{0},{0}], got {sx:?}",
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

        let stages = self.cfg.channel_mults.len();
        let mut h = apply_conv(tape, leaves, &self.name("in"), x, 1)?;
        for s in 0..stages {
            h = res_block(tape, leaves, &self.name(&format!("enc{s}")), h, temb)?;
            if s + 1 < stages {
                h = tape.avg_pool2(h)?;
            }
        }
        let act = tape.silu(h)?;
        let u = tape.global_mean_pool(act)?;
        let z = apply_linear(tape, leaves, &self.name("head"), u)?;
        Ok((u, z))
    }

    /// Factor estimates for concrete pixels on a fresh tape.
    pub fn project(&self, store: &ParamStore, x: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut leaves = Leaves::new(store);
        let xv = tape.constant(x.clone())?;
        let (_, z) = self.forward(&mut tape, &mut leaves, xv, ts)?;
        Ok(tape.value(z).clone())
    }
}

/// Two corrupted views of one clean batch plus factor targets.
pub struct ProjectorBatch<'a> {
    pub x0: &'a Tensor,
    pub z: &'a Tensor,
    pub t1: &'a [usize],
    pub t2: &'a [usize],
    pub eps1: &'a Tensor,
    pub eps2: &'a Tensor,
}

pub struct ProjectorLossParts {
    pub total: Var,
    pub prediction: f64,
    pub contrast: f64,
}

/// Projector objective: timestep-weighted factor regression on both views
/// plus a temperature-scaled contrastive term that pulls the two embeddings
/// of each sample together against in-batch negatives. Every per-sample term
/// is weighted — regression by its own view's timestep, the contrastive term
/// by the noisier of the two — and averaged over the batch.
pub fn projector_loss(
    tape: &mut Tape,
    proj: &Projector,
    leaves: &mut Leaves,
    schedule: &NoiseSchedule,
    batch: &ProjectorBatch,
    tau: f64,
    contrast_weight: f64,
) -> Result<ProjectorLossParts> {
    if tau <= 0.0 {
        return Err(CdlError::Config(format!("temperature {tau} must be positive")));
    }
    let n = batch.z.shape()[0];
    let t_max = schedule.len();

    let xt1 = tape.constant(schedule.q_sample_batch(batch.x0, batch.eps1, batch.t1)?)?;
    let xt2 = tape.constant(schedule.q_sample_batch(batch.x0, batch.eps2, batch.t2)?)?;
    let (u1, z1) = proj.forward(tape, leaves, xt1, batch.t1)?;
    let (u2, z2) = proj.forward(tape, leaves, xt2, batch.t2)?;
    let target = tape.constant(batch.z.clone())?;

    let view_term = |tape: &mut Tape, zv: Var, ts: &[usize]| -> Result<Var> {
        let diff = tape.sub(zv, target)?;
        let sq = tape.mul(diff, diff)?;
        let per = tape.row_sum(sq)?;
        let w = tape.constant(Tensor::vector(
            ts.iter().map(|&t| timestep_weight(t, t_max)).collect::<Vec<f64>>(),
        ))?;
        let weighted = tape.mul(per, w)?;
        tape.mean_all(weighted)
    };
    let p1 = view_term(tape, z1, batch.t1)?;
    let p2 = view_term(tape, z2, batch.t2)?;
    let psum = tape.add(p1, p2)?;
    let prediction = tape.scale(psum, 0.5)?;

    // Contrastive term: cosine similarities between the two views.
    let n1 = tape.row_normalize(u1)?;
    let n2 = tape.row_normalize(u2)?;
    let n2t = tape.transpose(n2)?;
    let sims = tape.matmul(n1, n2t)?;
    let s12 = tape.scale(sims, 1.0 / tau)?;
    let s21 = tape.transpose(s12)?;
    let eye = {
        let mut e = Tensor::zeros(&[n, n][..]);
        for i in 0..n {
            e.data_mut()[i * n + i] = 1.0;
        }
        tape.constant(e)?
    };
    let w_pair = tape.constant(Tensor::vector(
        batch
            .t1
            .iter()
            .zip(batch.t2)
            .map(|(&a, &b)| timestep_weight(a.max(b), t_max))
            .collect::<Vec<f64>>(),
    ))?;
    let direction = |tape: &mut Tape, s: Var| -> Result<Var> {
        let e = tape.exp(s)?;
        let denom = tape.row_sum(e)?;
        let ln_denom = tape.ln(denom)?;
        let diag_m = tape.mul(s, eye)?;
        let diag = tape.row_sum(diag_m)?;
        let l = tape.sub(ln_denom, diag)?;
        let weighted = tape.mul(l, w_pair)?;
        tape.mean_all(weighted)
    };
    let c12 = direction(tape, s12)?;
    let c21 = direction(tape, s21)?;
    let csum = tape.add(c12, c21)?;
    let contrast = tape.scale(csum, 0.5)?;

    let scaled_c = tape.scale(contrast, contrast_weight)?;
    let total = tape.add(prediction, scaled_c)?;
    Ok(ProjectorLossParts {
        total,
        prediction: tape.value(prediction).item()?,
        contrast: tape.value(contrast).item()?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NscmConfig {
    pub factor_dim: usize,
    /// Hidden width of each node's head; 0 selects plain linear heads.
    pub hidden: usize,
}

impl Default for NscmConfig {
    fn default() -> Self {
        Self { factor_dim: 4, hidden: 16 }
    }
}

/// Structural model over factors. A weighted adjacency (diagonal forced to
/// zero) gates which standardized factors each node's head sees; heads are
/// tanh MLPs or plain linear maps. Outputs live back in raw factor units.
pub struct Nscm {
    cfg: NscmConfig,
    prefix: String,
}

impl Nscm {
    pub fn new(cfg: NscmConfig, prefix: &str) -> Result<Self> {
        if cfg.factor_dim < 2 {
            return Err(CdlError::Config("structural model needs at least 2 factors".into()));
        }
        Ok(Self { cfg, prefix: prefix.to_string() })
    }

    pub fn config(&self) -> &NscmConfig {
        &self.cfg
    }

    fn name(&self, tail: &str) -> String {
        format!("{}.{tail}", self.prefix)
    }

    pub fn adjacency_name(&self) -> String {
        self.name("A")
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let d = self.cfg.factor_dim;
        store.insert(&self.name("A"), Tensor::zeros(&[d, d][..]))?;
        for i in 0..d {
            if self.cfg.hidden > 0 {
                init_linear(store, rng, &self.name(&format!("n{i}.l1")), d, self.cfg.hidden)?;
                init_linear(store, rng, &self.name(&format!("n{i}.l2")), self.cfg.hidden, 1)?;
            } else {
                init_linear(store, rng, &self.name(&format!("n{i}.l1")), d, 1)?;
            }
        }
        store.insert_buffer(&self.name("mu"), Tensor::zeros(&[d][..]))?;
        store.insert_buffer(&self.name("sigma"), Tensor::full(&[d][..], 1.0))?;
        Ok(())
    }

    /// Stores per-factor mean/scale so heads operate on standardized values.
    pub fn set_standardization(&self, store: &mut ParamStore, mu: &[f64], sigma: &[f64]) -> Result<()> {
        let d = self.cfg.factor_dim;
        if mu.len() != d || sigma.len() != d {
            return Err(CdlError::Shape(format!(
                "standardization wants {d} entries, got {}/{}",
                mu.len(),
                sigma.len()
            )));
        }
        if sigma.iter().any(|&s| !(s > 0.0)) {
            return Err(CdlError::Numeric("standardization scale must be positive".into()));
        }
        store.set_buffer(&self.name("mu"), Tensor::vector(mu));
        store.set_buffer(&self.name("sigma"), Tensor::vector(sigma));
        Ok(())
    }

    /// Adjacency leaf with the diagonal masked to zero.
    pub fn masked_adjacency(&self, tape: &mut Tape, leaves: &mut Leaves) -> Result<Var> {
        let d = self.cfg.factor_dim;
        let a = leaves.get(tape, &self.name("A"))?;
        let mut m = Tensor::full(&[d, d][..], 1.0);
        for i in 0..d {
            m.data_mut()[i * d + i] = 0.0;
        }
        let mask = tape.constant(m)?;
        tape.mul(a, mask)
    }

    /// Weight tensors of the node heads (decayed during fitting so the edge
    /// gates, not the heads, carry the scale).
    pub fn head_weight_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.cfg.factor_dim {
            names.push(self.name(&format!("n{i}.l1.w")));
            if self.cfg.hidden > 0 {
                names.push(self.name(&format!("n{i}.l2.w")));
            }
        }
        names
    }

    /// Current adjacency values, diagonal zeroed.
    pub fn adjacency(&self, store: &ParamStore) -> Result<Tensor> {
        let d = self.cfg.factor_dim;
        let mut a = store.get(&self.name("A"))?.clone();
        for i in 0..d {
            a.data_mut()[i * d + i] = 0.0;
        }
        Ok(a)
    }

    /// Evaluates every node head on `z` (`[n,d]` raw units). Each head `i`
    /// sees the standardized factors scaled by column `i` of the (optionally
    /// hard-masked) adjacency, and its output is mapped back to raw units.
    pub fn forward_masked(
        &self,
        tape: &mut Tape,
        leaves: &mut Leaves,
        z: Var,
        hard_mask: Option<&Tensor>,
    ) -> Result<Var> {
        let d = self.cfg.factor_dim;
        let sz = tape.shape(z).to_vec();
        if sz.len() != 2 || sz[1] != d {
            return Err(CdlError::Shape(format!("structural model expects [n,{d}], got {sz:?}")));
        }
        let mu = leaves.store().buffer(&self.name("mu"))?.clone();
        let sigma = leaves.store().buffer(&self.name("sigma"))?.clone();
        let neg_mu = tape.constant(mu.map(|v| -v))?;
        let inv_sigma = tape.constant(sigma.map(|v| 1.0 / v))?;
        let centered = tape.add_row(z, neg_mu)?;
        let zn = tape.mul_row(centered, inv_sigma)?;

        let mut a_eff = self.masked_adjacency(tape, leaves)?;
        if let Some(hm) = hard_mask {
            if hm.shape() != [d, d] {
                return Err(CdlError::Shape(format!(
                    "hard mask shape {:?}, want [{d},{d}]",
                    hm.shape()
                )));
            }
            let hmv = tape.constant(hm.clone())?;
            a_eff = tape.mul(a_eff, hmv)?;
        }

        let mut out: Option<Var> = None;
        for i in 0..d {
            let col = tape.slice_col(a_eff, i)?;
            let xi = tape.mul_row(zn, col)?;
            let o = if self.cfg.hidden > 0 {
                let h = apply_linear(tape, leaves, &self.name(&format!("n{i}.l1")), xi)?;
                let ht = tape.tanh(h)?;
                apply_linear(tape, leaves, &self.name(&format!("n{i}.l2")), ht)?
            } else {
                apply_linear(tape, leaves, &self.name(&format!("n{i}.l1")), xi)?
            };
            out = Some(match out {
                None => o,
                Some(acc) => tape.concat_cols(acc, o)?,
            });
        }
        let cat = out.expect("factor_dim >= 2");
        let sig_c = tape.constant(sigma)?;
        let mu_c = tape.constant(mu)?;
        let scaled = tape.mul_row(cat, sig_c)?;
        tape.add_row(scaled, mu_c)
    }

    pub fn forward(&self, tape: &mut Tape, leaves: &mut Leaves, z: Var) -> Result<Var> {
        self.forward_masked(tape, leaves, z, None)
    }

    /// Head evaluations for concrete factors on a fresh tape.
    pub fn predict(
        &self,
        store: &ParamStore,
        z: &Tensor,
        hard_mask: Option<&Tensor>,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut leaves = Leaves::new(store);
        let zv = tape.constant(z.clone())?;
        let out = self.forward_masked(&mut tape, &mut leaves, zv, hard_mask)?;
        Ok(tape.value(out).clone())
    }
}

/// Augmented-Lagrangian state for the acyclicity constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct Lagrangian {
    pub rho: f64,
    pub beta: f64,
    prev_h: Option<f64>,
}

impl Lagrangian {
    pub fn new(rho: f64, beta: f64) -> Self {
        Self { rho, beta, prev_h: None }
    }

    /// Full state for checkpointing.
    pub fn state(&self) -> (f64, f64, Option<f64>) {
        (self.rho, self.beta, self.prev_h)
    }

    pub fn from_state(rho: f64, beta: f64, prev_h: Option<f64>) -> Self {
        Self { rho, beta, prev_h }
    }

    /// Dual ascent on the multiplier; the penalty weight escalates tenfold
    /// (capped at 1e8) whenever the constraint fails to shrink to a quarter
    /// of its previous value. The first observation never escalates.
    pub fn update(&mut self, h: f64) {
        self.beta += self.rho * h;
        if let Some(prev) = self.prev_h {
            if h > 0.25 * prev {
                self.rho = (self.rho * 10.0).min(1e8);
            }
        }
        self.prev_h = Some(h);
    }
}

pub struct NscmLossParts {
    pub total: Var,
    pub recon: f64,
    pub l1: f64,
    pub h: f64,
}

/// Structural-model objective on observed factors: per-element reconstruction
/// error, an L1 edge penalty, L2 decay on the head weights (which pins the
/// gate/head scale ambiguity so edge strength lives in the gates), and the
/// augmented-Lagrangian acyclicity terms `beta H + (rho/2) |H|` (or `H^2`
/// when `squared_penalty`).
pub fn nscm_loss(
    tape: &mut Tape,
    nscm: &Nscm,
    leaves: &mut Leaves,
    z: &Tensor,
    alpha: f64,
    weight_decay: f64,
    lag: &Lagrangian,
    squared_penalty: bool,
) -> Result<NscmLossParts> {
    let zv = tape.constant(z.clone())?;
    let pred = nscm.forward(tape, leaves, zv)?;
    let diff = tape.sub(pred, zv)?;
    let sq = tape.mul(diff, diff)?;
    let recon = tape.mean_all(sq)?;

    let a_eff = nscm.masked_adjacency(tape, leaves)?;
    let a_abs = tape.abs(a_eff)?;
    let l1 = tape.sum_all(a_abs)?;
    let h = tape.dag_penalty(a_eff)?;

    let l1_term = tape.scale(l1, alpha)?;
    let beta_term = tape.scale(h, lag.beta)?;
    let rho_term = if squared_penalty {
        let hh = tape.mul(h, h)?;
        tape.scale(hh, 0.5 * lag.rho)?
    } else {
        let ha = tape.abs(h)?;
        tape.scale(ha, 0.5 * lag.rho)?
    };
    let t1 = tape.add(recon, l1_term)?;
    let t2 = tape.add(t1, beta_term)?;
    let mut total = tape.add(t2, rho_term)?;
    if weight_decay > 0.0 {
        for name in nscm.head_weight_names() {
            let w = leaves.get(tape, &name)?;
            let ww = tape.mul(w, w)?;
            let ss = tape.sum_all(ww)?;
            let decay = tape.scale(ss, weight_decay)?;
            total = tape.add(total, decay)?;
        }
    }
    Ok(NscmLossParts {
        total,
        recon: tape.value(recon).item()?,
        l1: tape.value(l1).item()?,
        h: tape.value(h).item()?,
    })
}

/// Hard directed graph over factors with a cached topological order.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalGraph {
    d: usize,
    adj: Vec<bool>,
    topo: Vec<usize>,
}

impl CausalGraph {
    /// Thresholds a weighted adjacency at `|w| >= threshold` and verifies
    /// acyclicity.
    pub fn from_weights(a: &Tensor, threshold: f64) -> Result<Self> {
        let s = a.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(CdlError::Shape(format!("adjacency must be square, got {s:?}")));
        }
        let d = s[0];
        let adj: Vec<bool> = (0..d * d)
            .map(|k| {
                let (i, j) = (k / d, k % d);
                i != j && a.data()[k].abs() >= threshold
            })
            .collect();
        Self::from_adj(d, adj)
    }

    pub fn from_edges(d: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adj = vec![false; d * d];
        for &(i, j) in edges {
            if i >= d || j >= d || i == j {
                return Err(CdlError::Config(format!("bad edge {i}->{j} for {d} nodes")));
            }
            adj[i * d + j] = true;
        }
        Self::from_adj(d, adj)
    }

    fn from_adj(d: usize, adj: Vec<bool>) -> Result<Self> {
        // Kahn's algorithm; leftovers after the queue drains form cycles.
        let mut indeg = vec![0usize; d];
        for i in 0..d {
            for j in 0..d {
                if adj[i * d + j] {
                    indeg[j] += 1;
                }
            }
        }
        let mut queue: Vec<usize> = (0..d).filter(|&j| indeg[j] == 0).collect();
        let mut topo = Vec::with_capacity(d);
        while let Some(i) = queue.pop() {
            topo.push(i);
            for j in 0..d {
                if adj[i * d + j] {
                    indeg[j] -= 1;
                    if indeg[j] == 0 {
                        queue.push(j);
                    }
                }
            }
        }
        if topo.len() != d {
            let stuck: Vec<usize> = (0..d).filter(|&j| indeg[j] > 0).collect();
            return Err(CdlError::CyclicGraph(format!(
                "extracted graph has a cycle through nodes {stuck:?}"
            )));
        }
        // Deterministic topological order: repeatedly place the lowest-index
        // node whose parents are all placed.
        let mut order = Vec::with_capacity(d);
        let mut placed = vec![false; d];
        while order.len() < d {
            for j in 0..d {
                if placed[j] {
                    continue;
                }
                let ready = (0..d).all(|i| !adj[i * d + j] || placed[i]);
                if ready {
                    placed[j] = true;
                    order.push(j);
                }
            }
        }
        Ok(Self { d, adj, topo: order })
    }

    pub fn node_count(&self) -> usize {
        self.d
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adj[i * self.d + j]
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.d * self.d)
            .filter(|&k| self.adj[k])
            .map(|k| (k / self.d, k % self.d))
            .collect()
    }

    pub fn parents(&self, j: usize) -> Vec<usize> {
        (0..self.d).filter(|&i| self.adj[i * self.d + j]).collect()
    }

    /// Indices in an order where every parent precedes its children.
    pub fn topo_order(&self) -> &[usize] {
        &self.topo
    }

    /// Strict descendants of a node set (the set itself excluded).
    pub fn descendants(&self, roots: &[usize]) -> BTreeSet<usize> {
        let mut seen: BTreeSet<usize> = BTreeSet::new();
        let mut stack: Vec<usize> = roots.to_vec();
        while let Some(i) = stack.pop() {
            for j in 0..self.d {
                if self.adj[i * self.d + j] && seen.insert(j) {
                    stack.push(j);
                }
            }
        }
        for r in roots {
            seen.remove(r);
        }
        seen
    }

    /// 0/1 mask tensor of the edge set.
    pub fn hard_mask(&self) -> Tensor {
        Tensor::from_vec(
            vec![self.d, self.d],
            self.adj.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("mask shape")
    }

    /// Structural Hamming distance: number of ordered pairs whose edge
    /// presence differs.
    pub fn shd(&self, other: &CausalGraph) -> Result<usize> {
        if self.d != other.d {
            return Err(CdlError::Shape(format!(
                "graphs over {} vs {} nodes",
                self.d, other.d
            )));
        }
        Ok(self.adj.iter().zip(&other.adj).filter(|(a, b)| a != b).count())
    }
}

/// Thresholds the learned adjacency into a hard DAG.
pub fn extract_graph(nscm: &Nscm, store: &ParamStore, threshold: f64) -> Result<CausalGraph> {
    CausalGraph::from_weights(&nscm.adjacency(store)?, threshold)
}

/// Constraint value on the current adjacency, outside any training tape.
pub fn acyclicity_value(nscm: &Nscm, store: &ParamStore) -> Result<f64> {
    let mut tape = Tape::new();
    let mut leaves = Leaves::new(store);
    let a = nscm.masked_adjacency(&mut tape, &mut leaves)?;
    let h = tape.dag_penalty(a)?;
    tape.value(h).item()
}

/// Column means and standard deviations of `[n,d]` data (scales floored at
/// 1e-6 so degenerate columns stay usable).
pub fn column_stats(z: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let s = z.shape();
    if s.len() != 2 || s[0] < 2 {
        return Err(CdlError::Shape(format!("column stats need [n>=2,d], got {s:?}")));
    }
    let (n, d) = (s[0], s[1]);
    let mut mu = vec![0.0; d];
    for row in 0..n {
        for j in 0..d {
            mu[j] += z.data()[row * d + j];
        }
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for row in 0..n {
        for j in 0..d {
            let c = z.data()[row * d + j] - mu[j];
            var[j] += c * c;
        }
    }
    let sigma: Vec<f64> =
        var.iter().map(|v| (v / (n as f64 - 1.0)).sqrt().max(1e-6)).collect();
    Ok((mu, sigma))
}

#[derive(Debug, Clone)]
pub struct NscmFitConfig {
    pub rounds: usize,
    pub iterations_per_round: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub alpha: f64,
    pub weight_decay: f64,
    /// Initial magnitude of every off-diagonal gate. Starting near the
    /// extraction threshold lets reconstruction strengthen true edges while
    /// the L1/acyclicity terms prune the rest — much faster than growing
    /// every gate from the zero saddle.
    pub gate_init: f64,
    pub rho0: f64,
    pub beta0: f64,
    /// Use (rho/2) H^2 instead of (rho/2) |H|. The squared form's gradient
    /// vanishes at feasibility, so an escalated rho cannot keep suppressing
    /// surviving gates through a pruned edge's residual jitter.
    pub squared_penalty: bool,
    pub clip: f64,
    pub seed: u64,
}

impl Default for NscmFitConfig {
    fn default() -> Self {
        Self {
            rounds: 8,
            iterations_per_round: 300,
            batch_size: 64,
            lr: 0.02,
            alpha: 0.01,
            weight_decay: 0.01,
            gate_init: 0.3,
            rho0: 1.0,
            beta0: 0.0,
            squared_penalty: true,
            clip: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NscmFitReport {
    pub h_final: f64,
    pub recon_final: f64,
    pub h_history: Vec<f64>,
}

/// Fits the structural model to observed factors alone: standardizes, then
/// alternates minibatch Adam rounds with dual updates of the acyclicity
/// multiplier. Deterministic in `cfg.seed`.
pub fn fit_nscm(
    nscm: &Nscm,
    store: &mut ParamStore,
    z: &Tensor,
    cfg: &NscmFitConfig,
) -> Result<NscmFitReport> {
    let s = z.shape().to_vec();
    let d = nscm.config().factor_dim;
    if s.len() != 2 || s[1] != d {
        return Err(CdlError::Shape(format!("fit data must be [n,{d}], got {s:?}")));
    }
    let n = s[0];
    if n < cfg.batch_size.max(2) {
        return Err(CdlError::Config(format!(
            "{n} samples cannot fill batches of {}",
            cfg.batch_size
        )));
    }
    let (mu, sigma) = column_stats(z)?;
    nscm.set_standardization(store, &mu, &sigma)?;
    if cfg.gate_init != 0.0 {
        let mut gates = Tensor::full(&[d, d][..], cfg.gate_init);
        for i in 0..d {
            gates.data_mut()[i * d + i] = 0.0;
        }
        store.reinit(&nscm.adjacency_name(), gates)?;
    }

    let adam = AdamConfig { lr: cfg.lr, clip: Some(cfg.clip), ..AdamConfig::default() };
    let mut lag = Lagrangian::new(cfg.rho0, cfg.beta0);
    let mut h_history = Vec::with_capacity(cfg.rounds);
    let mut recon_last = f64::NAN;
    for round in 0..cfg.rounds {
        for it in 0..cfg.iterations_per_round {
            let step = (round * cfg.iterations_per_round + it) as u64;
            let mut rng = stream(cfg.seed, "nscm-fit", step);
            let mut batch = Vec::with_capacity(cfg.batch_size * d);
            for _ in 0..cfg.batch_size {
                let row = rng.gen_range(0..n);
                batch.extend_from_slice(&z.data()[row * d..(row + 1) * d]);
            }
            let zb = Tensor::from_vec(vec![cfg.batch_size, d], batch)?;
            let mut tape = Tape::new();
            let mut leaves = Leaves::new(store);
            let parts = nscm_loss(
                &mut tape,
                nscm,
                &mut leaves,
                &zb,
                cfg.alpha,
                cfg.weight_decay,
                &lag,
                cfg.squared_penalty,
            )?;
            tape.backward(parts.total)?;
            let grads = leaves.grads(&tape);
            recon_last = parts.recon;
            store.adam_step(&grads, &adam)?;
        }
        let h_now = acyclicity_value(nscm, store)?;
        lag.update(h_now);
        h_history.push(h_now);
    }
    let h_final = acyclicity_value(nscm, store)?;
    Ok(NscmFitReport { h_final, recon_final: recon_last, h_history })
}
