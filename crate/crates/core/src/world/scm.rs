//! Ground-truth structural causal models.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CdlError, Result};

/// Closed interval a factor lives in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(CdlError::Config(format!("bad range [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    /// Effectively unbounded range for test models that should never clamp.
    pub fn unbounded() -> Self {
        Self { lo: -1e300, hi: 1e300 }
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.lo, self.hi)
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Structural assignment of one node given its parent values.
#[derive(Debug, Clone)]
pub enum StructuralFn {
    /// Exogenous root: the sampled value *is* the exogenous draw.
    Root,
    /// Weighted sum of parents plus a constant.
    Linear { weights: Vec<f64>, bias: f64 },
    /// `tanh(gain * parent)` of a single parent.
    TanhGain { gain: f64 },
    /// Length of the bar shadow in the pendulum scene; parents are
    /// `[pendulum angle, light angle]`.
    ShadowLength,
    /// Midpoint of the bar shadow; parents are `[pendulum angle, light angle]`.
    ShadowPosition,
}

/// One node of a ground-truth model, in topological position.
#[derive(Debug, Clone)]
pub struct ScmNode {
    pub name: String,
    pub parents: Vec<usize>,
    pub func: StructuralFn,
    /// Standard deviation of the additive exogenous noise (effects only).
    pub noise_scale: f64,
    pub range: Range,
}

/// A sampled world state: factor values plus the exogenous draws that
/// produced them. For roots the "noise" slot holds the drawn value itself.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub factors: Vec<f64>,
    pub noise: Vec<f64>,
}

/// Intervention map from 0-based node index to clamped value.
///
/// The text form is 1-based: `"z1=0.5,z3=-0.2"`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Intervention {
    values: BTreeMap<usize, f64>,
}

impl Intervention {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn single(node: usize, value: f64) -> Self {
        let mut iv = Self::new();
        iv.set(node, value);
        iv
    }

    pub fn set(&mut self, node: usize, value: f64) {
        self.values.insert(node, value);
    }

    pub fn get(&self, node: usize) -> Option<f64> {
        self.values.get(&node).copied()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.values.iter().map(|(&k, &v)| (k, v))
    }

    pub fn nodes(&self) -> impl Iterator<Item = usize> + '_ {
        self.values.keys().copied()
    }

    /// Parses the 1-based comma-separated grammar, e.g. `"z1=0.5,z3=-0.2"`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut iv = Self::new();
        for part in text.split(',') {
            let part = part.trim();
            if part.is_empty() {
                return Err(CdlError::Config(format!("empty intervention term in '{text}'")));
            }
            let (lhs, rhs) = part.split_once('=').ok_or_else(|| {
                CdlError::Config(format!("intervention term '{part}' lacks '='"))
            })?;
            let idx: usize = lhs
                .trim()
                .strip_prefix('z')
                .and_then(|s| s.parse().ok())
                .filter(|&k| k >= 1)
                .ok_or_else(|| {
                    CdlError::Config(format!(
                        "intervention target '{lhs}' is not of the form zK (1-based)"
                    ))
                })?;
            let value: f64 = rhs.trim().parse().map_err(|_| {
                CdlError::Config(format!("intervention value '{rhs}' is not a number"))
            })?;
            if !value.is_finite() {
                return Err(CdlError::Config(format!(
                    "intervention value '{rhs}' is not finite"
                )));
            }
            if iv.values.insert(idx - 1, value).is_some() {
                return Err(CdlError::Config(format!("node z{idx} intervened twice")));
            }
        }
        Ok(iv)
    }
}

impl fmt::Display for Intervention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (k, v) in &self.values {
            if !first {
                write!(f, ",")?;
            }
            write!(f, "z{}={}", k + 1, v)?;
            first = false;
        }
        Ok(())
    }
}

/// Ground-truth SCM: nodes in topological order with explicit exogenous
/// bookkeeping so counterfactuals are exact.
#[derive(Debug, Clone)]
pub struct GroundTruthScm {
    world_id: String,
    nodes: Vec<ScmNode>,
}

/// Projection of scene point `(x, y)` onto the ground line `y = 0` from a
/// light source at `(light_x, 8)`.
fn project_to_ground(x: f64, y: f64, light_x: f64) -> f64 {
    light_x + (x - light_x) * 8.0 / (8.0 - y)
}

/// Ground projections of the pendulum pivot and ball for a pendulum angle
/// and a light at horizontal offset `light_x`.
pub(crate) fn shadow_endpoints(theta_p: f64, light_x: f64) -> (f64, f64) {
    // Pivot at (0, 2); rod of length 1 hangs to the ball.
    let ball_x = theta_p.sin();
    let ball_y = 2.0 - theta_p.cos();
    let pivot_proj = project_to_ground(0.0, 2.0, light_x);
    let ball_proj = project_to_ground(ball_x, ball_y, light_x);
    (pivot_proj, ball_proj)
}

impl GroundTruthScm {
    /// Builds a model after validating topological parent order and
    /// function/parent arity.
    pub fn new(world_id: &str, nodes: Vec<ScmNode>) -> Result<Self> {
        for (i, node) in nodes.iter().enumerate() {
            for &p in &node.parents {
                if p >= i {
                    return Err(CdlError::Config(format!(
                        "node {i} ('{}') lists parent {p}; nodes must be topologically ordered",
                        node.name
                    )));
                }
            }
            let arity_ok = match &node.func {
                StructuralFn::Root => node.parents.is_empty(),
                StructuralFn::Linear { weights, .. } => weights.len() == node.parents.len(),
                StructuralFn::TanhGain { .. } => node.parents.len() == 1,
                StructuralFn::ShadowLength | StructuralFn::ShadowPosition => {
                    node.parents.len() == 2
                }
            };
            if !arity_ok {
                return Err(CdlError::Config(format!(
                    "node {i} ('{}') has {} parents, incompatible with its function",
                    node.name,
                    node.parents.len()
                )));
            }
            if node.noise_scale < 0.0 {
                return Err(CdlError::Config(format!(
                    "node {i} ('{}') has negative noise scale",
                    node.name
                )));
            }
        }
        Ok(Self { world_id: world_id.to_string(), nodes })
    }

    pub fn world_id(&self) -> &str {
        &self.world_id
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[ScmNode] {
        &self.nodes
    }

    pub fn ranges(&self) -> Vec<Range> {
        self.nodes.iter().map(|n| n.range).collect()
    }

    /// Indices of exogenous root nodes.
    pub fn root_nodes(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.func, StructuralFn::Root))
            .map(|(i, _)| i)
            .collect()
    }

    /// Structural function of node `i` on the given factor vector (no noise).
    fn structural(&self, i: usize, factors: &[f64]) -> f64 {
        let node = &self.nodes[i];
        match &node.func {
            StructuralFn::Root => 0.0,
            StructuralFn::Linear { weights, bias } => {
                let mut acc = *bias;
                for (&p, &w) in node.parents.iter().zip(weights) {
                    acc += w * factors[p];
                }
                acc
            }
            StructuralFn::TanhGain { gain } => (gain * factors[node.parents[0]]).tanh(),
            StructuralFn::ShadowLength => {
                let theta_p = factors[node.parents[0]];
                let theta_l = factors[node.parents[1]];
                let (pivot, ball) = shadow_endpoints(theta_p, 8.0 * theta_l.tan());
                (ball - pivot).abs()
            }
            StructuralFn::ShadowPosition => {
                let theta_p = factors[node.parents[0]];
                let theta_l = factors[node.parents[1]];
                let (pivot, ball) = shadow_endpoints(theta_p, 8.0 * theta_l.tan());
                (ball + pivot) / 2.0
            }
        }
    }

    /// Draws one sample; records the exogenous value of every node.
    pub fn sample(&self, rng: &mut impl Rng) -> Result<SampleRecord> {
        let mut factors = vec![0.0; self.nodes.len()];
        let mut noise = vec![0.0; self.nodes.len()];
        for i in 0..self.nodes.len() {
            let node = &self.nodes[i];
            match node.func {
                StructuralFn::Root => {
                    let v = rng.gen_range(node.range.lo..node.range.hi);
                    factors[i] = v;
                    noise[i] = v;
                }
                _ => {
                    let xi = if node.noise_scale > 0.0 {
                        let normal = Normal::new(0.0, node.noise_scale).map_err(|e| {
                            CdlError::Config(format!("noise scale for node {i}: {e}"))
                        })?;
                        normal.sample(rng)
                    } else {
                        0.0
                    };
                    noise[i] = xi;
                    factors[i] = node.range.clamp(self.structural(i, &factors) + xi);
                }
            }
        }
        Ok(SampleRecord { factors, noise })
    }

    /// Exact counterfactual by abduction-action-prediction.
    ///
    /// Exogenous draws are reused from the factual record (abduction),
    /// intervened nodes are clamped to their requested values (action), and
    /// every other node is recomputed in topological order (prediction).
    /// Recomputation repeats the generation arithmetic exactly, so nodes with
    /// unchanged parents keep bit-identical values.
    pub fn counterfactual(
        &self,
        record: &SampleRecord,
        intervention: &Intervention,
    ) -> Result<SampleRecord> {
        if record.factors.len() != self.nodes.len() || record.noise.len() != self.nodes.len()
        {
            return Err(CdlError::Shape(format!(
                "record has {} factors for a {}-node model",
                record.factors.len(),
                self.nodes.len()
            )));
        }
        for node in intervention.nodes() {
            if node >= self.nodes.len() {
                return Err(CdlError::Config(format!(
                    "intervention on z{} but the model has {} nodes",
                    node + 1,
                    self.nodes.len()
                )));
            }
        }
        let mut factors = vec![0.0; self.nodes.len()];
        for i in 0..self.nodes.len() {
            if let Some(v) = intervention.get(i) {
                factors[i] = v;
                continue;
            }
            factors[i] = match self.nodes[i].func {
                StructuralFn::Root => record.noise[i],
                _ => self.nodes[i]
                    .range
                    .clamp(self.structural(i, &factors) + record.noise[i]),
            };
        }
        Ok(SampleRecord { factors, noise: record.noise.clone() })
    }
}

/// The pendulum scene: two exogenous angles cause the length and position of
/// the bar shadow cast on the ground.
///
/// Factors: `z1` pendulum angle (rad), `z2` light angle (rad), `z3` shadow
/// length, `z4` shadow midpoint. The light hangs at height 8 with horizontal
/// offset `8*tan(z2)`; the pivot sits at `(0, 2)` with a unit rod.
pub fn pendulum_world(noise_scale: f64) -> Result<GroundTruthScm> {
    use std::f64::consts::PI;
    GroundTruthScm::new(
        "pendulum",
        vec![
            ScmNode {
                name: "pend_angle".into(),
                parents: vec![],
                func: StructuralFn::Root,
                noise_scale: 0.0,
                range: Range::new(-PI / 4.0, PI / 4.0)?,
            },
            ScmNode {
                name: "light_angle".into(),
                parents: vec![],
                func: StructuralFn::Root,
                noise_scale: 0.0,
                range: Range::new(-PI / 3.0, PI / 3.0)?,
            },
            ScmNode {
                name: "shadow_len".into(),
                parents: vec![0, 1],
                func: StructuralFn::ShadowLength,
                noise_scale,
                range: Range::new(0.0, 3.6)?,
            },
            ScmNode {
                name: "shadow_pos".into(),
                parents: vec![0, 1],
                func: StructuralFn::ShadowPosition,
                noise_scale,
                range: Range::new(-4.25, 4.25)?,
            },
        ],
    )
}

/// Minimal two-factor world: the height of the first bar drives the height
/// of the second through a saturating response.
pub fn toy_bars_world(noise_scale: f64) -> Result<GroundTruthScm> {
    GroundTruthScm::new(
        "toy-bars",
        vec![
            ScmNode {
                name: "bar1".into(),
                parents: vec![],
                func: StructuralFn::Root,
                noise_scale: 0.0,
                range: Range::new(-1.0, 1.0)?,
            },
            ScmNode {
                name: "bar2".into(),
                parents: vec![0],
                func: StructuralFn::TanhGain { gain: 2.0 },
                noise_scale,
                range: Range::new(-1.15, 1.15)?,
            },
        ],
    )
}
