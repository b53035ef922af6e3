//! Acceptance scoreboard: eleven numbered end-to-end checks covering the
//! gradient engine, the acyclicity penalty, the samplers, the guidance
//! schedule, the structural model, structure recovery, the trained pipeline,
//! the metrics, and determinism. Each test prints one `cNN <name>: PASS` line
//! with its headline numbers. c07-c09 share one desk-scale trained bundle
//! built on first use, so whichever of them runs first pays the training cost.

use std::collections::HashSet;
use std::sync::OnceLock;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use cdl_core::config::TrainConfig;
use cdl_core::diffusion::{ddim_sample, ddim_transfer, EpsNet, EpsNetConfig, NoiseSchedule};
use cdl_core::heads::{
    fit_nscm, CausalGraph, Nscm, NscmConfig, NscmFitConfig, Projector, ProjectorConfig,
};
use cdl_core::metrics::{
    acm, evaluate_counterfactuals, ffd, guided_chain_generator, psnr, sequential_eval,
    train_attribute_predictor, AttributePredictor, PredictorTrainConfig,
};
use cdl_core::rng::stream;
use cdl_core::sampler::{
    factor_counterfactual, guided_ddim_sample, lambda_schedule, GuidanceConfig, GuidanceMode,
    GuidedModels, StartMode,
};
use cdl_core::tensor::{Leaves, ParamStore, Tape, Tensor, Var};
use cdl_core::trainer::{train, TrainState};
use cdl_core::world::{
    generate_dataset, pendulum_world, GroundTruthScm, Intervention, SampleRecord,
};

fn el(t0: Instant) -> f64 {
    t0.elapsed().as_secs_f64()
}

fn rand_tensor(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Pushes every entry at least `margin` away from zero, keeping its sign.
fn away_from_zero(x: &Tensor, margin: f64) -> Tensor {
    let data = x
        .data()
        .iter()
        .map(|&v| if v >= 0.0 { v + margin } else { v - margin })
        .collect();
    Tensor::from_vec(x.shape().to_vec(), data).unwrap()
}

// --- c01: reverse-mode gradients vs central finite differences ------------

/// Collapses any tensor to a scalar through a fixed random weighting so that
/// every output coordinate influences the root with a distinct coefficient.
fn wsum(tape: &mut Tape, v: Var, salt: u64) -> Var {
    let shape = tape.shape(v).to_vec();
    let w = rand_tensor(shape, -1.0, 1.0, &mut stream(9_000 + salt, "wsum", 0));
    let wv = tape.constant(w).unwrap();
    let p = tape.mul(v, wv).unwrap();
    tape.sum_all(p).unwrap()
}

struct GradCheck {
    cases: usize,
    max_rel: f64,
}

impl GradCheck {
    fn new() -> Self {
        Self { cases: 0, max_rel: 0.0 }
    }

    /// One oracle case: `build` maps the input variable to a scalar root on a
    /// fresh tape; reverse-mode is compared against a central difference with
    /// step 1e-5 at relative tolerance 1e-4.
    fn case(&mut self, name: &str, x: &Tensor, build: &dyn Fn(&mut Tape, Var) -> Var) {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone()).unwrap();
        let root = build(&mut tape, xv);
        tape.backward(root).unwrap();
        let analytic = tape.grad(xv).expect("input must receive a gradient").data().to_vec();

        let eval = |t: &Tensor| -> f64 {
            let mut tape = Tape::new();
            let xv = tape.input(t.clone()).unwrap();
            let root = build(&mut tape, xv);
            tape.value(root).data()[0]
        };
        let h = 1e-5;
        for i in 0..analytic.len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            self.max_rel = self.max_rel.max(rel);
            assert!(
                rel < 1e-4,
                "{name}: component {i} analytic {a} vs numeric {numeric} (rel {rel:.2e})"
            );
        }
        self.cases += 1;
    }
}

/// Full image -> factors -> structural-residual composition, differentiated
/// with respect to the image.
fn composition_case(gc: &mut GradCheck, salt: u64) {
    let pcfg = ProjectorConfig {
        image_size: 8,
        base_channels: 4,
        channel_mults: vec![1, 2],
        time_embed_dim: 8,
        factor_dim: 3,
    };
    let proj = Projector::new(pcfg, "p").unwrap();
    let nscm = Nscm::new(NscmConfig { factor_dim: 3, hidden: 4 }, "s").unwrap();
    let mut store = ParamStore::new(0.999).unwrap();
    proj.init(&mut store, &mut stream(70 + salt, "init", 0)).unwrap();
    nscm.init(&mut store, &mut stream(71 + salt, "init", 0)).unwrap();
    let mask = CausalGraph::from_edges(3, &[(0, 1), (1, 2)]).unwrap().hard_mask();
    let x = rand_tensor(vec![2, 1, 8, 8], 0.0, 1.0, &mut stream(72 + salt, "x", 0));
    let ts = [3usize, 9];
    gc.case("projector+structural composition", &x, &|tape, xv| {
        let mut leaves = Leaves::new(&store);
        let (_, f) = proj.forward(tape, &mut leaves, xv, &ts).unwrap();
        let s = nscm.forward_masked(tape, &mut leaves, f, Some(&mask)).unwrap();
        let both = tape.concat_cols(f, s).unwrap();
        wsum(tape, both, 500 + salt)
    });
}

#[test]
fn c01_gradients_match_finite_differences() {
    let t0 = Instant::now();
    let mut gc = GradCheck::new();
    for case in 0..2u64 {
        let mut rng = stream(1_000 + case, "c01", 0);
        let x25 = rand_tensor(vec![2, 5], -1.0, 1.0, &mut rng);
        let c25 = rand_tensor(vec![2, 5], -1.0, 1.0, &mut rng);
        let xpos = rand_tensor(vec![2, 5], 0.4, 1.6, &mut rng);
        let xoff = away_from_zero(&x25, 0.3);
        let r5 = rand_tensor(vec![5], -1.0, 1.0, &mut rng);

        gc.case("silu", &x25, &|t, v| {
            let y = t.silu(v).unwrap();
            wsum(t, y, case)
        });
        gc.case("tanh", &x25, &|t, v| {
            let y = t.tanh(v).unwrap();
            wsum(t, y, case)
        });
        gc.case("exp", &x25, &|t, v| {
            let y = t.exp(v).unwrap();
            wsum(t, y, case)
        });
        gc.case("ln", &xpos, &|t, v| {
            let y = t.ln(v).unwrap();
            wsum(t, y, case)
        });
        gc.case("sqrt", &xpos, &|t, v| {
            let y = t.sqrt(v).unwrap();
            wsum(t, y, case)
        });
        gc.case("abs", &xoff, &|t, v| {
            let y = t.abs(v).unwrap();
            wsum(t, y, case)
        });
        gc.case("scale", &x25, &|t, v| {
            let y = t.scale(v, -1.7).unwrap();
            wsum(t, y, case)
        });
        gc.case("sum_all", &x25, &|t, v| t.sum_all(v).unwrap());
        gc.case("mean_all", &x25, &|t, v| t.mean_all(v).unwrap());

        gc.case("add lhs", &x25, &|t, v| {
            let c = t.constant(c25.clone()).unwrap();
            let y = t.add(v, c).unwrap();
            wsum(t, y, case)
        });
        gc.case("add rhs", &x25, &|t, v| {
            let c = t.constant(c25.clone()).unwrap();
            let y = t.add(c, v).unwrap();
            wsum(t, y, case)
        });
        gc.case("sub lhs", &x25, &|t, v| {
            let c = t.constant(c25.clone()).unwrap();
            let y = t.sub(v, c).unwrap();
            wsum(t, y, case)
        });
        gc.case("sub rhs", &x25, &|t, v| {
            let c = t.constant(c25.clone()).unwrap();
            let y = t.sub(c, v).unwrap();
            wsum(t, y, case)
        });
        gc.case("mul lhs", &x25, &|t, v| {
            let c = t.constant(c25.clone()).unwrap();
            let y = t.mul(v, c).unwrap();
            wsum(t, y, case)
        });
        gc.case("mul rhs", &x25, &|t, v| {
            let c = t.constant(c25.clone()).unwrap();
            let y = t.mul(c, v).unwrap();
            wsum(t, y, case)
        });

        gc.case("add_row matrix", &x25, &|t, v| {
            let r = t.constant(r5.clone()).unwrap();
            let y = t.add_row(v, r).unwrap();
            wsum(t, y, case)
        });
        gc.case("add_row row", &r5, &|t, v| {
            let a = t.constant(x25.clone()).unwrap();
            let y = t.add_row(a, v).unwrap();
            wsum(t, y, case)
        });
        gc.case("mul_row matrix", &x25, &|t, v| {
            let r = t.constant(r5.clone()).unwrap();
            let y = t.mul_row(v, r).unwrap();
            wsum(t, y, case)
        });
        gc.case("mul_row row", &r5, &|t, v| {
            let a = t.constant(x25.clone()).unwrap();
            let y = t.mul_row(a, v).unwrap();
            wsum(t, y, case)
        });
        gc.case("row_sum", &x25, &|t, v| {
            let y = t.row_sum(v).unwrap();
            wsum(t, y, case)
        });
        gc.case("row_normalize", &x25, &|t, v| {
            let y = t.row_normalize(v).unwrap();
            wsum(t, y, case)
        });
        gc.case("slice_col", &x25, &|t, v| {
            let y = t.slice_col(v, 3).unwrap();
            wsum(t, y, case)
        });

        let x23 = rand_tensor(vec![2, 3], -1.0, 1.0, &mut rng);
        let c24 = rand_tensor(vec![2, 4], -1.0, 1.0, &mut rng);
        gc.case("concat_cols lhs", &x23, &|t, v| {
            let c = t.constant(c24.clone()).unwrap();
            let y = t.concat_cols(v, c).unwrap();
            wsum(t, y, case)
        });
        gc.case("concat_cols rhs", &x23, &|t, v| {
            let c = t.constant(c24.clone()).unwrap();
            let y = t.concat_cols(c, v).unwrap();
            wsum(t, y, case)
        });
        let x24 = rand_tensor(vec![2, 4], -1.0, 1.0, &mut rng);
        let c34 = rand_tensor(vec![3, 4], -1.0, 1.0, &mut rng);
        gc.case("concat_rows lhs", &x24, &|t, v| {
            let c = t.constant(c34.clone()).unwrap();
            let y = t.concat_rows(v, c).unwrap();
            wsum(t, y, case)
        });
        gc.case("concat_rows rhs", &x24, &|t, v| {
            let c = t.constant(c34.clone()).unwrap();
            let y = t.concat_rows(c, v).unwrap();
            wsum(t, y, case)
        });

        let x34 = rand_tensor(vec![3, 4], -1.0, 1.0, &mut rng);
        let c42 = rand_tensor(vec![4, 2], -1.0, 1.0, &mut rng);
        gc.case("matmul lhs", &x34, &|t, v| {
            let c = t.constant(c42.clone()).unwrap();
            let y = t.matmul(v, c).unwrap();
            wsum(t, y, case)
        });
        gc.case("matmul rhs", &c42, &|t, v| {
            let a = t.constant(x34.clone()).unwrap();
            let y = t.matmul(a, v).unwrap();
            wsum(t, y, case)
        });
        gc.case("transpose", &x34, &|t, v| {
            let y = t.transpose(v).unwrap();
            wsum(t, y, case)
        });

        let ximg = rand_tensor(vec![1, 2, 4, 4], -1.0, 1.0, &mut rng);
        let w = rand_tensor(vec![3, 2, 3, 3], -0.5, 0.5, &mut rng);
        let b = rand_tensor(vec![3], -0.5, 0.5, &mut rng);
        gc.case("conv2d input", &ximg, &|t, v| {
            let wc = t.constant(w.clone()).unwrap();
            let bc = t.constant(b.clone()).unwrap();
            let y = t.conv2d(v, wc, bc, 1).unwrap();
            wsum(t, y, case)
        });
        gc.case("conv2d weights", &w, &|t, v| {
            let xc = t.constant(ximg.clone()).unwrap();
            let bc = t.constant(b.clone()).unwrap();
            let y = t.conv2d(xc, v, bc, 1).unwrap();
            wsum(t, y, case)
        });
        gc.case("conv2d bias", &b, &|t, v| {
            let xc = t.constant(ximg.clone()).unwrap();
            let wc = t.constant(w.clone()).unwrap();
            let y = t.conv2d(xc, wc, v, 1).unwrap();
            wsum(t, y, case)
        });
        gc.case("avg_pool2", &ximg, &|t, v| {
            let y = t.avg_pool2(v).unwrap();
            wsum(t, y, case)
        });
        let xsmall = rand_tensor(vec![1, 2, 3, 3], -1.0, 1.0, &mut rng);
        gc.case("upsample2", &xsmall, &|t, v| {
            let y = t.upsample2(v).unwrap();
            wsum(t, y, case)
        });
        gc.case("global_mean_pool", &ximg, &|t, v| {
            let y = t.global_mean_pool(v).unwrap();
            wsum(t, y, case)
        });
        let c133 = rand_tensor(vec![1, 3, 3, 3], -1.0, 1.0, &mut rng);
        gc.case("concat_chan lhs", &xsmall, &|t, v| {
            let c = t.constant(c133.clone()).unwrap();
            let y = t.concat_chan(v, c).unwrap();
            wsum(t, y, case)
        });
        gc.case("concat_chan rhs", &xsmall, &|t, v| {
            let c = t.constant(c133.clone()).unwrap();
            let y = t.concat_chan(c, v).unwrap();
            wsum(t, y, case)
        });
        let cbias = rand_tensor(vec![1, 2], -1.0, 1.0, &mut rng);
        gc.case("add_chan image", &ximg, &|t, v| {
            let c = t.constant(cbias.clone()).unwrap();
            let y = t.add_chan(v, c).unwrap();
            wsum(t, y, case)
        });
        gc.case("add_chan bias", &cbias, &|t, v| {
            let a = t.constant(ximg.clone()).unwrap();
            let y = t.add_chan(a, v).unwrap();
            wsum(t, y, case)
        });

        let adj = rand_tensor(vec![4, 4], -0.7, 0.7, &mut rng);
        gc.case("dag_penalty", &adj, &|t, v| t.dag_penalty(v).unwrap());
    }

    composition_case(&mut gc, 0);
    composition_case(&mut gc, 1);

    assert!(gc.cases >= 50, "only {} oracle cases ran", gc.cases);
    println!(
        "c01 gradient oracle: PASS ({} cases, max rel err {:.2e}, {:.1}s)",
        gc.cases,
        gc.max_rel,
        el(t0)
    );
}

// --- c02: acyclicity penalty vs brute-force cycle search -------------------

fn penalty_of(a: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let v = tape.input(a.clone()).unwrap();
    let h = tape.dag_penalty(v).unwrap();
    tape.value(h).data()[0]
}

fn has_cycle(adj: &[f64], d: usize) -> bool {
    fn visit(i: usize, adj: &[f64], d: usize, color: &mut [u8]) -> bool {
        color[i] = 1;
        for j in 0..d {
            if adj[i * d + j] != 0.0 {
                if color[j] == 1 {
                    return true;
                }
                if color[j] == 0 && visit(j, adj, d, color) {
                    return true;
                }
            }
        }
        color[i] = 2;
        false
    }
    let mut color = vec![0u8; d];
    (0..d).any(|i| color[i] == 0 && visit(i, adj, d, &mut color))
}

#[test]
fn c02_acyclicity_penalty_matches_cycle_search() {
    let t0 = Instant::now();
    let mut rng = stream(2, "c02", 0);
    let vals = [-1.0, -0.5, 0.5, 1.0];
    let (mut acyclic, mut cyclic) = (0usize, 0usize);
    for _ in 0..200 {
        let p_zero = rng.gen_range(0.5..0.95);
        let data: Vec<f64> = (0..16)
            .map(|_| if rng.gen::<f64>() < p_zero { 0.0 } else { vals[rng.gen_range(0..4)] })
            .collect();
        let a = Tensor::from_vec(vec![4, 4], data.clone()).unwrap();
        let penalty_zero = penalty_of(&a).abs() <= 1e-9;
        let acyc = !has_cycle(&data, 4);
        assert_eq!(
            penalty_zero, acyc,
            "penalty {} disagrees with cycle search on {data:?}",
            penalty_of(&a)
        );
        if acyc {
            acyclic += 1;
        } else {
            cyclic += 1;
        }
    }
    assert!(acyclic >= 20 && cyclic >= 20, "lopsided draw: {acyclic} acyclic / {cyclic} cyclic");
    println!(
        "c02 acyclicity penalty: PASS (200 matrices, {acyclic} acyclic / {cyclic} cyclic, {:.2}s)",
        el(t0)
    );
}

// --- c03: sampler identities -----------------------------------------------

#[test]
fn c03_sampler_identities() {
    let t0 = Instant::now();
    let sched = NoiseSchedule::default_linear(10).unwrap();
    let mut rng = stream(3, "c03", 0);

    // (a) With the exact noise plugged in, the deterministic transfer must
    // land on the closed-form corruption of x0 at the destination timestep.
    let x0 = rand_tensor(vec![1, 1, 8, 8], 0.0, 1.0, &mut rng);
    let eps = rand_tensor(vec![1, 1, 8, 8], -1.0, 1.0, &mut rng);
    let corrupt = |t: usize| -> Tensor {
        let ab = sched.alpha_bar(t);
        x0.scale(ab.sqrt()).add_scaled(&eps, (1.0 - ab).sqrt()).unwrap()
    };
    let mut max_err = 0.0f64;
    for t_from in 0..=10 {
        for t_to in 0..=10 {
            if t_from == t_to {
                continue;
            }
            let got = ddim_transfer(&sched, &corrupt(t_from), &eps, t_from, t_to).unwrap();
            max_err = max_err.max(got.max_abs_diff(&corrupt(t_to)).unwrap());
        }
    }
    assert!(max_err < 1e-12, "transfer identity err {max_err}");

    // Shared tiny models for (b) and (c).
    let eps_net = EpsNet::new(
        EpsNetConfig { image_size: 8, base_channels: 4, channel_mults: vec![1, 2], time_embed_dim: 8 },
        "e",
    )
    .unwrap();
    let proj = Projector::new(
        ProjectorConfig {
            image_size: 8,
            base_channels: 4,
            channel_mults: vec![1, 2],
            time_embed_dim: 8,
            factor_dim: 3,
        },
        "p",
    )
    .unwrap();
    let nscm = Nscm::new(NscmConfig { factor_dim: 3, hidden: 4 }, "s").unwrap();
    let mut store = ParamStore::new(0.999).unwrap();
    eps_net.init(&mut store, &mut stream(31, "init", 0)).unwrap();
    proj.init(&mut store, &mut stream(32, "init", 0)).unwrap();
    nscm.init(&mut store, &mut stream(33, "init", 0)).unwrap();
    let graph = CausalGraph::from_edges(3, &[(0, 1)]).unwrap();
    let x_init = rand_tensor(vec![1, 1, 8, 8], -1.0, 1.0, &mut rng);
    let z_target = Tensor::zeros(vec![1, 3]);
    let plain = ddim_sample(&eps_net, &store, &sched, 10, x_init.clone()).unwrap();

    // (b) Guidance off (lambda = 0) must walk the identical trajectory.
    {
        let m = GuidedModels {
            eps: &eps_net,
            proj: &proj,
            nscm: &nscm,
            store: &store,
            schedule: &sched,
            graph: &graph,
        };
        let off = GuidanceConfig {
            mode: GuidanceMode::Fixed,
            lambda_fixed: 0.0,
            ..GuidanceConfig::default()
        };
        let (img, _) = guided_ddim_sample(&m, x_init.clone(), &z_target, &off, 10, false).unwrap();
        assert_eq!(img.data(), plain.data(), "lambda = 0 must match the unguided sampler bit-for-bit");
    }

    // (c) A projector with zeroed head and zero target yields a residual of
    // exactly zero, so even a large lambda must leave the trajectory alone.
    for name in ["p.head.w", "p.head.b"] {
        let shape = store.get(name).unwrap().shape().to_vec();
        store.reinit(name, Tensor::zeros(shape)).unwrap();
    }
    let m = GuidedModels {
        eps: &eps_net,
        proj: &proj,
        nscm: &nscm,
        store: &store,
        schedule: &sched,
        graph: &graph,
    };
    let strong = GuidanceConfig {
        mode: GuidanceMode::Fixed,
        lambda_fixed: 0.7,
        ..GuidanceConfig::default()
    };
    let (img, _) = guided_ddim_sample(&m, x_init.clone(), &z_target, &strong, 10, false).unwrap();
    assert_eq!(img.data(), plain.data(), "zero residual must leave the trajectory untouched");

    println!(
        "c03 sampler identities: PASS (transfer err {max_err:.1e}; bit-equal at lambda=0 and at zero residual; {:.2}s)",
        el(t0)
    );
}

// --- c04: guidance scale hand value and monotonicity ------------------------

#[test]
fn c04_lambda_hand_value_and_monotonicity() {
    let t0 = Instant::now();
    let cfg = GuidanceConfig { gamma: 1.0, delta: 1.0, ..GuidanceConfig::default() };

    // One-step schedule with beta = 0.25 gives alpha_bar(1) = 0.75, so
    // lambda = 1 * sqrt(0.25) * 1 / 2 = 0.25.
    let sched = NoiseSchedule::linear(1, 0.25, 0.25).unwrap();
    let lambda = lambda_schedule(&cfg, &sched, 1, 2.0);
    assert!((lambda - 0.25).abs() < 1e-12, "hand value: got {lambda}");

    let big = NoiseSchedule::default_linear(1000).unwrap();
    let at_zero = lambda_schedule(&cfg, &big, 0, 2.0);
    assert_eq!(at_zero, 0.0, "fully denoised step must get zero guidance");
    let mut prev = at_zero;
    for t in 1..=1000 {
        let l = lambda_schedule(&cfg, &big, t, 2.0);
        assert!(l > prev, "schedule not strictly increasing at t = {t}: {l} <= {prev}");
        prev = l;
    }

    println!(
        "c04 guidance scale: PASS (hand value 0.25, zero at t=0, strictly increasing over 1000 steps, {:.2}s)",
        el(t0)
    );
}

// --- c05: counterfactuals on a known linear model ---------------------------

/// Reference linear model with explicit abduction/intervention/recomputation,
/// kept deliberately independent of the library implementation.
struct LinearScm {
    d: usize,
    /// `coef[p * d + c]` = weight of parent `p` into child `c`.
    coef: Vec<f64>,
    order: Vec<usize>,
}

impl LinearScm {
    fn mean(&self, z: &[f64], i: usize) -> f64 {
        (0..self.d).map(|p| self.coef[p * self.d + i] * z[p]).sum()
    }

    fn counterfactual(&self, z: &[f64], node: usize, value: f64) -> Vec<f64> {
        let residual: Vec<f64> = (0..self.d).map(|i| z[i] - self.mean(z, i)).collect();
        let mut desc = vec![false; self.d];
        desc[node] = true;
        for &i in &self.order {
            if !desc[i] && (0..self.d).any(|p| desc[p] && self.coef[p * self.d + i] != 0.0) {
                desc[i] = true;
            }
        }
        let mut out = z.to_vec();
        out[node] = value;
        for &i in &self.order {
            if i != node && desc[i] {
                out[i] = self.mean(&out, i) + residual[i];
            }
        }
        out
    }
}

#[test]
fn c05_linear_counterfactuals_match_reference() {
    let t0 = Instant::now();
    let d = 4;
    let mut rng = stream(5, "c05", 0);
    let mut max_err = 0.0f64;
    for k in 0..100u64 {
        let mut order: Vec<usize> = (0..d).collect();
        order.shuffle(&mut rng);
        let mut coef = vec![0.0; d * d];
        let mut edges = Vec::new();
        for a in 0..d {
            for b in (a + 1)..d {
                if rng.gen::<f64>() < 0.6 {
                    let (p, c) = (order[a], order[b]);
                    let mag = rng.gen_range(0.3..1.2);
                    let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                    coef[p * d + c] = sign * mag;
                    edges.push((p, c));
                }
            }
        }
        let scm = LinearScm { d, coef: coef.clone(), order: order.clone() };

        let mut z = vec![0.0; d];
        for &i in &order {
            z[i] = scm.mean(&z, i) + rng.gen_range(-0.5..0.5);
        }

        // Mirror the model exactly: unit gates on the true edges, the true
        // coefficients as linear head weights, identity standardization.
        let nscm = Nscm::new(NscmConfig { factor_dim: d, hidden: 0 }, "s").unwrap();
        let mut store = ParamStore::new(0.999).unwrap();
        nscm.init(&mut store, &mut stream(50, "init", k)).unwrap();
        let mut gates = vec![0.0; d * d];
        for &(p, c) in &edges {
            gates[p * d + c] = 1.0;
        }
        store.reinit("s.A", Tensor::from_vec(vec![d, d], gates).unwrap()).unwrap();
        for c in 0..d {
            let w: Vec<f64> = (0..d).map(|p| coef[p * d + c]).collect();
            store
                .reinit(&format!("s.n{c}.l1.w"), Tensor::from_vec(vec![d, 1], w).unwrap())
                .unwrap();
            store.reinit(&format!("s.n{c}.l1.b"), Tensor::zeros(vec![1])).unwrap();
        }
        nscm.set_standardization(&mut store, &vec![0.0; d], &vec![1.0; d]).unwrap();
        let graph = CausalGraph::from_edges(d, &edges).unwrap();

        let node = rng.gen_range(0..d);
        let value = rng.gen_range(-1.0..1.0);
        let got =
            factor_counterfactual(&nscm, &store, &graph, &z, &Intervention::single(node, value))
                .unwrap();
        let want = scm.counterfactual(&z, node, value);
        for i in 0..d {
            max_err = max_err.max((got[i] - want[i]).abs());
        }
    }
    assert!(max_err < 1e-9, "max abs err {max_err}");
    println!(
        "c05 linear counterfactuals: PASS (100 models, max abs err {max_err:.2e}, {:.2}s)",
        el(t0)
    );
}

// --- c06: structure recovery on pendulum factors ----------------------------

/// Structural hamming distance over ordered pairs, counting a reversed edge
/// as one mistake.
fn shd(truth: &HashSet<(usize, usize)>, got: &HashSet<(usize, usize)>, d: usize) -> usize {
    let mut dist = 0;
    for i in 0..d {
        for j in (i + 1)..d {
            let t = (truth.contains(&(i, j)), truth.contains(&(j, i)));
            let p = (got.contains(&(i, j)), got.contains(&(j, i)));
            if t == p {
                continue;
            }
            let mism = (t.0 != p.0) as usize + (t.1 != p.1) as usize;
            let both_present = (t.0 || t.1) && (p.0 || p.1);
            dist += if mism == 2 && both_present { 1 } else { mism };
        }
    }
    dist
}

#[test]
fn c06_structure_recovery_on_pendulum_factors() {
    let t0 = Instant::now();
    let world = pendulum_world(0.05).unwrap();
    let d = 4;
    let truth: HashSet<(usize, usize)> = [(0, 2), (0, 3), (1, 2), (1, 3)].into_iter().collect();
    for seed in [11u64, 12, 13] {
        let ts = Instant::now();
        let mut rng = stream(seed, "c06", 0);
        let n = 10_000;
        let mut flat = Vec::with_capacity(n * d);
        for _ in 0..n {
            flat.extend_from_slice(&world.sample(&mut rng).unwrap().factors);
        }
        let z = Tensor::from_vec(vec![n, d], flat).unwrap();

        let nscm = Nscm::new(NscmConfig { factor_dim: d, hidden: 16 }, "s").unwrap();
        let mut store = ParamStore::new(0.999).unwrap();
        nscm.init(&mut store, &mut stream(seed, "init", 0)).unwrap();
        let cfg = NscmFitConfig { seed, ..NscmFitConfig::default() };
        let report = fit_nscm(&nscm, &mut store, &z, &cfg).unwrap();

        let a = nscm.adjacency(&store).unwrap();
        let mut got = HashSet::new();
        for i in 0..d {
            for j in 0..d {
                if i != j && a.data()[i * d + j].abs() >= 0.3 {
                    got.insert((i, j));
                }
            }
        }
        let mut shown: Vec<_> = got.iter().copied().collect();
        shown.sort_unstable();
        let dist = shd(&truth, &got, d);
        println!(
            "  c06 seed {seed}: edges {shown:?}, shd {dist}, H {:.2e}, {:.0}s",
            report.h_final,
            el(ts)
        );
        assert!(dist <= 1, "seed {seed}: recovered {shown:?} (shd {dist})");
    }
    println!("c06 structure recovery: PASS (3/3 seeds within shd 1, {:.0}s total)", el(t0));
}

// --- shared trained bundle for c07-c09 --------------------------------------

struct Trained {
    state: TrainState,
    store: ParamStore,
    graph: CausalGraph,
    world: GroundTruthScm,
    predictor: AttributePredictor,
    starts: Vec<(Vec<f64>, SampleRecord)>,
    ivs: Vec<Intervention>,
}

static TRAINED: OnceLock<Trained> = OnceLock::new();

/// Desk-scale pendulum pipeline: dataset, joint training, held-out attribute
/// predictor, and a fixed evaluation panel of 64 (start, intervention) pairs.
fn trained() -> &'static Trained {
    TRAINED.get_or_init(|| {
        let t0 = Instant::now();
        let dir = tempfile::tempdir().expect("tempdir");
        let data = generate_dataset(dir.path(), "pendulum", 8192, 32, 0.05, 41).expect("dataset");
        let cfg = TrainConfig::pendulum();
        eprintln!(
            "[acceptance] training {} iterations at {}px (long pole of the suite)...",
            cfg.iterations, cfg.image_size
        );
        let state = train(&cfg, &data).expect("training");
        eprintln!(
            "[acceptance] trained in {:.1} min, residual scale {:?}",
            el(t0) / 60.0,
            state.delta
        );
        let store = state.inference_store().expect("inference store");
        let graph = state.graph(0.3).expect("trained adjacency thresholds to a DAG");
        eprintln!("[acceptance] recovered graph edges: {:?}", graph.edges());
        let world = pendulum_world(0.05).unwrap();

        let factors: Vec<Vec<f64>> = data.records.iter().map(|r| r.factors.clone()).collect();
        let pcfg = PredictorTrainConfig { seed: 9, ..PredictorTrainConfig::default() };
        let (predictor, report) =
            train_attribute_predictor(32, &data.images, &factors, &pcfg).expect("predictor");
        eprintln!(
            "[acceptance] predictor val rmse {:.4}, val acm {:.4}",
            report.val_rmse, report.val_acm
        );

        let mut idx: Vec<usize> = (0..data.len()).collect();
        idx.shuffle(&mut stream(17, "eval-pairs", 0));
        let ranges = world.ranges();
        let mut rng = stream(17, "eval-iv", 0);
        let mut starts = Vec::new();
        let mut ivs = Vec::new();
        for &i in idx.iter().take(64) {
            starts.push((data.images[i].clone(), data.records[i].clone()));
            let node = rng.gen_range(0..ranges.len());
            let value = rng.gen_range(ranges[node].lo..ranges[node].hi);
            ivs.push(Intervention::single(node, value));
        }
        Trained { state, store, graph, world, predictor, starts, ivs }
    })
}

fn models(t: &Trained) -> GuidedModels<'_> {
    GuidedModels {
        eps: &t.state.eps,
        proj: &t.state.proj,
        nscm: &t.state.nscm,
        store: &t.store,
        schedule: &t.state.schedule,
        graph: &t.graph,
    }
}

// --- c07: guided vs unguided counterfactual quality -------------------------

#[test]
fn c07_guided_beats_unguided_counterfactuals() {
    let t = trained();
    let t0 = Instant::now();
    let m = models(t);
    let delta = t.state.delta.expect("calibrated residual scale");

    let gcfg = GuidanceConfig { delta, ..GuidanceConfig::default() };
    let guided =
        evaluate_counterfactuals(&m, &t.predictor, &t.world, &t.starts, &t.ivs, &gcfg, 50, 23)
            .unwrap();

    // Baseline: same pipeline with the correction disabled and a fresh-noise
    // start, i.e. unconditional generation scored against the same targets.
    let ucfg = GuidanceConfig {
        mode: GuidanceMode::Fixed,
        lambda_fixed: 0.0,
        delta,
        start: StartMode::FreshNoise,
        ..GuidanceConfig::default()
    };
    let unguided =
        evaluate_counterfactuals(&m, &t.predictor, &t.world, &t.starts, &t.ivs, &ucfg, 50, 23)
            .unwrap();

    let acm_ok = guided.mean_acm <= 0.7 * unguided.mean_acm;
    let psnr_ok = guided.mean_psnr >= unguided.mean_psnr + 3.0;
    let verdict = if acm_ok && psnr_ok { "PASS" } else { "FAIL" };
    println!(
        "c07 guided vs unguided: {verdict} (acm {:.4} vs {:.4}, need <= {:.4}; psnr {:.2} vs {:.2} dB, need >= {:.2}; {:.1} min)",
        guided.mean_acm,
        unguided.mean_acm,
        0.7 * unguided.mean_acm,
        guided.mean_psnr,
        unguided.mean_psnr,
        unguided.mean_psnr + 3.0,
        el(t0) / 60.0
    );
    assert!(acm_ok, "guided acm {} not 30% under unguided {}", guided.mean_acm, unguided.mean_acm);
    assert!(
        psnr_ok,
        "guided psnr {} not 3 dB over unguided {}",
        guided.mean_psnr, unguided.mean_psnr
    );
}

// --- c08: self-adjusted schedule against fixed and linear -------------------

#[test]
fn c08_self_adjusted_schedule_holds_up() {
    let t = trained();
    let t0 = Instant::now();
    let m = models(t);
    let delta = t.state.delta.expect("calibrated residual scale");
    let run = |mode: GuidanceMode, lambda_fixed: f64| -> f64 {
        let cfg = GuidanceConfig { mode, lambda_fixed, delta, ..GuidanceConfig::default() };
        evaluate_counterfactuals(&m, &t.predictor, &t.world, &t.starts, &t.ivs, &cfg, 50, 29)
            .unwrap()
            .mean_acm
    };
    let selfadj = run(GuidanceMode::SelfAdjusted, 0.0);
    let fixed = run(GuidanceMode::Fixed, 0.25);
    let linear = run(GuidanceMode::Linear, 0.25);
    let ok = selfadj <= 1.02 * fixed && selfadj <= 1.02 * linear;
    let verdict = if ok { "PASS" } else { "FAIL" };
    println!(
        "c08 schedule comparison: {verdict} (acm self {selfadj:.4} vs fixed {fixed:.4} / linear {linear:.4}, 2% slack, {:.1} min)",
        el(t0) / 60.0
    );
    assert!(ok, "self-adjusted {selfadj} worse than fixed {fixed} / linear {linear}");
}

// --- c09: error accumulation over sequential interventions ------------------

#[test]
fn c09_guided_chains_accumulate_less_error() {
    let t = trained();
    let t0 = Instant::now();
    let m = models(t);
    let delta = t.state.delta.expect("calibrated residual scale");
    let schedule: Vec<Intervention> = t.ivs.iter().take(5).cloned().collect();
    let starts = &t.starts[..16];

    let gcfg = GuidanceConfig { delta, ..GuidanceConfig::default() };
    let mut ggen = guided_chain_generator(&m, &gcfg, 50, 37);
    let guided = sequential_eval(&mut ggen, &t.predictor, &t.world, starts, &schedule).unwrap();

    let ucfg = GuidanceConfig {
        mode: GuidanceMode::Fixed,
        lambda_fixed: 0.0,
        delta,
        ..GuidanceConfig::default()
    };
    let mut ugen = guided_chain_generator(&m, &ucfg, 50, 37);
    let unguided = sequential_eval(&mut ugen, &t.predictor, &t.world, starts, &schedule).unwrap();

    let g_growth = guided.steps[4].mean_acm / guided.steps[0].mean_acm;
    let u_growth = unguided.steps[4].mean_acm / unguided.steps[0].mean_acm;
    let ok = g_growth < u_growth;
    let verdict = if ok { "PASS" } else { "FAIL" };
    let gs: Vec<String> = guided.steps.iter().map(|s| format!("{:.3}", s.mean_acm)).collect();
    let us: Vec<String> = unguided.steps.iter().map(|s| format!("{:.3}", s.mean_acm)).collect();
    println!(
        "c09 sequential chains: {verdict} (growth {g_growth:.3} vs {u_growth:.3}; guided acm [{}], unguided [{}]; {:.1} min)",
        gs.join(", "),
        us.join(", "),
        el(t0) / 60.0
    );
    assert!(ok, "guided growth {g_growth} not below unguided {u_growth}");
}

// --- c10: metric hand values -------------------------------------------------

#[test]
fn c10_metric_hand_values() {
    let t0 = Instant::now();

    let a = vec![0.25; 16];
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), 99.0, "identical images cap the scale");
    let b = vec![0.35; 16];
    let twenty = psnr(&a, &b, 1.0).unwrap();
    assert!((twenty - 20.0).abs() < 1e-9, "uniform 0.1 offset: got {twenty}");

    // Two unit point masses one unit apart: squared distance exactly 1.
    let a1 = vec![vec![0.0], vec![0.0]];
    let b1 = vec![vec![1.0], vec![1.0]];
    let unit = ffd(&a1, &b1).unwrap();
    assert!((unit - 1.0).abs() < 1e-12, "point-mass distance: got {unit}");

    let mut rng = stream(10, "c10", 0);
    let set: Vec<Vec<f64>> = (0..64)
        .map(|_| (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let zero = ffd(&set, &set).unwrap();
    assert!(zero.abs() < 1e-8, "self-distance: got {zero}");

    // A predictor with zeroed output head answers 0 for every factor, so the
    // match error against unit-norm targets is exactly 1.
    let proj = Projector::new(
        ProjectorConfig {
            image_size: 8,
            base_channels: 4,
            channel_mults: vec![1, 2],
            time_embed_dim: 8,
            factor_dim: 2,
        },
        "r",
    )
    .unwrap();
    let mut store = ParamStore::new(0.999).unwrap();
    proj.init(&mut store, &mut stream(20, "init", 0)).unwrap();
    for name in ["r.head.w", "r.head.b"] {
        let shape = store.get(name).unwrap().shape().to_vec();
        store.reinit(name, Tensor::zeros(shape)).unwrap();
    }
    let pred = AttributePredictor::from_parts(proj, store);
    let imgs = vec![
        rand_tensor(vec![1, 1, 8, 8], 0.0, 1.0, &mut rng),
        rand_tensor(vec![1, 1, 8, 8], 0.0, 1.0, &mut rng),
    ];
    let targets = vec![vec![1.0, 0.0], vec![0.0, -1.0]];
    let v = acm(&pred, &imgs, &targets).unwrap();
    assert!((v - 1.0).abs() < 1e-12, "zeroed-head match error: got {v}");

    println!("c10 metric hand values: PASS ({:.2}s)", el(t0));
}

// --- c11: determinism and resume ---------------------------------------------

#[test]
fn c11_determinism_and_resume() {
    let t0 = Instant::now();
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();

    // Same-seed dataset generation is byte-identical.
    let data = generate_dataset(d1.path(), "pendulum", 12, 16, 0.05, 13).unwrap();
    generate_dataset(d2.path(), "pendulum", 12, 16, 0.05, 13).unwrap();
    for name in ["factors.csv", "manifest.json", "000007.pgm"] {
        assert_eq!(
            std::fs::read(d1.path().join(name)).unwrap(),
            std::fs::read(d2.path().join(name)).unwrap(),
            "{name} differs between same-seed runs"
        );
    }

    // A run stopped at iteration 3 and resumed to 6 must produce the same
    // checkpoint bytes as an uninterrupted run to 6.
    let cfg = TrainConfig {
        image_size: 16,
        timesteps: 40,
        iterations: 6,
        batch_size: 4,
        epoch_iters: 3,
        checkpoint_every: 0,
        log_every: 2,
        base_channels: 4,
        channel_mults: vec![1, 2],
        time_embed_dim: 8,
        nscm_hidden: 8,
        seed: 3,
        ..TrainConfig::pendulum()
    };
    let p_straight = d2.path().join("straight.cdl");
    let mut s1 = TrainState::new(cfg.clone()).unwrap();
    s1.run_until(&data, 6).unwrap();
    s1.calibrate_delta(&data).unwrap();
    s1.save(&p_straight).unwrap();

    let p_mid = d2.path().join("mid.cdl");
    let p_resumed = d2.path().join("resumed.cdl");
    let mut s2 = TrainState::new(cfg.clone()).unwrap();
    s2.run_until(&data, 3).unwrap();
    s2.save(&p_mid).unwrap();
    let mut s3 = TrainState::load(&p_mid).unwrap();
    s3.run_until(&data, 6).unwrap();
    s3.calibrate_delta(&data).unwrap();
    s3.save(&p_resumed).unwrap();
    assert_eq!(
        std::fs::read(&p_straight).unwrap(),
        std::fs::read(&p_resumed).unwrap(),
        "resumed checkpoint differs from the straight run"
    );

    // Repeated sampling from the same state is bit-identical, with and
    // without guidance in the loop.
    let store = s1.inference_store().unwrap();
    let latent = rand_tensor(vec![1, 1, 16, 16], -1.0, 1.0, &mut stream(13, "c11", 1));
    let one = ddim_sample(&s1.eps, &store, &s1.schedule, 8, latent.clone()).unwrap();
    let two = ddim_sample(&s1.eps, &store, &s1.schedule, 8, latent.clone()).unwrap();
    assert_eq!(one.data(), two.data(), "repeated unguided sampling diverged");

    let graph = CausalGraph::from_edges(4, &[(0, 2)]).unwrap();
    let m = GuidedModels {
        eps: &s1.eps,
        proj: &s1.proj,
        nscm: &s1.nscm,
        store: &store,
        schedule: &s1.schedule,
        graph: &graph,
    };
    let z_target = Tensor::zeros(vec![1, 4]);
    let gcfg = GuidanceConfig { delta: s1.delta.unwrap_or(1.0), ..GuidanceConfig::default() };
    let (g1, _) = guided_ddim_sample(&m, latent.clone(), &z_target, &gcfg, 8, false).unwrap();
    let (g2, _) = guided_ddim_sample(&m, latent.clone(), &z_target, &gcfg, 8, false).unwrap();
    assert_eq!(g1.data(), g2.data(), "repeated guided sampling diverged");

    println!(
        "c11 determinism: PASS (dataset bytes, resume checkpoint, repeated samples all identical, {:.0}s)",
        el(t0)
    );
}
