//! Subcommand bodies. Each one does its work under the `--out` directory and
//! finishes by writing a run manifest there; errors carry the stage they
//! occurred in so the caller can name it on exit.

use std::fmt;
use std::fs;
use std::path::Path;
use std::time::Instant;

use cdl_core::config::TrainConfig;
use cdl_core::heads::CausalGraph;
use cdl_core::metrics::{
    evaluate_counterfactuals, ffd, fit_lambda_table, guided_chain_generator, normal_latent,
    sequential_eval, train_attribute_predictor, AttributePredictor, CounterfactualEvalReport,
    PredictorReport, PredictorTrainConfig, SequentialStep,
};
use cdl_core::rng::stream;
use cdl_core::sampler::{
    counterfactual_sample, guided_ddim_sample, GuidanceConfig, GuidanceMode, GuidedModels,
    GuidedStepTrace, LambdaTable, StartMode,
};
use cdl_core::tensor::{ParamStore, Tensor};
use cdl_core::trainer::{loss_csv, TrainState};
use cdl_core::world::{
    generate_dataset, load_dataset, read_pgm, world_by_id, write_pgm, Dataset, GroundTruthScm,
    Intervention, SampleRecord,
};
use cdl_core::{CdlError, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;
use serde_json::json;

use crate::manifest::RunManifest;
use crate::{
    AblateLambdaArgs, CounterfactualArgs, EvaluateArgs, GenDataArgs, GuidanceModeArg, SampleArgs,
    StartModeArgs, TrainArgs,
};

/// Error tagged with the pipeline stage it came from.
#[derive(Debug)]
pub struct StageError {
    pub stage: String,
    pub source: CdlError,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error [{}]: {}", self.stage, self.source)
    }
}

pub type CmdResult<T> = std::result::Result<T, StageError>;

trait Stage<T> {
    fn stage(self, s: &str) -> CmdResult<T>;
}

impl<T> Stage<T> for Result<T> {
    fn stage(self, s: &str) -> CmdResult<T> {
        self.map_err(|source| StageError { stage: s.to_string(), source })
    }
}

fn config_err(msg: impl Into<String>) -> CdlError {
    CdlError::Config(msg.into())
}

// Candidate scales scanned when fitting the per-timestep lambda table.
const TABLE_CANDIDATES: [f64; 5] = [0.0, 0.05, 0.1, 0.25, 0.5];

pub fn gen_data(a: &GenDataArgs) -> CmdResult<()> {
    let t0 = Instant::now();
    fs::create_dir_all(&a.out).map_err(CdlError::from).stage("create-out")?;
    let ds = generate_dataset(&a.out, &a.world, a.n, a.image_size, a.noise_scale, a.seed)
        .stage("generate")?;

    let mut m = RunManifest::new("gen-data", a.seed);
    m.config = json!({
        "world": a.world,
        "n": a.n,
        "image_size": a.image_size,
        "noise_scale": a.noise_scale,
    });
    m.output(&a.out, &a.out.join("manifest.json"));
    m.output(&a.out, &a.out.join("factors.csv"));
    m.extra = json!({ "images": ds.len(), "image_pattern": "{index:06}.pgm" });
    m.write(&a.out, t0).stage("manifest")?;
    println!(
        "wrote {} {} samples ({}x{}) to {}",
        ds.len(),
        a.world,
        a.image_size,
        a.image_size,
        a.out.display()
    );
    Ok(())
}

pub fn train(a: &TrainArgs) -> CmdResult<()> {
    let t0 = Instant::now();
    fs::create_dir_all(&a.out).map_err(CdlError::from).stage("create-out")?;
    let dataset = load_dataset(&a.data).stage("load-data")?;

    let mut state = match &a.resume {
        Some(ck) => TrainState::load(ck).stage("load-checkpoint")?,
        None => {
            let mut cfg = match &a.config {
                Some(p) => TrainConfig::from_path(p).stage("load-config")?,
                None => preset_for(&dataset),
            };
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if let Some(it) = a.iterations {
                cfg.iterations = it;
            }
            cfg.validate().stage("load-config")?;
            TrainState::new(cfg).stage("init")?
        }
    };
    if a.resume.is_some() {
        if let Some(it) = a.iterations {
            state.cfg.iterations = it;
        }
    }

    let target = state.cfg.iterations;
    let every = state.cfg.checkpoint_every;
    let ck_path = a.out.join("checkpoint.cdl");
    while state.iteration < target {
        let next = if every == 0 { target } else { (state.iteration + every).min(target) };
        state.run_until(&dataset, next).stage("train")?;
        state.save(&ck_path).stage("write-checkpoint")?;
        if let Some(row) = state.rows.last() {
            println!(
                "iteration {}/{target}  l_diff {:.5}  l_h {:.5}  l_s {:.5}  h {:.3e}",
                state.iteration, row.l_diff, row.l_h, row.l_s, row.h
            );
        }
    }
    let delta = state.calibrate_delta(&dataset).stage("calibrate")?;
    state.save(&ck_path).stage("write-checkpoint")?;

    let loss_path = a.out.join("loss.csv");
    let csv = loss_csv(&state.rows);
    if a.resume.is_some() && loss_path.exists() {
        let rows_only = csv.split_once('\n').map(|(_, rest)| rest).unwrap_or("");
        let mut prev = fs::read_to_string(&loss_path).map_err(CdlError::from).stage("write-logs")?;
        prev.push_str(rows_only);
        fs::write(&loss_path, prev).map_err(CdlError::from).stage("write-logs")?;
    } else {
        fs::write(&loss_path, csv).map_err(CdlError::from).stage("write-logs")?;
    }

    let rep = state.graph_report(a.graph_threshold).stage("graph")?;
    let d = dataset.meta.node_count;
    let weights: Vec<Vec<f64>> =
        rep.adjacency.data().chunks(d).map(|row| row.to_vec()).collect();
    let mut adj_csv = String::new();
    for row in &weights {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        adj_csv.push_str(&cells.join(","));
        adj_csv.push('\n');
    }
    fs::write(a.out.join("adjacency.csv"), adj_csv).map_err(CdlError::from).stage("write-logs")?;
    let graph_json = serde_json::to_string_pretty(&json!({
        "threshold": a.graph_threshold,
        "acyclicity": rep.h,
        "edges": rep.edges,
        "adjacency": weights,
    }))
    .map_err(|e| CdlError::Format(e.to_string()))
    .stage("write-logs")?;
    fs::write(a.out.join("graph.json"), graph_json).map_err(CdlError::from).stage("write-logs")?;

    let mut m = RunManifest::new("train", state.cfg.seed);
    m.input(&a.data);
    if let Some(ck) = &a.resume {
        m.input(ck);
    }
    let cfg_json = state.cfg.to_json().stage("manifest")?;
    m.config = serde_json::from_str(&cfg_json)
        .map_err(|e| CdlError::Format(e.to_string()))
        .stage("manifest")?;
    for name in ["checkpoint.cdl", "loss.csv", "graph.json", "adjacency.csv"] {
        m.output(&a.out, &a.out.join(name));
    }
    m.hash_checkpoint(&ck_path).stage("manifest")?;
    m.extra = json!({
        "iterations": state.iteration,
        "delta": delta,
        "acyclicity": rep.h,
        "edges": rep.edges,
    });
    m.write(&a.out, t0).stage("manifest")?;
    println!(
        "trained to iteration {} (delta {:.5}); checkpoint at {}",
        state.iteration,
        delta,
        ck_path.display()
    );
    Ok(())
}

/// Default config for a dataset when no explicit config file is given.
fn preset_for(dataset: &Dataset) -> TrainConfig {
    let mut cfg = match dataset.meta.world_id.as_str() {
        "toy-bars" => TrainConfig::toy_bars(),
        _ => TrainConfig::pendulum(),
    };
    cfg.world = dataset.meta.world_id.clone();
    cfg.image_size = dataset.meta.image_size;
    cfg
}

pub fn sample(a: &SampleArgs) -> CmdResult<()> {
    let t0 = Instant::now();
    fs::create_dir_all(&a.out).map_err(CdlError::from).stage("create-out")?;
    let state = TrainState::load(&a.checkpoint).stage("load-checkpoint")?;
    let store = state.inference_store().stage("load-checkpoint")?;
    let d = state.nscm.config().factor_dim;
    // Unconditional sampling never touches the graph; an empty one stands in
    // when the thresholded adjacency is not yet acyclic.
    let graph = state
        .graph(0.3)
        .or_else(|_| CausalGraph::from_edges(d, &[]))
        .stage("load-checkpoint")?;
    let models = bundle(&state, &store, &graph);
    let cfg = GuidanceConfig {
        mode: GuidanceMode::Fixed,
        lambda_fixed: 0.0,
        ..GuidanceConfig::default()
    };
    let z_dummy = Tensor::zeros(vec![1, d]);
    let size = state.cfg.image_size;

    let mut m = RunManifest::new("sample", a.seed);
    m.input(&a.checkpoint);
    for i in 0..a.n {
        let latent = normal_latent(size, a.seed, i as u64);
        let (img, _) =
            guided_ddim_sample(&models, latent, &z_dummy, &cfg, a.steps, false).stage("sample")?;
        let pixels: Vec<f64> = img.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let path = a.out.join(format!("sample_{i:03}.pgm"));
        write_pgm(&path, &pixels, size, size).stage("write-image")?;
        m.output(&a.out, &path);
    }
    m.config = json!({ "n": a.n, "steps": a.steps });
    m.hash_checkpoint(&a.checkpoint).stage("manifest")?;
    m.write(&a.out, t0).stage("manifest")?;
    println!("wrote {} samples to {}", a.n, a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct TraceRow {
    t_from: usize,
    t_to: usize,
    lambda: f64,
    guidance_norm: f64,
    f_value: Vec<f64>,
}

impl TraceRow {
    fn from_trace(t: &GuidedStepTrace) -> Self {
        Self {
            t_from: t.t_from,
            t_to: t.t_to,
            lambda: t.lambda,
            guidance_norm: t.guidance_norm,
            f_value: t.f_value.data().to_vec(),
        }
    }
}

pub fn counterfactual(a: &CounterfactualArgs) -> CmdResult<()> {
    let t0 = Instant::now();
    fs::create_dir_all(&a.out).map_err(CdlError::from).stage("create-out")?;
    let state = TrainState::load(&a.checkpoint).stage("load-checkpoint")?;
    let store = state.inference_store().stage("load-checkpoint")?;
    let graph = state.graph(a.graph_threshold).stage("graph")?;
    let models = bundle(&state, &store, &graph);
    let d = state.nscm.config().factor_dim;
    let size = state.cfg.image_size;

    // Factual source: dataset row (with its record) or a bare image file.
    let (pixels, record, meta) = match (&a.data, a.index, &a.image) {
        (Some(data), Some(index), None) => {
            let ds = load_dataset(data).stage("load-data")?;
            if index >= ds.len() {
                return Err(config_err(format!(
                    "index {index} out of range for {} samples",
                    ds.len()
                )))
                .stage("load-data");
            }
            (ds.images[index].clone(), Some(ds.records[index].clone()), Some(ds.meta.clone()))
        }
        (None, None, Some(image)) => {
            let (pixels, w, h) = read_pgm(image).stage("load-source")?;
            if w != h {
                return Err(config_err(format!("source image must be square, got {w}x{h}")))
                    .stage("load-source");
            }
            (pixels, None, None)
        }
        _ => {
            return Err(config_err(
                "pass either --data with --index, or --image",
            ))
            .stage("load-source")
        }
    };
    if pixels.len() != size * size {
        return Err(config_err(format!(
            "source has {} pixels but the checkpoint expects {size}x{size}",
            pixels.len()
        )))
        .stage("load-source");
    }

    let iv = Intervention::parse(&a.intervene).stage("intervention")?;
    for node in iv.nodes() {
        if node >= d {
            return Err(config_err(format!(
                "intervention names z{} but the model has {d} factors",
                node + 1
            )))
            .stage("intervention");
        }
    }

    let delta = resolve_delta(&state, a.delta).stage("guidance")?;
    let cfg = build_guidance(a.guidance_mode, a.gamma, a.lambda_fixed, delta, a.start_mode, None)
        .stage("guidance")?;

    // Ground-truth route: abduct and predict through the true world instead
    // of the learned structural model.
    let (zf_override, zt_override) = if a.gt_factors {
        let record = record
            .clone()
            .ok_or_else(|| config_err("--gt-factors needs --data and --index"))
            .stage("world")?;
        let meta = meta.as_ref().expect("record implies dataset meta");
        let world = world_by_id(&meta.world_id, meta.noise_scale).stage("world")?;
        let truth = world.counterfactual(&record, &iv).stage("world")?;
        (Some(record.factors), Some(truth.factors))
    } else {
        (None, None)
    };

    let x0 = Tensor::from_vec(vec![1, 1, size, size], pixels.clone()).stage("load-source")?;
    let latent = match cfg.start {
        StartMode::FreshNoise => Some(normal_latent(size, a.seed, 0)),
        StartMode::DdimInvert => None,
    };
    let out = counterfactual_sample(
        &models,
        &x0,
        &iv,
        &cfg,
        a.steps,
        zf_override.as_deref(),
        zt_override.as_deref(),
        latent,
        a.trace,
    )
    .stage("counterfactual")?;

    write_pgm(&a.out.join("source.pgm"), &pixels, size, size).stage("write-image")?;
    write_pgm(&a.out.join("counterfactual.pgm"), out.image.data(), size, size)
        .stage("write-image")?;
    if a.trace {
        let rows: Vec<TraceRow> = out.traces.iter().map(TraceRow::from_trace).collect();
        let text = serde_json::to_string_pretty(&rows)
            .map_err(|e| CdlError::Format(e.to_string()))
            .stage("write-trace")?;
        fs::write(a.out.join("trace.json"), text).map_err(CdlError::from).stage("write-trace")?;
    }

    let mut m = RunManifest::new("counterfactual", a.seed);
    m.input(&a.checkpoint);
    if let Some(data) = &a.data {
        m.input(data);
    }
    if let Some(image) = &a.image {
        m.input(image);
    }
    m.config = json!({
        "intervene": a.intervene,
        "steps": a.steps,
        "guidance_mode": a.guidance_mode.name(),
        "gamma": a.gamma,
        "lambda_fixed": a.lambda_fixed,
        "delta": delta,
        "start_mode": a.start_mode.name(),
        "gt_factors": a.gt_factors,
        "graph_threshold": a.graph_threshold,
    });
    for name in ["source.pgm", "counterfactual.pgm"] {
        m.output(&a.out, &a.out.join(name));
    }
    if a.trace {
        m.output(&a.out, &a.out.join("trace.json"));
    }
    m.hash_checkpoint(&a.checkpoint).stage("manifest")?;
    m.extra = json!({
        "z_factual": out.z_factual,
        "z_target": out.z_target,
    });
    m.write(&a.out, t0).stage("manifest")?;
    println!("z_factual {:?}", out.z_factual);
    println!("z_target  {:?}", out.z_target);
    println!("counterfactual written to {}", a.out.join("counterfactual.pgm").display());
    Ok(())
}

#[derive(Serialize)]
struct EvalReportJson {
    guidance_mode: String,
    steps: usize,
    pairs: usize,
    mean_acm: f64,
    mean_psnr: f64,
    ffd: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    predictor: Option<PredictorJson>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda_table: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sequential: Option<Vec<SeqRowJson>>,
}

#[derive(Serialize)]
struct PredictorJson {
    val_rmse: f64,
    val_acm: f64,
}

#[derive(Serialize)]
struct SeqRowJson {
    step: usize,
    mean_acm: f64,
    mean_psnr: f64,
}

impl SeqRowJson {
    fn from_step(s: &SequentialStep) -> Self {
        Self { step: s.step, mean_acm: s.mean_acm, mean_psnr: s.mean_psnr }
    }
}

pub fn evaluate(a: &EvaluateArgs) -> CmdResult<()> {
    let t0 = Instant::now();
    fs::create_dir_all(&a.out).map_err(CdlError::from).stage("create-out")?;
    let state = TrainState::load(&a.checkpoint).stage("load-checkpoint")?;
    let store = state.inference_store().stage("load-checkpoint")?;
    let graph = state.graph(a.graph_threshold).stage("graph")?;
    let models = bundle(&state, &store, &graph);

    let ds = load_dataset(&a.data).stage("load-data")?;
    if ds.meta.image_size != state.cfg.image_size {
        return Err(config_err(format!(
            "dataset is {}px but the checkpoint expects {}px",
            ds.meta.image_size, state.cfg.image_size
        )))
        .stage("load-data");
    }
    let world = world_by_id(&ds.meta.world_id, ds.meta.noise_scale).stage("world")?;
    let (predictor, trained) =
        obtain_predictor(&ds, a.predictor.as_deref(), &a.out, a.predictor_iters, a.seed)
            .stage("predictor")?;
    let (starts, ivs) = eval_pairs(&ds, &world, a.n_interventions, a.seed).stage("pairs")?;

    let delta = resolve_delta(&state, a.delta).stage("guidance")?;
    let table = if a.guidance_mode == GuidanceModeArg::Trainable {
        let fit_n = a.fit_pairs.min(starts.len());
        let base = build_guidance(
            GuidanceModeArg::Fixed,
            a.gamma,
            a.lambda_fixed,
            delta,
            a.start_mode,
            None,
        )
        .stage("fit-lambda")?;
        let (table, fit_acm) = fit_lambda_table(
            &models,
            &predictor,
            &world,
            &starts[..fit_n],
            &ivs[..fit_n],
            &base,
            a.table_bins,
            &TABLE_CANDIDATES,
            a.steps,
            a.seed,
        )
        .stage("fit-lambda")?;
        println!("fitted lambda table {:?} (fit acm {fit_acm:.5})", table.values());
        Some(table)
    } else {
        None
    };
    let cfg =
        build_guidance(a.guidance_mode, a.gamma, a.lambda_fixed, delta, a.start_mode, table)
            .stage("guidance")?;

    let report =
        evaluate_counterfactuals(&models, &predictor, &world, &starts, &ivs, &cfg, a.steps, a.seed)
            .stage("evaluate")?;
    let fd = feature_distance(&predictor, &report, &starts, ds.meta.image_size).stage("ffd")?;

    let sequential = match a.sequential_k {
        Some(k) => {
            let chains = a.chains.min(starts.len());
            let schedule: Vec<Intervention> =
                (0..k).map(|i| ivs[i % ivs.len()].clone()).collect();
            let mut generate = guided_chain_generator(&models, &cfg, a.steps, a.seed);
            let rep = sequential_eval(
                &mut generate,
                &predictor,
                &world,
                &starts[..chains],
                &schedule,
            )
            .stage("sequential")?;
            Some(rep.steps.iter().map(SeqRowJson::from_step).collect::<Vec<_>>())
        }
        None => None,
    };

    let report_json = EvalReportJson {
        guidance_mode: a.guidance_mode.name().to_string(),
        steps: a.steps,
        pairs: starts.len(),
        mean_acm: report.mean_acm,
        mean_psnr: report.mean_psnr,
        ffd: fd,
        predictor: trained
            .as_ref()
            .map(|r| PredictorJson { val_rmse: r.val_rmse, val_acm: r.val_acm }),
        lambda_table: match &cfg.mode {
            GuidanceMode::Trainable(t) => Some(t.values().to_vec()),
            _ => None,
        },
        sequential,
    };
    write_json(&a.out.join("report.json"), &report_json).stage("write-report")?;
    write_metrics_csv(&a.out.join("metrics.csv"), &report).stage("write-report")?;

    let mut m = RunManifest::new("evaluate", a.seed);
    m.input(&a.checkpoint);
    m.input(&a.data);
    m.config = json!({
        "n_interventions": a.n_interventions,
        "steps": a.steps,
        "guidance_mode": a.guidance_mode.name(),
        "gamma": a.gamma,
        "lambda_fixed": a.lambda_fixed,
        "delta": delta,
        "start_mode": a.start_mode.name(),
        "sequential_k": a.sequential_k,
        "chains": a.chains,
        "predictor_iters": a.predictor_iters,
        "graph_threshold": a.graph_threshold,
    });
    for name in ["report.json", "metrics.csv"] {
        m.output(&a.out, &a.out.join(name));
    }
    if trained.is_some() {
        m.output(&a.out, &a.out.join("predictor.cdl"));
    }
    m.hash_checkpoint(&a.checkpoint).stage("manifest")?;
    m.extra = json!({
        "mean_acm": report.mean_acm,
        "mean_psnr": report.mean_psnr,
        "ffd": fd,
    });
    m.write(&a.out, t0).stage("manifest")?;
    println!(
        "{} pairs, {} guidance: acm {:.5}  psnr {:.2} dB  ffd {:.5}",
        starts.len(),
        a.guidance_mode.name(),
        report.mean_acm,
        report.mean_psnr,
        fd
    );
    Ok(())
}

pub fn ablate_lambda(a: &AblateLambdaArgs) -> CmdResult<()> {
    let t0 = Instant::now();
    fs::create_dir_all(&a.out).map_err(CdlError::from).stage("create-out")?;
    let state = TrainState::load(&a.checkpoint).stage("load-checkpoint")?;
    let store = state.inference_store().stage("load-checkpoint")?;
    let graph = state.graph(a.graph_threshold).stage("graph")?;
    let models = bundle(&state, &store, &graph);

    let ds = load_dataset(&a.data).stage("load-data")?;
    if ds.meta.image_size != state.cfg.image_size {
        return Err(config_err(format!(
            "dataset is {}px but the checkpoint expects {}px",
            ds.meta.image_size, state.cfg.image_size
        )))
        .stage("load-data");
    }
    let world = world_by_id(&ds.meta.world_id, ds.meta.noise_scale).stage("world")?;
    let (predictor, trained) =
        obtain_predictor(&ds, a.predictor.as_deref(), &a.out, a.predictor_iters, a.seed)
            .stage("predictor")?;
    let (starts, ivs) = eval_pairs(&ds, &world, a.n_interventions, a.seed).stage("pairs")?;
    let delta = resolve_delta(&state, a.delta).stage("guidance")?;

    // One table fit shared by the trainable arm, on a prefix of the pairs.
    let fit_n = a.fit_pairs.min(starts.len());
    let base =
        build_guidance(GuidanceModeArg::Fixed, a.gamma, a.lambda_fixed, delta, a.start_mode, None)
            .stage("fit-lambda")?;
    let (table, fit_acm) = fit_lambda_table(
        &models,
        &predictor,
        &world,
        &starts[..fit_n],
        &ivs[..fit_n],
        &base,
        a.table_bins,
        &TABLE_CANDIDATES,
        a.steps,
        a.seed,
    )
    .stage("fit-lambda")?;
    println!("fitted lambda table {:?} (fit acm {fit_acm:.5})", table.values());

    let arms: [(&str, GuidanceModeArg, Option<LambdaTable>); 4] = [
        ("fixed", GuidanceModeArg::Fixed, None),
        ("linear", GuidanceModeArg::Linear, None),
        ("trainable", GuidanceModeArg::Trainable, Some(table.clone())),
        ("self-adjusted", GuidanceModeArg::SelfAdjusted, None),
    ];
    let mut comparison = String::from("mode,mean_acm,mean_psnr,ffd\n");
    let mut summary = Vec::new();
    for (name, mode, arm_table) in arms {
        let cfg = build_guidance(mode, a.gamma, a.lambda_fixed, delta, a.start_mode, arm_table)
            .stage(name)?;
        let report = evaluate_counterfactuals(
            &models, &predictor, &world, &starts, &ivs, &cfg, a.steps, a.seed,
        )
        .stage(name)?;
        let fd =
            feature_distance(&predictor, &report, &starts, ds.meta.image_size).stage(name)?;
        let dir = a.out.join(name);
        fs::create_dir_all(&dir).map_err(CdlError::from).stage(name)?;
        let report_json = EvalReportJson {
            guidance_mode: name.to_string(),
            steps: a.steps,
            pairs: starts.len(),
            mean_acm: report.mean_acm,
            mean_psnr: report.mean_psnr,
            ffd: fd,
            predictor: trained
                .as_ref()
                .map(|r| PredictorJson { val_rmse: r.val_rmse, val_acm: r.val_acm }),
            lambda_table: match &cfg.mode {
                GuidanceMode::Trainable(t) => Some(t.values().to_vec()),
                _ => None,
            },
            sequential: None,
        };
        write_json(&dir.join("report.json"), &report_json).stage(name)?;
        write_metrics_csv(&dir.join("metrics.csv"), &report).stage(name)?;
        comparison.push_str(&format!(
            "{name},{},{},{}\n",
            report.mean_acm, report.mean_psnr, fd
        ));
        summary.push(json!({
            "mode": name,
            "mean_acm": report.mean_acm,
            "mean_psnr": report.mean_psnr,
            "ffd": fd,
        }));
        println!("{name:>14}: acm {:.5}  psnr {:.2} dB  ffd {:.5}", report.mean_acm, report.mean_psnr, fd);
    }
    fs::write(a.out.join("comparison.csv"), comparison)
        .map_err(CdlError::from)
        .stage("write-report")?;

    let mut m = RunManifest::new("ablate-lambda", a.seed);
    m.input(&a.checkpoint);
    m.input(&a.data);
    m.config = json!({
        "n_interventions": a.n_interventions,
        "steps": a.steps,
        "gamma": a.gamma,
        "lambda_fixed": a.lambda_fixed,
        "delta": delta,
        "start_mode": a.start_mode.name(),
        "table_bins": a.table_bins,
        "fit_pairs": fit_n,
        "predictor_iters": a.predictor_iters,
        "graph_threshold": a.graph_threshold,
    });
    m.output(&a.out, &a.out.join("comparison.csv"));
    for name in ["fixed", "linear", "trainable", "self-adjusted"] {
        m.output(&a.out, &a.out.join(name).join("report.json"));
        m.output(&a.out, &a.out.join(name).join("metrics.csv"));
    }
    if trained.is_some() {
        m.output(&a.out, &a.out.join("predictor.cdl"));
    }
    m.hash_checkpoint(&a.checkpoint).stage("manifest")?;
    m.extra = json!({
        "lambda_table": table.values(),
        "fit_acm": fit_acm,
        "comparison": summary,
    });
    m.write(&a.out, t0).stage("manifest")?;
    Ok(())
}

fn bundle<'a>(
    state: &'a TrainState,
    store: &'a ParamStore,
    graph: &'a CausalGraph,
) -> GuidedModels<'a> {
    GuidedModels {
        eps: &state.eps,
        proj: &state.proj,
        nscm: &state.nscm,
        store,
        schedule: &state.schedule,
        graph,
    }
}

fn resolve_delta(state: &TrainState, flag: Option<f64>) -> Result<f64> {
    flag.or(state.delta).ok_or_else(|| {
        config_err("checkpoint has no calibrated residual scale; pass --delta")
    })
}

fn build_guidance(
    mode: GuidanceModeArg,
    gamma: f64,
    lambda_fixed: f64,
    delta: f64,
    start: StartModeArgs,
    table: Option<LambdaTable>,
) -> Result<GuidanceConfig> {
    let (mode, lambda_fixed) = match mode {
        GuidanceModeArg::SelfAdjusted => (GuidanceMode::SelfAdjusted, 0.0),
        GuidanceModeArg::Fixed => (GuidanceMode::Fixed, lambda_fixed),
        GuidanceModeArg::Linear => (GuidanceMode::Linear, lambda_fixed),
        // Guidance off is the fixed schedule at scale zero; the sampler then
        // reproduces the plain reverse pass bit-for-bit.
        GuidanceModeArg::Off => (GuidanceMode::Fixed, 0.0),
        GuidanceModeArg::Trainable => {
            let table = table.ok_or_else(|| {
                config_err(
                    "trainable guidance needs a fitted table; use evaluate or ablate-lambda",
                )
            })?;
            (GuidanceMode::Trainable(table), 0.0)
        }
    };
    let cfg = GuidanceConfig {
        mode,
        gamma,
        lambda_fixed,
        delta,
        start: match start {
            StartModeArgs::Invert => StartMode::DdimInvert,
            StartModeArgs::Noise => StartMode::FreshNoise,
        },
        ..GuidanceConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Held-out starts plus one random single-node intervention per pair, all
/// drawn from labeled substreams of `seed`.
fn eval_pairs(
    ds: &Dataset,
    world: &GroundTruthScm,
    n: usize,
    seed: u64,
) -> Result<(Vec<(Vec<f64>, SampleRecord)>, Vec<Intervention>)> {
    if ds.is_empty() {
        return Err(config_err("evaluation needs a non-empty dataset"));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut stream(seed, "eval-pairs", 0));
    let ranges = world.ranges();
    let mut rng = stream(seed, "eval-interventions", 0);
    let mut starts = Vec::with_capacity(n);
    let mut ivs = Vec::with_capacity(n);
    for i in 0..n {
        let s = idx[i % idx.len()];
        starts.push((ds.images[s].clone(), ds.records[s].clone()));
        let node = rng.gen_range(0..ranges.len());
        let value = rng.gen_range(ranges[node].lo..ranges[node].hi);
        ivs.push(Intervention::single(node, value));
    }
    Ok((starts, ivs))
}

/// Loads the predictor from `cache` when it exists, otherwise trains one on
/// the dataset and saves it under the output directory.
fn obtain_predictor(
    ds: &Dataset,
    cache: Option<&Path>,
    out_dir: &Path,
    iterations: usize,
    seed: u64,
) -> Result<(AttributePredictor, Option<PredictorReport>)> {
    if let Some(path) = cache {
        if path.exists() {
            let pred = AttributePredictor::load(path)?;
            let cfg = pred.config();
            if cfg.image_size != ds.meta.image_size || cfg.factor_dim != ds.meta.node_count {
                return Err(config_err(format!(
                    "cached predictor is {}px/{} factors but the dataset is {}px/{}",
                    cfg.image_size, cfg.factor_dim, ds.meta.image_size, ds.meta.node_count
                )));
            }
            return Ok((pred, None));
        }
    }
    let factors: Vec<Vec<f64>> = ds.records.iter().map(|r| r.factors.clone()).collect();
    let cfg = PredictorTrainConfig { iterations, seed, ..PredictorTrainConfig::default() };
    let (pred, report) = train_attribute_predictor(ds.meta.image_size, &ds.images, &factors, &cfg)?;
    pred.save(&out_dir.join("predictor.cdl"))?;
    Ok((pred, Some(report)))
}

/// Fréchet distance between predictor features of the generated images and
/// of the factual images they started from.
fn feature_distance(
    predictor: &AttributePredictor,
    report: &CounterfactualEvalReport,
    starts: &[(Vec<f64>, SampleRecord)],
    size: usize,
) -> Result<f64> {
    let n = report.images.len();
    let mut gen_data = Vec::with_capacity(n * size * size);
    for img in &report.images {
        gen_data.extend_from_slice(img.data());
    }
    let gen_batch = Tensor::from_vec(vec![n, 1, size, size], gen_data)?;
    let mut real_data = Vec::with_capacity(n * size * size);
    for (pixels, _) in starts {
        real_data.extend_from_slice(pixels);
    }
    let real_batch = Tensor::from_vec(vec![starts.len(), 1, size, size], real_data)?;
    let gf = feature_rows(&predictor.features(&gen_batch)?);
    let rf = feature_rows(&predictor.features(&real_batch)?);
    ffd(&gf, &rf)
}

fn feature_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let d = t.shape()[1];
    t.data().chunks(d).map(|row| row.to_vec()).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text =
        serde_json::to_string_pretty(value).map_err(|e| CdlError::Format(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

fn write_metrics_csv(path: &Path, report: &CounterfactualEvalReport) -> Result<()> {
    let mut csv = String::from("index,acm,psnr\n");
    for row in &report.per_sample {
        csv.push_str(&format!("{},{},{}\n", row.index, row.acm_term, row.psnr));
    }
    fs::write(path, csv)?;
    Ok(())
}
