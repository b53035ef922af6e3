//! Evaluation: attribute-consistency metric over a held-out predictor, PSNR
//! against ground-truth renders, a feature-space Fréchet distance, the
//! autoregressive counterfactual chain harness, and coordinate-search fitting
//! of the per-timestep lambda table.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::heads::{Projector, ProjectorConfig};
use crate::rng::stream;
use crate::sampler::{
    counterfactual_sample, GuidanceConfig, GuidanceMode, GuidedModels, LambdaTable, StartMode,
};
use crate::tensor::{AdamConfig, Leaves, ParamStore, Tape, Tensor};
use crate::world::{render, GroundTruthScm, Intervention, SampleRecord};
use crate::{CdlError, Result};

/// Clean-image factor regressor: the projector encoder evaluated at t = 0
/// everywhere, trained on original samples only.
pub struct AttributePredictor {
    proj: Projector,
    store: ParamStore,
}

impl AttributePredictor {
    /// Wraps an already-initialized projector and its parameters. The store
    /// must hold every parameter the projector was initialized with.
    pub fn from_parts(proj: Projector, store: ParamStore) -> Self {
        Self { proj, store }
    }

    pub fn config(&self) -> &ProjectorConfig {
        self.proj.config()
    }

    /// Factor estimates for a batch of clean images `[n,1,s,s]`.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let n = images.shape()[0];
        self.proj.project(&self.store, images, &vec![0; n])
    }

    /// Penultimate pooled features `[n,c]`, the space the Fréchet distance
    /// is computed in.
    pub fn features(&self, images: &Tensor) -> Result<Tensor> {
        let n = images.shape()[0];
        let mut tape = Tape::new();
        let mut leaves = Leaves::new(&self.store);
        let xv = tape.constant(images.clone())?;
        let (u, _) = self.proj.forward(&mut tape, &mut leaves, xv, &vec![0; n])?;
        Ok(tape.value(u).clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ck = Checkpoint::new();
        ck.add_store("pred", &self.store)?;
        let cfg = self.proj.config();
        let mut arch = vec![
            cfg.image_size as f64,
            cfg.base_channels as f64,
            cfg.time_embed_dim as f64,
            cfg.factor_dim as f64,
        ];
        arch.extend(cfg.channel_mults.iter().map(|&m| m as f64));
        ck.insert("pred.arch", Tensor::vector(arch))?;
        ck.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::read(path)?;
        let arch = ck.get("pred.arch")?.data().to_vec();
        if arch.len() < 5 {
            return Err(CdlError::Format("predictor architecture record truncated".into()));
        }
        let cfg = ProjectorConfig {
            image_size: arch[0] as usize,
            base_channels: arch[1] as usize,
            time_embed_dim: arch[2] as usize,
            factor_dim: arch[3] as usize,
            channel_mults: arch[4..].iter().map(|&m| m as usize).collect(),
        };
        let proj = Projector::new(cfg, "r")?;
        let store = ck.load_store("pred")?;
        Ok(Self { proj, store })
    }
}

#[derive(Debug, Clone)]
pub struct PredictorTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip: f64,
    pub val_fraction: f64,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub time_embed_dim: usize,
    pub seed: u64,
}

impl Default for PredictorTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1500,
            batch_size: 16,
            lr: 1e-3,
            clip: 1.0,
            val_fraction: 0.2,
            base_channels: 8,
            channel_mults: vec![1, 2, 4],
            time_embed_dim: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PredictorReport {
    /// Root-mean-square validation error per factor entry.
    pub val_rmse: f64,
    /// Mean squared factor distance on validation images — the floor any
    /// consistency measurement through this predictor inherits.
    pub val_acm: f64,
    pub final_loss: f64,
    pub train_count: usize,
    pub val_count: usize,
}

fn batch_tensor(images: &[Vec<f64>], idx: &[usize], size: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(idx.len() * size * size);
    for &i in idx {
        if images[i].len() != size * size {
            return Err(CdlError::Shape(format!(
                "image {i} has {} pixels, expected {}",
                images[i].len(),
                size * size
            )));
        }
        data.extend_from_slice(&images[i]);
    }
    Tensor::from_vec(vec![idx.len(), 1, size, size], data)
}

fn batch_factors(factors: &[&[f64]], idx: &[usize], d: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(factors[i]);
    }
    Tensor::from_vec(vec![idx.len(), d], data)
}

/// Trains the held-out attribute predictor on clean images with a plain MSE
/// objective and reports its validation floor.
pub fn train_attribute_predictor(
    image_size: usize,
    images: &[Vec<f64>],
    factors: &[Vec<f64>],
    cfg: &PredictorTrainConfig,
) -> Result<(AttributePredictor, PredictorReport)> {
    if images.len() != factors.len() || images.is_empty() {
        return Err(CdlError::Config(format!(
            "predictor needs matching non-empty image/factor sets, got {}/{}",
            images.len(),
            factors.len()
        )));
    }
    let d = factors[0].len();
    if d == 0 || factors.iter().any(|f| f.len() != d) {
        return Err(CdlError::Shape("factor rows must share one nonzero length".into()));
    }
    let n = images.len();
    let val_n = ((n as f64 * cfg.val_fraction).round() as usize).clamp(1, n - 1);
    let train_n = n - val_n;
    if train_n < cfg.batch_size.min(4) {
        return Err(CdlError::Config(format!("{train_n} training samples is too few")));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(cfg.seed, "predictor-split", 0));
    let (train_idx, val_idx) = order.split_at(train_n);

    let arch = ProjectorConfig {
        image_size,
        base_channels: cfg.base_channels,
        channel_mults: cfg.channel_mults.clone(),
        time_embed_dim: cfg.time_embed_dim,
        factor_dim: d,
    };
    let proj = Projector::new(arch, "r")?;
    let mut store = ParamStore::new(0.999)?;
    proj.init(&mut store, &mut stream(cfg.seed, "predictor-init", 0))?;

    let factor_rows: Vec<&[f64]> = factors.iter().map(|f| f.as_slice()).collect();
    let adam = AdamConfig { lr: cfg.lr, clip: Some(cfg.clip), ..AdamConfig::default() };
    let mut final_loss = f64::NAN;
    for it in 0..cfg.iterations {
        let mut rng = stream(cfg.seed, "predictor-batch", it as u64);
        let b = cfg.batch_size.min(train_n);
        let idx: Vec<usize> =
            (0..b).map(|_| train_idx[rng.gen_range(0..train_n)]).collect();
        let x = batch_tensor(images, &idx, image_size)?;
        let z = batch_factors(&factor_rows, &idx, d)?;

        let mut tape = Tape::new();
        let mut leaves = Leaves::new(&store);
        let xv = tape.constant(x)?;
        let (_, z_hat) = proj.forward(&mut tape, &mut leaves, xv, &vec![0; b])?;
        let zt = tape.constant(z)?;
        let diff = tape.sub(z_hat, zt)?;
        let sq = tape.mul(diff, diff)?;
        let loss = tape.mean_all(sq)?;
        final_loss = tape.value(loss).item()?;
        tape.backward(loss)?;
        let grads = leaves.grads(&tape);
        store.adam_step(&grads, &adam)?;
    }

    let predictor = AttributePredictor { proj, store };

    // Validation floor, in both per-entry and per-image units.
    let mut sq_sum = 0.0;
    let mut img_sum = 0.0;
    for chunk in val_idx.chunks(16) {
        let x = batch_tensor(images, chunk, image_size)?;
        let pred = predictor.predict(&x)?;
        for (row, &i) in chunk.iter().enumerate() {
            let mut s = 0.0;
            for j in 0..d {
                let e = pred.data()[row * d + j] - factors[i][j];
                s += e * e;
            }
            sq_sum += s;
            img_sum += s;
        }
    }
    let report = PredictorReport {
        val_rmse: (sq_sum / (val_n * d) as f64).sqrt(),
        val_acm: img_sum / val_n as f64,
        final_loss,
        train_count: train_n,
        val_count: val_n,
    };
    Ok((predictor, report))
}

/// Mean squared factor distance between the predictor's reading of each
/// generated image and its ground-truth counterfactual target.
pub fn acm(
    predictor: &AttributePredictor,
    images: &[Tensor],
    targets: &[Vec<f64>],
) -> Result<f64> {
    if images.is_empty() || images.len() != targets.len() {
        return Err(CdlError::Config(format!(
            "consistency metric needs matching non-empty sets, got {}/{}",
            images.len(),
            targets.len()
        )));
    }
    let d = predictor.config().factor_dim;
    let mut total = 0.0;
    for (img, target) in images.iter().zip(targets) {
        if target.len() != d {
            return Err(CdlError::Shape(format!(
                "target has {} factors, predictor expects {d}",
                target.len()
            )));
        }
        let pred = predictor.predict(img)?;
        let term: f64 = pred
            .data()
            .iter()
            .zip(target)
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        total += term;
    }
    Ok(total / images.len() as f64)
}

/// Peak signal-to-noise ratio in dB, clamped at 99.
pub fn psnr(a: &[f64], b: &[f64], max_val: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(CdlError::Shape(format!("psnr over {} vs {} samples", a.len(), b.len())));
    }
    if !(max_val > 0.0) {
        return Err(CdlError::Config("max_val must be positive".into()));
    }
    let mse: f64 =
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(99.0);
    }
    Ok((10.0 * (max_val * max_val / mse).log10()).min(99.0))
}

fn mean_and_cov(set: &[Vec<f64>], d: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = set.len();
    let mut mu = vec![0.0; d];
    for v in set {
        for j in 0..d {
            mu[j] += v[j];
        }
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = DMatrix::zeros(d, d);
    for v in set {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += (v[i] - mu[i]) * (v[j] - mu[j]);
            }
        }
    }
    cov /= (n - 1) as f64;
    (DMatrix::from_vec(d, 1, mu), cov)
}

/// Eigenvalues of a symmetric matrix, with tiny negatives (>= -1e-8) clamped
/// to zero and anything worse rejected.
fn psd_eigen(m: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut vals = Vec::with_capacity(eig.eigenvalues.len());
    for &l in eig.eigenvalues.iter() {
        if l < -1e-8 {
            return Err(CdlError::Numeric(format!("covariance has eigenvalue {l}")));
        }
        vals.push(l.max(0.0));
    }
    Ok((vals, eig.eigenvectors))
}

/// Fréchet distance between two Gaussian fits:
/// `||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2})`.
pub fn ffd(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(CdlError::Config("each feature set needs at least 2 vectors".into()));
    }
    let d = a[0].len();
    if d == 0 || a.iter().chain(b).any(|v| v.len() != d) {
        return Err(CdlError::Shape("feature vectors must share one nonzero length".into()));
    }
    let (mu_a, cov_a) = mean_and_cov(a, d);
    let (mu_b, cov_b) = mean_and_cov(b, d);

    let (vals_a, vecs_a) = psd_eigen(&cov_a)?;
    let sqrt_a = &vecs_a
        * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(
            vals_a.iter().map(|l| l.sqrt()).collect(),
        ))
        * vecs_a.transpose();
    let inner = &sqrt_a * &cov_b * &sqrt_a;
    let (vals_m, _) = psd_eigen(&inner)?;
    let tr_sqrt: f64 = vals_m.iter().map(|l| l.sqrt()).sum();

    let mean_gap = (&mu_a - &mu_b).map(|v| v * v).sum();
    Ok(mean_gap + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt)
}

/// Per-sample outcome of a counterfactual evaluation sweep.
#[derive(Debug, Clone)]
pub struct SampleMetrics {
    pub index: usize,
    pub acm_term: f64,
    pub psnr: f64,
}

#[derive(Debug, Clone)]
pub struct CounterfactualEvalReport {
    pub per_sample: Vec<SampleMetrics>,
    pub mean_acm: f64,
    pub mean_psnr: f64,
    /// Generated images, one `[1,1,s,s]` tensor per start, for distribution
    /// metrics over the whole set.
    pub images: Vec<Tensor>,
}

/// Generates one counterfactual per (start, intervention) pair and scores it
/// against the exact ground-truth counterfactual: factor consistency through
/// the predictor and PSNR against the true render. Pairs are matched by
/// index, cycling the interventions if fewer are given than starts.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_counterfactuals(
    m: &GuidedModels,
    predictor: &AttributePredictor,
    world: &GroundTruthScm,
    starts: &[(Vec<f64>, SampleRecord)],
    interventions: &[Intervention],
    cfg: &GuidanceConfig,
    steps: usize,
    seed: u64,
) -> Result<CounterfactualEvalReport> {
    if starts.is_empty() || interventions.is_empty() {
        return Err(CdlError::Config("evaluation needs starts and interventions".into()));
    }
    let size = predictor.config().image_size;
    let mut per_sample = Vec::with_capacity(starts.len());
    let mut images = Vec::with_capacity(starts.len());
    let mut acm_sum = 0.0;
    let mut psnr_sum = 0.0;
    for (i, (pixels, record)) in starts.iter().enumerate() {
        let iv = &interventions[i % interventions.len()];
        let x0 = Tensor::from_vec(vec![1, 1, size, size], pixels.clone())?;
        let latent = match cfg.start {
            StartMode::FreshNoise => Some(normal_latent(size, seed, i as u64)),
            StartMode::DdimInvert => None,
        };
        let out = counterfactual_sample(m, &x0, iv, cfg, steps, None, None, latent, false)?;
        let truth = world.counterfactual(record, iv)?;
        let gt_render = render(world, &truth.factors, size)?;

        let pred = predictor.predict(&out.image)?;
        let acm_term: f64 = pred
            .data()
            .iter()
            .zip(&truth.factors)
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let p = psnr(out.image.data(), &gt_render, 1.0)?;
        acm_sum += acm_term;
        psnr_sum += p;
        per_sample.push(SampleMetrics { index: i, acm_term, psnr: p });
        images.push(out.image);
    }
    let n = starts.len() as f64;
    Ok(CounterfactualEvalReport {
        per_sample,
        mean_acm: acm_sum / n,
        mean_psnr: psnr_sum / n,
        images,
    })
}

/// Standard-normal `[1,1,size,size]` draw from `stream(seed, "eval-latent", index)`.
pub fn normal_latent(size: usize, seed: u64, index: u64) -> Tensor {
    let mut rng = stream(seed, "eval-latent", index);
    let normal = rand_distr::StandardNormal;
    let data: Vec<f64> = (0..size * size).map(|_| rng.sample(normal)).collect();
    Tensor::from_vec(vec![1, 1, size, size], data).expect("latent shape")
}

/// One generated image per chain step.
pub type ChainGenerator<'g> =
    dyn FnMut(&Tensor, &Intervention, usize, usize) -> Result<Tensor> + 'g;

/// Standard chain generator: the guided counterfactual sampler under `cfg`.
pub fn guided_chain_generator<'g>(
    m: &'g GuidedModels<'g>,
    cfg: &'g GuidanceConfig,
    steps: usize,
    seed: u64,
) -> impl FnMut(&Tensor, &Intervention, usize, usize) -> Result<Tensor> + 'g {
    move |x_cur, iv, chain, step| {
        let latent = match cfg.start {
            StartMode::FreshNoise => {
                let size = x_cur.shape()[2];
                Some(normal_latent(size, seed, (chain * 1024 + step) as u64))
            }
            StartMode::DdimInvert => None,
        };
        let out = counterfactual_sample(m, x_cur, iv, cfg, steps, None, None, latent, false)?;
        Ok(out.image)
    }
}

#[derive(Debug, Clone)]
pub struct SequentialStep {
    pub step: usize,
    pub mean_acm: f64,
    pub mean_psnr: f64,
}

#[derive(Debug, Clone)]
pub struct SequentialReport {
    pub steps: Vec<SequentialStep>,
    pub chains: usize,
}

/// Autoregressive harness: each generated image becomes the next factual,
/// while the exact ground-truth chain advances in parallel through the true
/// structural model; every step is scored like the single-shot evaluation.
pub fn sequential_eval(
    generate: &mut ChainGenerator,
    predictor: &AttributePredictor,
    world: &GroundTruthScm,
    starts: &[(Vec<f64>, SampleRecord)],
    schedule: &[Intervention],
) -> Result<SequentialReport> {
    if starts.is_empty() || schedule.is_empty() {
        return Err(CdlError::Config("sequential run needs chains and a schedule".into()));
    }
    let size = predictor.config().image_size;
    let d = predictor.config().factor_dim;
    let k = schedule.len();
    let mut acm_sums = vec![0.0; k];
    let mut psnr_sums = vec![0.0; k];
    for (chain, (pixels, record)) in starts.iter().enumerate() {
        let mut x_cur = Tensor::from_vec(vec![1, 1, size, size], pixels.clone())?;
        let mut rec_cur = record.clone();
        for (step, iv) in schedule.iter().enumerate() {
            let generated = generate(&x_cur, iv, chain, step)?;
            let truth = world.counterfactual(&rec_cur, iv)?;
            let gt_render = render(world, &truth.factors, size)?;

            let pred = predictor.predict(&generated)?;
            let acm_term: f64 = pred
                .data()
                .iter()
                .take(d)
                .zip(&truth.factors)
                .map(|(p, t)| (p - t) * (p - t))
                .sum();
            acm_sums[step] += acm_term;
            psnr_sums[step] += psnr(generated.data(), &gt_render, 1.0)?;

            x_cur = generated;
            rec_cur = truth;
        }
    }
    let n = starts.len() as f64;
    let steps = (0..k)
        .map(|j| SequentialStep {
            step: j + 1,
            mean_acm: acm_sums[j] / n,
            mean_psnr: psnr_sums[j] / n,
        })
        .collect();
    Ok(SequentialReport { steps, chains: starts.len() })
}

/// Fits the trainable lambda table by one pass of coordinate search, highest
/// bin first, keeping whichever candidate minimizes mean factor consistency
/// on the supplied validation pairs.
#[allow(clippy::too_many_arguments)]
pub fn fit_lambda_table(
    m: &GuidedModels,
    predictor: &AttributePredictor,
    world: &GroundTruthScm,
    starts: &[(Vec<f64>, SampleRecord)],
    interventions: &[Intervention],
    base: &GuidanceConfig,
    bins: usize,
    candidates: &[f64],
    steps: usize,
    seed: u64,
) -> Result<(LambdaTable, f64)> {
    if bins == 0 || candidates.is_empty() {
        return Err(CdlError::Config("table fit needs bins and candidates".into()));
    }
    let mut table = LambdaTable::constant(bins, candidates[0])?;
    let mut best = f64::INFINITY;
    for bin in (0..bins).rev() {
        let mut best_val = table.values()[bin];
        for &cand in candidates {
            table.set(bin, cand)?;
            let cfg = GuidanceConfig {
                mode: GuidanceMode::Trainable(table.clone()),
                ..base.clone()
            };
            let report = evaluate_counterfactuals(
                m,
                predictor,
                world,
                starts,
                interventions,
                &cfg,
                steps,
                seed,
            )?;
            if report.mean_acm < best {
                best = report.mean_acm;
                best_val = cand;
            }
        }
        table.set(bin, best_val)?;
    }
    Ok((table, best))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{EpsNet, EpsNetConfig, NoiseSchedule};
    use crate::heads::{CausalGraph, Nscm, NscmConfig};
    use crate::world::pendulum_world;

    fn zero_predictor(image_size: usize, d: usize) -> AttributePredictor {
        let cfg = ProjectorConfig {
            image_size,
            base_channels: 4,
            channel_mults: vec![1, 2],
            time_embed_dim: 8,
            factor_dim: d,
        };
        let proj = Projector::new(cfg, "r").unwrap();
        let mut store = ParamStore::new(0.999).unwrap();
        proj.init(&mut store, &mut stream(5, "zp", 0)).unwrap();
        let c = proj.embed_width();
        store.reinit("r.head.w", Tensor::zeros(vec![c, d])).unwrap();
        store.reinit("r.head.b", Tensor::zeros(vec![d])).unwrap();
        AttributePredictor { proj, store }
    }

    #[test]
    fn acm_hand_offset_case() {
        // Zeroed head predicts 0 for all 4 factors; targets at 0.5 give
        // 4 * 0.25 = 1 regardless of the image.
        let p = zero_predictor(16, 4);
        let img = Tensor::from_vec(vec![1, 1, 16, 16], vec![0.3; 256]).unwrap();
        let images = vec![img.clone(), img];
        let targets = vec![vec![0.5; 4], vec![0.5; 4]];
        let v = acm(&p, &images, &targets).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        // Exact targets pull it to zero.
        let zeros = vec![vec![0.0; 4], vec![0.0; 4]];
        assert_eq!(acm(&p, &images, &zeros).unwrap(), 0.0);
    }

    #[test]
    fn acm_is_order_invariant() {
        let p = zero_predictor(16, 4);
        let a = Tensor::from_vec(vec![1, 1, 16, 16], vec![0.1; 256]).unwrap();
        let b = Tensor::from_vec(vec![1, 1, 16, 16], vec![0.9; 256]).unwrap();
        let t1 = vec![vec![0.2; 4], vec![0.7; 4]];
        let v1 = acm(&p, &[a.clone(), b.clone()], &t1).unwrap();
        let t2 = vec![vec![0.7; 4], vec![0.2; 4]];
        let v2 = acm(&p, &[b, a], &t2).unwrap();
        assert!((v1 - v2).abs() < 1e-12);
    }

    #[test]
    fn psnr_hand_values() {
        let a = vec![0.5; 64];
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), 99.0);
        let b: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
        // MSE 0.01 at max 1 is 20 dB.
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
    }

    #[test]
    fn ffd_hand_and_properties() {
        let a = vec![vec![0.0], vec![0.0]];
        let b = vec![vec![1.0], vec![1.0]];
        assert!((ffd(&a, &b).unwrap() - 1.0).abs() < 1e-12);

        let mut rng = stream(77, "ffd", 0);
        let set_a: Vec<Vec<f64>> =
            (0..40).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        assert!(ffd(&set_a, &set_a).unwrap().abs() < 1e-8);

        let set_b: Vec<Vec<f64>> =
            (0..30).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let ab = ffd(&set_a, &set_b).unwrap();
        let ba = ffd(&set_b, &set_a).unwrap();
        assert!((ab - ba).abs() < 1e-9);
        assert!(ab > 0.0);

        // Pure mean shift: trace terms cancel, leaving the squared gap.
        let shift = [0.3, -0.2, 0.5, 0.0, 0.1];
        let shifted: Vec<Vec<f64>> = set_a
            .iter()
            .map(|v| v.iter().zip(&shift).map(|(x, s)| x + s).collect())
            .collect();
        let want: f64 = shift.iter().map(|s| s * s).sum();
        assert!((ffd(&set_a, &shifted).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn predictor_learns_a_linear_pixel_world() {
        // Images are constant planes at the factor value; reading them back
        // is a mean-pool away, so a short run must beat the variance floor.
        let n = 80;
        let mut rng = stream(3, "pred-data", 0);
        let mut images = Vec::with_capacity(n);
        let mut factors = Vec::with_capacity(n);
        for _ in 0..n {
            let z: f64 = rng.gen_range(0.0..1.0);
            images.push(vec![z; 256]);
            factors.push(vec![z]);
        }
        let cfg = PredictorTrainConfig {
            iterations: 250,
            batch_size: 8,
            base_channels: 4,
            channel_mults: vec![1, 2],
            time_embed_dim: 8,
            ..PredictorTrainConfig::default()
        };
        let (_, report) = train_attribute_predictor(16, &images, &factors, &cfg).unwrap();
        assert_eq!(report.train_count + report.val_count, n);
        // Predicting the mean would sit near the uniform std of ~0.29.
        assert!(report.val_rmse < 0.15, "val rmse {}", report.val_rmse);
    }

    #[test]
    fn sequential_oracle_generator_scores_its_own_floor() {
        // A generator that returns the exact ground-truth render should be
        // scored at PSNR clamp and at the predictor's own error.
        let world = pendulum_world(0.05).unwrap();
        let p = zero_predictor(16, 4);
        let mut rng = stream(9, "chain", 0);
        let starts: Vec<(Vec<f64>, SampleRecord)> = (0..2)
            .map(|_| {
                let rec = world.sample(&mut rng).unwrap();
                let img = render(&world, &rec.factors, 16).unwrap();
                (img, rec)
            })
            .collect();
        let schedule =
            vec![Intervention::single(0, 0.2), Intervention::single(1, -0.1)];
        let world2 = pendulum_world(0.05).unwrap();
        let mut oracle = |_: &Tensor, iv: &Intervention, chain: usize, _s: usize| {
            // Recompute the truth chain for this call.
            let mut rec = starts[chain].1.clone();
            rec = world2.counterfactual(&rec, iv).unwrap();
            let pixels = render(&world2, &rec.factors, 16).unwrap();
            Tensor::from_vec(vec![1, 1, 16, 16], pixels)
        };
        // The oracle above only works for k = 1 chains (it forgets state), so
        // run a single-step schedule per assertion.
        let report = sequential_eval(
            &mut oracle,
            &p,
            &world,
            &starts,
            &schedule[..1],
        )
        .unwrap();
        assert_eq!(report.steps.len(), 1);
        assert_eq!(report.steps[0].mean_psnr, 99.0);
        // Zero predictor's error: mean ||0 - truth||^2 over chains.
        let mut want = 0.0;
        for (_, rec) in &starts {
            let truth = world.counterfactual(rec, &schedule[0]).unwrap();
            want += truth.factors.iter().map(|v| v * v).sum::<f64>();
        }
        want /= starts.len() as f64;
        assert!((report.steps[0].mean_acm - want).abs() < 1e-12);
    }

    fn tiny_models() -> (EpsNet, Projector, Nscm, ParamStore, NoiseSchedule, CausalGraph) {
        let eps = EpsNet::new(
            EpsNetConfig {
                image_size: 16,
                base_channels: 4,
                channel_mults: vec![1, 2],
                time_embed_dim: 8,
            },
            "e",
        )
        .unwrap();
        let proj = Projector::new(
            ProjectorConfig {
                image_size: 16,
                base_channels: 4,
                channel_mults: vec![1, 2],
                time_embed_dim: 8,
                factor_dim: 4,
            },
            "p",
        )
        .unwrap();
        let nscm = Nscm::new(NscmConfig { factor_dim: 4, hidden: 4 }, "s").unwrap();
        let mut store = ParamStore::new(0.999).unwrap();
        let mut rng = stream(31, "tiny", 0);
        eps.init(&mut store, &mut rng).unwrap();
        proj.init(&mut store, &mut rng).unwrap();
        nscm.init(&mut store, &mut rng).unwrap();
        let sched = NoiseSchedule::default_linear(20).unwrap();
        let graph = CausalGraph::from_edges(4, &[(0, 2), (1, 2), (0, 3), (1, 3)]).unwrap();
        (eps, proj, nscm, store, sched, graph)
    }

    #[test]
    fn sequential_k1_matches_single_evaluation() {
        let (eps, proj, nscm, store, sched, graph) = tiny_models();
        let m = GuidedModels {
            eps: &eps,
            proj: &proj,
            nscm: &nscm,
            store: &store,
            schedule: &sched,
            graph: &graph,
        };
        let world = pendulum_world(0.05).unwrap();
        let p = zero_predictor(16, 4);
        let mut rng = stream(41, "starts", 0);
        let starts: Vec<(Vec<f64>, SampleRecord)> = (0..2)
            .map(|_| {
                let rec = world.sample(&mut rng).unwrap();
                let img = render(&world, &rec.factors, 16).unwrap();
                (img, rec)
            })
            .collect();
        let iv = vec![Intervention::single(0, 0.1)];
        let cfg = GuidanceConfig::default();

        let single =
            evaluate_counterfactuals(&m, &p, &world, &starts, &iv, &cfg, 3, 0).unwrap();
        let mut gen = guided_chain_generator(&m, &cfg, 3, 0);
        let seq = sequential_eval(&mut gen, &p, &world, &starts, &iv).unwrap();
        assert_eq!(seq.steps.len(), 1);
        assert_eq!(seq.steps[0].mean_acm, single.mean_acm);
        assert_eq!(seq.steps[0].mean_psnr, single.mean_psnr);
    }

    #[test]
    fn lambda_table_fit_returns_candidate_values() {
        let (eps, proj, nscm, store, sched, graph) = tiny_models();
        let m = GuidedModels {
            eps: &eps,
            proj: &proj,
            nscm: &nscm,
            store: &store,
            schedule: &sched,
            graph: &graph,
        };
        let world = pendulum_world(0.05).unwrap();
        let p = zero_predictor(16, 4);
        let mut rng = stream(51, "starts", 0);
        let rec = world.sample(&mut rng).unwrap();
        let img = render(&world, &rec.factors, 16).unwrap();
        let starts = vec![(img, rec)];
        let ivs = vec![Intervention::single(1, 0.3)];
        let candidates = [0.0, 0.4];
        let (table, best) = fit_lambda_table(
            &m,
            &p,
            &world,
            &starts,
            &ivs,
            &GuidanceConfig::default(),
            2,
            &candidates,
            2,
            0,
        )
        .unwrap();
        assert_eq!(table.bins(), 2);
        assert!(table.values().iter().all(|v| candidates.contains(v)));
        assert!(best.is_finite());
    }
}
