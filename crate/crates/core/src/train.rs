//! Stochastic iPALM training of the stopping time, kernels and activation
//! weights, with exact reverse-mode gradients through the discrete schemes.

use std::path::Path;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::activations::{Activation, ActivationSpline, DEFAULT_NUM_WEIGHTS};
use crate::csvout;
use crate::dataops::DataOperator;
use crate::error::{Error, Result};
use crate::flow::{self, ControlSet, Scheme};
use crate::foe::{Expert, KernelBank};
use crate::imgcore::{add_gaussian_noise, conv2d, filter_gradient, load_pgm, Filter, Image};
use crate::synth::synthetic_image;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Task {
    Denoise { sigma: f64 },
    Deblur { tau: f64, sigma: f64 },
}

impl Task {
    pub fn sigma(&self) -> f64 {
        match *self {
            Task::Denoise { sigma } | Task::Deblur { sigma, .. } => sigma,
        }
    }

    pub fn tau(&self) -> Option<f64> {
        match *self {
            Task::Denoise { .. } => None,
            Task::Deblur { tau, .. } => Some(tau),
        }
    }

    pub fn operator(&self, data_weight: f64) -> Result<DataOperator> {
        let op = match *self {
            Task::Denoise { .. } => DataOperator::identity(),
            Task::Deblur { tau, .. } => DataOperator::gaussian_blur(tau)?,
        };
        op.with_weight(data_weight)
    }

    /// `A x_g + n` with `n ~ N(0, sigma^2)`.
    pub fn degrade(&self, clean: &Image, op: &DataOperator, seed: u64) -> Result<Image> {
        add_gaussian_noise(&op.apply(clean), self.sigma(), seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub num_kernels: usize,
    pub kernel_size: usize,
    pub num_weights: usize,
    pub depth: usize,
    pub batch_size: usize,
    pub patch: usize,
    pub iters: usize,
    pub seed: u64,
    pub task: Task,
    pub scheme: Scheme,
    pub data_weight: f64,
    pub over_relax: f64,
    pub backtrack_up: f64,
    pub backtrack_down: f64,
    pub max_backtracks: usize,
    pub lipschitz_init: f64,
    pub t_init: f64,
    /// Initial activations follow `phi(y) = slope * y` near zero.
    pub weight_slope: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            num_kernels: 48,
            kernel_size: 7,
            num_weights: DEFAULT_NUM_WEIGHTS,
            depth: 10,
            batch_size: 64,
            patch: 96,
            iters: 5000,
            seed: 0,
            task: Task::Denoise { sigma: 0.1 },
            scheme: Scheme::Euler,
            data_weight: 1.0,
            over_relax: std::f64::consts::FRAC_1_SQRT_2,
            backtrack_up: 2.0,
            backtrack_down: 0.5,
            max_backtracks: 60,
            lipschitz_init: 1.0,
            t_init: 1.0,
            weight_slope: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if self.depth == 0 {
            return bad("depth must be at least 1");
        }
        if self.patch == 0 {
            return bad("patch size must be at least 1");
        }
        if self.kernel_size.is_multiple_of(2) {
            return bad("kernel size must be odd");
        }
        if !(self.backtrack_up > 1.0) || !(self.backtrack_down > 0.0 && self.backtrack_down <= 1.0) {
            return bad("backtracking factors must satisfy up > 1 and 0 < down <= 1");
        }
        if !(self.lipschitz_init > 0.0) || !(self.t_init >= 0.0) || !(self.over_relax >= 0.0) {
            return bad("initial Lipschitz constant, stopping time and over-relaxation must be non-negative");
        }
        Ok(())
    }

    pub fn setup(&self) -> Result<Setup> {
        Ok(Setup {
            op: self.task.operator(self.data_weight)?,
            scheme: self.scheme,
            depth: self.depth,
        })
    }
}

/// The fixed parts of the discrete flow during training.
#[derive(Debug, Clone)]
pub struct Setup {
    pub op: DataOperator,
    pub scheme: Scheme,
    pub depth: usize,
}

/// Trainable controls.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub stop_time: f64,
    pub bank: KernelBank,
}

/// One training pair; the data `b` equals the corrupted initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x0: Image,
    pub target: Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub d_t: f64,
    pub d_kernels: Vec<Vec<f64>>,
    pub d_weights: Vec<Vec<f64>>,
}

impl Gradients {
    fn zeros(bank: &KernelBank) -> Self {
        Self {
            d_t: 0.0,
            d_kernels: bank
                .experts()
                .iter()
                .map(|e| vec![0.0; e.filter.taps().len()])
                .collect(),
            d_weights: bank
                .experts()
                .iter()
                .map(|e| vec![0.0; e.activation.num_weights()])
                .collect(),
        }
    }

    fn add_scaled(&mut self, alpha: f64, other: &Gradients) {
        self.d_t += alpha * other.d_t;
        for (a, b) in self.d_kernels.iter_mut().zip(&other.d_kernels) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += alpha * y);
        }
        for (a, b) in self.d_weights.iter_mut().zip(&other.d_weights) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += alpha * y);
        }
    }
}

fn control<'a>(params: &'a Params, setup: &'a Setup, s: &'a Sample) -> Result<ControlSet<'a, ActivationSpline>> {
    ControlSet::new(params.stop_time, &params.bank, &setup.op, &s.x0, &s.x0)
}

fn item_loss(params: &Params, setup: &Setup, s: &Sample) -> Result<f64> {
    let c = control(params, setup, s)?;
    let traj = flow::forward(&c, setup.scheme, setup.depth)?;
    traj.final_state().check_dims(&s.target)?;
    Ok(0.5 * traj.final_state().sub(&s.target).norm_sq())
}

/// Mean of `1/2 ||x_S - x_g||^2` over the batch.
pub fn loss_batch(params: &Params, setup: &Setup, batch: &[Sample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let losses: Vec<f64> = batch
        .par_iter()
        .enumerate()
        .map(|(i, s)| item_loss(params, setup, s).inspect_err(|e| warn!("batch item {i}: {e}")))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / batch.len() as f64)
}

/// `J_f v = -(sum_k K_k^T phi_k'(K_k x) K_k v + lambda_D A^T A v)`
fn jac_f(c: &ControlSet<'_, ActivationSpline>, x: &Image, v: &Image) -> Image {
    c.adjoint_rhs(x, v).scaled(-1.0)
}

/// Adds the parameter derivative of `<cot, f(x)>` to `g`.
fn accumulate_params(bank: &KernelBank, x: &Image, cot: &Image, g: &mut Gradients) {
    let boundary = bank.boundary();
    for (k, e) in bank.experts().iter().enumerate() {
        let y = conv2d(x, &e.filter, boundary);
        let kc = conv2d(cot, &e.filter, boundary);
        let r = y.map(|v| e.activation.phi(v));
        let mut w = kc.clone();
        for (wv, &yv) in w.data_mut().iter_mut().zip(y.data()) {
            *wv *= e.activation.dphi(yv);
        }
        let size = e.filter.size();
        let g1 = filter_gradient(&r, cot, size, boundary);
        let g2 = filter_gradient(&w, x, size, boundary);
        for ((d, a), b) in g.d_kernels[k].iter_mut().zip(g1).zip(g2) {
            *d -= a + b;
        }
        let dw = &mut g.d_weights[k];
        for (&yv, &kv) in y.data().iter().zip(kc.data()) {
            if kv != 0.0 {
                e.activation
                    .for_each_active(yv, |j, t| dw[j] -= kv * crate::activations::bspline2(t));
            }
        }
    }
}

/// Loss and exact gradient of `1/2 ||x_S - x_g||^2` for one pair.
fn item_gradient(params: &Params, setup: &Setup, s: &Sample) -> Result<(f64, Gradients)> {
    let c = control(params, setup, s)?;
    let traj = flow::forward(&c, setup.scheme, setup.depth)?;
    let xs = traj.final_state();
    xs.check_dims(&s.target)?;
    let loss = 0.5 * xs.sub(&s.target).norm_sq();

    let depth = setup.depth as f64;
    let h = params.stop_time / depth;
    let mut g = Gradients::zeros(&params.bank);
    let mut lam = xs.sub(&s.target);
    for x in traj.states[..setup.depth].iter().rev() {
        let f0 = c.rhs_unchecked(x);
        match setup.scheme {
            Scheme::Euler => {
                g.d_t += lam.dot(&f0) / depth;
                accumulate_params(&params.bank, x, &lam.scaled(h), &mut g);
                let jl = jac_f(&c, x, &lam);
                lam.add_scaled(h, &jl);
            }
            Scheme::Heun => {
                let xp = x.plus_scaled(h, &f0);
                let f1 = c.rhs_unchecked(&xp);
                let mu = jac_f(&c, &xp, &lam).scaled(0.5 * h);
                g.d_t += 0.5 * (lam.dot(&f0) + lam.dot(&f1)) / depth + mu.dot(&f0) / depth;
                let c1 = lam.scaled(0.5 * h);
                let c0 = c1.plus_scaled(h, &mu);
                accumulate_params(&params.bank, &xp, &c1, &mut g);
                accumulate_params(&params.bank, x, &c0, &mut g);
                let jc = jac_f(&c, x, &c0);
                lam.add_scaled(1.0, &mu);
                lam.add_scaled(1.0, &jc);
            }
        }
    }
    Ok((loss, g))
}

/// Batch loss with its gradient, skipping diverged items. Returns the mask of
/// items that were used.
fn batch_gradient(params: &Params, setup: &Setup, batch: &[Sample]) -> Result<(f64, Gradients, Vec<bool>)> {
    let results: Vec<Result<(f64, Gradients)>> = batch.par_iter().map(|s| item_gradient(params, setup, s)).collect();
    let mut total = Gradients::zeros(&params.bank);
    let mut loss = 0.0;
    let mut used = vec![false; batch.len()];
    let mut count = 0usize;
    let mut last_err = None;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok((l, g)) => {
                loss += l;
                total.add_scaled(1.0, &g);
                used[i] = true;
                count += 1;
            }
            Err(e @ Error::Diverged { .. }) => {
                warn!("skipping batch item {i}: {e}");
                last_err = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    if count == 0 {
        return Err(last_err.unwrap_or_else(|| Error::invalid("empty batch")));
    }
    let inv = 1.0 / count as f64;
    let mut scaled = Gradients::zeros(&params.bank);
    scaled.add_scaled(inv, &total);
    Ok((loss * inv, scaled, used))
}

/// Exact gradients `(dT, dK_k, dw_k)` of [`loss_batch`], together with the loss.
pub fn param_gradients(params: &Params, setup: &Setup, batch: &[Sample]) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let results: Vec<(f64, Gradients)> = batch
        .par_iter()
        .map(|s| item_gradient(params, setup, s))
        .collect::<Result<_>>()?;
    let mut total = Gradients::zeros(&params.bank);
    let mut loss = 0.0;
    let inv = 1.0 / batch.len() as f64;
    for (l, g) in &results {
        loss += l * inv;
        total.add_scaled(inv, g);
    }
    Ok((loss, total))
}

/// Masked batch loss; `+inf` if any used item diverges.
fn masked_loss(params: &Params, setup: &Setup, batch: &[Sample], used: &[bool]) -> Result<f64> {
    let losses: Vec<Result<f64>> = batch
        .par_iter()
        .zip(used)
        .map(|(s, &u)| if u { item_loss(params, setup, s) } else { Ok(0.0) })
        .collect();
    let count = used.iter().filter(|&&u| u).count() as f64;
    let mut total = 0.0;
    for r in losses {
        match r {
            Ok(l) => total += l,
            Err(Error::Diverged { .. }) => return Ok(f64::INFINITY),
            Err(e) => return Err(e),
        }
    }
    Ok(total / count)
}

/// Zero tap mean, then `||kappa||_F <= 1`; the exact projection onto the
/// intersection since the ball is centered in the zero-mean subspace.
pub fn proj_kernel(taps: &mut [f64]) {
    let mean = taps.iter().sum::<f64>() / taps.len() as f64;
    taps.iter_mut().for_each(|t| *t -= mean);
    let norm = taps.iter().map(|t| t * t).sum::<f64>().sqrt();
    if norm > 1.0 {
        taps.iter_mut().for_each(|t| *t /= norm);
    }
}

pub fn proj_kernels(kernels: &mut [Vec<f64>]) {
    kernels.iter_mut().for_each(|k| proj_kernel(k));
}

/// Radial projection onto `||w||_2 <= 1`.
pub fn proj_weights(w: &mut [f64]) {
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 1.0 {
        w.iter_mut().for_each(|v| *v /= norm);
    }
}

pub fn proj_t(t: f64) -> f64 {
    t.max(0.0)
}

/// I.i.d. standard normal taps, projected onto the kernel constraint set.
pub fn init_kernels(num_kernels: usize, size: usize, seed: u64) -> Result<Vec<Filter>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..num_kernels)
        .map(|_| {
            let mut taps: Vec<f64> = (0..size * size).map(|_| StandardNormal.sample(&mut rng)).collect();
            proj_kernel(&mut taps);
            Filter::new(size, taps)
        })
        .collect()
}

pub fn init_params(cfg: &TrainConfig) -> Result<Params> {
    let filters = init_kernels(cfg.num_kernels, cfg.kernel_size, cfg.seed)?;
    let experts = filters
        .into_iter()
        .map(|filter| {
            let mut activation = ActivationSpline::init_linear(cfg.num_weights, cfg.weight_slope)?;
            let mut w = activation.weights().to_vec();
            proj_weights(&mut w);
            activation = activation.with_weights(w)?;
            Ok(Expert { filter, activation })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Params {
        stop_time: cfg.t_init,
        bank: KernelBank::new(experts),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Block {
    Kernels,
    Weights,
    Time,
}

const BLOCKS: [Block; 3] = [Block::Kernels, Block::Weights, Block::Time];

fn get_block(p: &Params, b: Block) -> Vec<f64> {
    match b {
        Block::Kernels => p.bank.experts().iter().flat_map(|e| e.filter.taps().to_vec()).collect(),
        Block::Weights => p
            .bank
            .experts()
            .iter()
            .flat_map(|e| e.activation.weights().to_vec())
            .collect(),
        Block::Time => vec![p.stop_time],
    }
}

fn set_block(p: &Params, b: Block, v: &[f64]) -> Result<Params> {
    match b {
        Block::Time => Ok(Params {
            stop_time: v[0],
            bank: p.bank.clone(),
        }),
        Block::Kernels | Block::Weights => {
            let mut off = 0;
            let experts = p
                .bank
                .experts()
                .iter()
                .map(|e| {
                    if b == Block::Kernels {
                        let n = e.filter.taps().len();
                        let filter = Filter::new(e.filter.size(), v[off..off + n].to_vec())?;
                        off += n;
                        Ok(Expert {
                            filter,
                            activation: e.activation.clone(),
                        })
                    } else {
                        let n = e.activation.num_weights();
                        let activation = e.activation.with_weights(v[off..off + n].to_vec())?;
                        off += n;
                        Ok(Expert {
                            filter: e.filter.clone(),
                            activation,
                        })
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Params {
                stop_time: p.stop_time,
                bank: KernelBank::new(experts).with_boundary(p.bank.boundary()),
            })
        }
    }
}

fn grad_block(g: &Gradients, b: Block) -> Vec<f64> {
    match b {
        Block::Kernels => g.d_kernels.concat(),
        Block::Weights => g.d_weights.concat(),
        Block::Time => vec![g.d_t],
    }
}

fn project_block(p: &Params, b: Block, v: &mut [f64]) {
    match b {
        Block::Time => v[0] = proj_t(v[0]),
        Block::Kernels | Block::Weights => {
            let mut off = 0;
            for e in p.bank.experts() {
                let n = if b == Block::Kernels {
                    e.filter.taps().len()
                } else {
                    e.activation.num_weights()
                };
                if b == Block::Kernels {
                    proj_kernel(&mut v[off..off + n]);
                } else {
                    proj_weights(&mut v[off..off + n]);
                }
                off += n;
            }
        }
    }
}

/// Clean images with a seeded, uniform sampler of degraded patches.
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Vec<Image>,
}

pub const SYNTHETIC_COUNT: usize = 24;

impl Dataset {
    pub fn new(images: Vec<Image>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Dataset("no training images".into()));
        }
        Ok(Self { images })
    }

    /// `count` synthetic images of side `size`.
    pub fn synthetic(count: usize, size: usize, seed: u64) -> Result<Self> {
        Self::new(
            (0..count as u64)
                .map(|i| synthetic_image(size, size, seed.wrapping_mul(1_000_003).wrapping_add(i)))
                .collect(),
        )
    }

    /// Every `*.pgm` in `dir`, in file-name order.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::Dataset(format!(
                "data directory {} does not exist",
                dir.display()
            )));
        }
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")) {
                paths.push(path);
            }
        }
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Dataset(format!("no .pgm images in {}", dir.display())));
        }
        Self::new(paths.iter().map(load_pgm).collect::<Result<_>>()?)
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }
}

pub enum DataSource<'a> {
    Synthetic,
    Directory(&'a Path),
}

pub fn make_dataset(source: DataSource<'_>, patch: usize, seed: u64) -> Result<Dataset> {
    match source {
        DataSource::Synthetic => Dataset::synthetic(SYNTHETIC_COUNT, (3 * patch).max(64), seed),
        DataSource::Directory(dir) => Dataset::from_dir(dir),
    }
}

pub struct PatchSampler<'a> {
    dataset: &'a Dataset,
    eligible: Vec<usize>,
    task: Task,
    op: DataOperator,
    patch: usize,
    rng: ChaCha8Rng,
}

impl<'a> PatchSampler<'a> {
    pub fn new(dataset: &'a Dataset, task: Task, op: DataOperator, patch: usize, seed: u64) -> Result<Self> {
        let eligible: Vec<usize> = (0..dataset.images.len())
            .filter(|&i| dataset.images[i].width() >= patch && dataset.images[i].height() >= patch)
            .collect();
        if eligible.is_empty() || patch == 0 {
            return Err(Error::Dataset(format!(
                "no training image fits a {patch}x{patch} patch"
            )));
        }
        Ok(Self {
            dataset,
            eligible,
            task,
            op,
            patch,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn sample(&mut self) -> Result<Sample> {
        let img = &self.dataset.images[self.eligible[self.rng.random_range(0..self.eligible.len())]];
        let x = self.rng.random_range(0..=img.width() - self.patch);
        let y = self.rng.random_range(0..=img.height() - self.patch);
        let target = img.crop(x, y, self.patch, self.patch)?;
        let x0 = self.task.degrade(&target, &self.op, self.rng.random())?;
        Ok(Sample { x0, target })
    }

    pub fn batch(&mut self, n: usize) -> Result<Vec<Sample>> {
        (0..n).map(|_| self.sample()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub iter: usize,
    pub loss: f64,
    pub stop_time: f64,
    pub l_kernels: f64,
    pub l_weights: f64,
    pub l_time: f64,
}

pub fn write_history_csv(rows: &[HistoryRow], w: &mut impl std::io::Write) -> std::io::Result<()> {
    csvout::header(w, &["iter", "loss", "T", "L_K", "L_w", "L_T"])?;
    for r in rows {
        csvout::row(
            w,
            &[r.iter as f64, r.loss, r.stop_time, r.l_kernels, r.l_weights, r.l_time],
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub params: Params,
    pub history: Vec<HistoryRow>,
}

/// Runs `cfg.iters` iPALM iterations with freshly sampled batches.
pub fn ipalm_train(cfg: &TrainConfig, dataset: &Dataset) -> Result<TrainResult> {
    cfg.validate()?;
    let setup = cfg.setup()?;
    let mut sampler = PatchSampler::new(dataset, cfg.task, setup.op.clone(), cfg.patch, cfg.seed ^ 0x9e37_79b9)?;
    let params = init_params(cfg)?;
    ipalm_from(cfg, &setup, params, |_| sampler.batch(cfg.batch_size))
}

/// iPALM on a fixed set of samples, used as the deterministic full-batch variant.
pub fn ipalm_full_batch(cfg: &TrainConfig, params: Params, samples: &[Sample]) -> Result<TrainResult> {
    cfg.validate()?;
    let setup = cfg.setup()?;
    ipalm_from(cfg, &setup, params, |_| Ok(samples.to_vec()))
}

fn ipalm_from(
    cfg: &TrainConfig,
    setup: &Setup,
    mut params: Params,
    mut next_batch: impl FnMut(usize) -> Result<Vec<Sample>>,
) -> Result<TrainResult> {
    let mut prev: Vec<Vec<f64>> = BLOCKS.iter().map(|&b| get_block(&params, b)).collect();
    let mut lip = [cfg.lipschitz_init; 3];
    let mut history = Vec::with_capacity(cfg.iters);

    for iter in 1..=cfg.iters {
        let batch = next_batch(iter)?;
        let mut accepted_loss = f64::NAN;
        for (bi, &block) in BLOCKS.iter().enumerate() {
            let q = get_block(&params, block);
            let mut q_tilde: Vec<f64> = q
                .iter()
                .zip(&prev[bi])
                .map(|(a, b)| a + cfg.over_relax * (a - b))
                .collect();
            if block == Block::Time {
                // the flow is only defined for T >= 0
                q_tilde[0] = proj_t(q_tilde[0]);
            }
            let p_tilde = set_block(&params, block, &q_tilde)?;
            let (loss_tilde, grads, used) = batch_gradient(&p_tilde, setup, &batch)?;
            let g = grad_block(&grads, block);

            let mut accepted = None;
            for _ in 0..=cfg.max_backtracks {
                let l = lip[bi];
                let mut q_new: Vec<f64> = q_tilde.iter().zip(&g).map(|(q, g)| q - g / l).collect();
                project_block(&params, block, &mut q_new);
                let d: Vec<f64> = q_new.iter().zip(&q_tilde).map(|(a, b)| a - b).collect();
                let lin: f64 = d.iter().zip(&g).map(|(d, g)| d * g).sum();
                let sq: f64 = d.iter().map(|d| d * d).sum();
                let p_new = set_block(&params, block, &q_new)?;
                let loss_new = masked_loss(&p_new, setup, &batch, &used)?;
                let bound = loss_tilde + lin + 0.5 * l * sq;
                if loss_new <= bound + 1e-12 * loss_tilde.abs() {
                    accepted = Some((p_new, loss_new));
                    break;
                }
                lip[bi] *= cfg.backtrack_up;
            }
            let (p_new, loss_new) = accepted.ok_or_else(|| {
                Error::invalid(format!(
                    "backtracking for {block:?} exceeded {} doublings",
                    cfg.max_backtracks
                ))
            })?;
            lip[bi] *= cfg.backtrack_down;
            prev[bi] = q;
            params = p_new;
            accepted_loss = loss_new;
        }
        if !params.stop_time.is_finite() {
            return Err(Error::Diverged { step: iter });
        }
        history.push(HistoryRow {
            iter,
            loss: accepted_loss,
            stop_time: params.stop_time,
            l_kernels: lip[0],
            l_weights: lip[1],
            l_time: lip[2],
        });
        if iter == 1 || iter % 50 == 0 || iter == cfg.iters {
            info!("iter {iter}: loss {accepted_loss:.6e}, T {:.6}", params.stop_time);
        }
    }
    Ok(TrainResult { params, history })
}
