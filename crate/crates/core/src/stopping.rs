//! Optimal stopping time: the energy `J(T)`, the first-order condition,
//! sweeps over `T`, the second-order quadratic form and the 2-D toy problem.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::activations::{Activation, RationalActivation};
use crate::csvout;
use crate::dataops::DataOperator;
use crate::error::{Error, Result};
use crate::flow::{self, ControlSet, Scheme, Trajectory};
use crate::foe::{Expert, KernelBank};
use crate::imgcore::{Filter, Image};

/// `J = 1/2 ||x_S - x_g||^2`
pub fn energy_j(traj: &Trajectory, target: &Image) -> Result<f64> {
    let x = traj.final_state();
    x.check_dims(target)?;
    Ok(0.5 * x.sub(target).norm_sq())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IntegralRule {
    /// `(1 / (S + 1)) sum_{s=0}^{S}`, equal weight on every node.
    #[default]
    NodeAverage,
    /// Composite trapezoid, half weight on both endpoints.
    Trapezoid,
}

impl IntegralRule {
    fn weights(self, depth: usize) -> Vec<f64> {
        match self {
            IntegralRule::NodeAverage => vec![1.0 / (depth + 1) as f64; depth + 1],
            IntegralRule::Trapezoid => {
                let h = 1.0 / depth as f64;
                let mut w = vec![h; depth + 1];
                w[0] *= 0.5;
                w[depth] *= 0.5;
                w
            }
        }
    }
}

/// `-(1 / (S + 1)) sum_s <p_s, f(x_s)>`, the derivative of `J` with respect to
/// `T`; zero at a stationary stopping time.
pub fn first_order_value<A: Activation>(traj: &Trajectory, c: &ControlSet<'_, A>) -> Result<f64> {
    first_order_value_with(traj, c, IntegralRule::default())
}

pub fn first_order_value_with<A: Activation>(
    traj: &Trajectory,
    c: &ControlSet<'_, A>,
    rule: IntegralRule,
) -> Result<f64> {
    if !(traj.stop_time > 0.0) {
        return Err(Error::invalid(format!(
            "first-order value needs T > 0, got {}",
            traj.stop_time
        )));
    }
    let adjoints = traj
        .adjoints
        .as_ref()
        .ok_or_else(|| Error::invalid("trajectory has no adjoint states"))?;
    let weights = rule.weights(traj.depth());
    let mut acc = 0.0;
    for ((x, p), w) in traj.states.iter().zip(adjoints).zip(weights) {
        acc += w * p.dot(&c.rhs(x)?);
    }
    Ok(-acc)
}

/// How many steps to use at stopping time `T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DepthRule {
    Fixed(usize),
    /// `S = max(2, round(ratio * T))`, keeping the step size `T / S` constant.
    Ratio(f64),
}

impl DepthRule {
    pub fn depth(self, stop_time: f64) -> usize {
        match self {
            DepthRule::Fixed(s) => s.max(1),
            DepthRule::Ratio(r) => ((r * stop_time).round() as usize).max(2),
        }
    }
}

/// `J(T)` and the first-order value evaluated on a grid of stopping times.
#[derive(Debug, Clone, PartialEq)]
pub struct StoppingCurve {
    pub t_values: Vec<f64>,
    pub energies: Vec<f64>,
    pub foc: Vec<f64>,
}

impl StoppingCurve {
    pub fn new(t_values: Vec<f64>, energies: Vec<f64>, foc: Vec<f64>) -> Result<Self> {
        if t_values.len() != energies.len() || t_values.len() != foc.len() {
            return Err(Error::invalid("stopping curve arrays differ in length"));
        }
        check_grid(&t_values)?;
        Ok(Self {
            t_values,
            energies,
            foc,
        })
    }

    pub fn len(&self) -> usize {
        self.t_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_values.is_empty()
    }

    /// Grid index of the smallest energy (first one on ties).
    pub fn argmin(&self) -> usize {
        let mut best = 0;
        for (i, &e) in self.energies.iter().enumerate() {
            if e < self.energies[best] {
                best = i;
            }
        }
        best
    }

    pub fn argmin_t(&self) -> f64 {
        self.t_values[self.argmin()]
    }

    /// First cell `[T_i, T_{i+1}]` where the first-order value goes from
    /// negative to non-negative, i.e. where `J` turns from falling to rising.
    pub fn crossing_cell(&self) -> Option<usize> {
        self.foc.windows(2).position(|w| w[0] < 0.0 && w[1] >= 0.0)
    }

    /// Linearly interpolated zero of the first-order value inside
    /// [`crossing_cell`](Self::crossing_cell); a grid point with `foc == 0`
    /// at the start of the grid wins.
    pub fn zero_crossing(&self) -> Option<f64> {
        if self.foc.first() == Some(&0.0) {
            return Some(self.t_values[0]);
        }
        let i = self.crossing_cell()?;
        let (f0, f1) = (self.foc[i], self.foc[i + 1]);
        let (t0, t1) = (self.t_values[i], self.t_values[i + 1]);
        if f1 == 0.0 {
            return Some(t1);
        }
        Some(t0 - f0 * (t1 - t0) / (f1 - f0))
    }

    /// Cell of the energy minimizer: the grid cell whose endpoint set
    /// contains the argmin, oriented like [`crossing_cell`](Self::crossing_cell).
    pub fn argmin_cells(&self) -> Vec<usize> {
        let i = self.argmin();
        let mut cells = Vec::new();
        if i > 0 {
            cells.push(i - 1);
        }
        if i + 1 < self.len() {
            cells.push(i);
        }
        cells
    }

    /// Whether the foc sign change and the energy minimizer land in the same
    /// grid cell.
    pub fn crossing_brackets_minimum(&self) -> bool {
        self.crossing_cell().is_some_and(|c| self.argmin_cells().contains(&c))
    }

    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        csvout::header(w, &["T", "J", "foc"])?;
        for i in 0..self.len() {
            csvout::row(w, &[self.t_values[i], self.energies[i], self.foc[i]])?;
        }
        Ok(())
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::invalid("stopping-time grid is empty"));
    }
    if grid.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
        return Err(Error::invalid("stopping-time grid must be positive and finite"));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("stopping-time grid must be strictly increasing"));
    }
    Ok(())
}

/// State and adjoint trajectory at one stopping time, with `J` and the
/// first-order value.
#[derive(Debug, Clone)]
pub struct StoppingPoint {
    pub trajectory: Trajectory,
    pub energy: f64,
    pub foc: f64,
}

pub fn evaluate<A: Activation>(
    c: &ControlSet<'_, A>,
    scheme: Scheme,
    depth: usize,
    target: &Image,
    rule: IntegralRule,
) -> Result<StoppingPoint> {
    let traj = flow::forward(c, scheme, depth)?;
    let traj = flow::adjoint(&traj, c, target)?;
    Ok(StoppingPoint {
        energy: energy_j(&traj, target)?,
        foc: first_order_value_with(&traj, c, rule)?,
        trajectory: traj,
    })
}

/// Evaluates `J` and the first-order value at every `T` of the grid; the
/// stopping time of `c` is ignored.
pub fn sweep_t<A: Activation>(
    c: &ControlSet<'_, A>,
    grid: &[f64],
    scheme: Scheme,
    depth: DepthRule,
    target: &Image,
) -> Result<StoppingCurve> {
    check_grid(grid)?;
    let points: Vec<(f64, f64)> = grid
        .par_iter()
        .map(|&t| {
            let ct = c.with_stop_time(t)?;
            let p = evaluate(&ct, scheme, depth.depth(t), target, IntegralRule::default())?;
            Ok((p.energy, p.foc))
        })
        .collect::<Result<_>>()?;
    let (energies, foc) = points.into_iter().unzip();
    StoppingCurve::new(grid.to_vec(), energies, foc)
}

/// Gauss-Legendre nodes and weights mapped to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadrature {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Quadrature {
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&t, &w)| w * f(t)).sum()
    }
}

pub const DEFAULT_QUADRATURE_POINTS: usize = 21;

/// Legendre polynomial `P_n(x)` and its derivative by the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

pub fn gauss_legendre(n: usize) -> Result<Quadrature> {
    if n == 0 {
        return Err(Error::invalid("quadrature needs at least one point"));
    }
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, dp) = legendre(n, x);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        // map [-1, 1] to [0, 1]; node i ascends from the left end
        nodes[i] = 0.5 * (1.0 - x);
        nodes[n - 1 - i] = 0.5 * (1.0 + x);
        weights[i] = 0.5 * w;
        weights[n - 1 - i] = 0.5 * w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.5;
    }
    Ok(Quadrature { nodes, weights })
}

/// Linear interpolation of node values `v_0..v_S` at `t in [0, 1]`.
fn interp(values: &[Image], t: f64) -> Image {
    let depth = values.len() - 1;
    let u = (t * depth as f64).clamp(0.0, depth as f64);
    let s = (u.floor() as usize).min(depth - 1);
    let frac = u - s as f64;
    let mut out = values[s].scaled(1.0 - frac);
    out.add_scaled(frac, &values[s + 1]);
    out
}

/// The second-order quadratic form at a stationary `T`, together with the
/// sensitivity norm used to normalize it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SecondOrderReport {
    /// Integral part plus `<x(1), x(1)>`; positive at a strict local minimum.
    pub value: f64,
    pub terminal: f64,
    /// `||x||_{H^1}^2 = int |x|^2 + int |x'|^2` of the sensitivity.
    pub sensitivity_h1_sq: f64,
    /// `value / (1 + ||x||_{H^1}^2)`, the constant of the sufficient condition.
    pub ratio: f64,
}

/// Sensitivity `x' = T J_f(x_bar) x + f(x_bar)`, `x(0) = 0`, by forward Euler
/// on the grid of `states`.
fn sensitivity<A: Activation>(c: &ControlSet<'_, A>, states: &[Image]) -> Result<Vec<Image>> {
    let depth = states.len() - 1;
    let dt = 1.0 / depth as f64;
    let mut z = Image::zeros(states[0].width(), states[0].height());
    let mut out = Vec::with_capacity(depth + 1);
    out.push(z.clone());
    for (s, x) in states[..depth].iter().enumerate() {
        let mut rate = c.adjoint_rhs(x, &z).scaled(-c.stop_time);
        rate.add_scaled(1.0, &c.rhs(x)?);
        z.add_scaled(dt, &rate);
        if !z.is_finite() {
            return Err(Error::Diverged { step: s + 1 });
        }
        out.push(z.clone());
    }
    Ok(out)
}

/// Quadratic form `int <p, T K^T D^2Phi(Kx_bar)(Kx, Kx) + 2 K^T DPhi(Kx_bar) K x
/// + 2 lambda_D A^T A x> dt + <x(1), x(1)>` along the Euler state and adjoint
/// at `c.stop_time`.
pub fn second_order_form<A: Activation>(
    c: &ControlSet<'_, A>,
    depth: usize,
    target: &Image,
    quad: &Quadrature,
) -> Result<SecondOrderReport> {
    let traj = flow::forward_euler(c, depth)?;
    let traj = flow::adjoint_euler(&traj, c, target)?;
    let adjoints = traj.adjoints.as_ref().expect("adjoints computed");
    let z = sensitivity(c, &traj.states)?;

    let mut integral = 0.0;
    for (&t, &w) in quad.nodes.iter().zip(&quad.weights) {
        let x = interp(&traj.states, t);
        let p = interp(adjoints, t);
        let zt = interp(&z, t);
        let resp = c.bank.responses(&x);
        let mut v = resp.bilinear(&zt).scaled(c.stop_time);
        v.add_scaled(2.0, &resp.jvp(&zt));
        v.add_scaled(2.0, &c.op.normal(&zt));
        integral += w * p.dot(&v);
    }
    let terminal = z[depth].norm_sq();
    let value = integral + terminal;

    // z is piecewise linear in t, so int |z'|^2 is exact; int |z|^2 by trapezoid
    let dt = 1.0 / depth as f64;
    let mut l2 = 0.0;
    let mut h1 = 0.0;
    for s in 0..depth {
        l2 += 0.5 * dt * (z[s].norm_sq() + z[s + 1].norm_sq());
        h1 += z[s + 1].sub(&z[s]).norm_sq() / dt;
    }
    let sensitivity_h1_sq = l2 + h1;
    Ok(SecondOrderReport {
        value,
        terminal,
        sensitivity_h1_sq,
        ratio: value / (1.0 + sensitivity_h1_sq),
    })
}

/// The two-dimensional toy problem: `x0 = (1, 2)`, `x_g = (3/2, 1/2)`,
/// `b = (1, 1/2)`, `A = Id`, `K = [[1, -1], [0, 0]]`, `phi(y) = y / sqrt(y^2 + 1)`.
pub struct Toy2d {
    pub bank: KernelBank<RationalActivation>,
    pub op: DataOperator,
    pub b: Image,
    pub x0: Image,
    pub target: Image,
}

pub const TOY_DEPTH: usize = 100;

impl Default for Toy2d {
    fn default() -> Self {
        Self::new()
    }
}

impl Toy2d {
    pub fn new() -> Self {
        // a 2x1 image with reflecting boundary: the middle row [0, 1, -1]
        // yields (K x)_0 = x_0 - x_1 and (K x)_1 = x_1 - x_1 = 0
        let filter = Filter::new(3, vec![0.0, 0.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0]).expect("odd filter size");
        Self {
            bank: KernelBank::new(vec![Expert {
                filter,
                activation: RationalActivation,
            }]),
            op: DataOperator::identity(),
            b: Image::from_slice(&[1.0, 0.5]).expect("non-empty"),
            x0: Image::from_slice(&[1.0, 2.0]).expect("non-empty"),
            target: Image::from_slice(&[1.5, 0.5]).expect("non-empty"),
        }
    }

    pub fn control(&self, stop_time: f64) -> Result<ControlSet<'_, RationalActivation>> {
        ControlSet::new(stop_time, &self.bank, &self.op, &self.b, &self.x0)
    }

    /// `{0.1, 0.15, ..., 3}`
    pub fn grid() -> Vec<f64> {
        (2..=60).map(|k| k as f64 * 0.05).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Toy2dReport {
    pub curve: StoppingCurve,
    pub trajectories: Vec<Trajectory>,
    pub t_bar: f64,
    pub second_order: SecondOrderReport,
}

pub fn run_toy2d() -> Result<Toy2dReport> {
    let toy = Toy2d::new();
    let c = toy.control(1.0)?;
    let grid = Toy2d::grid();
    let curve = sweep_t(&c, &grid, Scheme::Euler, DepthRule::Fixed(TOY_DEPTH), &toy.target)?;
    let trajectories = grid
        .par_iter()
        .map(|&t| flow::forward_euler(&c.with_stop_time(t)?, TOY_DEPTH))
        .collect::<Result<Vec<_>>>()?;
    let t_bar = curve.argmin_t();
    let quad = gauss_legendre(DEFAULT_QUADRATURE_POINTS)?;
    let second_order = second_order_form(&c.with_stop_time(t_bar)?, TOY_DEPTH, &toy.target, &quad)?;
    Ok(Toy2dReport {
        curve,
        trajectories,
        t_bar,
        second_order,
    })
}

impl Toy2dReport {
    pub fn write_trajectories_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        csvout::header(w, &["T", "t", "x1", "x2"])?;
        for traj in &self.trajectories {
            for (s, x) in traj.states.iter().enumerate() {
                csvout::row(w, &[traj.stop_time, traj.node_time(s), x.data()[0], x.data()[1]])?;
            }
        }
        Ok(())
    }

    pub fn write_summary_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        let so = &self.second_order;
        csvout::header(
            w,
            &[
                "T_bar",
                "foc_zero",
                "second_order_value",
                "sensitivity_h1_sq",
                "second_order_ratio",
            ],
        )?;
        let zero = self.curve.zero_crossing().unwrap_or(f64::NAN);
        csvout::row(w, &[self.t_bar, zero, so.value, so.sensitivity_h1_sq, so.ratio])
    }

    /// Writes `curve.csv`, `trajectories.csv` and `summary.csv` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, f: &dyn Fn(&mut BufWriter<File>) -> std::io::Result<()>| {
            let path = dir.join(name);
            let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(file);
            f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(&path, e))
        };
        write("curve.csv", &|w| self.curve.write_csv(w))?;
        write("trajectories.csv", &|w| self.write_trajectories_csv(w))?;
        write("summary.csv", &|w| self.write_summary_csv(w))
    }
}
