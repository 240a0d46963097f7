//! Scalar activation functions `phi = rho'` applied to filter responses.
//!
//! The learnable family is a quadratic B-spline expansion with `N_w`
//! equidistant centers on `[-1, 1]`. Two closed-form activations are provided
//! for analytic problems and oracles.

use std::sync::OnceLock;

use crate::error::{Error, Result};

/// A scalar activation with its first two derivatives and potential `rho`
/// (an antiderivative of `phi`).
pub trait Activation: Send + Sync {
    fn phi(&self, y: f64) -> f64;
    fn dphi(&self, y: f64) -> f64;
    fn d2phi(&self, y: f64) -> f64;
    fn potential(&self, y: f64) -> f64;
}

/// Centered quadratic B-spline on support `(-1.5, 1.5)`, unit integral.
#[inline]
pub fn bspline2(t: f64) -> f64 {
    let a = t.abs();
    if a < 0.5 {
        0.75 - a * a
    } else if a < 1.5 {
        let d = 1.5 - a;
        0.5 * d * d
    } else {
        0.0
    }
}

#[inline]
pub fn bspline2_d1(t: f64) -> f64 {
    let a = t.abs();
    if a < 0.5 {
        -2.0 * t
    } else if a < 1.5 {
        -(1.5 - a) * t.signum()
    } else {
        0.0
    }
}

/// Piecewise-constant second derivative (the a.e. derivative of [`bspline2_d1`]).
#[inline]
pub fn bspline2_d2(t: f64) -> f64 {
    let a = t.abs();
    if a < 0.5 {
        -2.0
    } else if a < 1.5 {
        1.0
    } else {
        0.0
    }
}

pub const DEFAULT_NUM_WEIGHTS: usize = 63;

/// `phi(y) = sum_j w_j B2((y - mu_j) / delta)` with `mu_j = -1 + j delta`,
/// `delta = 2 / (N_w - 1)` and zero-based `j`.
#[derive(Debug, Clone)]
pub struct ActivationSpline {
    weights: Vec<f64>,
    delta: f64,
    potential: OnceLock<PotentialTable>,
}

impl PartialEq for ActivationSpline {
    fn eq(&self, other: &Self) -> bool {
        self.weights == other.weights
    }
}

impl ActivationSpline {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.len() < 2 {
            return Err(Error::invalid(format!(
                "activation spline needs at least 2 weights, got {}",
                weights.len()
            )));
        }
        let delta = 2.0 / (weights.len() - 1) as f64;
        Ok(Self {
            weights,
            delta,
            potential: OnceLock::new(),
        })
    }

    pub fn zeros(num_weights: usize) -> Result<Self> {
        Self::new(vec![0.0; num_weights])
    }

    /// Weights `w_j = slope * mu_j`, which reproduce `slope * y` exactly on
    /// `[-1 + delta / 2, 1 - delta / 2]`.
    pub fn init_linear(num_weights: usize, slope: f64) -> Result<Self> {
        let mut s = Self::zeros(num_weights)?;
        for j in 0..num_weights {
            s.weights[j] = slope * s.center(j);
        }
        Ok(s)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn num_weights(&self) -> usize {
        self.weights.len()
    }

    pub fn spacing(&self) -> f64 {
        self.delta
    }

    pub fn center(&self, j: usize) -> f64 {
        -1.0 + j as f64 * self.delta
    }

    /// `|y|` beyond this bound evaluates to zero.
    pub fn support_radius(&self) -> f64 {
        1.0 + 1.5 * self.delta
    }

    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.weights.len() {
            return Err(Error::invalid("weight count changed"));
        }
        Self::new(weights)
    }

    pub fn basis(&self, j: usize, y: f64) -> f64 {
        bspline2((y - self.center(j)) / self.delta)
    }

    pub fn basis_d1(&self, j: usize, y: f64) -> f64 {
        bspline2_d1((y - self.center(j)) / self.delta) / self.delta
    }

    pub fn basis_d2(&self, j: usize, y: f64) -> f64 {
        bspline2_d2((y - self.center(j)) / self.delta) / (self.delta * self.delta)
    }

    /// Calls `f(j, t)` for every basis index whose support contains `y`,
    /// with `t = (y - mu_j) / delta`.
    #[inline]
    pub fn for_each_active(&self, y: f64, mut f: impl FnMut(usize, f64)) {
        let u = (y + 1.0) / self.delta;
        if !u.is_finite() {
            return;
        }
        let nearest = (u + 0.5).floor();
        let last = (self.weights.len() - 1) as f64;
        let lo = (nearest - 1.0).max(0.0);
        let hi = (nearest + 1.0).min(last);
        if lo > hi {
            return;
        }
        for j in lo as usize..=hi as usize {
            let t = u - j as f64;
            if t.abs() < 1.5 {
                f(j, t);
            }
        }
    }

    fn table(&self) -> &PotentialTable {
        self.potential.get_or_init(|| PotentialTable::build(self))
    }
}

impl Activation for ActivationSpline {
    fn phi(&self, y: f64) -> f64 {
        let mut acc = 0.0;
        self.for_each_active(y, |j, t| acc += self.weights[j] * bspline2(t));
        acc
    }

    fn dphi(&self, y: f64) -> f64 {
        let mut acc = 0.0;
        self.for_each_active(y, |j, t| acc += self.weights[j] * bspline2_d1(t));
        acc / self.delta
    }

    fn d2phi(&self, y: f64) -> f64 {
        let mut acc = 0.0;
        self.for_each_active(y, |j, t| acc += self.weights[j] * bspline2_d2(t));
        acc / (self.delta * self.delta)
    }

    /// Antiderivative of `phi`, shifted so its minimum over the tabulated
    /// range `[-1 - 1.5 delta, 1 + 1.5 delta]` is zero.
    fn potential(&self, y: f64) -> f64 {
        self.table().eval(self, y)
    }
}

/// Cumulative Simpson integral of `phi` on a grid of step `delta / 8`; every
/// spline knot is a grid node, so each panel integrates a single quadratic
/// piece exactly.
#[derive(Debug, Clone)]
struct PotentialTable {
    start: f64,
    step: f64,
    values: Vec<f64>,
}

const TABLE_SUBDIV: usize = 8;

fn simpson(phi: &ActivationSpline, a: f64, b: f64) -> f64 {
    (b - a) / 6.0 * (phi.phi(a) + 4.0 * phi.phi(0.5 * (a + b)) + phi.phi(b))
}

impl PotentialTable {
    fn build(spline: &ActivationSpline) -> Self {
        let delta = spline.delta;
        let start = -1.0 - 1.5 * delta;
        let step = delta / TABLE_SUBDIV as f64;
        // (N_w - 1) + 3 spacings cover the tabulated range
        let cells = (spline.weights.len() + 2) * TABLE_SUBDIV;
        let mut values = Vec::with_capacity(cells + 1);
        let mut acc = 0.0;
        values.push(0.0);
        for c in 0..cells {
            let a = start + c as f64 * step;
            acc += simpson(spline, a, a + step);
            values.push(acc);
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        for v in &mut values {
            *v -= min;
        }
        Self { start, step, values }
    }

    fn eval(&self, spline: &ActivationSpline, y: f64) -> f64 {
        let last = self.values.len() - 1;
        let end = self.start + last as f64 * self.step;
        if y.is_nan() {
            return f64::NAN;
        }
        if y <= self.start {
            return self.values[0];
        }
        if y >= end {
            return self.values[last];
        }
        let cell = (((y - self.start) / self.step).floor() as usize).min(last - 1);
        let a = self.start + cell as f64 * self.step;
        self.values[cell] + simpson(spline, a, y)
    }
}

/// `phi(y) = y / sqrt(y^2 + 1)` with potential `sqrt(y^2 + 1)`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RationalActivation;

impl Activation for RationalActivation {
    fn phi(&self, y: f64) -> f64 {
        y / (y * y + 1.0).sqrt()
    }

    fn dphi(&self, y: f64) -> f64 {
        (y * y + 1.0).powf(-1.5)
    }

    fn d2phi(&self, y: f64) -> f64 {
        -3.0 * y * (y * y + 1.0).powf(-2.5)
    }

    fn potential(&self, y: f64) -> f64 {
        (y * y + 1.0).sqrt()
    }
}

/// `phi(y) = slope * y`, potential `slope * y^2 / 2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearActivation {
    pub slope: f64,
}

impl Activation for LinearActivation {
    fn phi(&self, y: f64) -> f64 {
        self.slope * y
    }

    fn dphi(&self, _y: f64) -> f64 {
        self.slope
    }

    fn d2phi(&self, _y: f64) -> f64 {
        0.0
    }

    fn potential(&self, y: f64) -> f64 {
        0.5 * self.slope * y * y
    }
}
