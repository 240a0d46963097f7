//! The transformed state equation `x' = T f(x)` on `t in (0, 1)`, its explicit
//! Euler and Heun discretizations, the matching backward adjoint recursions
//! and a step-size stability check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::activations::Activation;
use crate::dataops::DataOperator;
use crate::error::{Error, Result};
use crate::foe::KernelBank;
use crate::imgcore::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scheme {
    #[default]
    Euler,
    Heun,
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(Scheme::Euler),
            "heun" => Ok(Scheme::Heun),
            other => Err(Error::invalid(format!("unknown scheme '{other}'"))),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Euler => "euler",
            Scheme::Heun => "heun",
        })
    }
}

/// Everything that defines one flow: stopping time, regularizer, data
/// operator, data `b` and initial state `x0`.
pub struct ControlSet<'a, A> {
    pub stop_time: f64,
    pub bank: &'a KernelBank<A>,
    pub op: &'a DataOperator,
    pub b: &'a Image,
    pub x0: &'a Image,
}

impl<A> Clone for ControlSet<'_, A> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<A> Copy for ControlSet<'_, A> {}

impl<'a, A: Activation> ControlSet<'a, A> {
    pub fn new(
        stop_time: f64,
        bank: &'a KernelBank<A>,
        op: &'a DataOperator,
        b: &'a Image,
        x0: &'a Image,
    ) -> Result<Self> {
        if !(stop_time >= 0.0) || !stop_time.is_finite() {
            return Err(Error::invalid(format!("stopping time must be >= 0, got {stop_time}")));
        }
        x0.check_dims(b)?;
        Ok(Self {
            stop_time,
            bank,
            op,
            b,
            x0,
        })
    }

    pub fn with_stop_time(self, stop_time: f64) -> Result<Self> {
        Self::new(stop_time, self.bank, self.op, self.b, self.x0)
    }

    /// `f(x) = -lambda_D A^T (A x - b) - sum_k K_k^T phi_k(K_k x)`, without the
    /// factor `T`.
    pub fn rhs(&self, x: &Image) -> Result<Image> {
        x.check_dims(self.x0)?;
        Ok(self.rhs_unchecked(x))
    }

    pub(crate) fn rhs_unchecked(&self, x: &Image) -> Image {
        let mut f = self.bank.grad(x);
        let mut ax = self.op.apply(x);
        ax.add_scaled(-1.0, self.b);
        f.add_scaled(self.op.weight(), &self.op.apply_adjoint(&ax));
        f.scale(-1.0);
        f
    }

    /// `g(x, p) = sum_k K_k^T phi_k'(K_k x) K_k p + lambda_D A^T A p`, the
    /// negated Jacobian of `f` applied to `p`.
    pub fn adjoint_rhs(&self, x: &Image, p: &Image) -> Image {
        let mut g = self.bank.jvp(x, p);
        g.add_scaled(1.0, &self.op.normal(p));
        g
    }
}

/// `f_rhs` as a free function.
pub fn f_rhs<A: Activation>(x: &Image, c: &ControlSet<'_, A>) -> Result<Image> {
    c.rhs(x)
}

/// States `x_0..x_S` on the nodes `t_s = s / S`, optionally with adjoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub scheme: Scheme,
    pub stop_time: f64,
    pub states: Vec<Image>,
    pub adjoints: Option<Vec<Image>>,
}

impl Trajectory {
    pub fn depth(&self) -> usize {
        self.states.len() - 1
    }

    pub fn final_state(&self) -> &Image {
        self.states.last().expect("trajectory has at least one state")
    }

    pub fn step_size(&self) -> f64 {
        self.stop_time / self.depth() as f64
    }

    pub fn node_time(&self, s: usize) -> f64 {
        s as f64 / self.depth() as f64
    }
}

fn check_depth(depth: usize) -> Result<()> {
    if depth == 0 {
        return Err(Error::invalid("depth S must be at least 1"));
    }
    Ok(())
}

fn ensure_finite(img: &Image, step: usize) -> Result<()> {
    if img.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { step })
    }
}

/// One explicit step from `x` with step size `h`.
pub(crate) fn scheme_step<A: Activation>(c: &ControlSet<'_, A>, scheme: Scheme, x: &Image, h: f64) -> Image {
    let f0 = c.rhs_unchecked(x);
    match scheme {
        Scheme::Euler => x.plus_scaled(h, &f0),
        Scheme::Heun => {
            let predictor = x.plus_scaled(h, &f0);
            let f1 = c.rhs_unchecked(&predictor);
            let mut next = x.plus_scaled(0.5 * h, &f0);
            next.add_scaled(0.5 * h, &f1);
            next
        }
    }
}

pub fn forward<A: Activation>(c: &ControlSet<'_, A>, scheme: Scheme, depth: usize) -> Result<Trajectory> {
    check_depth(depth)?;
    let h = c.stop_time / depth as f64;
    let mut states = Vec::with_capacity(depth + 1);
    states.push(c.x0.clone());
    for s in 0..depth {
        let next = scheme_step(c, scheme, &states[s], h);
        ensure_finite(&next, s + 1)?;
        states.push(next);
    }
    Ok(Trajectory {
        scheme,
        stop_time: c.stop_time,
        states,
        adjoints: None,
    })
}

/// `x_{s+1} = x_s + (T / S) f(x_s)`
pub fn forward_euler<A: Activation>(c: &ControlSet<'_, A>, depth: usize) -> Result<Trajectory> {
    forward(c, Scheme::Euler, depth)
}

/// `x_{s+1} = x_s + (T / 2S) (f(x_s) + f(x_s + (T / S) f(x_s)))`
pub fn forward_heun<A: Activation>(c: &ControlSet<'_, A>, depth: usize) -> Result<Trajectory> {
    forward(c, Scheme::Heun, depth)
}

/// Terminal condition `p(1) = x_g - x(1)`.
pub fn adjoint_seed(final_state: &Image, target: &Image) -> Result<Image> {
    final_state.check_dims(target)?;
    Ok(target.sub(final_state))
}

fn adjoint_with<A: Activation>(
    traj: &Trajectory,
    c: &ControlSet<'_, A>,
    target: &Image,
    expected: Scheme,
) -> Result<Trajectory> {
    if traj.scheme != expected {
        return Err(Error::invalid(format!(
            "{expected} adjoint requested for a {} trajectory",
            traj.scheme
        )));
    }
    let depth = traj.depth();
    check_depth(depth)?;
    let h = traj.stop_time / depth as f64;
    let mut adjoints = vec![Image::zeros(1, 1); depth + 1];
    adjoints[depth] = adjoint_seed(traj.final_state(), target)?;
    for s in (0..depth).rev() {
        let p_next = &adjoints[s + 1];
        let g_next = c.adjoint_rhs(&traj.states[s + 1], p_next);
        let p = match expected {
            Scheme::Euler => p_next.plus_scaled(-h, &g_next),
            Scheme::Heun => {
                let inner = p_next.plus_scaled(-h, &g_next);
                let g_mid = c.adjoint_rhs(&traj.states[s], &inner);
                let mut p = p_next.plus_scaled(-0.5 * h, &g_next);
                p.add_scaled(-0.5 * h, &g_mid);
                p
            }
        };
        ensure_finite(&p, s)?;
        adjoints[s] = p;
    }
    Ok(Trajectory {
        adjoints: Some(adjoints),
        ..traj.clone()
    })
}

/// `p_s = p_{s+1} - (T / S) g(x_{s+1}, p_{s+1})`
pub fn adjoint_euler<A: Activation>(traj: &Trajectory, c: &ControlSet<'_, A>, target: &Image) -> Result<Trajectory> {
    adjoint_with(traj, c, target, Scheme::Euler)
}

/// `p_s = p_{s+1} - (T / 2S) (g(x_{s+1}, p_{s+1}) + g(x_s, p_{s+1} - (T / S) g(x_{s+1}, p_{s+1})))`
pub fn adjoint_heun<A: Activation>(traj: &Trajectory, c: &ControlSet<'_, A>, target: &Image) -> Result<Trajectory> {
    adjoint_with(traj, c, target, Scheme::Heun)
}

/// Adjoint recursion matching the trajectory's scheme.
pub fn adjoint<A: Activation>(traj: &Trajectory, c: &ControlSet<'_, A>, target: &Image) -> Result<Trajectory> {
    adjoint_with(traj, c, target, traj.scheme)
}

const POWER_ITERS: usize = 50;
const POWER_SEED: u64 = 0x5eed;

/// Power iteration for the dominant eigenvalue of a symmetric operator.
fn power_iteration(dims: (usize, usize), apply: impl Fn(&Image) -> Image) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_SEED);
    let mut v = Image::from_fn(dims.0, dims.1, |_, _| rng.random_range(-1.0..1.0));
    v.scale(1.0 / v.norm());
    let mut lambda = 0.0;
    for _ in 0..POWER_ITERS {
        let w = apply(&v);
        lambda = v.dot(&w);
        let n = w.norm();
        if n == 0.0 || !n.is_finite() {
            return if n == 0.0 { 0.0 } else { lambda };
        }
        v = w;
        v.scale(1.0 / n);
    }
    lambda
}

/// Extreme eigenvalues `(dominant, opposite end)` of the Jacobian of `f` at `x`.
pub fn jacobian_extremes<A: Activation>(c: &ControlSet<'_, A>, x: &Image) -> (f64, f64) {
    let jac = |v: &Image| c.adjoint_rhs(x, v).scaled(-1.0);
    let dominant = power_iteration(x.dims(), jac);
    let shifted = power_iteration(x.dims(), |v: &Image| {
        let mut w = jac(v);
        w.add_scaled(-dominant, v);
        w
    });
    (dominant, dominant + shifted)
}

/// `max_s max_i |1 + (T / S) lambda_i(x_s)|` over the extreme Jacobian
/// eigenvalues; a value `<= 1` means the explicit step is stable.
pub fn stability_margin<A: Activation>(traj: &Trajectory, c: &ControlSet<'_, A>) -> f64 {
    let h = traj.step_size();
    traj.states
        .iter()
        .map(|x| {
            let (a, b) = jacobian_extremes(c, x);
            (1.0 + h * a).abs().max((1.0 + h * b).abs())
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::RationalActivation;
    use crate::foe::Expert;
    use crate::imgcore::Filter;

    fn scalar_problem() -> (KernelBank<RationalActivation>, DataOperator, Image, Image) {
        (
            KernelBank::empty(),
            DataOperator::identity(),
            Image::from_slice(&[0.0]).unwrap(),
            Image::from_slice(&[1.0]).unwrap(),
        )
    }

    pub(crate) fn toy_bank() -> KernelBank<RationalActivation> {
        // middle row [0, 1, -1]: (K x)_0 = x_0 - x_1 and (K x)_1 = 0 under reflection
        let filter = Filter::new(3, vec![0.0, 0.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0]).unwrap();
        KernelBank::new(vec![Expert {
            filter,
            activation: RationalActivation,
        }])
    }

    #[test]
    #[allow(clippy::approx_constant)] // 0.70711 is the printed value
    fn toy_rhs_at_initial_state() {
        let bank = toy_bank();
        let op = DataOperator::identity();
        let b = Image::from_slice(&[1.0, 0.5]).unwrap();
        let x0 = Image::from_slice(&[1.0, 2.0]).unwrap();
        let c = ControlSet::new(1.0, &bank, &op, &b, &x0).unwrap();
        let f = c.rhs(&x0).unwrap();
        // -(x0 - b) - K^T phi(K x0) with K x0 = (-1, 0)
        let s = 1.0 / 2f64.sqrt();
        assert!((f.data()[0] - s).abs() < 1e-12);
        assert!((f.data()[1] - (-1.5 - s)).abs() < 1e-12);
        assert!((f.data()[0] - 0.70711).abs() < 1e-5);
        assert!((f.data()[1] + 2.20711).abs() < 1e-5);
        assert!(c.rhs(&Image::zeros(3, 1)).is_err());
    }

    #[test]
    fn pure_decay_rhs_and_single_step() {
        let (bank, op, b, x0) = scalar_problem();
        let c = ControlSet::new(1.0, &bank, &op, &b, &x0).unwrap();
        assert_eq!(c.rhs(&x0).unwrap().data(), &[-1.0]);
        let t = forward_euler(&c, 1).unwrap();
        assert_eq!(t.final_state().data(), &[0.0]);
        assert_eq!(c.rhs(&Image::from_slice(&[0.0]).unwrap()).unwrap().data(), &[0.0]);
    }

    #[test]
    fn zero_time_is_constant() {
        let bank = toy_bank();
        let op = DataOperator::identity();
        let b = Image::from_slice(&[1.0, 0.5]).unwrap();
        let x0 = Image::from_slice(&[1.0, 2.0]).unwrap();
        let c = ControlSet::new(0.0, &bank, &op, &b, &x0).unwrap();
        for scheme in [Scheme::Euler, Scheme::Heun] {
            let t = forward(&c, scheme, 7).unwrap();
            assert!(t.states.iter().all(|s| s == &x0));
        }
        assert!(ControlSet::new(-1.0, &bank, &op, &b, &x0).is_err());
        assert!(forward(&c, Scheme::Euler, 0).is_err());
    }

    fn decay_errors(scheme: Scheme) -> Vec<f64> {
        let (bank, op, b, x0) = scalar_problem();
        let c = ControlSet::new(1.0, &bank, &op, &b, &x0).unwrap();
        [10, 100, 1000]
            .iter()
            .map(|&s| (forward(&c, scheme, s).unwrap().final_state().data()[0] - (-1f64).exp()).abs())
            .collect()
    }

    #[test]
    fn euler_first_order() {
        let e = decay_errors(Scheme::Euler);
        for w in e.windows(2) {
            let ratio = w[0] / w[1];
            assert!((8.0..12.0).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn heun_second_order() {
        let e = decay_errors(Scheme::Heun);
        for w in e.windows(2) {
            let ratio = w[0] / w[1];
            assert!((80.0..120.0).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn euler_and_heun_agree_on_toy() {
        let bank = toy_bank();
        let op = DataOperator::identity();
        let b = Image::from_slice(&[1.0, 0.5]).unwrap();
        let x0 = Image::from_slice(&[1.0, 2.0]).unwrap();
        let c = ControlSet::new(1.4, &bank, &op, &b, &x0).unwrap();
        let e = forward_euler(&c, 1000).unwrap();
        let h = forward_heun(&c, 1000).unwrap();
        let gap = e.final_state().sub(h.final_state()).norm();
        assert!(gap < 5e-3 && gap > 0.0, "gap {gap}");
    }

    #[test]
    fn divergence_reports_step() {
        let bank: KernelBank<RationalActivation> = KernelBank::empty();
        let op = DataOperator::identity().with_weight(1e200).unwrap();
        let b = Image::from_slice(&[0.0]).unwrap();
        let x0 = Image::from_slice(&[1.0]).unwrap();
        let c = ControlSet::new(1e150, &bank, &op, &b, &x0).unwrap();
        match forward_euler(&c, 10) {
            Err(Error::Diverged { step }) => assert!(step >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn reparametrization_matches_untransformed_flow() {
        let bank = toy_bank();
        let op = DataOperator::identity();
        let b = Image::from_slice(&[1.0, 0.5]).unwrap();
        let x0 = Image::from_slice(&[1.0, 2.0]).unwrap();
        let (t_stop, steps) = (2.3, 40);
        let c = ControlSet::new(t_stop, &bank, &op, &b, &x0).unwrap();
        let traj = forward_euler(&c, steps).unwrap();
        // untransformed flow x~' = f(x~) on (0, T) with step T / S
        let dt = t_stop / steps as f64;
        let mut x = x0.clone();
        for _ in 0..steps {
            let f = c.rhs(&x).unwrap();
            x.add_scaled(dt, &f);
        }
        assert_eq!(&x, traj.final_state());
    }

    #[test]
    fn euler_semigroup() {
        let bank = toy_bank();
        let op = DataOperator::identity();
        let b = Image::from_slice(&[1.0, 0.5]).unwrap();
        let x0 = Image::from_slice(&[1.0, 2.0]).unwrap();
        let c = ControlSet::new(1.5, &bank, &op, &b, &x0).unwrap();
        let full = forward_euler(&c, 30).unwrap();
        // restart from x_12 with the same step size for the remaining 18 steps
        let mid = full.states[12].clone();
        let c2 = ControlSet::new(1.5 * 18.0 / 30.0, &bank, &op, &b, &mid).unwrap();
        let rest = forward_euler(&c2, 18).unwrap();
        let h_full = 1.5 / 30.0;
        let h_rest = c2.stop_time / 18.0;
        if h_full == h_rest {
            assert_eq!(rest.final_state(), full.final_state());
        } else {
            assert!(rest.final_state().sub(full.final_state()).max_abs() < 1e-14);
        }
    }

    #[test]
    fn time_derivative_of_states() {
        let bank = toy_bank();
        let op = DataOperator::identity();
        let b = Image::from_slice(&[1.0, 0.5]).unwrap();
        let x0 = Image::from_slice(&[1.0, 2.0]).unwrap();
        let (t, s, eps) = (1.2, 1000, 1e-4);
        let c = ControlSet::new(t, &bank, &op, &b, &x0).unwrap();
        let base = forward_euler(&c, s).unwrap();
        let up = forward_euler(&c.with_stop_time(t + eps).unwrap(), s).unwrap();
        let dn = forward_euler(&c.with_stop_time(t - eps).unwrap(), s).unwrap();
        for k in [100, 500, 1000] {
            let fd = up.states[k].sub(&dn.states[k]).scaled(0.5 / eps);
            let expect = c.rhs(&base.states[k]).unwrap().scaled(base.node_time(k));
            assert!(fd.sub(&expect).norm() <= 1e-2 * expect.norm());
        }
    }

    #[test]
    fn adjoint_zero_when_target_reached() {
        let bank = toy_bank();
        let op = DataOperator::identity();
        let b = Image::from_slice(&[1.0, 0.5]).unwrap();
        let x0 = Image::from_slice(&[1.0, 2.0]).unwrap();
        let c = ControlSet::new(1.0, &bank, &op, &b, &x0).unwrap();
        for scheme in [Scheme::Euler, Scheme::Heun] {
            let t = forward(&c, scheme, 20).unwrap();
            let xg = t.final_state().clone();
            let a = adjoint(&t, &c, &xg).unwrap();
            assert!(a.adjoints.unwrap().iter().all(|p| p.max_abs() == 0.0));
        }
    }

    #[test]
    fn adjoint_closed_form_for_pure_decay() {
        let (bank, op, b, x0) = scalar_problem();
        let (t, s) = (0.8, 16);
        let c = ControlSet::new(t, &bank, &op, &b, &x0).unwrap();
        let xg = Image::from_slice(&[0.9]).unwrap();
        let h = t / s as f64;

        let traj = forward_euler(&c, s).unwrap();
        let a = adjoint_euler(&traj, &c, &xg).unwrap();
        let ps = a.adjoints.as_ref().unwrap();
        let seed = ps[s].data()[0];
        assert!((seed - (0.9 - traj.final_state().data()[0])).abs() < 1e-15);
        for (k, p) in ps.iter().enumerate() {
            let expect = (1.0 - h).powi((s - k) as i32) * seed;
            assert!((p.data()[0] - expect).abs() < 1e-14);
        }

        // Heun applies the factor 1 - h + h^2 / 2 per step
        let traj = forward_heun(&c, s).unwrap();
        let a = adjoint_heun(&traj, &c, &xg).unwrap();
        let ps = a.adjoints.as_ref().unwrap();
        let seed = ps[s].data()[0];
        for (k, p) in ps.iter().enumerate() {
            let expect = (1.0 - h + 0.5 * h * h).powi((s - k) as i32) * seed;
            assert!((p.data()[0] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn adjoint_scheme_mismatch() {
        let (bank, op, b, x0) = scalar_problem();
        let c = ControlSet::new(1.0, &bank, &op, &b, &x0).unwrap();
        let t = forward_euler(&c, 4).unwrap();
        assert!(adjoint_heun(&t, &c, &x0).is_err());
        assert!(adjoint_euler(&t, &c, &Image::zeros(2, 1)).is_err());
    }

    #[test]
    fn adjoint_seed_is_linear() {
        let a = Image::from_slice(&[1.0, 2.0]).unwrap();
        let b = Image::from_slice(&[0.5, -1.0]).unwrap();
        let g = Image::from_slice(&[3.0, 3.0]).unwrap();
        assert_eq!(adjoint_seed(&a, &a).unwrap().max_abs(), 0.0);
        let lhs = adjoint_seed(&a.plus_scaled(2.0, &b), &g.scaled(3.0)).unwrap();
        let rhs = adjoint_seed(&a, &g).unwrap().plus_scaled(-2.0, &b).plus_scaled(2.0, &g);
        assert!(lhs.sub(&rhs).max_abs() < 1e-14);
    }

    #[test]
    fn stability_margin_pure_decay() {
        let (bank, op, b, x0) = scalar_problem();
        let c = ControlSet::new(1.0, &bank, &op, &b, &x0).unwrap();
        let t = forward_euler(&c, 10).unwrap();
        assert!((stability_margin(&t, &c) - 0.9).abs() < 1e-12);
        let c = ControlSet::new(2.5, &bank, &op, &b, &x0).unwrap();
        let t = forward_euler(&c, 1).unwrap();
        assert!((stability_margin(&t, &c) - 1.5).abs() < 1e-12);
    }
}
