//! Generalized eigenpairs `sum_k K_k^T Phi_k(K_k v) = lambda v` of the
//! regularizer gradient, found by minimizing the squared residual.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::activations::Activation;
use crate::csvout;
use crate::error::{Error, Result};
use crate::foe::KernelBank;
use crate::imgcore::{save_pgm, Image, PgmDepth};

/// Pairs above this residual are flagged as not converged.
pub const RESIDUAL_GATE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct EigenPair {
    pub v: Image,
    pub lambda: f64,
    /// `||G(v) - lambda v||_2`
    pub residual: f64,
    pub converged: bool,
    pub iterations: usize,
}

fn check_nonzero(v: &Image) -> Result<f64> {
    let n2 = v.norm_sq();
    if n2 == 0.0 || !n2.is_finite() {
        return Err(Error::invalid("eigenfunction candidate must be non-zero and finite"));
    }
    Ok(n2)
}

/// `Lambda(v) = <G(v), v> / ||v||^2` with `G = sum_k K_k^T Phi_k(K_k .)`.
pub fn rayleigh<A: Activation>(bank: &KernelBank<A>, v: &Image) -> Result<f64> {
    let n2 = check_nonzero(v)?;
    Ok(bank.grad(v).dot(v) / n2)
}

/// Residual vector `G(v) - Lambda(v) v` and the quotient.
fn residual_vec<A: Activation>(bank: &KernelBank<A>, v: &Image) -> Result<(Image, f64)> {
    let n2 = check_nonzero(v)?;
    let g = bank.grad(v);
    let lambda = g.dot(v) / n2;
    let mut r = g;
    r.add_scaled(-lambda, v);
    Ok((r, lambda))
}

/// `||G(v) - Lambda(v) v||^2`
pub fn residual_loss<A: Activation>(bank: &KernelBank<A>, v: &Image) -> Result<f64> {
    Ok(residual_vec(bank, v)?.0.norm_sq())
}

/// `2 (J_G(v) r - Lambda r)`; the term through `Lambda` vanishes because
/// `<v, r> = 0`.
pub fn residual_loss_grad<A: Activation>(bank: &KernelBank<A>, v: &Image) -> Result<(f64, Image)> {
    let n2 = check_nonzero(v)?;
    let resp = bank.responses(v);
    let g = resp.grad();
    let lambda = g.dot(v) / n2;
    let mut r = g;
    r.add_scaled(-lambda, v);
    let mut grad = resp.jvp(&r);
    grad.add_scaled(-lambda, &r);
    grad.scale(2.0);
    Ok((r.norm_sq(), grad))
}

/// Per-step intensity multiplier `1 - lambda T / S` of an eigenfunction
/// under one regularizer Euler step.
pub fn contrast_factor(lambda: f64, stop_time: f64, depth: usize) -> f64 {
    1.0 - lambda * stop_time / depth.max(1) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralConfig {
    pub count: usize,
    pub size: usize,
    pub iters: usize,
    pub seed: u64,
    /// Stop a minimization once the residual drops below this value.
    pub tol: f64,
    pub lipschitz_init: f64,
    pub max_backtracks: usize,
    /// Keep `||v|| = ||v0||` during the descent.
    pub fixed_norm: bool,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self {
            count: 64,
            size: 127,
            iters: 10_000,
            seed: 0,
            tol: 1e-7,
            lipschitz_init: 1.0,
            max_backtracks: 60,
            fixed_norm: false,
        }
    }
}

/// Random patch of `source`, mean removed, windowed by a centered Gaussian with
/// standard deviation `size / 4`, mean removed again.
pub fn initial_guess(source: &Image, size: usize, rng: &mut impl Rng) -> Result<Image> {
    if source.width() < size || source.height() < size {
        return Err(Error::invalid(format!(
            "{size}x{size} patch does not fit a {}x{} source",
            source.width(),
            source.height()
        )));
    }
    let x0 = rng.random_range(0..=source.width() - size);
    let y0 = rng.random_range(0..=source.height() - size);
    let mut v = source.crop(x0, y0, size, size)?;
    v.add_constant(-v.mean());
    let c = (size as f64 - 1.0) / 2.0;
    let s2 = 2.0 * (size as f64 / 4.0).powi(2);
    let mut w = Image::from_fn(size, size, |x, y| {
        let (dx, dy) = (x as f64 - c, y as f64 - c);
        v.get(x, y) * (-(dx * dx + dy * dy) / s2).exp()
    });
    w.add_constant(-w.mean());
    Ok(w)
}

fn to_sphere(v: &mut Image, radius: Option<f64>) {
    let Some(radius) = radius else { return };
    let n = v.norm();
    if n > 0.0 {
        v.scale(radius / n);
    }
}

/// Accelerated gradient descent on `residual_loss` with backtracking and a
/// function-value restart. With `fixed_norm` each iterate is projected back
/// onto the sphere `||v|| = ||v0||`.
pub fn minimize_residual<A: Activation>(bank: &KernelBank<A>, v0: &Image, cfg: &SpectralConfig) -> Result<EigenPair> {
    let radius = cfg.fixed_norm.then(|| v0.norm());
    check_nonzero(v0)?;
    let mut v = v0.clone();
    let mut v_prev = v.clone();
    let mut loss = residual_loss(bank, &v)?;
    let mut lip = cfg.lipschitz_init;
    let mut k = 0usize;
    let mut iterations = 0;
    let tol_sq = cfg.tol * cfg.tol;

    for it in 0..cfg.iters {
        if loss <= tol_sq {
            break;
        }
        iterations = it + 1;
        let beta = k as f64 / (k as f64 + 3.0);
        let mut y = v.plus_scaled(beta, &v.sub(&v_prev));
        to_sphere(&mut y, radius);
        let (loss_y, g) = residual_loss_grad(bank, &y)?;

        let mut step = None;
        for _ in 0..=cfg.max_backtracks {
            let mut cand = y.plus_scaled(-1.0 / lip, &g);
            to_sphere(&mut cand, radius);
            let d = cand.sub(&y);
            let loss_c = residual_loss(bank, &cand)?;
            if loss_c <= loss_y + g.dot(&d) + 0.5 * lip * d.norm_sq() {
                step = Some((cand, loss_c));
                break;
            }
            lip *= 2.0;
        }
        let Some((cand, loss_c)) = step else { break };
        lip *= 0.5;
        if loss_c > loss {
            // restart the momentum from the current iterate
            k = 0;
            v_prev = v.clone();
            continue;
        }
        v_prev = std::mem::replace(&mut v, cand);
        loss = loss_c;
        k += 1;
    }
    let (r, lambda) = residual_vec(bank, &v)?;
    let residual = r.norm();
    Ok(EigenPair {
        v,
        lambda,
        residual,
        converged: residual <= RESIDUAL_GATE,
        iterations,
    })
}

/// `cfg.count` independent minimizations from Gaussian-windowed patches of the
/// `sources`, sorted by ascending `lambda`.
pub fn solve_eigenpairs<A: Activation>(
    bank: &KernelBank<A>,
    sources: &[Image],
    cfg: &SpectralConfig,
) -> Result<Vec<EigenPair>> {
    if sources.is_empty() {
        return Err(Error::invalid("no patch sources"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let starts = (0..cfg.count)
        .map(|_| {
            let src = &sources[rng.random_range(0..sources.len())];
            initial_guess(src, cfg.size, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut pairs = starts
        .par_iter()
        .map(|v0| minimize_residual(bank, v0, cfg))
        .collect::<Result<Vec<_>>>()?;
    pairs.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
    Ok(pairs)
}

/// Writes `pairs.csv` (`index, lambda, residual, contrast_factor`) and one
/// normalized PGM per eigenfunction into `dir`.
pub fn write_pairs(dir: &Path, pairs: &[EigenPair], stop_time: f64, depth: usize) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("pairs.csv");
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    let mut body = || -> std::io::Result<()> {
        csvout::header(&mut w, &["index", "lambda", "residual", "contrast_factor"])?;
        for (i, p) in pairs.iter().enumerate() {
            csvout::row(
                &mut w,
                &[
                    i as f64,
                    p.lambda,
                    p.residual,
                    contrast_factor(p.lambda, stop_time, depth),
                ],
            )?;
        }
        w.flush()
    };
    body().map_err(|e| Error::io(&path, e))?;
    for (i, p) in pairs.iter().enumerate() {
        save_pgm(
            &p.v.normalized(),
            dir.join(format!("pair_{i:03}.pgm")),
            PgmDepth::Sixteen,
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::LinearActivation;
    use crate::foe::Expert;
    use crate::imgcore::Filter;

    fn linear_bank(seed: u64) -> KernelBank<LinearActivation> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut taps: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = taps.iter().sum::<f64>() / 9.0;
        taps.iter_mut().for_each(|t| *t -= m);
        KernelBank::new(vec![Expert {
            filter: Filter::new(3, taps).unwrap(),
            activation: LinearActivation { slope: 1.0 },
        }])
    }

    fn random_image(seed: u64, n: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn rayleigh_linear_case() {
        let bank = linear_bank(1);
        let v = random_image(2, 8);
        let k = crate::imgcore::conv2d(&v, &bank.experts()[0].filter, bank.boundary());
        let r = rayleigh(&bank, &v).unwrap();
        assert!((r - k.norm_sq() / v.norm_sq()).abs() < 1e-12);
        assert!(r >= 0.0);
        assert!((rayleigh(&bank, &v.scaled(2.0)).unwrap() - r).abs() < 1e-12);
        assert!(rayleigh(&bank, &Image::zeros(4, 4)).is_err());
        assert!(residual_loss(&bank, &Image::zeros(4, 4)).is_err());
    }

    #[test]
    fn rayleigh_minimizes_the_residual_in_lambda() {
        let bank = crate::foe::tests::random_bank(3, 2);
        let v = random_image(4, 10).scaled(0.3);
        let g = bank.grad(&v);
        let lambda = rayleigh(&bank, &v).unwrap();
        // 1-D quadratic ||g - l v||^2 has its minimizer at <g, v> / ||v||^2
        let q = |l: f64| g.plus_scaled(-l, &v).norm_sq();
        let a = v.norm_sq();
        let b = -2.0 * g.dot(&v);
        assert!((lambda - (-b / (2.0 * a))).abs() < 1e-12);
        assert!(q(lambda) <= q(lambda + 1e-3) && q(lambda) <= q(lambda - 1e-3));
        assert!(residual_loss(&bank, &v).unwrap() >= 0.0);
    }

    #[test]
    fn residual_gradient_matches_fd() {
        let bank = crate::foe::tests::random_bank(5, 2);
        let v = random_image(6, 9).scaled(0.4);
        let (_, g) = residual_loss_grad(&bank, &v).unwrap();
        let h = 1e-6;
        let mut an = Vec::new();
        let mut fd = Vec::new();
        for i in (0..v.len()).step_by(5) {
            let mut vp = v.clone();
            let mut vm = v.clone();
            vp.data_mut()[i] += h;
            vm.data_mut()[i] -= h;
            fd.push((residual_loss(&bank, &vp).unwrap() - residual_loss(&bank, &vm).unwrap()) / (2.0 * h));
            an.push(g.data()[i]);
        }
        let num: f64 = an.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
        assert!(num / den <= 1e-4, "rel err {}", num / den);
    }

    #[test]
    fn contrast_factor_cases() {
        assert_eq!(contrast_factor(0.0, 1.0, 20), 1.0);
        let c = contrast_factor(11.696, 1.08, 20);
        assert!((0.367..=0.369).contains(&c));
        assert!(contrast_factor(-0.5, 1.0, 10) > 1.0);
    }

    #[test]
    fn initial_guess_is_zero_mean_and_deterministic() {
        let src = crate::synth::synthetic_image(40, 40, 1);
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        let v = initial_guess(&src, 16, &mut a).unwrap();
        assert_eq!(v, initial_guess(&src, 16, &mut b).unwrap());
        assert!(v.mean().abs() < 1e-15);
        assert!(initial_guess(&src, 41, &mut a).is_err());
    }

    #[test]
    fn linear_case_recovers_exact_eigenvalues() {
        let bank = linear_bank(7);
        let n = 8;
        // dense K^T K from the operator applied to unit vectors
        let dim = n * n;
        let mut m = nalgebra::DMatrix::zeros(dim, dim);
        for j in 0..dim {
            let mut e = Image::zeros(n, n);
            e.data_mut()[j] = 1.0;
            let col = bank.grad(&e);
            for i in 0..dim {
                m[(i, j)] = col.data()[i];
            }
        }
        let eig = nalgebra::SymmetricEigen::new(m).eigenvalues;
        let sources = vec![crate::synth::synthetic_image(16, 16, 2)];
        let cfg = SpectralConfig {
            count: 3,
            size: n,
            iters: 10_000,
            seed: 1,
            tol: 1e-9,
            ..SpectralConfig::default()
        };
        let pairs = solve_eigenpairs(&bank, &sources, &cfg).unwrap();
        assert!(pairs.windows(2).all(|w| w[0].lambda <= w[1].lambda));
        for p in &pairs {
            let dist = eig.iter().map(|&e| (e - p.lambda).abs()).fold(f64::INFINITY, f64::min);
            assert!(
                dist <= 1e-6,
                "lambda {} off by {dist} (residual {})",
                p.lambda,
                p.residual
            );
        }
        assert_eq!(pairs, solve_eigenpairs(&bank, &sources, &cfg).unwrap());
    }
}
