//! Smoothed TV-L2 denoising by plain gradient descent:
//! `E(u) = ||u - g||^2 + nu sum_ij sqrt(|(Du)_ij|^2 + eps^2)` with forward
//! differences and Neumann boundary (the difference leaving the image is zero).

use std::io::Write;

use rayon::prelude::*;

use crate::csvout;
use crate::error::{Error, Result};
use crate::imgcore::{psnr, Image};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TvConfig {
    pub nu: f64,
    pub eps: f64,
    pub step: f64,
    pub max_iters: usize,
}

impl Default for TvConfig {
    fn default() -> Self {
        Self {
            nu: 0.4,
            eps: 1e-6,
            step: 1e-4,
            max_iters: 1000,
        }
    }
}

impl TvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nu >= 0.0) || !self.nu.is_finite() {
            return Err(Error::invalid(format!("nu must be >= 0, got {}", self.nu)));
        }
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(Error::invalid(format!("eps must be > 0, got {}", self.eps)));
        }
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(Error::invalid(format!("step must be > 0, got {}", self.step)));
        }
        Ok(())
    }
}

/// Forward differences `(dx, dy)`, zero on the last column and row.
fn gradient(u: &Image) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = u.dims();
    let d = u.data();
    let mut dx = vec![0.0; w * h];
    let mut dy = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                dx[i] = d[i + 1] - d[i];
            }
            if y + 1 < h {
                dy[i] = d[i + w] - d[i];
            }
        }
    }
    (dx, dy)
}

/// Adjoint of `gradient`: a negative divergence.
fn gradient_adjoint(px: &[f64], py: &[f64], w: usize, h: usize) -> Image {
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                out[i] -= px[i];
                out[i + 1] += px[i];
            }
            if y + 1 < h {
                out[i] -= py[i];
                out[i + w] += py[i];
            }
        }
    }
    Image::from_vec(w, h, out).expect("dims match")
}

pub fn tv_energy(u: &Image, g: &Image, cfg: &TvConfig) -> Result<f64> {
    u.check_dims(g)?;
    let data = u.sub(g).norm_sq();
    let (dx, dy) = gradient(u);
    let eps2 = cfg.eps * cfg.eps;
    let tv: f64 = dx.iter().zip(&dy).map(|(a, b)| (a * a + b * b + eps2).sqrt()).sum();
    Ok(data + cfg.nu * tv)
}

/// `2 (u - g) + nu D^T (Du / sqrt(|Du|^2 + eps^2))`
pub fn tv_grad(u: &Image, g: &Image, cfg: &TvConfig) -> Result<Image> {
    u.check_dims(g)?;
    let (w, h) = u.dims();
    let (mut dx, mut dy) = gradient(u);
    let eps2 = cfg.eps * cfg.eps;
    for (a, b) in dx.iter_mut().zip(dy.iter_mut()) {
        let n = (*a * *a + *b * *b + eps2).sqrt();
        *a /= n;
        *b /= n;
    }
    let mut out = gradient_adjoint(&dx, &dy, w, h);
    out.scale(cfg.nu);
    out.add_scaled(2.0, &u.sub(g));
    Ok(out)
}

/// `cfg.max_iters` descent steps from `u = g`.
pub fn tv_denoise(g: &Image, cfg: &TvConfig) -> Result<Image> {
    cfg.validate()?;
    let mut u = g.clone();
    for _ in 0..cfg.max_iters {
        let d = tv_grad(&u, g, cfg)?;
        u.add_scaled(-cfg.step, &d);
    }
    Ok(u)
}

/// PSNR table over `(iterations, nu)`, indexed `psnr[nu][iters]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TvSweep {
    pub nu_grid: Vec<f64>,
    pub iter_grid: Vec<usize>,
    pub psnr: Vec<Vec<f64>>,
}

impl TvSweep {
    /// Index into `iter_grid` of the best PSNR for column `j` (first on ties).
    pub fn best_iter(&self, j: usize) -> usize {
        let col = &self.psnr[j];
        (0..col.len()).fold(0, |b, i| if col[i] > col[b] { i } else { b })
    }

    /// The PSNR peak of column `j` beats both ends of the iteration grid.
    pub fn has_interior_maximum(&self, j: usize) -> bool {
        let col = &self.psnr[j];
        let peak = col[self.best_iter(j)];
        col.len() >= 3 && peak > col[0] && peak > col[col.len() - 1]
    }

    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        csvout::header(w, &["iters", "nu", "psnr"])?;
        for (j, &nu) in self.nu_grid.iter().enumerate() {
            for (i, &it) in self.iter_grid.iter().enumerate() {
                writeln!(w, "{it},{},{}", csvout::num(nu), csvout::num(self.psnr[j][i]))?;
            }
        }
        Ok(())
    }
}

/// One descent per `nu` from `u = g_noisy`, recording the PSNR against `clean`
/// whenever the iteration count hits `iter_grid`. `cfg.nu` and
/// `cfg.max_iters` are ignored; the columns run in parallel.
pub fn tv_sweep(
    g_noisy: &Image,
    clean: &Image,
    nu_grid: &[f64],
    iter_grid: &[usize],
    cfg: &TvConfig,
) -> Result<TvSweep> {
    g_noisy.check_dims(clean)?;
    if nu_grid.is_empty() || iter_grid.is_empty() {
        return Err(Error::invalid("sweep grids must be nonempty"));
    }
    if iter_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("iteration grid must be strictly increasing"));
    }
    let last = *iter_grid.last().expect("nonempty");
    let psnr_cols = nu_grid
        .par_iter()
        .map(|&nu| {
            let c = TvConfig { nu, ..*cfg };
            c.validate()?;
            let mut u = g_noisy.clone();
            let mut col = Vec::with_capacity(iter_grid.len());
            let mut next = 0;
            for k in 0..=last {
                if iter_grid[next] == k {
                    col.push(psnr(&u, clean, 1.0)?);
                    next += 1;
                    if next == iter_grid.len() {
                        break;
                    }
                }
                let d = tv_grad(&u, g_noisy, &c)?;
                u.add_scaled(-c.step, &d);
            }
            Ok(col)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TvSweep {
        nu_grid: nu_grid.to_vec(),
        iter_grid: iter_grid.to_vec(),
        psnr: psnr_cols,
    })
}
