//! Linear degradation operator `A` and the weighted data term
//! `(lambda_D / 2) ||A x - b||^2`.

use crate::error::{Error, Result};
use crate::imgcore::{conv2d, conv2d_adjoint, Boundary, Filter, Image};

pub const BLUR_SIZE: usize = 9;

#[derive(Debug, Clone, PartialEq)]
pub enum Degradation {
    Identity,
    GaussianBlur { tau: f64, filter: Filter },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataOperator {
    kind: Degradation,
    weight: f64,
}

/// 9x9 Gaussian taps sampled at integer offsets and normalized to unit sum.
pub fn blur_filter(tau: f64) -> Result<Filter> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!("blur strength tau must be > 0, got {tau}")));
    }
    let r = (BLUR_SIZE / 2) as i32;
    let mut taps = Vec::with_capacity(BLUR_SIZE * BLUR_SIZE);
    let norm = 1.0 / (2.0 * std::f64::consts::PI * tau * tau).sqrt();
    for dy in -r..=r {
        for dx in -r..=r {
            let d2 = (dx * dx + dy * dy) as f64;
            taps.push(norm * (-d2 / (2.0 * tau * tau)).exp());
        }
    }
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    Filter::new(BLUR_SIZE, taps)
}

impl DataOperator {
    pub fn identity() -> Self {
        Self {
            kind: Degradation::Identity,
            weight: 1.0,
        }
    }

    pub fn gaussian_blur(tau: f64) -> Result<Self> {
        Ok(Self {
            kind: Degradation::GaussianBlur {
                tau,
                filter: blur_filter(tau)?,
            },
            weight: 1.0,
        })
    }

    /// Sets the data-term weight `lambda_D` (e.g. `1 / sigma^2`).
    pub fn with_weight(mut self, weight: f64) -> Result<Self> {
        if !(weight > 0.0) || !weight.is_finite() {
            return Err(Error::invalid(format!("data weight must be > 0, got {weight}")));
        }
        self.weight = weight;
        Ok(self)
    }

    pub fn kind(&self) -> &Degradation {
        &self.kind
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn apply(&self, x: &Image) -> Image {
        match &self.kind {
            Degradation::Identity => x.clone(),
            Degradation::GaussianBlur { filter, .. } => conv2d(x, filter, Boundary::Reflect),
        }
    }

    pub fn apply_adjoint(&self, y: &Image) -> Image {
        match &self.kind {
            Degradation::Identity => y.clone(),
            Degradation::GaussianBlur { filter, .. } => conv2d_adjoint(y, filter, Boundary::Reflect),
        }
    }

    /// `lambda_D * A^T A p`
    pub fn normal(&self, p: &Image) -> Image {
        let mut out = self.apply_adjoint(&self.apply(p));
        out.scale(self.weight);
        out
    }

    pub fn energy(&self, x: &Image, b: &Image) -> Result<f64> {
        let ax = self.apply(x);
        ax.check_dims(b)?;
        Ok(0.5 * self.weight * ax.sub(b).norm_sq())
    }

    /// `lambda_D * A^T (A x - b)`
    pub fn data_grad(&self, x: &Image, b: &Image) -> Result<Image> {
        let mut r = self.apply(x);
        r.check_dims(b)?;
        r.add_scaled(-1.0, b);
        let mut g = self.apply_adjoint(&r);
        g.scale(self.weight);
        Ok(g)
    }
}
