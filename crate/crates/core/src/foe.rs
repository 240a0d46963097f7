//! Field-of-Experts regularizer `R[u] = sum_k sum_i rho_k((K_k u)_i)`.

use crate::activations::{Activation, ActivationSpline};
use crate::error::{Error, Result};
use crate::imgcore::{conv2d, conv2d_adjoint, Boundary, Filter, Image};

/// One filter with its activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert<A> {
    pub filter: Filter,
    pub activation: A,
}

/// A bank of experts sharing one boundary rule.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBank<A = ActivationSpline> {
    experts: Vec<Expert<A>>,
    boundary: Boundary,
}

/// Which member of the kernel constraint sets is violated.
#[derive(Debug, Clone, PartialEq)]
pub enum BankViolation {
    NonZeroMean { kernel: usize, sum: f64 },
    KernelNorm { kernel: usize, norm_sq: f64 },
    WeightNorm { kernel: usize, norm_sq: f64 },
}

impl<A: Activation> KernelBank<A> {
    pub fn new(experts: Vec<Expert<A>>) -> Self {
        Self {
            experts,
            boundary: Boundary::Reflect,
        }
    }

    pub fn empty() -> Self {
        Self::new(Vec::new())
    }

    pub fn with_boundary(mut self, boundary: Boundary) -> Self {
        self.boundary = boundary;
        self
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn experts(&self) -> &[Expert<A>] {
        &self.experts
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    /// Filter responses `K_k x` for every expert, reused by the gradient,
    /// Jacobian and bilinear evaluations at the same `x`.
    pub fn responses<'a>(&'a self, x: &Image) -> Responses<'a, A> {
        let resp = self
            .experts
            .iter()
            .map(|e| conv2d(x, &e.filter, self.boundary))
            .collect();
        Responses {
            bank: self,
            resp,
            dims: x.dims(),
        }
    }

    pub fn energy(&self, x: &Image) -> f64 {
        self.responses(x).energy()
    }

    pub fn grad(&self, x: &Image) -> Image {
        self.responses(x).grad()
    }

    pub fn jvp(&self, x: &Image, p: &Image) -> Image {
        self.responses(x).jvp(p)
    }

    pub fn bilinear(&self, x: &Image, v: &Image) -> Image {
        self.responses(x).bilinear(v)
    }
}

impl KernelBank<ActivationSpline> {
    /// Checks zero mean (to `1e-12`), `||kappa||_F^2 <= 1` and `||w||_2^2 <= 1`.
    pub fn validate(&self) -> Result<(), BankViolation> {
        const TOL: f64 = 1e-12;
        for (k, e) in self.experts.iter().enumerate() {
            let sum = e.filter.tap_sum();
            if sum.abs() > TOL {
                return Err(BankViolation::NonZeroMean { kernel: k, sum });
            }
            let norm_sq = e.filter.frobenius_sq();
            if norm_sq > 1.0 + TOL {
                return Err(BankViolation::KernelNorm { kernel: k, norm_sq });
            }
            let norm_sq: f64 = e.activation.weights().iter().map(|w| w * w).sum();
            if norm_sq > 1.0 + TOL {
                return Err(BankViolation::WeightNorm { kernel: k, norm_sq });
            }
        }
        Ok(())
    }
}

/// Cached `K_k x` for a fixed state `x`.
pub struct Responses<'a, A> {
    bank: &'a KernelBank<A>,
    resp: Vec<Image>,
    dims: (usize, usize),
}

impl<'a, A: Activation> Responses<'a, A> {
    pub fn filter_responses(&self) -> &[Image] {
        &self.resp
    }

    pub fn energy(&self) -> f64 {
        self.bank
            .experts
            .iter()
            .zip(&self.resp)
            .map(|(e, r)| r.data().iter().map(|&y| e.activation.potential(y)).sum::<f64>())
            .sum()
    }

    fn accumulate(&self, mut per_kernel: impl FnMut(&Expert<A>, &Image) -> Image) -> Option<Image> {
        let mut total: Option<Image> = None;
        for (e, r) in self.bank.experts.iter().zip(&self.resp) {
            let weighted = per_kernel(e, r);
            let back = conv2d_adjoint(&weighted, &e.filter, self.bank.boundary);
            match total.as_mut() {
                Some(t) => t.add_scaled(1.0, &back),
                None => total = Some(back),
            }
        }
        total
    }

    fn or_zeros(&self, img: Option<Image>) -> Image {
        img.unwrap_or_else(|| Image::zeros(self.dims.0, self.dims.1))
    }

    /// `sum_k K_k^T phi_k(K_k x)`
    pub fn grad(&self) -> Image {
        let g = self.accumulate(|e, r| r.map(|y| e.activation.phi(y)));
        self.or_zeros(g)
    }

    /// `sum_k K_k^T [phi_k'(K_k x) * K_k p]`
    pub fn jvp(&self, p: &Image) -> Image {
        let boundary = self.bank.boundary;
        let g = self.accumulate(|e, r| {
            let mut kp = conv2d(p, &e.filter, boundary);
            for (v, &y) in kp.data_mut().iter_mut().zip(r.data()) {
                *v *= e.activation.dphi(y);
            }
            kp
        });
        self.or_zeros(g)
    }

    /// `sum_k K_k^T [phi_k''(K_k x) * (K_k v)^2]`
    pub fn bilinear(&self, v: &Image) -> Image {
        let boundary = self.bank.boundary;
        let g = self.accumulate(|e, r| {
            let mut kv = conv2d(v, &e.filter, boundary);
            for (val, &y) in kv.data_mut().iter_mut().zip(r.data()) {
                *val = e.activation.d2phi(y) * *val * *val;
            }
            kv
        });
        self.or_zeros(g)
    }
}

pub fn reg_energy<A: Activation>(bank: &KernelBank<A>, x: &Image) -> f64 {
    bank.energy(x)
}

pub fn reg_grad<A: Activation>(bank: &KernelBank<A>, x: &Image) -> Image {
    bank.grad(x)
}

pub fn reg_jvp<A: Activation>(bank: &KernelBank<A>, x: &Image, p: &Image) -> Result<Image> {
    x.check_dims(p)?;
    Ok(bank.jvp(x, p))
}

pub fn reg_bilinear<A: Activation>(bank: &KernelBank<A>, x: &Image, v: &Image) -> Result<Image> {
    x.check_dims(v)?;
    Ok(bank.bilinear(x, v))
}

impl std::fmt::Display for BankViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BankViolation::NonZeroMean { kernel, sum } => {
                write!(f, "kernel {kernel} has tap sum {sum:e}")
            }
            BankViolation::KernelNorm { kernel, norm_sq } => {
                write!(f, "kernel {kernel} has squared norm {norm_sq} > 1")
            }
            BankViolation::WeightNorm { kernel, norm_sq } => {
                write!(f, "activation {kernel} has squared weight norm {norm_sq} > 1")
            }
        }
    }
}

impl From<BankViolation> for Error {
    fn from(v: BankViolation) -> Self {
        Error::InvalidArgument(v.to_string())
    }
}
