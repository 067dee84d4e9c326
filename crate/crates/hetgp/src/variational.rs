//! Free-form Gaussian variational distributions, sparse-GP posterior moments
//! and closed-form KL divergences.
//!
//! A sparse GP summarizes a latent function through `M` inducing variables
//! `u` at pseudo inputs `Z`, with a Gaussian posterior `q(u) = N(m, S)`,
//! `S = L L^T`. The posterior moments at a point `x` are
//!
//! ```text
//! mean(x) = k(x,Z) Kuu^-1 m
//! var(x)  = k(x,x) + k(x,Z) Kuu^-1 [S Kuu^-1 - I] k(Z,x)
//! ```
//!
//! For an uncertain input `x ~ N(mu, diag(nu))` the same quantities are
//! integrated against the input distribution using the kernel's psi
//! statistics, which keeps the training objective analytic.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::kernel::{kernel_eval, kernel_matrix, psi0, psi1, psi2, GaussianInput, KernelParams};

/// Base jitter, as a fraction of the mean diagonal of the matrix being
/// factorized. Escalates by 10x per retry.
pub const BASE_JITTER: f64 = 1e-6;
/// Largest jitter fraction tried before giving up.
pub const MAX_JITTER: f64 = 1e-2;

/// A Gaussian `N(m, L L^T)` parameterized by its mean and a lower-triangular
/// covariance factor with positive diagonal.
#[derive(Debug, Clone)]
pub struct VariationalGaussian {
    mean: DVector<f64>,
    cov_factor: DMatrix<f64>,
}

impl VariationalGaussian {
    pub fn new(mean: DVector<f64>, cov_factor: DMatrix<f64>) -> Result<Self> {
        let m = mean.len();
        check_dim("VariationalGaussian factor rows", m, cov_factor.nrows())?;
        check_dim("VariationalGaussian factor cols", m, cov_factor.ncols())?;
        for i in 0..m {
            if cov_factor[(i, i)] <= 0.0 {
                return Err(Error::contract("cov_factor diagonal must be positive"));
            }
            for j in (i + 1)..m {
                if cov_factor[(i, j)] != 0.0 {
                    return Err(Error::contract("cov_factor must be lower triangular"));
                }
            }
        }
        Ok(VariationalGaussian { mean, cov_factor })
    }

    /// `N(0, I)` of the given size.
    pub fn standard(size: usize) -> Self {
        VariationalGaussian {
            mean: DVector::zeros(size),
            cov_factor: DMatrix::identity(size, size),
        }
    }

    pub fn size(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov_factor(&self) -> &DMatrix<f64> {
        &self.cov_factor
    }

    /// Dense covariance `S = L L^T`.
    pub fn cov(&self) -> DMatrix<f64> {
        &self.cov_factor * self.cov_factor.transpose()
    }
}

/// Pseudo inputs together with the variational posterior over the inducing
/// variables that live at them.
#[derive(Debug, Clone)]
pub struct InducingSet {
    pub z: DMatrix<f64>,
    pub q: VariationalGaussian,
}

impl InducingSet {
    pub fn new(z: DMatrix<f64>, q: VariationalGaussian) -> Result<Self> {
        check_dim("InducingSet", z.nrows(), q.size())?;
        Ok(InducingSet { z, q })
    }

    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.nrows() == 0
    }
}

/// Cholesky factorization with escalating diagonal jitter.
///
/// Adds `jitter * mean(diag)` to the diagonal, starting at [`BASE_JITTER`]
/// and growing tenfold up to [`MAX_JITTER`] before reporting a numerical
/// error naming `context`.
pub fn cholesky_with_jitter(k: &DMatrix<f64>, context: &str) -> Result<(DMatrix<f64>, f64)> {
    let m = k.nrows();
    if m == 0 {
        return Ok((DMatrix::zeros(0, 0), 0.0));
    }
    let mean_diag = k.diagonal().sum() / m as f64;
    let scale = if mean_diag > 0.0 { mean_diag } else { 1.0 };
    let mut jitter = BASE_JITTER;
    loop {
        let mut shifted = k.clone();
        for i in 0..m {
            shifted[(i, i)] += jitter * scale;
        }
        if let Some(chol) = nalgebra::Cholesky::new(shifted) {
            return Ok((chol.unpack(), jitter * scale));
        }
        jitter *= 10.0;
        if jitter > MAX_JITTER * 1.0001 {
            return Err(Error::numerical(
                context,
                format!("Cholesky failed up to jitter {:.0e} * mean diagonal", MAX_JITTER),
            ));
        }
    }
}

/// Expectations of the sparse-GP moments under an uncertain input, packaged
/// so a caller can assemble `E[(y - a*mean)^2 + a^2*var]`.
#[derive(Debug, Clone, Copy)]
pub struct ExpectedMoments {
    /// `E[mean(x)]`
    pub mean: f64,
    /// `E[mean(x)^2]`
    pub mean_sq: f64,
    /// `E[var(x)]`
    pub var: f64,
}

impl ExpectedMoments {
    /// Collapses to a `(mean, variance)` pair with the input-induced spread
    /// folded into the variance: `(E[mean], Var[mean] + E[var])`.
    pub fn into_pair(self) -> (f64, f64) {
        (self.mean, self.mean_sq - self.mean * self.mean + self.var)
    }
}

/// Precomputed solves for repeated posterior-moment evaluation against one
/// inducing set.
pub struct SparsePosterior {
    kern: KernelParams,
    z: DMatrix<f64>,
    /// `Kuu^-1 m`
    beta: DVector<f64>,
    /// `Kuu^-1 S Kuu^-1 - Kuu^-1`
    c: DMatrix<f64>,
    /// outer product `beta beta^T` reused by the psi2 quadratic form
    beta_outer: DMatrix<f64>,
}

impl SparsePosterior {
    pub fn new(kern: &KernelParams, ind: &InducingSet) -> Result<Self> {
        check_dim("SparsePosterior", kern.dim(), ind.z.ncols())?;
        let kuu = kernel_matrix(kern, &ind.z, &ind.z)?;
        let (l, _) = cholesky_with_jitter(&kuu, "inducing covariance")?;
        let m = ind.len();

        // beta = Kuu^-1 m via two triangular solves
        let tmp = l
            .solve_lower_triangular(ind.q.mean())
            .ok_or_else(|| Error::numerical("inducing covariance", "singular factor"))?;
        let beta = l
            .tr_solve_lower_triangular(&tmp)
            .ok_or_else(|| Error::numerical("inducing covariance", "singular factor"))?;

        // kuu_inv = L^-T L^-1
        let linv = l
            .solve_lower_triangular(&DMatrix::identity(m, m))
            .ok_or_else(|| Error::numerical("inducing covariance", "singular factor"))?;
        let kuu_inv = linv.transpose() * &linv;
        let c = &kuu_inv * ind.q.cov() * &kuu_inv - &kuu_inv;
        let beta_outer = &beta * beta.transpose();
        Ok(SparsePosterior {
            kern: kern.clone(),
            z: ind.z.clone(),
            beta,
            c,
            beta_outer,
        })
    }

    /// Posterior `(mean, variance)` at a deterministic point.
    pub fn moments(&self, x: &DVector<f64>) -> Result<(f64, f64)> {
        check_dim("svgp_moments", self.kern.dim(), x.len())?;
        let kx = kernel_matrix(&self.kern, &DMatrix::from_rows(&[x.transpose()]), &self.z)?;
        let kx = kx.row(0).transpose();
        let mean = kx.dot(&self.beta);
        let var = kernel_eval(&self.kern, x, x)? + (kx.transpose() * &self.c * &kx)[(0, 0)];
        Ok((mean, var))
    }

    /// Expected posterior moments under `x ~ N(mu, diag(nu))`.
    pub fn moments_uncertain(&self, input: &GaussianInput) -> Result<ExpectedMoments> {
        let phi = psi1(&self.kern, input, &self.z)?;
        let big_psi = psi2(&self.kern, input, &self.z)?;
        let mean = phi.dot(&self.beta);
        let mean_sq = frob_inner(&self.beta_outer, &big_psi);
        let var = psi0(&self.kern, input)? + frob_inner(&self.c, &big_psi);
        Ok(ExpectedMoments { mean, mean_sq, var })
    }
}

fn frob_inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.zip_fold(b, 0.0, |acc, x, y| acc + x * y)
}

/// Posterior mean and variance of a sparse GP at a deterministic input.
pub fn svgp_moments(kern: &KernelParams, ind: &InducingSet, x: &DVector<f64>) -> Result<(f64, f64)> {
    SparsePosterior::new(kern, ind)?.moments(x)
}

/// Expected posterior moments of a sparse GP at an uncertain input.
pub fn svgp_moments_uncertain(
    kern: &KernelParams,
    ind: &InducingSet,
    input: &GaussianInput,
) -> Result<ExpectedMoments> {
    SparsePosterior::new(kern, ind)?.moments_uncertain(input)
}

/// `KL[N(m, S) || N(0, I)] = 1/2 tr(m m^T + S - I) - 1/2 log|S|`.
pub fn kl_to_standard_normal(q: &VariationalGaussian) -> f64 {
    let m = q.size() as f64;
    let mean_sq = q.mean().norm_squared();
    let trace_s = q.cov_factor().iter().map(|v| v * v).sum::<f64>();
    let log_det_s = 2.0 * q.cov_factor().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    0.5 * (mean_sq + trace_s - m) - 0.5 * log_det_s
}

/// KL between a diagonal Gaussian `N(mu_q, diag(var_q))` and an isotropic
/// Gaussian `N(mu_p, var_p * I)`.
pub fn kl_diag_gaussians(
    mu_q: &DVector<f64>,
    var_q: &DVector<f64>,
    mu_p: &DVector<f64>,
    var_p: f64,
) -> Result<f64> {
    let d = mu_q.len();
    check_dim("kl_diag_gaussians var_q", d, var_q.len())?;
    check_dim("kl_diag_gaussians mu_p", d, mu_p.len())?;
    if var_p <= 0.0 || var_q.iter().any(|&v| v <= 0.0) {
        return Err(Error::contract("kl_diag_gaussians requires positive variances"));
    }
    let mut log_q = 0.0;
    let mut trace = 0.0;
    let mut quad = 0.0;
    for i in 0..d {
        log_q += var_q[i].ln();
        trace += var_q[i] / var_p;
        let r = mu_q[i] - mu_p[i];
        quad += r * r / var_p;
    }
    Ok(0.5 * (d as f64 * var_p.ln() - log_q - d as f64 + trace + quad))
}
