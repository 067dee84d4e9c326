//! Domain mappings between task input domains and the common domain.
//!
//! A prior mapping `g0` carries expert knowledge (typically coordinate
//! selection into the lowest-dimensional task's domain). The posterior
//! mapping refines it with a multi-output sparse GP (MSGP) in residual form:
//! per output dimension `d`,
//!
//! ```text
//! mean_d(x) = svgp_mean_d(x) + g0(x)[d]
//! var_d(x)  = svgp_var_d(x)
//! ```
//!
//! so the MSGP only has to learn the correction on top of the prior. The
//! embedded-mapping alternative instead treats the prior-mapped inputs as
//! observations of the MSGP and scores them with a Gaussian likelihood.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::kernel::{softplus, softplus_inv, GaussianInput, KernelParams};
use crate::variational::{
    kl_diag_gaussians, kl_to_standard_normal, SparsePosterior, VariationalGaussian,
};

type UserMapping = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

/// Expert-supplied transformation from a task domain into the common domain.
#[derive(Clone)]
pub enum PriorMapping {
    /// Task already lives in the common domain.
    Identity,
    /// Keep the listed coordinates, in order.
    SelectDims(Vec<usize>),
    /// Arbitrary user-supplied function (programmatic use only).
    UserFunction {
        input_dim: usize,
        output_dim: usize,
        f: UserMapping,
    },
}

impl std::fmt::Debug for PriorMapping {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PriorMapping::Identity => write!(f, "Identity"),
            PriorMapping::SelectDims(idx) => write!(f, "SelectDims({idx:?})"),
            PriorMapping::UserFunction {
                input_dim,
                output_dim,
                ..
            } => write!(f, "UserFunction({input_dim} -> {output_dim})"),
        }
    }
}

impl PriorMapping {
    /// Output dimensionality for an input of dimension `input_dim`.
    pub fn output_dim(&self, input_dim: usize) -> usize {
        match self {
            PriorMapping::Identity => input_dim,
            PriorMapping::SelectDims(idx) => idx.len(),
            PriorMapping::UserFunction { output_dim, .. } => *output_dim,
        }
    }
}

/// Applies a prior mapping to one point.
pub fn apply_prior_mapping(map: &PriorMapping, x: &DVector<f64>) -> Result<DVector<f64>> {
    match map {
        PriorMapping::Identity => Ok(x.clone()),
        PriorMapping::SelectDims(idx) => {
            for &i in idx {
                if i >= x.len() {
                    return Err(Error::contract(format!(
                        "selected coordinate {i} out of range for dimension {}",
                        x.len()
                    )));
                }
            }
            Ok(DVector::from_iterator(idx.len(), idx.iter().map(|&i| x[i])))
        }
        PriorMapping::UserFunction { input_dim, output_dim, f } => {
            check_dim("user mapping input", *input_dim, x.len())?;
            let out = f(x);
            check_dim("user mapping output", *output_dim, out.len())?;
            Ok(out)
        }
    }
}

/// Residual multi-output sparse GP over one task's input domain: `D` output
/// dimensions share the kernel and pseudo inputs but carry their own
/// variational factors.
#[derive(Debug, Clone)]
pub struct ResidualMsgp {
    pub kern: KernelParams,
    pub z: DMatrix<f64>,
    pub factors: Vec<VariationalGaussian>,
    pub prior: PriorMapping,
}

impl ResidualMsgp {
    pub fn validate(&self) -> Result<()> {
        check_dim("ResidualMsgp kernel", self.kern.dim(), self.z.ncols())?;
        for f in &self.factors {
            check_dim("ResidualMsgp factor", self.z.nrows(), f.size())?;
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.factors.len()
    }
}

/// Learnable isotropic variance of the aligned-input prior, stored
/// unconstrained.
#[derive(Debug, Clone, Copy)]
pub struct AlignedInputPrior {
    pub var_raw: f64,
}

impl AlignedInputPrior {
    pub fn with_variance(variance: f64) -> Result<Self> {
        if variance <= 0.0 {
            return Err(Error::contract("prior variance must be positive"));
        }
        Ok(AlignedInputPrior {
            var_raw: softplus_inv(variance),
        })
    }

    pub fn variance(&self) -> f64 {
        softplus(self.var_raw)
    }
}

/// Posterior distribution of the aligned input for one point: the residual
/// MSGP's moments with the prior-mapped value added to each mean dimension.
pub fn aligned_posterior(msgp: &ResidualMsgp, x: &DVector<f64>) -> Result<GaussianInput> {
    msgp.validate()?;
    let prior_mean = apply_prior_mapping(&msgp.prior, x)?;
    check_dim("aligned_posterior output", msgp.output_dim(), prior_mean.len())?;
    let d = msgp.output_dim();
    let mut mean = DVector::zeros(d);
    let mut variance = DVector::zeros(d);
    for dim in 0..d {
        let ind = crate::variational::InducingSet::new(msgp.z.clone(), msgp.factors[dim].clone())?;
        let post = SparsePosterior::new(&msgp.kern, &ind)?;
        let (m, v) = post.moments(x)?;
        mean[dim] = m + prior_mean[dim];
        variance[dim] = v.max(0.0);
    }
    GaussianInput::new(mean, variance)
}

/// Prior distribution of the aligned input: prior-mapped mean with isotropic
/// learnable variance.
pub fn aligned_prior(
    map: &PriorMapping,
    prior: &AlignedInputPrior,
    x: &DVector<f64>,
) -> Result<GaussianInput> {
    let mean = apply_prior_mapping(map, x)?;
    let d = mean.len();
    GaussianInput::new(mean, DVector::from_element(d, prior.variance()))
}

/// KL terms contributed by one task's Bayesian calibration: the inducing
/// factors' divergence from the standard normal plus the per-point
/// divergence between aligned posterior and aligned prior. Points are rows
/// of `x`.
pub fn calibration_kl(
    msgp: &ResidualMsgp,
    prior: &AlignedInputPrior,
    x: &DMatrix<f64>,
) -> Result<f64> {
    msgp.validate()?;
    let mut total = 0.0;
    for f in &msgp.factors {
        total += kl_to_standard_normal(f);
    }
    let var_p = prior.variance();
    for i in 0..x.nrows() {
        let xi = x.row(i).transpose();
        let post = aligned_posterior(msgp, &xi)?;
        let prior_mean = apply_prior_mapping(&msgp.prior, &xi)?;
        total += kl_diag_gaussians(&post.mean, &post.variance, &prior_mean, var_p)?;
    }
    Ok(total)
}

/// Embedded-mapping state: a direct (non-residual) MSGP that treats the
/// prior-mapped inputs as noisy observations.
#[derive(Debug, Clone)]
pub struct EmMapping {
    pub kern: KernelParams,
    pub z: DMatrix<f64>,
    pub factors: Vec<VariationalGaussian>,
    /// Observation noise of the mapping regression, unconstrained.
    pub obs_noise_raw: f64,
}

impl EmMapping {
    pub fn obs_noise(&self) -> f64 {
        softplus(self.obs_noise_raw)
    }
}

/// Objective terms of the embedded mapping: expected Gaussian log likelihood
/// of the observed aligned inputs under `D` independent sparse-GP
/// regressors, minus their inducing KL terms. Added to the mixing model's
/// bound by the embedded-mapping variant.
pub fn em_mapping_elbo_terms(
    em: &EmMapping,
    x: &DMatrix<f64>,
    xbar_observed: &DMatrix<f64>,
) -> Result<f64> {
    check_dim("em_mapping rows", x.nrows(), xbar_observed.nrows())?;
    check_dim("em_mapping outputs", em.factors.len(), xbar_observed.ncols())?;
    let noise = em.obs_noise();
    if noise <= 0.0 {
        return Err(Error::contract("observation noise must be positive"));
    }
    let mut total = 0.0;
    for d in 0..em.factors.len() {
        let ind = crate::variational::InducingSet::new(em.z.clone(), em.factors[d].clone())?;
        let post = SparsePosterior::new(&em.kern, &ind)?;
        for i in 0..x.nrows() {
            let xi = x.row(i).transpose();
            let (m, v) = post.moments(&xi)?;
            let r = xbar_observed[(i, d)] - m;
            total += -0.5 * ((2.0 * std::f64::consts::PI * noise).ln() + r * r / noise)
                - v / (2.0 * noise);
        }
        total -= kl_to_standard_normal(&em.factors[d]);
    }
    Ok(total)
}
