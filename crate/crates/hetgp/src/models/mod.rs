//! Model assembly: the four variants, their trainable parameter registry,
//! objective evaluation, gradients and the Adam training loop.
//!
//! Variational factors are stored in whitened coordinates: the trainable
//! Gaussian `N(m, L L^T)` is measured against a standard-normal prior, and
//! posterior moments are recovered by unwhitening with the Cholesky factor
//! of the inducing covariance. This keeps every KL term in its closed
//! standard-normal form while the predictive equations keep their usual
//! `Kuu^-1`-based shape, and it preserves the evidence-bound property of the
//! variational objective.

mod elbo;
mod train;

pub use elbo::{elbo, elbo_with_collapsed_calibration, gradient, BatchSel};
pub use train::{train, AdamState, TrainConfig, TrainTrace};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::calibration::PriorMapping;
use crate::datasets::{kmeans_init, CompiledMapping, NormalizedData, TaskStats};
use crate::error::{Error, Result};
use crate::kernel::{softplus, softplus_inv, GaussianInput, KernelParams};
use crate::lmc::{combine_prediction, MixingMatrix, TaskNoise};
use crate::variational::{
    cholesky_with_jitter, InducingSet, SparsePosterior, VariationalGaussian,
};

/// Model variant identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Single-output sparse GP on the target task only.
    Sogp,
    /// Mixing model on deterministically prior-mapped inputs.
    HsvlmcG0,
    /// Mixing model with an embedded-mapping GP fit to the prior-mapped inputs.
    HsvlmcEm,
    /// Mixing model with Bayesian calibration of the aligned inputs.
    Hsvlmc,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Sogp,
        Variant::HsvlmcG0,
        Variant::HsvlmcEm,
        Variant::Hsvlmc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Sogp => "sogp",
            Variant::HsvlmcG0 => "hsvlmc-g0",
            Variant::HsvlmcEm => "hsvlmc-em",
            Variant::Hsvlmc => "hsvlmc",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sogp" => Ok(Variant::Sogp),
            "hsvlmc-g0" => Ok(Variant::HsvlmcG0),
            "hsvlmc-em" => Ok(Variant::HsvlmcEm),
            "hsvlmc" => Ok(Variant::Hsvlmc),
            other => Err(Error::contract(format!("unknown model variant '{other}'"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Unconstrained squared-exponential kernel parameters.
#[derive(Debug, Clone)]
pub struct SeKernelRaw {
    pub scale_raw: f64,
    pub ls_raw: DVector<f64>,
}

impl SeKernelRaw {
    fn init(dim: usize, output_scale: f64, lengthscale: f64) -> Self {
        SeKernelRaw {
            scale_raw: softplus_inv(output_scale),
            ls_raw: DVector::from_element(dim, softplus_inv(lengthscale)),
        }
    }

    pub fn to_params(&self) -> KernelParams {
        KernelParams {
            output_scale_raw: self.scale_raw,
            lengthscale_raw: self.ls_raw.clone(),
        }
    }
}

/// Whitened variational Gaussian: mean plus an unconstrained parameterization
/// of the lower-triangular factor (softplus on the diagonal).
#[derive(Debug, Clone)]
pub struct WhitenedFactor {
    pub mean: DVector<f64>,
    pub diag_raw: DVector<f64>,
    pub off: DVector<f64>,
}

impl WhitenedFactor {
    fn init(size: usize, factor_scale: f64) -> Self {
        WhitenedFactor {
            mean: DVector::zeros(size),
            diag_raw: DVector::from_element(size, softplus_inv(factor_scale)),
            off: DVector::zeros(size * size.saturating_sub(1) / 2),
        }
    }

    pub fn size(&self) -> usize {
        self.mean.len()
    }

    /// Assembles the lower-triangular factor `L`.
    pub fn lower(&self) -> DMatrix<f64> {
        let m = self.size();
        let mut l = DMatrix::zeros(m, m);
        let mut k = 0;
        for i in 0..m {
            for j in 0..i {
                l[(i, j)] = self.off[k];
                k += 1;
            }
            l[(i, i)] = softplus(self.diag_raw[i]);
        }
        l
    }

    /// Whitened factor as a distribution in its own coordinates.
    pub fn as_gaussian(&self) -> VariationalGaussian {
        VariationalGaussian::new(self.mean.clone(), self.lower())
            .expect("whitened factor is valid by construction")
    }

    /// Recovers the unwhitened distribution given the Cholesky factor of the
    /// inducing covariance: mean `L_k m`, factor `L_k L`.
    pub fn unwhiten(&self, l_k: &DMatrix<f64>) -> Result<VariationalGaussian> {
        let mean = l_k * &self.mean;
        let factor = l_k * self.lower();
        VariationalGaussian::new(mean, factor)
    }
}

/// One latent sparse GP of the mixing model.
#[derive(Debug, Clone)]
pub struct LatentProcess {
    pub kern: SeKernelRaw,
    pub z: DMatrix<f64>,
    pub factor: WhitenedFactor,
}

/// Residual-mapping calibration state for one task.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub kern: SeKernelRaw,
    pub z: DMatrix<f64>,
    pub factors: Vec<WhitenedFactor>,
    pub prior_var_raw: f64,
}

impl ResidualBlock {
    pub fn prior_variance(&self) -> f64 {
        softplus(self.prior_var_raw)
    }
}

/// Embedded-mapping state for one task.
#[derive(Debug, Clone)]
pub struct EmBlock {
    pub kern: SeKernelRaw,
    pub z: DMatrix<f64>,
    pub factors: Vec<WhitenedFactor>,
    pub obs_noise_raw: f64,
}

/// How one task's inputs reach the latent processes.
#[derive(Debug, Clone)]
pub enum TaskCalibration {
    /// Deterministic prior alignment (also used for common-domain tasks).
    Deterministic,
    Residual(ResidualBlock),
    Embedded(EmBlock),
}

/// One modeled task: normalized training data, its prior-aligned inputs in
/// the latent input space, calibration state and prediction context.
#[derive(Debug, Clone)]
pub struct TaskBlock {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    /// Prior-aligned training inputs (latent-space coordinates).
    pub aligned: DMatrix<f64>,
    pub calib: TaskCalibration,
    pub mapping: CompiledMapping,
    pub stats: TaskStats,
    /// Raw training outputs for metric standardization.
    pub y_train_raw: DVector<f64>,
}

impl TaskBlock {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    fn normalize_input(&self, x_raw: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x_raw.len(), |i, _| {
            (x_raw[i] - self.stats.x_mean[i]) / self.stats.x_std[i]
        })
    }
}

/// Build-time configuration of one model.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Number of latent processes.
    pub latents: usize,
    /// Inducing size per latent process.
    pub inducing: usize,
    /// Inducing size of the mapping GPs; `None` uses the task's training
    /// size with pseudo inputs at the training points.
    pub mapping_inducing: Option<usize>,
    pub lengthscale_init: f64,
    pub output_scale_init: f64,
    pub noise_init: f64,
    pub cov_factor_init: f64,
    pub prior_var_init: f64,
    pub msgp_lengthscale_init: f64,
    pub msgp_output_scale_init: f64,
    pub em_obs_noise_init: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(variant: Variant, seed: u64) -> Self {
        ModelConfig {
            variant,
            latents: 2,
            inducing: 30,
            mapping_inducing: None,
            lengthscale_init: 0.1,
            output_scale_init: 1.0,
            noise_init: 0.01,
            cov_factor_init: 0.1,
            prior_var_init: 1.0,
            msgp_lengthscale_init: 1.0,
            msgp_output_scale_init: 1.0,
            em_obs_noise_init: 0.01,
            seed,
        }
    }
}

/// Full trainable state of one model instance, including copies of the
/// normalized training data it was built on.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub variant: Variant,
    /// Input dimensionality of the latent processes.
    pub latent_dim: usize,
    pub latents: Vec<LatentProcess>,
    /// Mixing coefficients, absent for the single-output variant.
    pub mixing: Option<DMatrix<f64>>,
    pub noise_raw: DVector<f64>,
    pub tasks: Vec<TaskBlock>,
    pub seed: u64,
}

/// Borrowed view of one parameter block.
pub enum BlockRef<'a> {
    Scalar(&'a f64),
    Vector(&'a DVector<f64>),
    Matrix(&'a DMatrix<f64>),
}

/// Mutable view of one parameter block.
pub enum BlockMut<'a> {
    Scalar(&'a mut f64),
    Vector(&'a mut DVector<f64>),
    Matrix(&'a mut DMatrix<f64>),
}

impl BlockRef<'_> {
    fn len(&self) -> usize {
        match self {
            BlockRef::Scalar(_) => 1,
            BlockRef::Vector(v) => v.len(),
            BlockRef::Matrix(m) => m.len(),
        }
    }
}

fn derived_seed(seed: u64, tag: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(tag)
}

/// Inducing-point initialization: k-means centers, or the points plus
/// Gaussian-jittered copies when more centers than points are requested.
fn init_inducing(points: &DMatrix<f64>, m: usize, seed: u64) -> Result<DMatrix<f64>> {
    let n = points.nrows();
    if m <= n {
        kmeans_init(points, m, seed)
    } else {
        let mut rng = ChaCha12Rng::seed_from_u64(derived_seed(seed, 7));
        let mut z = DMatrix::zeros(m, points.ncols());
        for i in 0..m {
            let base = points.row(i % n);
            for j in 0..points.ncols() {
                let jitter = if i < n {
                    0.0
                } else {
                    0.1 * { let e: f64 = StandardNormal.sample(&mut rng); e }
                };
                z[(i, j)] = base[j] + jitter;
            }
        }
        Ok(z)
    }
}

/// Assembles the initial state of one model variant from a normalized
/// dataset. Deterministic given `config.seed`.
pub fn build_model(config: &ModelConfig, data: &NormalizedData) -> Result<ModelState> {
    if config.latents == 0 || config.inducing == 0 {
        return Err(Error::contract("latent count and inducing size must be positive"));
    }
    if data.tasks.is_empty() {
        return Err(Error::contract("dataset has no tasks"));
    }

    let sogp = config.variant == Variant::Sogp;
    let task_range: Vec<usize> = if sogp {
        vec![0]
    } else {
        (0..data.tasks.len()).collect()
    };
    let latent_dim = if sogp {
        data.tasks[0].input_dim()
    } else {
        data.common_dim
    };

    // task blocks with prior-aligned training inputs
    let mut tasks = Vec::with_capacity(task_range.len());
    for &t in &task_range {
        let src = &data.tasks[t];
        let aligned = if sogp {
            src.x.clone()
        } else {
            src.mapping.apply_rows(&src.x)?
        };
        let is_common = matches!(src.mapping.raw_mapping(), PriorMapping::Identity);
        let calib = match config.variant {
            Variant::Sogp | Variant::HsvlmcG0 => TaskCalibration::Deterministic,
            Variant::Hsvlmc | Variant::HsvlmcEm if is_common => TaskCalibration::Deterministic,
            Variant::Hsvlmc | Variant::HsvlmcEm => {
                let n = src.len();
                let (z, m_g) = match config.mapping_inducing {
                    Some(mg) if mg <= n => {
                        (init_inducing(&src.x, mg, derived_seed(config.seed, 300 + t as u64))?, mg)
                    }
                    _ => (src.x.clone(), n),
                };
                let kern = SeKernelRaw::init(
                    src.input_dim(),
                    config.msgp_output_scale_init,
                    config.msgp_lengthscale_init,
                );
                let factors = (0..data.common_dim)
                    .map(|_| WhitenedFactor::init(m_g, config.cov_factor_init))
                    .collect();
                if config.variant == Variant::Hsvlmc {
                    TaskCalibration::Residual(ResidualBlock {
                        kern,
                        z,
                        factors,
                        prior_var_raw: softplus_inv(config.prior_var_init),
                    })
                } else {
                    TaskCalibration::Embedded(EmBlock {
                        kern,
                        z,
                        factors,
                        obs_noise_raw: softplus_inv(config.em_obs_noise_init),
                    })
                }
            }
        };
        tasks.push(TaskBlock {
            x: src.x.clone(),
            y: src.y.clone(),
            aligned,
            calib,
            mapping: src.mapping.clone(),
            stats: src.stats.clone(),
            y_train_raw: src.y_train_raw.clone(),
        });
    }

    // latent processes over the aligned inputs; per-process k-means seeds
    // differ so initial pseudo-input sets are distinct
    let aligned_all = {
        let total: usize = tasks.iter().map(|t| t.len()).sum();
        let mut m = DMatrix::zeros(total, latent_dim);
        let mut row = 0;
        for t in &tasks {
            for i in 0..t.len() {
                m.set_row(row, &t.aligned.row(i));
                row += 1;
            }
        }
        m
    };
    let num_latents = if sogp { 1 } else { config.latents };
    let mut latents = Vec::with_capacity(num_latents);
    for q in 0..num_latents {
        let z = init_inducing(
            &aligned_all,
            config.inducing,
            derived_seed(config.seed, 100 + q as u64),
        )?;
        latents.push(LatentProcess {
            kern: SeKernelRaw::init(latent_dim, config.output_scale_init, config.lengthscale_init),
            z,
            factor: WhitenedFactor::init(config.inducing, config.cov_factor_init),
        });
    }

    let mixing = if sogp {
        None
    } else {
        Some(DMatrix::from_element(tasks.len(), num_latents, 1.0))
    };

    Ok(ModelState {
        variant: config.variant,
        latent_dim,
        latents,
        mixing,
        noise_raw: DVector::from_element(tasks.len(), softplus_inv(config.noise_init)),
        tasks,
        seed: config.seed,
    })
}

impl ModelState {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn num_latents(&self) -> usize {
        self.latents.len()
    }

    /// Learned prior variance of a task's aligned-input distribution, when
    /// the variant carries one.
    pub fn learned_prior_variance(&self, task: usize) -> Option<f64> {
        match self.tasks.get(task).map(|t| &t.calib) {
            Some(TaskCalibration::Residual(r)) => Some(r.prior_variance()),
            _ => None,
        }
    }

    /// Visits every trainable block in canonical order.
    pub fn visit_blocks<'a>(&'a self, f: &mut dyn FnMut(String, BlockRef<'a>)) {
        for (q, lp) in self.latents.iter().enumerate() {
            f(format!("latent{q}.kern.scale"), BlockRef::Scalar(&lp.kern.scale_raw));
            f(format!("latent{q}.kern.ls"), BlockRef::Vector(&lp.kern.ls_raw));
            f(format!("latent{q}.z"), BlockRef::Matrix(&lp.z));
            f(format!("latent{q}.q.mean"), BlockRef::Vector(&lp.factor.mean));
            f(format!("latent{q}.q.diag"), BlockRef::Vector(&lp.factor.diag_raw));
            f(format!("latent{q}.q.off"), BlockRef::Vector(&lp.factor.off));
        }
        if let Some(a) = &self.mixing {
            f("mixing".to_string(), BlockRef::Matrix(a));
        }
        f("noise".to_string(), BlockRef::Vector(&self.noise_raw));
        for (t, task) in self.tasks.iter().enumerate() {
            match &task.calib {
                TaskCalibration::Deterministic => {}
                TaskCalibration::Residual(r) => {
                    f(format!("task{t}.map.kern.scale"), BlockRef::Scalar(&r.kern.scale_raw));
                    f(format!("task{t}.map.kern.ls"), BlockRef::Vector(&r.kern.ls_raw));
                    f(format!("task{t}.map.z"), BlockRef::Matrix(&r.z));
                    for (d, fac) in r.factors.iter().enumerate() {
                        f(format!("task{t}.map.q{d}.mean"), BlockRef::Vector(&fac.mean));
                        f(format!("task{t}.map.q{d}.diag"), BlockRef::Vector(&fac.diag_raw));
                        f(format!("task{t}.map.q{d}.off"), BlockRef::Vector(&fac.off));
                    }
                    f(format!("task{t}.prior_var"), BlockRef::Scalar(&r.prior_var_raw));
                }
                TaskCalibration::Embedded(e) => {
                    f(format!("task{t}.map.kern.scale"), BlockRef::Scalar(&e.kern.scale_raw));
                    f(format!("task{t}.map.kern.ls"), BlockRef::Vector(&e.kern.ls_raw));
                    f(format!("task{t}.map.z"), BlockRef::Matrix(&e.z));
                    for (d, fac) in e.factors.iter().enumerate() {
                        f(format!("task{t}.map.q{d}.mean"), BlockRef::Vector(&fac.mean));
                        f(format!("task{t}.map.q{d}.diag"), BlockRef::Vector(&fac.diag_raw));
                        f(format!("task{t}.map.q{d}.off"), BlockRef::Vector(&fac.off));
                    }
                    f(format!("task{t}.obs_noise"), BlockRef::Scalar(&e.obs_noise_raw));
                }
            }
        }
    }

    /// Mutable visit in the same canonical order as [`Self::visit_blocks`].
    pub fn visit_blocks_mut(&mut self, f: &mut dyn FnMut(BlockMut)) {
        for lp in self.latents.iter_mut() {
            f(BlockMut::Scalar(&mut lp.kern.scale_raw));
            f(BlockMut::Vector(&mut lp.kern.ls_raw));
            f(BlockMut::Matrix(&mut lp.z));
            f(BlockMut::Vector(&mut lp.factor.mean));
            f(BlockMut::Vector(&mut lp.factor.diag_raw));
            f(BlockMut::Vector(&mut lp.factor.off));
        }
        if let Some(a) = &mut self.mixing {
            f(BlockMut::Matrix(a));
        }
        f(BlockMut::Vector(&mut self.noise_raw));
        for task in self.tasks.iter_mut() {
            match &mut task.calib {
                TaskCalibration::Deterministic => {}
                TaskCalibration::Residual(r) => {
                    f(BlockMut::Scalar(&mut r.kern.scale_raw));
                    f(BlockMut::Vector(&mut r.kern.ls_raw));
                    f(BlockMut::Matrix(&mut r.z));
                    for fac in r.factors.iter_mut() {
                        f(BlockMut::Vector(&mut fac.mean));
                        f(BlockMut::Vector(&mut fac.diag_raw));
                        f(BlockMut::Vector(&mut fac.off));
                    }
                    f(BlockMut::Scalar(&mut r.prior_var_raw));
                }
                TaskCalibration::Embedded(e) => {
                    f(BlockMut::Scalar(&mut e.kern.scale_raw));
                    f(BlockMut::Vector(&mut e.kern.ls_raw));
                    f(BlockMut::Matrix(&mut e.z));
                    for fac in e.factors.iter_mut() {
                        f(BlockMut::Vector(&mut fac.mean));
                        f(BlockMut::Vector(&mut fac.diag_raw));
                        f(BlockMut::Vector(&mut fac.off));
                    }
                    f(BlockMut::Scalar(&mut e.obs_noise_raw));
                }
            }
        }
    }

    /// Names, offsets and sizes of every block, in flattening order.
    pub fn layout(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        let mut offset = 0;
        self.visit_blocks(&mut |name, b| {
            let len = b.len();
            out.push((name, offset, len));
            offset += len;
        });
        out
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_blocks(&mut |_, b| n += b.len());
        n
    }

    /// Flattens every trainable parameter into one vector (matrices in
    /// column-major order).
    pub fn flatten(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit_blocks(&mut |_, b| match b {
            BlockRef::Scalar(v) => out.push(*v),
            BlockRef::Vector(v) => out.extend(v.iter().copied()),
            BlockRef::Matrix(m) => out.extend(m.iter().copied()),
        });
        DVector::from_vec(out)
    }

    /// Writes a flat parameter vector back into the structured state.
    pub fn set_from_flat(&mut self, flat: &DVector<f64>) {
        let mut cursor = 0;
        self.visit_blocks_mut(&mut |b| match b {
            BlockMut::Scalar(v) => {
                *v = flat[cursor];
                cursor += 1;
            }
            BlockMut::Vector(v) => {
                for x in v.iter_mut() {
                    *x = flat[cursor];
                    cursor += 1;
                }
            }
            BlockMut::Matrix(m) => {
                for x in m.iter_mut() {
                    *x = flat[cursor];
                    cursor += 1;
                }
            }
        });
        assert_eq!(cursor, flat.len(), "flat parameter length mismatch");
    }

    /// Unwhitened posterior over one latent process's inducing variables.
    pub fn latent_inducing(&self, q: usize) -> Result<(KernelParams, InducingSet)> {
        let lp = &self.latents[q];
        let kern = lp.kern.to_params();
        let kuu = crate::kernel::kernel_matrix(&kern, &lp.z, &lp.z)?;
        let (l_k, _) = cholesky_with_jitter(&kuu, &format!("latent {q} inducing covariance"))?;
        let u = lp.factor.unwhiten(&l_k)?;
        Ok((kern, InducingSet::new(lp.z.clone(), u)?))
    }

    fn mapping_posteriors(
        &self,
        kern: &SeKernelRaw,
        z: &DMatrix<f64>,
        factors: &[WhitenedFactor],
        context: &str,
    ) -> Result<Vec<SparsePosterior>> {
        let kern = kern.to_params();
        let kuu = crate::kernel::kernel_matrix(&kern, z, z)?;
        let (l_k, _) = cholesky_with_jitter(&kuu, context)?;
        factors
            .iter()
            .map(|f| {
                let u = f.unwhiten(&l_k)?;
                SparsePosterior::new(&kern, &InducingSet::new(z.clone(), u)?)
            })
            .collect()
    }

    /// Predicts one task at raw task-domain inputs (rows). Returns means and
    /// variances in original output units.
    pub fn predict_task_batch(
        &self,
        task: usize,
        x_raw: &DMatrix<f64>,
    ) -> Result<Vec<(f64, f64)>> {
        if task >= self.tasks.len() {
            return Err(Error::contract(format!(
                "task {task} not modeled by this {} instance",
                self.variant
            )));
        }
        let tb = &self.tasks[task];
        if x_raw.ncols() != tb.x.ncols() {
            return Err(Error::DimensionMismatch {
                context: "predict_task",
                expected: tb.x.ncols(),
                got: x_raw.ncols(),
            });
        }

        let posteriors: Vec<(KernelParams, SparsePosterior)> = (0..self.num_latents())
            .map(|q| {
                let (kern, ind) = self.latent_inducing(q)?;
                let post = SparsePosterior::new(&kern, &ind)?;
                Ok((kern, post))
            })
            .collect::<Result<_>>()?;

        let mix = match &self.mixing {
            Some(a) => MixingMatrix { a: a.clone() },
            None => MixingMatrix::ones(1, 1),
        };
        let noise = TaskNoise {
            noise_raw: self.noise_raw.clone(),
        };

        let map_posts = match &tb.calib {
            TaskCalibration::Residual(r) => {
                Some(self.mapping_posteriors(&r.kern, &r.z, &r.factors, "mapping covariance")?)
            }
            TaskCalibration::Embedded(e) => {
                Some(self.mapping_posteriors(&e.kern, &e.z, &e.factors, "mapping covariance")?)
            }
            TaskCalibration::Deterministic => None,
        };

        let mut out = Vec::with_capacity(x_raw.nrows());
        for i in 0..x_raw.nrows() {
            let x_norm = tb.normalize_input(&x_raw.row(i).transpose());
            let per_q: Vec<(f64, f64)> = match &tb.calib {
                TaskCalibration::Deterministic => {
                    let aligned = if self.variant == Variant::Sogp {
                        x_norm.clone()
                    } else {
                        tb.mapping.apply(&x_norm)?
                    };
                    posteriors
                        .iter()
                        .map(|(_, p)| p.moments(&aligned))
                        .collect::<Result<_>>()?
                }
                TaskCalibration::Residual(_) => {
                    let prior_mean = tb.mapping.apply(&x_norm)?;
                    let posts = map_posts.as_ref().unwrap();
                    let mut mean = DVector::zeros(posts.len());
                    let mut var = DVector::zeros(posts.len());
                    for (d, p) in posts.iter().enumerate() {
                        let (m, v) = p.moments(&x_norm)?;
                        mean[d] = m + prior_mean[d];
                        var[d] = v.max(0.0);
                    }
                    let input = GaussianInput::new(mean, var)?;
                    posteriors
                        .iter()
                        .map(|(_, p)| Ok(p.moments_uncertain(&input)?.into_pair()))
                        .collect::<Result<_>>()?
                }
                TaskCalibration::Embedded(_) => {
                    // align through the posterior mapping mean
                    let posts = map_posts.as_ref().unwrap();
                    let mut aligned = DVector::zeros(posts.len());
                    for (d, p) in posts.iter().enumerate() {
                        aligned[d] = p.moments(&x_norm)?.0;
                    }
                    posteriors
                        .iter()
                        .map(|(_, p)| p.moments(&aligned))
                        .collect::<Result<_>>()?
                }
            };
            let (mean_n, var_n) = combine_prediction(&mix, &noise, task, &per_q)?;
            let y_mean = mean_n * tb.stats.y_std + tb.stats.y_mean;
            let y_var = var_n * tb.stats.y_std * tb.stats.y_std;
            out.push((y_mean, y_var));
        }
        Ok(out)
    }

    /// Predicts one task at a single raw point.
    pub fn predict_task(&self, task: usize, x_raw: &DVector<f64>) -> Result<(f64, f64)> {
        let m = DMatrix::from_rows(&[x_raw.transpose()]);
        Ok(self.predict_task_batch(task, &m)?[0])
    }
}
