//! Independent reference implementations used by test suites.
//!
//! Everything here is written against plain dense linear algebra and direct
//! scalar formulas on purpose: these routines are the oracles that the
//! production code paths get checked against, so they must not share code
//! with them.

use nalgebra::{DMatrix, DVector};

/// Gauss-Hermite nodes and weights for the physicists' weight `exp(-x^2)`,
/// computed with the Golub-Welsch algorithm on the Jacobi matrix.
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1);
        let mut jacobi = DMatrix::zeros(n, n);
        for i in 0..n - 1 {
            let off = ((i + 1) as f64 / 2.0).sqrt();
            jacobi[(i, i + 1)] = off;
            jacobi[(i + 1, i)] = off;
        }
        let eig = nalgebra::SymmetricEigen::new(jacobi);
        let mu0 = std::f64::consts::PI.sqrt();
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let v0 = eig.eigenvectors[(0, i)];
                (eig.eigenvalues[i], mu0 * v0 * v0)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        GaussHermite {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        }
    }

    /// `E[f(x)]` for `x ~ N(mean, var)` in one dimension.
    pub fn expect_1d(&self, mean: f64, var: f64, f: impl Fn(f64) -> f64) -> f64 {
        let scale = (2.0 * var).sqrt();
        let norm = std::f64::consts::PI.sqrt();
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&t, &w)| w * f(mean + scale * t))
            .sum::<f64>()
            / norm
    }

    /// `E[f(x)]` for `x ~ N(mean, diag(var))` over a full product grid.
    pub fn expect_nd(
        &self,
        mean: &DVector<f64>,
        var: &DVector<f64>,
        f: impl Fn(&DVector<f64>) -> f64,
    ) -> f64 {
        let d = mean.len();
        let n = self.nodes.len();
        let norm = std::f64::consts::PI.sqrt().powi(d as i32);
        let mut idx = vec![0usize; d];
        let mut x = DVector::zeros(d);
        let mut total = 0.0;
        loop {
            let mut w = 1.0;
            for k in 0..d {
                let t = self.nodes[idx[k]];
                w *= self.weights[idx[k]];
                x[k] = mean[k] + (2.0 * var[k]).sqrt() * t;
            }
            total += w * f(&x);
            // odometer increment
            let mut k = 0;
            loop {
                if k == d {
                    return total / norm;
                }
                idx[k] += 1;
                if idx[k] < n {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
        }
    }
}

/// Squared-exponential kernel written out directly from constrained values.
pub fn se_kernel(vf: f64, alphas: &[f64], x: &DVector<f64>, y: &DVector<f64>) -> f64 {
    let mut quad = 0.0;
    for d in 0..x.len() {
        let r = x[d] - y[d];
        quad += alphas[d] * r * r;
    }
    vf * (-0.5 * quad).exp()
}

/// Generic `KL[N(m1, S1) || N(m2, S2)]` with dense matrix operations.
pub fn gaussian_kl_dense(
    m1: &DVector<f64>,
    s1: &DMatrix<f64>,
    m2: &DVector<f64>,
    s2: &DMatrix<f64>,
) -> f64 {
    let k = m1.len() as f64;
    let s2_inv = s2.clone().try_inverse().expect("oracle: S2 invertible");
    let diff = m2 - m1;
    let trace = (&s2_inv * s1).trace();
    let quad = (diff.transpose() * &s2_inv * &diff)[(0, 0)];
    let log_det = |s: &DMatrix<f64>| {
        nalgebra::Cholesky::new(s.clone())
            .expect("oracle: SPD")
            .l()
            .diagonal()
            .iter()
            .map(|d| 2.0 * d.ln())
            .sum::<f64>()
    };
    0.5 * (trace + quad - k + log_det(s2) - log_det(s1))
}

/// Exact GP log marginal likelihood `log N(y | 0, K + noise*I)`.
pub fn exact_gp_log_marginal(k: &DMatrix<f64>, y: &DVector<f64>, noise: f64) -> f64 {
    let n = y.len();
    let mut c = k.clone();
    for i in 0..n {
        c[(i, i)] += noise;
    }
    let chol = nalgebra::Cholesky::new(c).expect("oracle: K + noise*I SPD");
    let alpha = chol.solve(y);
    let log_det = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum::<f64>();
    -0.5 * y.dot(&alpha) - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// Gaussian log density `log N(x | mean, var)`.
pub fn log_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let r = x - mean;
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + r * r / var)
}

/// Worst-case errors of the analytic kernel-expectation statistics against
/// product Gauss-Hermite quadrature over randomized instances.
#[derive(Debug, Clone, Copy)]
pub struct PsiCheckOutcome {
    pub max_abs_psi0: f64,
    pub max_rel_psi1: f64,
    pub max_rel_psi2: f64,
}

/// Randomized comparison of `psi0`/`psi1`/`psi2` with a >=20-node
/// Gauss-Hermite product rule on instances with `D <= 3`, `M <= 5`.
pub fn psi_statistics_vs_quadrature(instances: usize, seed: u64) -> PsiCheckOutcome {
    use crate::kernel::{psi0, psi1, psi2, GaussianInput, KernelParams};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    let gh = GaussHermite::new(60);
    let mut rng = StdRng::seed_from_u64(seed);
    let mut out = PsiCheckOutcome {
        max_abs_psi0: 0.0,
        max_rel_psi1: 0.0,
        max_rel_psi2: 0.0,
    };
    for _ in 0..instances {
        let d = rng.random_range(1..=3usize);
        let m = rng.random_range(1..=5usize);
        let vf: f64 = rng.random_range(0.3..3.0);
        let alphas: Vec<f64> = (0..d).map(|_| rng.random_range(0.3..2.0)).collect();
        let ls: Vec<f64> = alphas.iter().map(|a| 1.0 / a.sqrt()).collect();
        let params = KernelParams::new(vf, &ls).unwrap();
        let mean = DVector::from_fn(d, |_, _| rng.random_range(-1.5..1.5));
        let var = DVector::from_fn(d, |_, _| rng.random_range(0.01..1.5));
        let input = GaussianInput::new(mean.clone(), var.clone()).unwrap();
        let z = DMatrix::from_fn(m, d, |_, _| rng.random_range(-1.5..1.5));

        let p0 = psi0(&params, &input).unwrap();
        let q0 = gh.expect_nd(&mean, &var, |x| se_kernel(vf, &alphas, x, x));
        out.max_abs_psi0 = out.max_abs_psi0.max((p0 - q0).abs());

        let p1 = psi1(&params, &input, &z).unwrap();
        for j in 0..m {
            let zj = z.row(j).transpose();
            let q1 = gh.expect_nd(&mean, &var, |x| se_kernel(vf, &alphas, x, &zj));
            let rel = (p1[j] - q1).abs() / q1.abs().max(1e-300);
            out.max_rel_psi1 = out.max_rel_psi1.max(rel);
        }

        let p2 = psi2(&params, &input, &z).unwrap();
        for j in 0..m {
            for jp in j..m {
                let zj = z.row(j).transpose();
                let zjp = z.row(jp).transpose();
                let q2 = gh.expect_nd(&mean, &var, |x| {
                    se_kernel(vf, &alphas, x, &zj) * se_kernel(vf, &alphas, x, &zjp)
                });
                let rel = (p2[(j, jp)] - q2).abs() / q2.abs().max(1e-300);
                out.max_rel_psi2 = out.max_rel_psi2.max(rel);
            }
        }
    }
    out
}

/// Worst-case error of the psi statistics against plain kernel products in
/// the zero-variance (deterministic) limit, over randomized instances.
pub fn psi_deterministic_collapse_max_error(instances: usize, seed: u64) -> f64 {
    use crate::kernel::{kernel_eval, psi0, psi1, psi2, GaussianInput, KernelParams};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    let mut rng = StdRng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let d = rng.random_range(1..=3usize);
        let m = rng.random_range(1..=5usize);
        let vf: f64 = rng.random_range(0.3..3.0);
        let ls: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..2.0)).collect();
        let params = KernelParams::new(vf, &ls).unwrap();
        let mean = DVector::from_fn(d, |_, _| rng.random_range(-1.5..1.5));
        let input = GaussianInput::deterministic(mean.clone());
        let z = DMatrix::from_fn(m, d, |_, _| rng.random_range(-1.5..1.5));

        let p0 = psi0(&params, &input).unwrap();
        worst = worst.max((p0 - kernel_eval(&params, &mean, &mean).unwrap()).abs());
        let p1 = psi1(&params, &input, &z).unwrap();
        let p2 = psi2(&params, &input, &z).unwrap();
        let mut kv = DVector::zeros(m);
        for j in 0..m {
            kv[j] = kernel_eval(&params, &mean, &z.row(j).transpose()).unwrap();
        }
        for j in 0..m {
            worst = worst.max((p1[j] - kv[j]).abs());
            for jp in 0..m {
                worst = worst.max((p2[(j, jp)] - kv[j] * kv[jp]).abs());
            }
        }
    }
    worst
}

/// Worst-case errors of the closed-form KL divergences against the dense
/// generic Gaussian KL, over randomized instances.
#[derive(Debug, Clone, Copy)]
pub struct KlCheckOutcome {
    pub max_err_standard: f64,
    pub max_err_diag: f64,
    /// Most negative KL value observed (nonnegativity check).
    pub min_value: f64,
}

pub fn kl_closed_forms_vs_dense(instances: usize, seed: u64) -> KlCheckOutcome {
    use crate::variational::{kl_diag_gaussians, kl_to_standard_normal, VariationalGaussian};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    let mut rng = StdRng::seed_from_u64(seed);
    let mut out = KlCheckOutcome {
        max_err_standard: 0.0,
        max_err_diag: 0.0,
        min_value: f64::INFINITY,
    };
    for _ in 0..instances {
        let m = rng.random_range(1..=6usize);
        let mut l = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..i {
                l[(i, j)] = rng.random_range(-0.6..0.6);
            }
            l[(i, i)] = rng.random_range(0.2..1.8);
        }
        let mean = DVector::from_fn(m, |_, _| rng.random_range(-1.5..1.5));
        let q = VariationalGaussian::new(mean.clone(), l.clone()).unwrap();
        let got = kl_to_standard_normal(&q);
        let reference = gaussian_kl_dense(
            &mean,
            &(&l * l.transpose()),
            &DVector::zeros(m),
            &DMatrix::identity(m, m),
        );
        out.max_err_standard = out.max_err_standard.max((got - reference).abs());
        out.min_value = out.min_value.min(got);

        let d = rng.random_range(1..=5usize);
        let mu_q = DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0));
        let var_q = DVector::from_fn(d, |_, _| rng.random_range(0.05..2.5));
        let mu_p = DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0));
        let var_p: f64 = rng.random_range(0.05..2.5);
        let got = kl_diag_gaussians(&mu_q, &var_q, &mu_p, var_p).unwrap();
        let reference = gaussian_kl_dense(
            &mu_q,
            &DMatrix::from_diagonal(&var_q),
            &mu_p,
            &(DMatrix::identity(d, d) * var_p),
        );
        out.max_err_diag = out.max_err_diag.max((got - reference).abs());
        out.min_value = out.min_value.min(got);
    }
    out
}
