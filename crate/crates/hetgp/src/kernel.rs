//! Squared-exponential ARD kernel and its Gaussian-expectation statistics.
//!
//! The kernel is
//!
//! ```text
//! k(x, y) = v_f * exp(-1/2 * sum_d a_d * (x_d - y_d)^2),   a_d = 1 / l_d^2,
//! ```
//!
//! with output scale `v_f` and per-dimension lengthscales `l_d`. Both are
//! stored as unconstrained reals and mapped through a softplus so that
//! gradient-based optimizers can move freely.
//!
//! For an uncertain input `x ~ N(mu, diag(nu))` the three expectations of the
//! kernel that appear in analytic variational bounds have closed forms:
//!
//! * `psi0 = E[k(x,x)] = v_f`
//! * `psi1[j] = E[k(x, z_j)]`
//! * `psi2[j,j'] = E[k(x, z_j) k(x, z_j')]`

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};

/// Numerically stable softplus, `ln(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`]: returns `x` with `softplus(x) = y` for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    // ln(exp(y) - 1) = y + ln(1 - exp(-y)), stable for large y.
    y + (-(-y).exp()).ln_1p()
}

/// Derivative of softplus, the logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Hyperparameters of a squared-exponential ARD kernel, stored unconstrained.
#[derive(Debug, Clone)]
pub struct KernelParams {
    pub output_scale_raw: f64,
    pub lengthscale_raw: DVector<f64>,
}

impl KernelParams {
    /// Builds parameters from constrained values (`output_scale > 0`,
    /// `lengthscales > 0`).
    pub fn new(output_scale: f64, lengthscales: &[f64]) -> Result<Self> {
        if output_scale <= 0.0 {
            return Err(Error::contract("output scale must be positive"));
        }
        if lengthscales.iter().any(|&l| l <= 0.0) {
            return Err(Error::contract("lengthscales must be positive"));
        }
        Ok(KernelParams {
            output_scale_raw: softplus_inv(output_scale),
            lengthscale_raw: DVector::from_iterator(
                lengthscales.len(),
                lengthscales.iter().map(|&l| softplus_inv(l)),
            ),
        })
    }

    /// Isotropic initialization: every lengthscale set to `lengthscale`.
    pub fn isotropic(dim: usize, output_scale: f64, lengthscale: f64) -> Result<Self> {
        Self::new(output_scale, &vec![lengthscale; dim])
    }

    /// Input dimensionality the kernel operates on.
    pub fn dim(&self) -> usize {
        self.lengthscale_raw.len()
    }

    /// Output scale `v_f = softplus(output_scale_raw)`.
    pub fn output_scale(&self) -> f64 {
        softplus(self.output_scale_raw)
    }

    /// Constrained lengthscales `l_d`.
    pub fn lengthscales(&self) -> DVector<f64> {
        self.lengthscale_raw.map(softplus)
    }

    /// Inverse squared lengthscales `a_d = 1 / l_d^2`.
    pub fn alphas(&self) -> DVector<f64> {
        self.lengthscale_raw.map(|r| {
            let l = softplus(r);
            1.0 / (l * l)
        })
    }
}

/// A diagonal Gaussian over a kernel input: `x ~ N(mean, diag(variance))`.
///
/// A zero variance entry marks that coordinate as deterministic.
#[derive(Debug, Clone)]
pub struct GaussianInput {
    pub mean: DVector<f64>,
    pub variance: DVector<f64>,
}

impl GaussianInput {
    pub fn new(mean: DVector<f64>, variance: DVector<f64>) -> Result<Self> {
        check_dim("GaussianInput", mean.len(), variance.len())?;
        if variance.iter().any(|&v| v < 0.0) {
            return Err(Error::contract("GaussianInput variance must be nonnegative"));
        }
        Ok(GaussianInput { mean, variance })
    }

    /// A deterministic input (all variances zero).
    pub fn deterministic(mean: DVector<f64>) -> Self {
        let variance = DVector::zeros(mean.len());
        GaussianInput { mean, variance }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Evaluates `k(x, y)`.
pub fn kernel_eval(params: &KernelParams, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
    check_dim("kernel_eval x", params.dim(), x.len())?;
    check_dim("kernel_eval y", params.dim(), y.len())?;
    let alphas = params.alphas();
    let mut quad = 0.0;
    for d in 0..x.len() {
        let r = x[d] - y[d];
        quad += alphas[d] * r * r;
    }
    Ok(params.output_scale() * (-0.5 * quad).exp())
}

/// Cross-covariance matrix with entry `(i, j) = k(x_i, y_j)`; points are rows.
pub fn kernel_matrix(
    params: &KernelParams,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    check_dim("kernel_matrix x", params.dim(), x.ncols())?;
    check_dim("kernel_matrix y", params.dim(), y.ncols())?;
    let alphas = params.alphas();
    let vf = params.output_scale();
    let (n, m) = (x.nrows(), y.nrows());
    let mut k = DMatrix::zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            let mut quad = 0.0;
            for d in 0..x.ncols() {
                let r = x[(i, d)] - y[(j, d)];
                quad += alphas[d] * r * r;
            }
            k[(i, j)] = vf * (-0.5 * quad).exp();
        }
    }
    Ok(k)
}

/// `E[k(x, x)]` under a diagonal Gaussian input. For the squared-exponential
/// kernel this is the output scale regardless of the input distribution.
pub fn psi0(params: &KernelParams, input: &GaussianInput) -> Result<f64> {
    check_dim("psi0", params.dim(), input.dim())?;
    Ok(params.output_scale())
}

/// `E[k(x, z_j)]` for every row `z_j` of `z`.
pub fn psi1(params: &KernelParams, input: &GaussianInput, z: &DMatrix<f64>) -> Result<DVector<f64>> {
    check_dim("psi1 input", params.dim(), input.dim())?;
    check_dim("psi1 z", params.dim(), z.ncols())?;
    let alphas = params.alphas();
    let vf = params.output_scale();
    let m = z.nrows();
    let mut out = DVector::zeros(m);
    for j in 0..m {
        let mut value = vf;
        for d in 0..params.dim() {
            let c = alphas[d] * input.variance[d] + 1.0;
            let r = input.mean[d] - z[(j, d)];
            value *= (-0.5 * alphas[d] * r * r / c).exp() / c.sqrt();
        }
        out[j] = value;
    }
    Ok(out)
}

/// `E[k(x, z_j) k(x, z_j')]` for every pair of rows of `z`. Symmetric
/// positive semidefinite.
pub fn psi2(params: &KernelParams, input: &GaussianInput, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dim("psi2 input", params.dim(), input.dim())?;
    check_dim("psi2 z", params.dim(), z.ncols())?;
    let alphas = params.alphas();
    let vf = params.output_scale();
    let m = z.nrows();
    let mut out = DMatrix::zeros(m, m);
    for j in 0..m {
        for jp in j..m {
            let mut value = vf * vf;
            for d in 0..params.dim() {
                let a = alphas[d];
                let c = 2.0 * a * input.variance[d] + 1.0;
                let s = z[(j, d)] - z[(jp, d)];
                let zbar = 0.5 * (z[(j, d)] + z[(jp, d)]);
                let r = input.mean[d] - zbar;
                value *= (-0.25 * a * s * s - a * r * r / c).exp() / c.sqrt();
            }
            out[(j, jp)] = value;
            out[(jp, j)] = value;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn dvec(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    #[test]
    fn softplus_roundtrip() {
        for &y in &[1e-4, 0.1, 1.0, 10.0, 40.0] {
            assert_relative_eq!(softplus(softplus_inv(y)), y, max_relative = 1e-12);
        }
        assert!(softplus(-500.0) > 0.0);
    }

    #[test]
    fn eval_at_same_point_is_output_scale() {
        let p = KernelParams::new(1.0, &[0.7, 2.0]).unwrap();
        let x = dvec(&[0.3, -1.2]);
        assert_relative_eq!(kernel_eval(&p, &x, &x).unwrap(), 1.0, epsilon = 1e-14);
        let p2 = KernelParams::new(3.7, &[0.7, 2.0]).unwrap();
        assert_relative_eq!(kernel_eval(&p2, &x, &x).unwrap(), 3.7, epsilon = 1e-12);
    }

    #[test]
    fn eval_matches_hand_value() {
        // alpha = 1, |x - y| = sqrt(2)  =>  exp(-1)
        let p = KernelParams::new(1.0, &[1.0]).unwrap();
        let v = kernel_eval(&p, &dvec(&[0.0]), &dvec(&[2.0f64.sqrt()])).unwrap();
        assert_relative_eq!(v, (-1.0f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn eval_matches_independent_scalar_formula() {
        // v_f = 2.5, alpha = (0.7, 1.3), x = (0.2, -0.4), y = (1.0, 0.5)
        let alphas = [0.7f64, 1.3];
        let ls: Vec<f64> = alphas.iter().map(|a| 1.0 / a.sqrt()).collect();
        let p = KernelParams::new(2.5, &ls).unwrap();
        let x = dvec(&[0.2, -0.4]);
        let y = dvec(&[1.0, 0.5]);
        let quad = 0.7 * (0.2f64 - 1.0).powi(2) + 1.3 * (-0.4f64 - 0.5).powi(2);
        let expected = 2.5 * (-0.5 * quad).exp();
        assert_relative_eq!(kernel_eval(&p, &x, &y).unwrap(), expected, max_relative = 1e-12);
    }

    #[test]
    fn eval_is_symmetric() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..20 {
            let d = rng.random_range(1..4);
            let ls: Vec<f64> = (0..d).map(|_| rng.random_range(0.2..3.0)).collect();
            let p = KernelParams::new(rng.random_range(0.1..4.0), &ls).unwrap();
            let x = DVector::from_fn(d, |_, _| rng.random_range(-3.0..3.0));
            let y = DVector::from_fn(d, |_, _| rng.random_range(-3.0..3.0));
            let a = kernel_eval(&p, &x, &y).unwrap();
            let b = kernel_eval(&p, &y, &x).unwrap();
            assert_eq!(a, b);
            assert!(a > 0.0 && a <= p.output_scale() + 1e-12);
        }
    }

    #[test]
    fn matrix_matches_entrywise_eval() {
        let mut rng = StdRng::seed_from_u64(11);
        let p = KernelParams::new(1.4, &[0.8, 1.1]).unwrap();
        let x = DMatrix::from_fn(3, 2, |_, _| rng.random_range(-2.0..2.0));
        let y = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-2.0..2.0));
        let k = kernel_matrix(&p, &x, &y).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let v = kernel_eval(&p, &x.row(i).transpose(), &y.row(j).transpose()).unwrap();
                assert_relative_eq!(k[(i, j)], v, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn matrix_single_point_and_duplicate_rows() {
        let p = KernelParams::new(2.0, &[1.0]).unwrap();
        let x = DMatrix::from_row_slice(1, 1, &[0.5]);
        let k = kernel_matrix(&p, &x, &x).unwrap();
        assert_eq!(k.nrows(), 1);
        assert_relative_eq!(k[(0, 0)], 2.0, epsilon = 1e-14);

        let x = DMatrix::from_row_slice(3, 1, &[0.1, 0.7, 0.1]);
        let y = DMatrix::from_row_slice(2, 1, &[-1.0, 0.4]);
        let k = kernel_matrix(&p, &x, &y).unwrap();
        assert_eq!(k.row(0), k.row(2));
    }

    #[test]
    fn matrix_is_positive_semidefinite() {
        let mut rng = StdRng::seed_from_u64(3);
        for &n in &[5usize, 20, 50] {
            let p = KernelParams::new(1.0, &[0.5, 1.5]).unwrap();
            let x = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-3.0..3.0));
            let mut k = kernel_matrix(&p, &x, &x).unwrap();
            for i in 0..n {
                k[(i, i)] += 1e-6;
            }
            let eig = nalgebra::SymmetricEigen::new(k);
            assert!(eig.eigenvalues.iter().all(|&e| e > 0.0));
        }
    }

    #[test]
    fn psi0_is_output_scale() {
        let p = KernelParams::new(2.0, &[1.0, 1.0]).unwrap();
        let input = GaussianInput::new(dvec(&[0.3, -0.8]), dvec(&[5.0, 5.0])).unwrap();
        assert_relative_eq!(psi0(&p, &input).unwrap(), 2.0, epsilon = 1e-14);
        let det = GaussianInput::deterministic(dvec(&[1.0, 2.0]));
        let p2 = KernelParams::new(3.7, &[1.0, 1.0]).unwrap();
        assert_relative_eq!(psi0(&p2, &det).unwrap(), 3.7, epsilon = 1e-14);
    }

    #[test]
    fn psi1_hand_value() {
        // alpha = 1, mu = 0, nu = 1, z = 0  =>  1/sqrt(2)
        let p = KernelParams::new(1.0, &[1.0]).unwrap();
        let input = GaussianInput::new(dvec(&[0.0]), dvec(&[1.0])).unwrap();
        let z = DMatrix::from_row_slice(1, 1, &[0.0]);
        let v = psi1(&p, &input, &z).unwrap();
        assert_relative_eq!(v[0], 1.0 / 2.0f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn psi_statistics_collapse_to_kernel_at_zero_variance() {
        let mut rng = StdRng::seed_from_u64(19);
        let p = KernelParams::new(1.7, &[0.6, 1.4]).unwrap();
        let mu = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
        let input = GaussianInput::deterministic(mu.clone());
        let z = DMatrix::from_fn(4, 2, |_, _| rng.random_range(-2.0..2.0));

        let phi = psi1(&p, &input, &z).unwrap();
        let kv = kernel_matrix(&p, &DMatrix::from_rows(&[mu.transpose()]), &z).unwrap();
        for j in 0..4 {
            assert_relative_eq!(phi[j], kv[(0, j)], epsilon = 1e-10);
        }

        let big = psi2(&p, &input, &z).unwrap();
        for j in 0..4 {
            for jp in 0..4 {
                assert_relative_eq!(big[(j, jp)], kv[(0, j)] * kv[(0, jp)], epsilon = 1e-10);
            }
        }

        assert_relative_eq!(
            psi0(&p, &input).unwrap(),
            kernel_eval(&p, &mu, &mu).unwrap(),
            epsilon = 1e-10
        );
    }

    #[test]
    fn psi1_bounded_and_monotone_in_distance() {
        let p = KernelParams::new(2.0, &[0.9]).unwrap();
        let input = GaussianInput::new(dvec(&[0.0]), dvec(&[0.5])).unwrap();
        let mut prev = f64::INFINITY;
        for step in 0..8 {
            let z = DMatrix::from_row_slice(1, 1, &[0.3 * step as f64]);
            let v = psi1(&p, &input, &z).unwrap()[0];
            assert!(v <= 2.0 + 1e-12);
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn psi2_symmetric_psd() {
        let mut rng = StdRng::seed_from_u64(23);
        let p = KernelParams::new(1.0, &[0.7]).unwrap();
        let input = GaussianInput::new(dvec(&[0.2]), dvec(&[0.8])).unwrap();
        let z = DMatrix::from_fn(5, 1, |_, _| rng.random_range(-2.0..2.0));
        let m = psi2(&p, &input, &z).unwrap();
        assert_relative_eq!(m.clone(), m.transpose(), epsilon = 1e-14);
        let eig = nalgebra::SymmetricEigen::new(m);
        assert!(eig.eigenvalues.iter().all(|&e| e > -1e-10));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let p = KernelParams::new(1.0, &[1.0, 1.0]).unwrap();
        let err = kernel_eval(&p, &dvec(&[0.0]), &dvec(&[0.0, 0.0]));
        assert!(err.is_err());
        let z = DMatrix::from_row_slice(1, 1, &[0.0]);
        let input = GaussianInput::deterministic(dvec(&[0.0, 0.0]));
        assert!(psi1(&p, &input, &z).is_err());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn instance() -> impl Strategy<Value = (f64, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
            (1usize..4).prop_flat_map(|d| {
                (
                    0.1f64..4.0,
                    prop::collection::vec(0.2f64..3.0, d),
                    prop::collection::vec(-3.0f64..3.0, d),
                    prop::collection::vec(-3.0f64..3.0, d),
                    prop::collection::vec(0.0f64..2.0, d),
                )
            })
        }

        proptest! {
            #[test]
            fn eval_is_symmetric_and_in_range((scale, ls, x, y, _) in instance()) {
                let p = KernelParams::new(scale, &ls).unwrap();
                let xv = DVector::from_row_slice(&x);
                let yv = DVector::from_row_slice(&y);
                let a = kernel_eval(&p, &xv, &yv).unwrap();
                let b = kernel_eval(&p, &yv, &xv).unwrap();
                prop_assert_eq!(a, b);
                prop_assert!(a > 0.0);
                prop_assert!(a <= p.output_scale() * (1.0 + 1e-12));
            }

            #[test]
            fn psi1_entries_bounded_by_output_scale((scale, ls, mu, z, var) in instance()) {
                let p = KernelParams::new(scale, &ls).unwrap();
                let input = GaussianInput::new(
                    DVector::from_row_slice(&mu),
                    DVector::from_row_slice(&var),
                )
                .unwrap();
                let zm = DMatrix::from_fn(1, z.len(), |_, j| z[j]);
                let phi = psi1(&p, &input, &zm).unwrap();
                prop_assert!(phi[0] > 0.0);
                prop_assert!(phi[0] <= p.output_scale() * (1.0 + 1e-12));
            }
        }
    }
}
