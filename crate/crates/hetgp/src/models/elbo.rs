//! Objective assembly on the autodiff tape.
//!
//! Each variant's bound is one scalar graph: expected log-likelihood terms
//! per task (scaled by `N^t / |B^t|` under minibatching), minus the inducing
//! KL terms, minus the variant's calibration terms. Tasks with deterministic
//! alignment use the plain sparse-GP moments; tasks with stochastic aligned
//! inputs integrate the kernel analytically through the psi statistics.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::tape::{Tape, Value, Var};

use super::{ModelState, TaskCalibration, WhitenedFactor};

/// Per-task minibatch index sets (sorted, within range).
#[derive(Debug, Clone)]
pub struct BatchSel {
    pub indices: Vec<Vec<usize>>,
}

impl BatchSel {
    /// Full-data batches in index order.
    pub fn full(model: &ModelState) -> BatchSel {
        BatchSel {
            indices: model.tasks.iter().map(|t| (0..t.len()).collect()).collect(),
        }
    }

    fn validate(&self, model: &ModelState) -> Result<()> {
        if self.indices.len() != model.tasks.len() {
            return Err(Error::contract("batch selection task count mismatch"));
        }
        for (t, (idx, task)) in self.indices.iter().zip(&model.tasks).enumerate() {
            if idx.is_empty() && !task.is_empty() {
                return Err(Error::contract(format!("empty batch for task {t} with data")));
            }
            if idx.iter().any(|&i| i >= task.len()) {
                return Err(Error::contract(format!("batch index out of range for task {t}")));
            }
        }
        Ok(())
    }
}

fn gather_rows(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(idx.len(), m.ncols());
    for (r, &i) in idx.iter().enumerate() {
        out.set_row(r, &m.row(i));
    }
    out
}

fn gather_vec(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

#[derive(Clone, Copy)]
enum CalibMode {
    Normal,
    /// Residual tasks evaluate the expectation path at the prior-aligned
    /// means with zero input variance and skip the aligned-input KL.
    ForcedZeroVariance,
}

struct FactorLeaves {
    mean: Var,
    diag: Var,
    off: Var,
}

struct LatentNodes {
    scale: Var,
    ls: Var,
    z: Var,
    factor: FactorLeaves,
    vf: Var,
    l_k: Var,
    l_w: Var,
    beta: Var,
    s_w: Var,
    kl: Var,
}

struct CalibLeaves {
    scale: Var,
    ls: Var,
    z: Var,
    factors: Vec<FactorLeaves>,
    /// prior variance (residual) or observation noise (embedded)
    extra: Var,
}

struct Graph {
    tape: Tape,
    root: Var,
    leaves: Vec<Var>,
}

struct Builder<'m> {
    t: Tape,
    model: &'m ModelState,
    leaves: Vec<Var>,
}

impl<'m> Builder<'m> {
    fn new(model: &'m ModelState) -> Self {
        Builder {
            t: Tape::new(),
            model,
            leaves: Vec::new(),
        }
    }

    fn leaf_scalar(&mut self, v: f64) -> Var {
        let var = self.t.scalar_param(v);
        self.leaves.push(var);
        var
    }

    fn leaf_vector(&mut self, v: DVector<f64>) -> Var {
        let var = self.t.vector_param(v);
        self.leaves.push(var);
        var
    }

    fn leaf_matrix(&mut self, v: DMatrix<f64>) -> Var {
        let var = self.t.matrix_param(v);
        self.leaves.push(var);
        var
    }

    fn factor_leaves(&mut self, f: &WhitenedFactor) -> FactorLeaves {
        FactorLeaves {
            mean: self.leaf_vector(f.mean.clone()),
            diag: self.leaf_vector(f.diag_raw.clone()),
            off: self.leaf_vector(f.off.clone()),
        }
    }

    fn assemble_factor(&mut self, f: &FactorLeaves) -> Var {
        let diag = self.t.softplus_v(f.diag);
        self.t.assemble_lower(diag, f.off)
    }

    /// `KL[N(m, L L^T) || N(0, I)]` on whitened coordinates.
    fn whitened_kl(&mut self, mean: Var, lower: Var) -> Var {
        let m = self.t.value(mean).as_vector().len() as f64;
        let sq = self.t.dot_v(mean, mean);
        let tr = self.t.frob_inner(lower, lower);
        let mc = self.t.scalar_const(m);
        let s1 = self.t.add_s(sq, tr);
        let s2 = self.t.sub_s(s1, mc);
        let half = self.t.scalar_const(0.5);
        let s3 = self.t.mul_s(half, s2);
        let ld = self.t.ln_diag_sum(lower);
        self.t.sub_s(s3, ld)
    }

    /// Registers leaves and builds shared per-latent nodes. Must follow the
    /// canonical block order of `ModelState::visit_blocks`.
    fn latent_nodes(&mut self) -> Result<Vec<LatentNodes>> {
        let mut out = Vec::with_capacity(self.model.latents.len());
        for (q, lp) in self.model.latents.iter().enumerate() {
            let scale = self.leaf_scalar(lp.kern.scale_raw);
            let ls = self.leaf_vector(lp.kern.ls_raw.clone());
            let z = self.leaf_matrix(lp.z.clone());
            let factor = self.factor_leaves(&lp.factor);

            let vf = self.t.softplus_s(scale);
            let kuu = self.t.se_kernel(scale, ls, z, z);
            let l_k = self
                .t
                .cholesky(kuu, &format!("latent {q} inducing covariance"))?;
            let l_w = self.assemble_factor(&factor);
            let beta = self.t.solve_lower_t_vec(l_k, factor.mean)?;
            let s_w = self.t.mat_mul_nt(l_w, l_w);
            let kl = self.whitened_kl(factor.mean, l_w);
            out.push(LatentNodes {
                scale,
                ls,
                z,
                factor,
                vf,
                l_k,
                l_w,
                beta,
                s_w,
                kl,
            });
        }
        Ok(out)
    }

    /// Deterministic per-latent moments on a fixed input batch: the
    /// posterior mean vector and the summed posterior variance.
    fn deterministic_moments(
        &mut self,
        lat: &LatentNodes,
        x_const: Var,
        batch: usize,
    ) -> Result<(Var, Var)> {
        let kzx = self.t.se_kernel(lat.scale, lat.ls, lat.z, x_const);
        let a = self.t.solve_lower(lat.l_k, kzx)?;
        let mu = self.t.mat_t_vec(a, lat.factor.mean);
        let ca = self.t.col_sum_sq(a);
        let b = self.t.mat_t_mul(lat.l_w, a);
        let cb = self.t.col_sum_sq(b);
        let base = self.t.broadcast_s(lat.vf, batch);
        let v1 = self.t.sub_v(base, ca);
        let var_vec = self.t.add_v(v1, cb);
        let var_sum = self.t.sum_v(var_vec);
        Ok((mu, var_sum))
    }

    /// Uncertain-input per-latent moments through the psi statistics: the
    /// expected mean vector and the summed effective variance
    /// `sum_i (E[mu_i^2] - E[mu_i]^2 + E[nu_i])`.
    fn uncertain_moments(
        &mut self,
        lat: &LatentNodes,
        mu_mat: Var,
        nu_mat: Var,
        batch: usize,
    ) -> Result<(Var, Var)> {
        let phi = self.t.psi1(lat.scale, lat.ls, mu_mat, nu_mat, lat.z);
        let psi2 = self.t.psi2_sum(lat.scale, lat.ls, mu_mat, nu_mat, lat.z);
        let e_mu = self.t.mat_vec(phi, lat.beta);
        let pb = self.t.mat_vec(psi2, lat.beta);
        let e_mu2_sum = self.t.dot_v(lat.beta, pb);
        // G = L^-1 Psi2 L^-T, then tr((S_w - I) G)
        let t1 = self.t.solve_lower(lat.l_k, psi2)?;
        let t1t = self.t.transpose(t1);
        let g = self.t.solve_lower(lat.l_k, t1t)?;
        let fs = self.t.frob_inner(lat.s_w, g);
        let tg = self.t.trace(g);
        let bconst = self.t.scalar_const(batch as f64);
        let base = self.t.mul_s(bconst, lat.vf);
        let e_nu_sum_1 = self.t.sub_s(fs, tg);
        let e_nu_sum = self.t.add_s(base, e_nu_sum_1);
        let dmu = self.t.dot_v(e_mu, e_mu);
        let centered = self.t.sub_s(e_mu2_sum, dmu);
        let var_sum = self.t.add_s(centered, e_nu_sum);
        Ok((e_mu, var_sum))
    }

    /// Scaled expected log-likelihood of one task given per-latent moment
    /// pairs.
    fn task_likelihood(
        &mut self,
        task_idx: usize,
        y_const: Var,
        moments: &[(Var, Var)],
        mixing: Option<Var>,
        noise_leaf: Var,
        batch: usize,
        scale_factor: f64,
    ) -> Var {
        let nv_raw = self.t.index_v(noise_leaf, task_idx);
        let nv = self.t.softplus_s(nv_raw);

        // mean vector: sum_q a_tq * mu_q
        let mut mean_vec: Option<Var> = None;
        let mut var_term: Option<Var> = None;
        for (q, (mu, var_sum)) in moments.iter().enumerate() {
            let a = match mixing {
                Some(m) => self.t.index_m(m, task_idx, q),
                None => self.t.scalar_const(1.0),
            };
            let scaled_mu = self.t.scale_v(a, *mu);
            mean_vec = Some(match mean_vec {
                Some(acc) => self.t.add_v(acc, scaled_mu),
                None => scaled_mu,
            });
            let a2 = self.t.mul_s(a, a);
            let v = self.t.mul_s(a2, *var_sum);
            var_term = Some(match var_term {
                Some(acc) => self.t.add_s(acc, v),
                None => v,
            });
        }
        let mean_vec = mean_vec.expect("at least one latent process");
        let var_term = var_term.expect("at least one latent process");

        let resid = self.t.sub_v(y_const, mean_vec);
        let sse = self.t.dot_v(resid, resid);
        let two_pi = self.t.scalar_const(2.0 * std::f64::consts::PI);
        let tp_nv = self.t.mul_s(two_pi, nv);
        let ln_term = self.t.ln_s(tp_nv);
        let coeff = self.t.scalar_const(-0.5 * batch as f64);
        let const_part = self.t.mul_s(coeff, ln_term);
        let inner = self.t.add_s(sse, var_term);
        let two = self.t.scalar_const(2.0);
        let denom = self.t.mul_s(two, nv);
        let penalty = self.t.div_s(inner, denom);
        let ll = self.t.sub_s(const_part, penalty);
        let sf = self.t.scalar_const(scale_factor);
        self.t.mul_s(sf, ll)
    }

    /// Mapping-GP column moments over a batch of one task's inputs:
    /// per-dimension residual means, aligned means and variances, plus the
    /// inducing KL terms of the mapping factors.
    #[allow(clippy::type_complexity)]
    fn mapping_columns(
        &mut self,
        leaves: &CalibLeaves,
        x_const: Var,
        prior_cols: Option<&[DVector<f64>]>,
        batch: usize,
        context: &str,
    ) -> Result<(Vec<Var>, Vec<Var>, Vec<Var>, Vec<Var>)> {
        let kg = self.t.se_kernel(leaves.scale, leaves.ls, leaves.z, leaves.z);
        let l_g = self.t.cholesky(kg, context)?;
        let kgx = self.t.se_kernel(leaves.scale, leaves.ls, leaves.z, x_const);
        let a_g = self.t.solve_lower(l_g, kgx)?;
        let vf = self.t.softplus_s(leaves.scale);
        let base = self.t.broadcast_s(vf, batch);
        let ca = self.t.col_sum_sq(a_g);
        let base_var = self.t.sub_v(base, ca);

        let mut residuals = Vec::new();
        let mut means = Vec::new();
        let mut vars = Vec::new();
        let mut kls = Vec::new();
        for (d, f) in leaves.factors.iter().enumerate() {
            let l_w = self.assemble_factor(f);
            let resid = self.t.mat_t_vec(a_g, f.mean);
            let mean = match prior_cols {
                Some(cols) => {
                    let c = self.t.vector_const(cols[d].clone());
                    self.t.add_v(resid, c)
                }
                None => resid,
            };
            let b = self.t.mat_t_mul(l_w, a_g);
            let cb = self.t.col_sum_sq(b);
            let var = self.t.add_v(base_var, cb);
            kls.push(self.whitened_kl(f.mean, l_w));
            residuals.push(resid);
            means.push(mean);
            vars.push(var);
        }
        Ok((residuals, means, vars, kls))
    }

    fn build(mut self, batches: &BatchSel, mode: CalibMode) -> Result<Graph> {
        batches.validate(self.model)?;
        let latents = self.latent_nodes()?;

        let mixing = self.model.mixing.as_ref().map(|a| self.leaf_matrix(a.clone()));
        let noise_leaf = self.leaf_vector(self.model.noise_raw.clone());

        let mut ll_terms: Vec<Var> = Vec::new();
        let mut extra_terms: Vec<Var> = Vec::new();
        let mut kl_terms: Vec<Var> = latents.iter().map(|l| l.kl).collect();

        for (t, task) in self.model.tasks.iter().enumerate() {
            let idx = &batches.indices[t];
            let b = idx.len();
            let scale_factor = task.len() as f64 / b as f64;
            let y_const = {
                let y = gather_vec(&task.y, idx);
                self.t.vector_const(y)
            };

            let moments: Vec<(Var, Var)> = match (&task.calib, mode) {
                (TaskCalibration::Deterministic, _) => {
                    let aligned = gather_rows(&task.aligned, idx);
                    let x_const = self.t.matrix_const(aligned);
                    latents
                        .iter()
                        .map(|lat| self.deterministic_moments(lat, x_const, b))
                        .collect::<Result<_>>()?
                }
                (TaskCalibration::Residual(r), CalibMode::ForcedZeroVariance) => {
                    // registered leaves must still appear in canonical order
                    let leaves = CalibLeaves {
                        scale: self.leaf_scalar(r.kern.scale_raw),
                        ls: self.leaf_vector(r.kern.ls_raw.clone()),
                        z: self.leaf_matrix(r.z.clone()),
                        factors: r
                            .factors
                            .iter()
                            .map(|f| self.factor_leaves(f))
                            .collect::<Vec<_>>(),
                        extra: self.leaf_scalar(r.prior_var_raw),
                    };
                    for f in &leaves.factors {
                        let l_w = self.assemble_factor(f);
                        kl_terms.push(self.whitened_kl(f.mean, l_w));
                    }
                    let aligned = gather_rows(&task.aligned, idx);
                    let mu_const = self.t.matrix_const(aligned.clone());
                    let nu_const = self
                        .t
                        .matrix_const(DMatrix::zeros(aligned.nrows(), aligned.ncols()));
                    latents
                        .iter()
                        .map(|lat| self.uncertain_moments(lat, mu_const, nu_const, b))
                        .collect::<Result<_>>()?
                }
                (TaskCalibration::Residual(r), CalibMode::Normal) => {
                    let leaves = CalibLeaves {
                        scale: self.leaf_scalar(r.kern.scale_raw),
                        ls: self.leaf_vector(r.kern.ls_raw.clone()),
                        z: self.leaf_matrix(r.z.clone()),
                        factors: r
                            .factors
                            .iter()
                            .map(|f| self.factor_leaves(f))
                            .collect::<Vec<_>>(),
                        extra: self.leaf_scalar(r.prior_var_raw),
                    };
                    let x_batch = gather_rows(&task.x, idx);
                    let x_const = self.t.matrix_const(x_batch);
                    let aligned = gather_rows(&task.aligned, idx);
                    let prior_cols: Vec<DVector<f64>> =
                        (0..aligned.ncols()).map(|d| aligned.column(d).into_owned()).collect();
                    let (residuals, means, vars, kls) = self.mapping_columns(
                        &leaves,
                        x_const,
                        Some(&prior_cols),
                        b,
                        &format!("task {t} mapping covariance"),
                    )?;
                    kl_terms.extend(kls);

                    // aligned-input KL against the isotropic prior
                    let d_out = means.len();
                    let nu_g0 = self.t.softplus_s(leaves.extra);
                    let ln_g0 = self.t.ln_s(nu_g0);
                    let bd = self.t.scalar_const((b * d_out) as f64);
                    let term1 = self.t.mul_s(bd, ln_g0);
                    let mut ln_sum: Option<Var> = None;
                    let mut tr_quad: Option<Var> = None;
                    for d in 0..d_out {
                        let lnv = self.t.ln_v(vars[d]);
                        let s = self.t.sum_v(lnv);
                        ln_sum = Some(match ln_sum {
                            Some(acc) => self.t.add_s(acc, s),
                            None => s,
                        });
                        let tv = self.t.sum_v(vars[d]);
                        let qv = self.t.dot_v(residuals[d], residuals[d]);
                        let both = self.t.add_s(tv, qv);
                        tr_quad = Some(match tr_quad {
                            Some(acc) => self.t.add_s(acc, both),
                            None => both,
                        });
                    }
                    let ln_sum = ln_sum.expect("at least one output dimension");
                    let tr_quad = tr_quad.expect("at least one output dimension");
                    let s1 = self.t.sub_s(term1, ln_sum);
                    let s2 = self.t.sub_s(s1, bd);
                    let s3 = self.t.div_s(tr_quad, nu_g0);
                    let s4 = self.t.add_s(s2, s3);
                    let half = self.t.scalar_const(0.5 * scale_factor);
                    let xkl = self.t.mul_s(half, s4);
                    kl_terms.push(xkl);

                    let mu_mat = self.t.hstack_cols(&means);
                    let nu_mat = self.t.hstack_cols(&vars);
                    latents
                        .iter()
                        .map(|lat| self.uncertain_moments(lat, mu_mat, nu_mat, b))
                        .collect::<Result<_>>()?
                }
                (TaskCalibration::Embedded(e), _) => {
                    let leaves = CalibLeaves {
                        scale: self.leaf_scalar(e.kern.scale_raw),
                        ls: self.leaf_vector(e.kern.ls_raw.clone()),
                        z: self.leaf_matrix(e.z.clone()),
                        factors: e
                            .factors
                            .iter()
                            .map(|f| self.factor_leaves(f))
                            .collect::<Vec<_>>(),
                        extra: self.leaf_scalar(e.obs_noise_raw),
                    };
                    let x_batch = gather_rows(&task.x, idx);
                    let x_const = self.t.matrix_const(x_batch);
                    let aligned = gather_rows(&task.aligned, idx);
                    let (_, means, vars, kls) = self.mapping_columns(
                        &leaves,
                        x_const,
                        None,
                        b,
                        &format!("task {t} mapping covariance"),
                    )?;
                    kl_terms.extend(kls);

                    // expected Gaussian likelihood of the prior-aligned
                    // observations under the mapping regressors
                    let d_out = means.len();
                    let nx = self.t.softplus_s(leaves.extra);
                    let two_pi = self.t.scalar_const(2.0 * std::f64::consts::PI);
                    let tp = self.t.mul_s(two_pi, nx);
                    let ln_nx = self.t.ln_s(tp);
                    let coeff = self.t.scalar_const(-0.5 * (b * d_out) as f64);
                    let const_part = self.t.mul_s(coeff, ln_nx);
                    let mut inner: Option<Var> = None;
                    for d in 0..d_out {
                        let obs = self.t.vector_const(aligned.column(d).into_owned());
                        let resid = self.t.sub_v(obs, means[d]);
                        let sse = self.t.dot_v(resid, resid);
                        let sv = self.t.sum_v(vars[d]);
                        let both = self.t.add_s(sse, sv);
                        inner = Some(match inner {
                            Some(acc) => self.t.add_s(acc, both),
                            None => both,
                        });
                    }
                    let inner = inner.expect("at least one output dimension");
                    let two = self.t.scalar_const(2.0);
                    let denom = self.t.mul_s(two, nx);
                    let pen = self.t.div_s(inner, denom);
                    let obs_ll = self.t.sub_s(const_part, pen);
                    let sf = self.t.scalar_const(scale_factor);
                    let scaled = self.t.mul_s(sf, obs_ll);
                    extra_terms.push(scaled);

                    let mu_mat = self.t.hstack_cols(&means);
                    let nu_mat = self.t.hstack_cols(&vars);
                    latents
                        .iter()
                        .map(|lat| self.uncertain_moments(lat, mu_mat, nu_mat, b))
                        .collect::<Result<_>>()?
                }
            };

            ll_terms.push(self.task_likelihood(
                t,
                y_const,
                &moments,
                mixing,
                noise_leaf,
                b,
                scale_factor,
            ));
        }

        let ll = self.t.sum_scalars(&ll_terms);
        let extra = self.t.sum_scalars(&extra_terms);
        let kl = self.t.sum_scalars(&kl_terms);
        let gain = self.t.add_s(ll, extra);
        let root = self.t.sub_s(gain, kl);
        Ok(Graph {
            tape: self.t,
            root,
            leaves: self.leaves,
        })
    }
}

/// Evaluates the variant's objective on the given batches.
pub fn elbo(model: &ModelState, batches: &BatchSel) -> Result<f64> {
    let graph = Builder::new(model).build(batches, CalibMode::Normal)?;
    Ok(graph.tape.scalar_value(graph.root))
}

/// Objective with the Bayesian-calibration path collapsed: aligned inputs
/// forced to the prior-aligned means with zero variance, aligned-input KL
/// omitted. Used to check consistency against the deterministic variant.
pub fn elbo_with_collapsed_calibration(model: &ModelState) -> Result<f64> {
    let batches = BatchSel::full(model);
    let graph = Builder::new(model).build(&batches, CalibMode::ForcedZeroVariance)?;
    Ok(graph.tape.scalar_value(graph.root))
}

/// Evaluates the objective and its gradient with respect to every
/// registered unconstrained parameter, in flattening order.
pub fn gradient(model: &ModelState, batches: &BatchSel) -> Result<(f64, DVector<f64>)> {
    let graph = Builder::new(model).build(batches, CalibMode::Normal)?;
    let value = graph.tape.scalar_value(graph.root);
    let grads = graph.tape.backward(graph.root);
    let mut flat = Vec::with_capacity(model.num_params());
    for &leaf in &graph.leaves {
        match graph.tape.value(leaf) {
            Value::Scalar(_) => flat.push(grads.scalar(leaf)),
            Value::Vector(v) => flat.extend(grads.vector(leaf, v.len()).iter().copied()),
            Value::Matrix(m) => {
                flat.extend(grads.matrix(leaf, m.nrows(), m.ncols()).iter().copied())
            }
        }
    }
    Ok((value, DVector::from_vec(flat)))
}
