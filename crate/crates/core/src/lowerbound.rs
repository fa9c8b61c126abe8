//! The per-individual Gaussian variational lower bound and its exact
//! analytic gradient with respect to the variational parameters and the
//! model parameters.
//!
//! With a multivariate normal variational family every term has a closed
//! form: the entropy, the expected Gaussian log-densities of the markers and
//! the random-effect prior, and the expected log-hazard/cumulative-hazard
//! terms via the normal moment generating function (the remaining time
//! integral is one-dimensional and handled by Gauss–Legendre). Delayed entry
//! contributes a correction evaluated by adaptive Gauss–Hermite quadrature.

use nalgebra::{DMatrix, DVector};

use crate::design::{EntryDesign, IndividualTerm};
use crate::params::{factor_from_packed, n_lower_tri, ParameterLayout, Parameters};
use crate::quad::{self, QuadRule};
use crate::spec::ResolvedSpec;
use crate::{Error, Result};

const LN_2PI: f64 = 1.8378770664093453;

/// Inverse and log-determinant of `L Lᵀ` from its lower factor.
pub fn inv_logdet_from_factor(l: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let dim = l.nrows();
    let eye = DMatrix::identity(dim, dim);
    let linv = l
        .clone()
        .solve_lower_triangular(&eye)
        .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
    let inv = linv.transpose() * &linv;
    let logdet = 2.0 * (0..dim).map(|k| l[(k, k)].ln()).sum::<f64>();
    Ok((inv, logdet))
}

pub fn submatrix(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |i, j| m[(idx[i], idx[j])])
}

/// Entropy of a Gaussian with covariance `Λ = C Cᵀ`:
/// `(Q/2)(1 + log 2π) + ½ log |Λ|`.
pub fn entropy(chol_lambda: &DMatrix<f64>) -> f64 {
    let q = chol_lambda.nrows();
    let half_logdet: f64 = (0..q).map(|k| chol_lambda[(k, k)].ln()).sum();
    0.5 * q as f64 * (1.0 + LN_2PI) + half_logdet
}

/// `E[log φ(x; ξ + S O, Ω)]` for `O ~ N(λ, Λ)` with `Λ = C Cᵀ`:
/// `-½ [Q log 2π + log|Ω| + (x-ξ-Sλ)ᵀ Ω⁻¹ (x-ξ-Sλ) + tr(Ω⁻¹ S Λ Sᵀ)]`.
pub fn expected_gauss_logdensity(
    x: &DVector<f64>,
    xi: &DVector<f64>,
    s: &DMatrix<f64>,
    omega: &DMatrix<f64>,
    lambda: &DVector<f64>,
    chol_lambda: &DMatrix<f64>,
) -> Result<f64> {
    let q = x.len();
    if xi.len() != q || s.nrows() != q || s.ncols() != lambda.len() {
        return Err(Error::InvalidInput(
            "expected_gauss_logdensity: non-conformable shapes".into(),
        ));
    }
    let chol = nalgebra::Cholesky::new(omega.clone())
        .ok_or_else(|| Error::Numerical("Omega is not positive definite".into()))?;
    let logdet: f64 = 2.0 * (0..q).map(|k| chol.l()[(k, k)].ln()).sum::<f64>();
    let r = x - xi - s * lambda;
    let sol = chol.solve(&r);
    let w = s * chol_lambda;
    let trace = chol.solve(&w).component_mul(&w).sum();
    Ok(-0.5 * (q as f64 * LN_2PI + logdet + r.dot(&sol) + trace))
}

/// `E[d log h(t|O) - ∫_c^t h(s|O) ds]` for the log-linear hazard
/// `h(s|o) = exp(g(s) + a(s)ᵀ o)` and `O ~ N(λ, Λ)`:
/// `d (g(t) + a(t)ᵀλ) - ∫_c^t exp(g(s) + a(s)ᵀλ + ½ a(s)ᵀ Λ a(s)) ds`.
#[allow(clippy::too_many_arguments)]
pub fn expected_event_term(
    g: &dyn Fn(f64) -> f64,
    a: &dyn Fn(f64) -> DVector<f64>,
    d: u8,
    c: f64,
    t: f64,
    lambda: &DVector<f64>,
    chol_lambda: &DMatrix<f64>,
    rule: &QuadRule,
) -> Result<f64> {
    if !(c <= t) {
        return Err(Error::InvalidInput(format!(
            "expected_event_term requires c <= t, got c={c}, t={t}"
        )));
    }
    let mut value = 0.0;
    if d == 1 {
        let at = a(t);
        value += g(t) + at.dot(lambda);
    }
    let integral = quad::integrate_on(rule, c, t, |s| {
        let asv = a(s);
        let cta = chol_lambda.transpose() * &asv;
        (g(s) + asv.dot(lambda) + 0.5 * cta.norm_squared()).exp()
    })?;
    Ok(value - integral)
}

/// Variational parameters of one individual: mean and the log-Cholesky
/// factor of the covariance.
pub fn theta_split(q: usize, theta: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    debug_assert_eq!(theta.len(), q + n_lower_tri(q));
    let lambda = DVector::from_column_slice(&theta[0..q]);
    let chol = factor_from_packed(q, &theta[q..]);
    (lambda, chol)
}

/// Evaluator over the cached per-individual terms.
pub struct LowerBound<'a> {
    pub spec: &'a ResolvedSpec,
    pub layout: &'a ParameterLayout,
    pub terms: &'a [IndividualTerm],
    /// Nodes per dimension for the delayed-entry AGHQ correction.
    pub aghq_nodes: usize,
}

impl<'a> LowerBound<'a> {
    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn theta_dim(&self, i: usize) -> usize {
        self.terms[i].v2
    }

    /// Lower bound of individual `i` at `(ζ, θ_i)`.
    pub fn value_i(&self, i: usize, zeta: &[f64], theta: &[f64]) -> Result<f64> {
        self.eval_i(i, zeta, theta, None)
    }

    /// Lower bound and its gradient over the concatenated `(ζ, θ_i)`
    /// coordinates; `grad` must have length `v1 + v2_i` and is overwritten.
    pub fn value_grad_i(
        &self,
        i: usize,
        zeta: &[f64],
        theta: &[f64],
        grad: &mut [f64],
    ) -> Result<f64> {
        grad.fill(0.0);
        self.eval_i(i, zeta, theta, Some(grad))
    }

    fn eval_i(
        &self,
        i: usize,
        zeta: &[f64],
        theta: &[f64],
        mut grad: Option<&mut [f64]>,
    ) -> Result<f64> {
        let term = &self.terms[i];
        let layout = self.layout;
        let v1 = layout.v1;
        if theta.len() != term.v2 {
            return Err(Error::InvalidInput(format!(
                "theta has length {}, expected {}",
                theta.len(),
                term.v2
            )));
        }
        if let Some(g) = grad.as_deref() {
            debug_assert_eq!(g.len(), v1 + term.v2);
        }
        let p = layout.unpack(zeta);
        let q = term.q;
        let r = self.spec.total_random_dim();
        let (lambda, chol) = theta_split(q, theta);
        let lam_cov = &chol * chol.transpose();

        // Entropy.
        let mut value = entropy(&chol);
        if let Some(g) = grad.as_deref_mut() {
            // d entropy / d(log C_kk) = 1.
            let mut idx = v1 + q;
            for k in 0..q {
                idx += k;
                g[idx] += 1.0;
                idx += 1;
            }
        }

        // Accumulated matrix gradients, chained once at the end.
        let want_grad = grad.is_some();
        let mut g_lam = DMatrix::zeros(if want_grad { q } else { 0 }, if want_grad { q } else { 0 });
        let n_l = self.spec.n_markers();
        let mut g_sigma = DMatrix::zeros(if want_grad { n_l } else { 0 }, if want_grad { n_l } else { 0 });
        let mut g_psi = DMatrix::zeros(if want_grad { r } else { 0 }, if want_grad { r } else { 0 });
        let h = layout.xi.dim;
        let mut g_xi = DMatrix::zeros(if want_grad { h } else { 0 }, if want_grad { h } else { 0 });

        // Marker terms: expected Gaussian log density of the observed subset.
        let lam_u = lambda.rows(0, r).into_owned();
        for group in &term.marker_groups {
            let n_obs = group.y.len();
            let omega = submatrix(&p.sigma, &group.obs_markers);
            let om_chol = nalgebra::Cholesky::new(omega)
                .ok_or_else(|| Error::Numerical("Sigma subset is not positive definite".into()))?;
            let logdet: f64 = 2.0 * (0..n_obs).map(|k| om_chol.l()[(k, k)].ln()).sum::<f64>();
            let resid = &group.y - &group.x * &p.beta - &group.s_u * &lam_u;
            let oinv_r = om_chol.solve(&resid);
            // W = S C over the padded S = [S_u 0]: uses rows 0..r of C.
            let w = &group.s_u * chol.rows(0, r);
            let oinv_w = om_chol.solve(&w);
            let trace = oinv_w.component_mul(&w).sum();
            value += -0.5 * (n_obs as f64 * LN_2PI + logdet + resid.dot(&oinv_r) + trace);

            if let Some(g) = grad.as_deref_mut() {
                let gb = group.x.transpose() * &oinv_r;
                for j in 0..layout.p_beta() {
                    g[j] += gb[j];
                }
                let gl = group.s_u.transpose() * &oinv_r;
                for j in 0..r {
                    g[v1 + j] += gl[j];
                }
                // G_Λ -= ½ SᵀΩ⁻¹S in the uu block.
                let oinv_s = om_chol.solve(&group.s_u);
                let gs = group.s_u.transpose() * oinv_s;
                for a in 0..r {
                    for b in 0..r {
                        g_lam[(a, b)] -= 0.5 * gs[(a, b)];
                    }
                }
                // Sigma: G = -½[Ω⁻¹ - Ω⁻¹ K Ω⁻¹], K = rrᵀ + W Wᵀ.
                let eye = DMatrix::identity(n_obs, n_obs);
                let oinv = om_chol.solve(&eye);
                let gsub =
                    -0.5 * (&oinv - &oinv_r * oinv_r.transpose() - &oinv_w * oinv_w.transpose());
                for a in 0..n_obs {
                    for b in 0..n_obs {
                        g_sigma[(group.obs_markers[a], group.obs_markers[b])] += gsub[(a, b)];
                    }
                }
            }
        }

        // Random-effect prior: E[log φ(O; 0, blockdiag(Ψ, Ξ_F))].
        let (psi_inv, psi_logdet) = inv_logdet_from_factor(&p.psi_chol)?;
        let xi_pos = term.xi_positions(layout);
        let e_i = xi_pos.len();
        let lam_w = lambda.rows(r, e_i).into_owned();
        let lam_uu = lam_cov.view((0, 0), (r, r)).into_owned();
        let lam_ww = lam_cov.view((r, r), (e_i, e_i)).into_owned();
        value += -0.5
            * (q as f64 * LN_2PI
                + psi_logdet
                + (&psi_inv * &lam_u).dot(&lam_u)
                + (&psi_inv * &lam_uu).trace());
        let mut xi_sub_inv: Option<DMatrix<f64>> = None;
        if e_i > 0 {
            let xi_sub = submatrix(&p.xi, &xi_pos);
            let sub_chol = nalgebra::Cholesky::new(xi_sub)
                .ok_or_else(|| Error::Numerical("Xi subset is not positive definite".into()))?;
            let l = sub_chol.l();
            let (inv, logdet) = inv_logdet_from_factor(&l)?;
            value += -0.5 * (logdet + (&inv * &lam_w).dot(&lam_w) + (&inv * &lam_ww).trace());
            xi_sub_inv = Some(inv);
        }

        if let Some(g) = grad.as_deref_mut() {
            let glu = -(&psi_inv * &lam_u);
            for j in 0..r {
                g[v1 + j] += glu[j];
            }
            for a in 0..r {
                for b in 0..r {
                    g_lam[(a, b)] -= 0.5 * psi_inv[(a, b)];
                }
            }
            let k = &lam_u * lam_u.transpose() + &lam_uu;
            g_psi += -0.5 * (&psi_inv - &psi_inv * k * &psi_inv);
            if let Some(inv) = &xi_sub_inv {
                let glw = -(inv * &lam_w);
                for j in 0..e_i {
                    g[v1 + r + j] += glw[j];
                }
                for a in 0..e_i {
                    for b in 0..e_i {
                        g_lam[(r + a, r + b)] -= 0.5 * inv[(a, b)];
                    }
                }
                let kw = &lam_w * lam_w.transpose() + &lam_ww;
                let gx = -0.5 * (inv - inv * kw * inv);
                for a in 0..e_i {
                    for b in 0..e_i {
                        g_xi[(xi_pos[a], xi_pos[b])] += gx[(a, b)];
                    }
                }
            }
        }

        // Survival terms: expected log hazards minus expected cumulative
        // hazards via the Gaussian moment generating function.
        for ev in &term.events {
            let gamma = &p.gammas[ev.event];
            let alpha = &p.alphas[ev.event];
            let fc = ev.frailty_idx.map(|k| r + k);

            if ev.status {
                let a_u = ev.b_stop.transpose() * alpha;
                let mut log_h = ev.z_stop.dot(gamma) + a_u.dot(&lam_u);
                if let Some(fc) = fc {
                    log_h += lambda[fc];
                }
                value += log_h;
                if let Some(g) = grad.as_deref_mut() {
                    let gr = &layout.gamma[ev.event];
                    for (j, gz) in ev.z_stop.iter().enumerate() {
                        g[gr.start + j] += gz;
                    }
                    let ar = &layout.alpha[ev.event];
                    let ga = &ev.b_stop * &lam_u;
                    for (j, ga_j) in ga.iter().enumerate() {
                        g[ar.start + j] += ga_j;
                    }
                    for j in 0..r {
                        g[v1 + j] += a_u[j];
                    }
                    if let Some(fc) = fc {
                        g[v1 + fc] += 1.0;
                    }
                }
            }

            for node in &ev.nodes {
                let a_u = node.b.transpose() * alpha;
                let mut a = DVector::zeros(q);
                a.rows_mut(0, r).copy_from(&a_u);
                if let Some(fc) = fc {
                    a[fc] = 1.0;
                }
                let cta = chol.transpose() * &a;
                let eta = node.z.dot(gamma) + a.dot(&lambda) + 0.5 * cta.norm_squared();
                let e_w = node.w * eta.exp();
                value -= e_w;

                if let Some(g) = grad.as_deref_mut() {
                    let gr = &layout.gamma[ev.event];
                    for (j, gz) in node.z.iter().enumerate() {
                        g[gr.start + j] -= e_w * gz;
                    }
                    // d/dα (aᵀλ + ½ aᵀΛa) = B (λ_u + (Λ a)_u).
                    let lam_a = &chol * &cta;
                    let ar = &layout.alpha[ev.event];
                    let ga = &node.b * (&lam_u + lam_a.rows(0, r));
                    for (j, ga_j) in ga.iter().enumerate() {
                        g[ar.start + j] -= e_w * ga_j;
                    }
                    for j in 0..q {
                        g[v1 + j] -= e_w * a[j];
                    }
                    for ai in 0..q {
                        if a[ai] == 0.0 {
                            continue;
                        }
                        for aj in 0..q {
                            g_lam[(ai, aj)] -= 0.5 * e_w * a[ai] * a[aj];
                        }
                    }
                }
            }
        }

        // Delayed-entry correction.
        if let Some(design) = &term.entry_design {
            let d_i = self.delayed_entry(design, &p, &psi_inv, psi_logdet, grad.as_deref_mut())?;
            value -= d_i;
        }

        // Chain the accumulated matrix gradients through the factors.
        if let Some(g) = grad.as_deref_mut() {
            layout.sigma.structure.chain(
                &g_sigma,
                &p.sigma_chol,
                &mut g[layout.sigma.range.clone()],
            );
            layout
                .psi
                .structure
                .chain(&g_psi, &p.psi_chol, &mut g[layout.psi.range.clone()]);
            if h > 0 {
                layout
                    .xi
                    .structure
                    .chain(&g_xi, &p.xi_chol, &mut g[layout.xi.range.clone()]);
            }
            // Variational covariance factor.
            let w = (&g_lam + g_lam.transpose()) * &chol;
            let mut idx = v1 + q;
            for k in 0..q {
                for j in 0..=k {
                    g[idx] += if j == k { w[(k, k)] * chol[(k, k)] } else { w[(k, j)] };
                    idx += 1;
                }
            }
        }

        Ok(value)
    }

    /// `D_i(ζ) = log E_p[exp(b_V)]` by AGHQ over the random effects and the
    /// frailties of terminal types. The gradient differentiates the weighted
    /// sum with the adaptation (mode and scale) frozen at the current `ζ`.
    fn delayed_entry(
        &self,
        design: &EntryDesign,
        p: &Parameters,
        psi_inv: &DMatrix<f64>,
        psi_logdet: f64,
        grad: Option<&mut [f64]>,
    ) -> Result<f64> {
        let layout = self.layout;
        let r = self.spec.total_random_dim();
        let dim = design.dim;
        let n_tf = dim - r;
        let xi_pos: Vec<usize> = design
            .frailty_types
            .iter()
            .map(|e| {
                layout
                    .frailty_types
                    .iter()
                    .position(|f| f == e)
                    .expect("terminal frailty missing from layout")
            })
            .collect();
        let (xi_t_inv, xi_t_logdet) = if n_tf > 0 {
            let sub = submatrix(&p.xi, &xi_pos);
            let chol = nalgebra::Cholesky::new(sub)
                .ok_or_else(|| Error::Numerical("Xi subset is not positive definite".into()))?;
            let l = chol.l();
            inv_logdet_from_factor(&l)?
        } else {
            (DMatrix::zeros(0, 0), 0.0)
        };

        let log_f = |o: &DVector<f64>| -> f64 {
            let mut acc = 0.0;
            for ty in &design.types {
                let gamma = &p.gammas[ty.event];
                let alpha = &p.alphas[ty.event];
                for node in &ty.nodes {
                    let a_u = node.b.transpose() * alpha;
                    let mut eta = node.z.dot(gamma) + a_u.dot(&o.rows(0, r));
                    if let Some(fc) = ty.frailty_idx {
                        eta += o[fc];
                    }
                    acc -= node.w * eta.exp();
                }
            }
            let ou = o.rows(0, r).into_owned();
            acc += -0.5 * (dim as f64 * LN_2PI + psi_logdet + (psi_inv * &ou).dot(&ou));
            if n_tf > 0 {
                let ow = o.rows(r, n_tf).into_owned();
                acc += -0.5 * (xi_t_logdet + (&xi_t_inv * &ow).dot(&ow));
            }
            acc
        };
        let grad_hess = |o: &DVector<f64>| -> (DVector<f64>, DMatrix<f64>) {
            let mut g = DVector::zeros(dim);
            let mut hmat = DMatrix::zeros(dim, dim);
            for ty in &design.types {
                let gamma = &p.gammas[ty.event];
                let alpha = &p.alphas[ty.event];
                for node in &ty.nodes {
                    let a_u = node.b.transpose() * alpha;
                    let mut a = DVector::zeros(dim);
                    a.rows_mut(0, r).copy_from(&a_u);
                    if let Some(fc) = ty.frailty_idx {
                        a[fc] = 1.0;
                    }
                    let e_w = node.w * (node.z.dot(gamma) + a.dot(o)).exp();
                    g.axpy(-e_w, &a, 1.0);
                    for ai in 0..dim {
                        if a[ai] == 0.0 {
                            continue;
                        }
                        for aj in 0..dim {
                            hmat[(ai, aj)] -= e_w * a[ai] * a[aj];
                        }
                    }
                }
            }
            let ou = o.rows(0, r).into_owned();
            let pg = psi_inv * &ou;
            for j in 0..r {
                g[j] -= pg[j];
            }
            for a in 0..r {
                for b in 0..r {
                    hmat[(a, b)] -= psi_inv[(a, b)];
                }
            }
            if n_tf > 0 {
                let ow = o.rows(r, n_tf).into_owned();
                let xg = &xi_t_inv * &ow;
                for j in 0..n_tf {
                    g[r + j] -= xg[j];
                }
                for a in 0..n_tf {
                    for b in 0..n_tf {
                        hmat[(r + a, r + b)] -= xi_t_inv[(a, b)];
                    }
                }
            }
            (g, hmat)
        };

        let problem = quad::LogIntegrand {
            log_f: &log_f,
            grad_hess: Some(&grad_hess),
        };
        let rule = quad::gauss_hermite(self.aghq_nodes)?;
        let edge = rule.nodes.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        let adapt = quad::aghq_adapt(&problem, &DVector::zeros(dim), edge)?;
        let mut points: Vec<(DVector<f64>, f64)> = Vec::new();
        let d_i = quad::aghq_sum_with(&problem, &adapt, self.aghq_nodes, |o, term| {
            points.push((o.clone(), term));
        })?;

        if let Some(g) = grad {
            // Softmax weights of the frozen nodes.
            let max_t = points
                .iter()
                .map(|(_, t)| *t)
                .fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = points.iter().map(|(_, t)| (t - max_t).exp()).sum();
            let mut g_psi = DMatrix::zeros(r, r);
            let mut g_xi_sub = DMatrix::zeros(n_tf, n_tf);
            for (o, t) in &points {
                let c_k = ((t - max_t).exp()) / denom;
                if c_k == 0.0 {
                    continue;
                }
                let ou = o.rows(0, r).into_owned();
                // b_V part: value -= D_i, so subtract the D_i gradient.
                for ty in &design.types {
                    let gamma = &p.gammas[ty.event];
                    let alpha = &p.alphas[ty.event];
                    let gr = &layout.gamma[ty.event];
                    let ar = &layout.alpha[ty.event];
                    for node in &ty.nodes {
                        let a_u = node.b.transpose() * alpha;
                        let mut eta = node.z.dot(gamma) + a_u.dot(&ou);
                        if let Some(fc) = ty.frailty_idx {
                            eta += o[fc];
                        }
                        let e_w = node.w * eta.exp();
                        for (j, gz) in node.z.iter().enumerate() {
                            g[gr.start + j] += c_k * e_w * gz;
                        }
                        let ga = &node.b * &ou;
                        for (j, ga_j) in ga.iter().enumerate() {
                            g[ar.start + j] += c_k * e_w * ga_j;
                        }
                    }
                }
                // Prior part: Ψ and the terminal-frailty block of Ξ.
                let kmat = &ou * ou.transpose();
                g_psi += c_k * -0.5 * (psi_inv - psi_inv * kmat * psi_inv);
                if n_tf > 0 {
                    let ow = o.rows(r, n_tf).into_owned();
                    let kw = &ow * ow.transpose();
                    g_xi_sub += c_k * -0.5 * (&xi_t_inv - &xi_t_inv * kw * &xi_t_inv);
                }
            }
            // Subtract the chained prior gradients.
            let mut tmp = vec![0.0; layout.psi.range.len()];
            layout.psi.structure.chain(&g_psi, &p.psi_chol, &mut tmp);
            for (j, t) in tmp.iter().enumerate() {
                g[layout.psi.range.start + j] -= t;
            }
            if n_tf > 0 {
                let hdim = layout.xi.dim;
                let mut g_xi = DMatrix::zeros(hdim, hdim);
                for a in 0..n_tf {
                    for b in 0..n_tf {
                        g_xi[(xi_pos[a], xi_pos[b])] += g_xi_sub[(a, b)];
                    }
                }
                let mut tmp = vec![0.0; layout.xi.range.len()];
                layout.xi.structure.chain(&g_xi, &p.xi_chol, &mut tmp);
                for (j, t) in tmp.iter().enumerate() {
                    g[layout.xi.range.start + j] -= t;
                }
            }
        }
        Ok(d_i)
    }
}
