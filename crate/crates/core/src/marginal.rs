//! Quadrature-based reference log-likelihood: the complete-data conditional
//! log density evaluated pointwise and marginalized over the random effects
//! by adaptive Gauss–Hermite quadrature. Much slower than the variational
//! lower bound but arbitrarily precise, so it serves as the comparison
//! target for validation.

use nalgebra::{DMatrix, DVector};

use crate::design::IndividualTerm;
use crate::lowerbound::{inv_logdet_from_factor, submatrix};
use crate::params::{ParameterLayout, Parameters};
use crate::quad;
use crate::spec::ResolvedSpec;
use crate::{Error, Result};

const LN_2PI: f64 = 1.8378770664093453;

/// Complete-data conditional log density of one individual at the random
/// effects `o = (u, w)`: marker terms, survival terms (with the cumulative
/// hazards through the cached quadrature designs) and the random-effect
/// prior.
pub fn conditional_loglik(
    spec: &ResolvedSpec,
    layout: &ParameterLayout,
    params: &Parameters,
    term: &IndividualTerm,
    o: &DVector<f64>,
) -> Result<f64> {
    let r = spec.total_random_dim();
    let q = term.q;
    if o.len() != q {
        return Err(Error::InvalidInput(format!(
            "o has length {}, expected {q}",
            o.len()
        )));
    }
    let ou = o.rows(0, r).into_owned();
    let mut acc = 0.0;

    for group in &term.marker_groups {
        let n_obs = group.y.len();
        let omega = submatrix(&params.sigma, &group.obs_markers);
        let chol = nalgebra::Cholesky::new(omega)
            .ok_or_else(|| Error::Numerical("Sigma subset is not positive definite".into()))?;
        let logdet: f64 = 2.0 * (0..n_obs).map(|k| chol.l()[(k, k)].ln()).sum::<f64>();
        let resid = &group.y - &group.x * &params.beta - &group.s_u * &ou;
        let sol = chol.solve(&resid);
        acc += -0.5 * (n_obs as f64 * LN_2PI + logdet + resid.dot(&sol));
    }

    for ev in &term.events {
        let gamma = &params.gammas[ev.event];
        let alpha = &params.alphas[ev.event];
        let w_e = ev.frailty_idx.map_or(0.0, |k| o[r + k]);
        if ev.status {
            let a_u = ev.b_stop.transpose() * alpha;
            acc += ev.z_stop.dot(gamma) + a_u.dot(&ou) + w_e;
        }
        for node in &ev.nodes {
            let a_u = node.b.transpose() * alpha;
            acc -= node.w * (node.z.dot(gamma) + a_u.dot(&ou) + w_e).exp();
        }
    }

    // Prior over (u, w).
    let (psi_inv, psi_logdet) = inv_logdet_from_factor(&params.psi_chol)?;
    acc += -0.5 * (q as f64 * LN_2PI + psi_logdet + (&psi_inv * &ou).dot(&ou));
    let xi_pos = term.xi_positions(layout);
    if !xi_pos.is_empty() {
        let sub = submatrix(&params.xi, &xi_pos);
        let chol = nalgebra::Cholesky::new(sub)
            .ok_or_else(|| Error::Numerical("Xi subset is not positive definite".into()))?;
        let l = chol.l();
        let (inv, logdet) = inv_logdet_from_factor(&l)?;
        let ow = o.rows(r, xi_pos.len()).into_owned();
        acc += -0.5 * (logdet + (&inv * &ow).dot(&ow));
    }
    Ok(acc)
}

/// Analytic gradient and Hessian of [`conditional_loglik`] in `o`, used to
/// speed up the AGHQ mode search.
pub fn conditional_grad_hess(
    spec: &ResolvedSpec,
    layout: &ParameterLayout,
    params: &Parameters,
    term: &IndividualTerm,
    o: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let r = spec.total_random_dim();
    let q = term.q;
    let ou = o.rows(0, r).into_owned();
    let mut g = DVector::zeros(q);
    let mut h = DMatrix::zeros(q, q);

    for group in &term.marker_groups {
        let omega = submatrix(&params.sigma, &group.obs_markers);
        let chol = nalgebra::Cholesky::new(omega)
            .ok_or_else(|| Error::Numerical("Sigma subset is not positive definite".into()))?;
        let resid = &group.y - &group.x * &params.beta - &group.s_u * &ou;
        let sol = chol.solve(&resid);
        let gu = group.s_u.transpose() * sol;
        for j in 0..r {
            g[j] += gu[j];
        }
        let oinv_s = chol.solve(&group.s_u);
        let hs = group.s_u.transpose() * oinv_s;
        for a in 0..r {
            for b in 0..r {
                h[(a, b)] -= hs[(a, b)];
            }
        }
    }

    for ev in &term.events {
        let gamma = &params.gammas[ev.event];
        let alpha = &params.alphas[ev.event];
        let fc = ev.frailty_idx.map(|k| r + k);
        if ev.status {
            let a_u = ev.b_stop.transpose() * alpha;
            for j in 0..r {
                g[j] += a_u[j];
            }
            if let Some(fc) = fc {
                g[fc] += 1.0;
            }
        }
        for node in &ev.nodes {
            let a_u = node.b.transpose() * alpha;
            let mut a = DVector::zeros(q);
            a.rows_mut(0, r).copy_from(&a_u);
            if let Some(fc) = fc {
                a[fc] = 1.0;
            }
            let e_w = node.w * (node.z.dot(gamma) + a.dot(o)).exp();
            g.axpy(-e_w, &a, 1.0);
            for ai in 0..q {
                if a[ai] == 0.0 {
                    continue;
                }
                for aj in 0..q {
                    h[(ai, aj)] -= e_w * a[ai] * a[aj];
                }
            }
        }
    }

    let (psi_inv, _) = inv_logdet_from_factor(&params.psi_chol)?;
    let pg = &psi_inv * &ou;
    for j in 0..r {
        g[j] -= pg[j];
    }
    for a in 0..r {
        for b in 0..r {
            h[(a, b)] -= psi_inv[(a, b)];
        }
    }
    let xi_pos = term.xi_positions(layout);
    if !xi_pos.is_empty() {
        let e_i = xi_pos.len();
        let sub = submatrix(&params.xi, &xi_pos);
        let chol = nalgebra::Cholesky::new(sub)
            .ok_or_else(|| Error::Numerical("Xi subset is not positive definite".into()))?;
        let l = chol.l();
        let (inv, _) = inv_logdet_from_factor(&l)?;
        let ow = o.rows(r, e_i).into_owned();
        let xg = &inv * &ow;
        for j in 0..e_i {
            g[r + j] -= xg[j];
        }
        for a in 0..e_i {
            for b in 0..e_i {
                h[(r + a, r + b)] -= inv[(a, b)];
            }
        }
    }
    Ok((g, h))
}

/// Log marginal likelihood of one individual by AGHQ with `nodes_per_dim`
/// nodes per random-effect dimension, including the delayed-entry
/// correction. `mode_init` defaults to zero (pass the variational mean when
/// available).
pub fn aghq_marginal_loglik(
    spec: &ResolvedSpec,
    layout: &ParameterLayout,
    params: &Parameters,
    term: &IndividualTerm,
    nodes_per_dim: usize,
    mode_init: Option<&DVector<f64>>,
) -> Result<f64> {
    let q = term.q;
    let log_f =
        |o: &DVector<f64>| conditional_loglik(spec, layout, params, term, o).unwrap_or(f64::NAN);
    let gh = |o: &DVector<f64>| {
        conditional_grad_hess(spec, layout, params, term, o)
            .unwrap_or_else(|_| (DVector::zeros(q), DMatrix::zeros(q, q)))
    };
    let problem = quad::LogIntegrand {
        log_f: &log_f,
        grad_hess: Some(&gh),
    };
    let init = mode_init.cloned().unwrap_or_else(|| DVector::zeros(q));
    let mut ll = quad::aghq_log_integral(&problem, q, nodes_per_dim, &init)?;
    if let Some(design) = &term.entry_design {
        ll -= delayed_entry_loglik(spec, layout, params, design, nodes_per_dim)?;
    }
    Ok(ll)
}

/// `D_i(ζ)` for the reference likelihood, by AGHQ over the random effects
/// and terminal frailties.
pub fn delayed_entry_loglik(
    spec: &ResolvedSpec,
    layout: &ParameterLayout,
    params: &Parameters,
    design: &crate::design::EntryDesign,
    nodes_per_dim: usize,
) -> Result<f64> {
    let r = spec.total_random_dim();
    let dim = design.dim;
    let n_tf = dim - r;
    let (psi_inv, psi_logdet) = inv_logdet_from_factor(&params.psi_chol)?;
    let (xi_inv, xi_logdet) = if n_tf > 0 {
        let pos: Vec<usize> = design
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
        let sub = submatrix(&params.xi, &pos);
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
            let gamma = &params.gammas[ty.event];
            let alpha = &params.alphas[ty.event];
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
        acc += -0.5 * (dim as f64 * LN_2PI + psi_logdet + (&psi_inv * &ou).dot(&ou));
        if n_tf > 0 {
            let ow = o.rows(r, n_tf).into_owned();
            acc += -0.5 * (xi_logdet + (&xi_inv * &ow).dot(&ow));
        }
        acc
    };
    let problem = quad::LogIntegrand {
        log_f: &log_f,
        grad_hess: None,
    };
    quad::aghq_log_integral(&problem, dim, nodes_per_dim, &DVector::zeros(dim))
}
