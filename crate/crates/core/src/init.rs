//! Starting values: per-marker linear mixed models fitted by profiled
//! maximum likelihood, survival sub-models fitted with the associations and
//! frailties switched off, and variational parameters initialized at the
//! best linear predictors and their conditional covariances.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::data::JointData;
use crate::design::{survival_design, IndividualTerm};
use crate::params::{n_lower_tri, packed_from_factor, ParameterLayout};
use crate::psqn::{self, ElementFunction, PsqnOptions};
use crate::quad;
use crate::spec::ResolvedSpec;
use crate::{Error, Result};

const LN_2PI: f64 = 1.8378770664093453;
/// Floor for the log-Cholesky diagonal of the random-effect covariance
/// (variance floor 1e-8).
const LOG_CHOL_FLOOR: f64 = -9.210340371976182;

/// Per-marker linear mixed model fits.
pub struct MarkerFit {
    /// Fixed effects per marker, in design order.
    pub beta: Vec<DVector<f64>>,
    /// Residual variances per marker.
    pub sigma2: Vec<f64>,
    /// Random-effect covariance blocks per marker.
    pub psi_blocks: Vec<DMatrix<f64>>,
    /// Per individual, per marker: BLUP of the random effects.
    pub blups: Vec<Vec<DVector<f64>>>,
    /// Per individual, per marker: conditional covariance of the random
    /// effects given the marker data.
    pub cond_covs: Vec<Vec<DMatrix<f64>>>,
    /// Maximized marginal log-likelihood per marker.
    pub loglik: Vec<f64>,
}

struct LmmData {
    // Per individual with observations: (X, M, y).
    groups: Vec<(DMatrix<f64>, DMatrix<f64>, DVector<f64>)>,
    n_total: usize,
    p: usize,
    r: usize,
}

/// Profiled marginal log-likelihood of one marker's LMM as a function of
/// the ratio covariance `Psi/sigma^2` in log-Cholesky coordinates; beta and
/// sigma^2 are profiled out analytically.
struct LmmProfile<'a> {
    data: &'a LmmData,
}

impl LmmProfile<'_> {
    /// Returns (loglik, beta_hat, sigma2_hat, per-group V^-1 residuals).
    fn profile(&self, coords: &[f64]) -> Result<(f64, DVector<f64>, f64)> {
        let d = self.data;
        let ratio_l = crate::params::factor_from_packed(d.r, coords);
        let ratio = &ratio_l * ratio_l.transpose();
        let mut xtvx = DMatrix::zeros(d.p, d.p);
        let mut xtvy = DVector::zeros(d.p);
        let mut logdets = 0.0;
        let mut chols = Vec::with_capacity(d.groups.len());
        for (x, m, y) in &d.groups {
            let n_i = y.len();
            let v = DMatrix::identity(n_i, n_i) + m * &ratio * m.transpose();
            let chol = nalgebra::Cholesky::new(v)
                .ok_or_else(|| Error::Numerical("LMM marginal covariance not PD".into()))?;
            logdets += 2.0 * (0..n_i).map(|k| chol.l()[(k, k)].ln()).sum::<f64>();
            let vx = chol.solve(x);
            let vy = chol.solve(y);
            xtvx += x.transpose() * &vx;
            xtvy += x.transpose() * &vy;
            chols.push(chol);
        }
        let beta = xtvx
            .clone()
            .lu()
            .solve(&xtvy)
            .ok_or_else(|| Error::Numerical("singular LMM fixed-effect system".into()))?;
        let mut rss = 0.0;
        for ((x, _, y), chol) in d.groups.iter().zip(&chols) {
            let resid = y - x * &beta;
            rss += resid.dot(&chol.solve(&resid));
        }
        let n = d.n_total as f64;
        let sigma2 = (rss / n).max(1e-12);
        let ll = -0.5 * (n * (LN_2PI + sigma2.ln()) + logdets + n);
        Ok((ll, beta, sigma2))
    }

    /// Envelope gradient in the log-Cholesky coordinates.
    fn gradient(&self, coords: &[f64], grad: &mut [f64]) -> Result<f64> {
        let d = self.data;
        let (ll, beta, sigma2) = self.profile(coords)?;
        let ratio_l = crate::params::factor_from_packed(d.r, coords);
        let ratio = &ratio_l * ratio_l.transpose();
        let mut g_ratio = DMatrix::zeros(d.r, d.r);
        for (x, m, y) in &d.groups {
            let n_i = y.len();
            let v = DMatrix::identity(n_i, n_i) + m * &ratio * m.transpose();
            let chol = nalgebra::Cholesky::new(v)
                .ok_or_else(|| Error::Numerical("LMM marginal covariance not PD".into()))?;
            let resid = y - x * &beta;
            let vr = chol.solve(&resid);
            let mtvr = m.transpose() * &vr;
            let vm = chol.solve(m);
            let mtvm = m.transpose() * &vm;
            g_ratio += 0.5 * (&mtvr * mtvr.transpose() / sigma2 - mtvm);
        }
        grad.fill(0.0);
        crate::params::chain_factor_grad(&g_ratio, &ratio_l, grad);
        Ok(ll)
    }
}

struct LmmElement<'a> {
    profile: LmmProfile<'a>,
}

impl ElementFunction for LmmElement<'_> {
    fn global_dim(&self) -> usize {
        n_lower_tri(self.profile.data.r)
    }
    fn private_dim(&self) -> usize {
        0
    }
    fn value(&self, global: &[f64], _private: &[f64]) -> f64 {
        self.profile
            .profile(global)
            .map(|(ll, _, _)| ll)
            .unwrap_or(f64::NEG_INFINITY)
    }
    fn value_grad(&self, global: &[f64], _private: &[f64], grad: &mut [f64]) -> f64 {
        self.profile
            .gradient(global, grad)
            .unwrap_or(f64::NEG_INFINITY)
    }
}

/// Fit each marker's LMM separately by maximum marginal likelihood and
/// return estimates, BLUPs and conditional covariances.
pub fn fit_marker_submodels(spec: &ResolvedSpec, data: &JointData) -> Result<MarkerFit> {
    let n_markers = spec.n_markers();
    let fits: Vec<Result<(DVector<f64>, f64, DMatrix<f64>, f64, Vec<f64>)>> = (0..n_markers)
        .into_par_iter()
        .map(|l| fit_one_marker(spec, data, l))
        .collect();

    let mut beta = Vec::with_capacity(n_markers);
    let mut sigma2 = Vec::with_capacity(n_markers);
    let mut psi_blocks = Vec::with_capacity(n_markers);
    let mut loglik = Vec::with_capacity(n_markers);
    let mut coords_per_marker = Vec::with_capacity(n_markers);
    for f in fits {
        let (b, s2, psi, ll, coords) = f?;
        beta.push(b);
        sigma2.push(s2);
        psi_blocks.push(psi);
        loglik.push(ll);
        coords_per_marker.push(coords);
    }

    // BLUPs and conditional covariances per individual per marker.
    let mut blups = Vec::with_capacity(data.individuals.len());
    let mut cond_covs = Vec::with_capacity(data.individuals.len());
    for ind in &data.individuals {
        let mut b_i = Vec::with_capacity(n_markers);
        let mut c_i = Vec::with_capacity(n_markers);
        for l in 0..n_markers {
            let r_l = spec.markers[l].random_dim();
            let obs: Vec<&crate::data::MarkerObservation> =
                ind.markers.iter().filter(|o| o.marker == l).collect();
            if obs.is_empty() {
                b_i.push(DVector::zeros(r_l));
                c_i.push(psi_blocks[l].clone());
                continue;
            }
            let n_i = obs.len();
            let mut x = DMatrix::zeros(n_i, spec.markers[l].fixed_dim());
            let mut m = DMatrix::zeros(n_i, r_l);
            let mut y = DVector::zeros(n_i);
            for (row, o) in obs.iter().enumerate() {
                let xr = crate::design::marker_fixed_row(spec, ind, l, o.time)?;
                x.view_mut((row, 0), (1, xr.len())).copy_from(&xr.transpose());
                let mr = spec.markers[l].random_basis.eval(o.time)?;
                m.view_mut((row, 0), (1, mr.len())).copy_from(&mr.transpose());
                y[row] = o.value;
            }
            let ratio_l = crate::params::factor_from_packed(r_l, &coords_per_marker[l]);
            let ratio = &ratio_l * ratio_l.transpose();
            let v = DMatrix::identity(n_i, n_i) + &m * &ratio * m.transpose();
            let chol = nalgebra::Cholesky::new(v)
                .ok_or_else(|| Error::Numerical("LMM marginal covariance not PD".into()))?;
            let resid = &y - &x * &beta[l];
            let blup = &ratio * m.transpose() * chol.solve(&resid);
            let cond = sigma2[l] * (&ratio - &ratio * m.transpose() * chol.solve(&m) * &ratio);
            // Guard against a collapsed conditional covariance.
            let cond = 0.5 * (&cond + cond.transpose())
                + DMatrix::identity(r_l, r_l) * 1e-10 * sigma2[l];
            b_i.push(blup);
            c_i.push(cond);
        }
        blups.push(b_i);
        cond_covs.push(c_i);
    }

    Ok(MarkerFit {
        beta,
        sigma2,
        psi_blocks,
        blups,
        cond_covs,
        loglik,
    })
}

fn fit_one_marker(
    spec: &ResolvedSpec,
    data: &JointData,
    l: usize,
) -> Result<(DVector<f64>, f64, DMatrix<f64>, f64, Vec<f64>)> {
    let p = spec.markers[l].fixed_dim();
    let r = spec.markers[l].random_dim();
    let mut groups = Vec::new();
    let mut n_total = 0usize;
    for ind in &data.individuals {
        let obs: Vec<&crate::data::MarkerObservation> =
            ind.markers.iter().filter(|o| o.marker == l).collect();
        if obs.is_empty() {
            continue;
        }
        let n_i = obs.len();
        let mut x = DMatrix::zeros(n_i, p);
        let mut m = DMatrix::zeros(n_i, r);
        let mut y = DVector::zeros(n_i);
        for (row, o) in obs.iter().enumerate() {
            let xr = crate::design::marker_fixed_row(spec, ind, l, o.time)?;
            x.view_mut((row, 0), (1, p)).copy_from(&xr.transpose());
            let mr = spec.markers[l].random_basis.eval(o.time)?;
            m.view_mut((row, 0), (1, r)).copy_from(&mr.transpose());
            y[row] = o.value;
        }
        n_total += n_i;
        groups.push((x, m, y));
    }
    if n_total < p {
        return Err(Error::InvalidInput(format!(
            "marker {} has {n_total} observations for {p} fixed effects",
            l + 1
        )));
    }
    let lmm = LmmData {
        groups,
        n_total,
        p,
        r,
    };
    let profile = LmmProfile { data: &lmm };
    let element = LmmElement { profile };
    let x0 = DVector::zeros(n_lower_tri(r));
    let opts = PsqnOptions {
        grad_tol: 1e-6,
        rel_tol: 1e-12,
        max_iter: 300,
        ..Default::default()
    };
    let res = psqn::maximize(&[element], &x0, &opts)?;
    // Clamp the log-Cholesky diagonal at the boundary instead of failing
    // when a variance estimate collapses to zero.
    let mut coords: Vec<f64> = res.x.as_slice().to_vec();
    let mut idx = 0;
    for k in 0..r {
        idx += k;
        if coords[idx] < LOG_CHOL_FLOOR {
            coords[idx] = LOG_CHOL_FLOOR;
        }
        idx += 1;
    }
    let profile = LmmProfile { data: &lmm };
    let (ll, beta, sigma2) = profile.profile(&coords)?;
    let ratio_l = crate::params::factor_from_packed(r, &coords);
    let psi = sigma2 * &ratio_l * ratio_l.transpose();
    Ok((beta, sigma2, psi, ll, coords))
}

/// Survival sub-model fits with associations and frailties switched off.
pub struct SurvivalFit {
    pub gammas: Vec<DVector<f64>>,
    pub loglik: Vec<f64>,
}

/// Maximize each event type's log-likelihood (with `alpha = 0`, no frailty)
/// by Newton iterations; cumulative hazards use `gl_nodes` Gauss–Legendre
/// nodes.
pub fn fit_survival_submodels(
    spec: &ResolvedSpec,
    data: &JointData,
    gl_nodes: usize,
) -> Result<SurvivalFit> {
    let rule = quad::gauss_legendre(gl_nodes)?;
    let mut gammas = Vec::with_capacity(spec.n_events());
    let mut logliks = Vec::with_capacity(spec.n_events());
    for e in 0..spec.n_events() {
        let dim = spec.events[e].gamma_dim();
        // Cache designs: observed-event rows and quadrature nodes.
        let mut event_rows: Vec<DVector<f64>> = Vec::new();
        let mut nodes: Vec<(f64, DVector<f64>)> = Vec::new();
        let mut n_events_observed = 0usize;
        for ind in &data.individuals {
            for rec in ind.events.iter().filter(|r| r.event_type == e) {
                if rec.status == 1 {
                    event_rows.push(survival_design(spec, ind, e, rec.stop)?);
                    n_events_observed += 1;
                }
                let half = 0.5 * (rec.stop - rec.start);
                let mid = 0.5 * (rec.stop + rec.start);
                for (&xq, &wq) in rule.nodes.iter().zip(&rule.weights) {
                    nodes.push((wq * half, survival_design(spec, ind, e, mid + half * xq)?));
                }
            }
        }
        if n_events_observed == 0 {
            return Err(Error::InvalidInput(format!(
                "event type {} has no observed events",
                e + 1
            )));
        }
        let value_grad_hess = |gamma: &DVector<f64>| {
            let mut ll = 0.0;
            let mut g = DVector::zeros(dim);
            let mut h = DMatrix::zeros(dim, dim);
            for z in &event_rows {
                ll += z.dot(gamma);
                g += z;
            }
            for (w, z) in &nodes {
                let e_w = w * z.dot(gamma).exp();
                ll -= e_w;
                g.axpy(-e_w, z, 1.0);
                h.ger(-e_w, z, z, 1.0);
            }
            (ll, g, h)
        };
        let mut gamma = DVector::zeros(dim);
        let (mut ll, mut g, mut h) = value_grad_hess(&gamma);
        let mut converged = false;
        for _ in 0..200 {
            if g.amax() <= 1e-10 * (1.0 + ll.abs()) {
                converged = true;
                break;
            }
            let step = (-&h)
                .lu()
                .solve(&g)
                .ok_or_else(|| Error::Numerical("singular survival Hessian".into()))?;
            // Step halving.
            let mut alpha = 1.0;
            let mut advanced = false;
            for _ in 0..40 {
                let cand = &gamma + alpha * &step;
                let (llc, gc, hc) = value_grad_hess(&cand);
                if llc.is_finite() && llc > ll {
                    gamma = cand;
                    ll = llc;
                    g = gc;
                    h = hc;
                    advanced = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !advanced {
                converged = g.amax() <= 1e-6 * (1.0 + ll.abs());
                break;
            }
            if gamma.amax() > 30.0 {
                return Err(Error::Numerical(format!(
                    "survival sub-model for event type {} diverged (separation?)",
                    e + 1
                )));
            }
        }
        if !converged {
            return Err(Error::Numerical(format!(
                "survival sub-model for event type {} did not converge",
                e + 1
            )));
        }
        gammas.push(gamma);
        logliks.push(ll);
    }
    Ok(SurvivalFit {
        gammas,
        loglik: logliks,
    })
}

/// Starting coordinates for the full model from the sub-model fits:
/// associations and frailty covariances start at zero (frailty variances at
/// 0.25).
pub fn initial_zeta(
    spec: &ResolvedSpec,
    layout: &ParameterLayout,
    markers: &MarkerFit,
    survival: &SurvivalFit,
) -> Result<DVector<f64>> {
    let n_l = spec.n_markers();
    let r = spec.total_random_dim();
    let beta = DVector::from_iterator(
        layout.p_beta(),
        markers.beta.iter().flat_map(|b| b.iter().copied()),
    );
    let mut sigma = DMatrix::zeros(n_l, n_l);
    for l in 0..n_l {
        sigma[(l, l)] = markers.sigma2[l];
    }
    let mut psi = DMatrix::zeros(r, r);
    let mut off = 0;
    for block in &markers.psi_blocks {
        let d = block.nrows();
        psi.view_mut((off, off), (d, d)).copy_from(block);
        off += d;
    }
    let alphas: Vec<DVector<f64>> = spec
        .events
        .iter()
        .map(|ev| DVector::zeros(ev.alpha_dim()))
        .collect();
    let h = layout.frailty_types.len();
    let xi = DMatrix::identity(h, h) * 0.25;
    layout.pack_natural(&beta, &sigma, &psi, &survival.gammas, &alphas, &xi)
}

/// Variational starting values: means at the BLUPs (zero for frailty
/// coordinates), covariances at the conditional covariances (0.25 times the
/// identity for frailty coordinates).
pub fn initialize_variational(
    spec: &ResolvedSpec,
    terms: &[IndividualTerm],
    markers: &MarkerFit,
) -> Vec<Vec<f64>> {
    let r = spec.total_random_dim();
    terms
        .iter()
        .map(|term| {
            let q = term.q;
            let mut theta = vec![0.0; term.v2];
            // Mean: stacked BLUPs, zeros for frailties.
            let mut pos = 0;
            for l in 0..spec.n_markers() {
                let b = &markers.blups[term.index][l];
                theta[pos..pos + b.len()].copy_from_slice(b.as_slice());
                pos += b.len();
            }
            // Covariance factor: block-diagonal Cholesky.
            let mut lam = DMatrix::zeros(q, q);
            let mut off = 0;
            for l in 0..spec.n_markers() {
                let c = &markers.cond_covs[term.index][l];
                let d = c.nrows();
                lam.view_mut((off, off), (d, d)).copy_from(c);
                off += d;
            }
            for k in r..q {
                lam[(k, k)] = 0.25;
            }
            let chol = nalgebra::Cholesky::new(lam)
                .expect("variational covariance init not PD")
                .l();
            let packed = packed_from_factor(&chol);
            theta[q..].copy_from_slice(&packed);
            theta
        })
        .collect()
}

/// Pack the initial `(zeta, theta_1, ..., theta_n)` vector.
pub fn initial_point(
    zeta: &DVector<f64>,
    thetas: &[Vec<f64>],
) -> (DVector<f64>, crate::psqn::Partition) {
    let v1 = zeta.len();
    let v2: Vec<usize> = thetas.iter().map(|t| t.len()).collect();
    let partition = crate::psqn::Partition::new(v1, v2);
    let mut x = DVector::zeros(partition.total);
    x.rows_mut(0, v1).copy_from(zeta);
    for (i, t) in thetas.iter().enumerate() {
        x.rows_mut(partition.offsets[i], t.len())
            .copy_from_slice(t);
    }
    (x, partition)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{EventRecord, Individual, MarkerObservation};
    use crate::design::build_terms;
    use crate::lowerbound::LowerBound;
    use crate::spec::tests_support::small_univariate_spec;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    /// Random-intercept-only spec with a single intercept fixed effect.
    fn intercept_spec() -> ResolvedSpec {
        let mut spec = small_univariate_spec();
        spec.markers[0].fixed_covariates.clear();
        spec.markers[0].time_basis = crate::basis::TimeBasis::poly(0, true);
        spec.markers[0].random_basis = crate::basis::TimeBasis::poly(0, true);
        spec
    }

    fn balanced_one_way(
        n_groups: usize,
        k_per: usize,
        mu: f64,
        sb: f64,
        se: f64,
        seed: u64,
    ) -> JointData {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut individuals = Vec::new();
        for i in 0..n_groups {
            let b: f64 = sb * rng.sample::<f64, _>(StandardNormal);
            let markers = (0..k_per)
                .map(|j| MarkerObservation {
                    time: j as f64,
                    marker: 0,
                    value: mu + b + se * rng.sample::<f64, _>(StandardNormal),
                })
                .collect();
            individuals.push(Individual {
                id: format!("{i}"),
                markers,
                ..Default::default()
            });
        }
        JointData { individuals }
    }

    #[test]
    fn balanced_one_way_matches_closed_form_ml() {
        let spec = intercept_spec();
        let (n, k) = (40usize, 5usize);
        let data = balanced_one_way(n, k, 1.5, 2.0, 0.7, 4);
        let fit = fit_marker_submodels(&spec, &data).unwrap();

        // Closed-form ML for the balanced one-way random-effects model.
        let values: Vec<Vec<f64>> = data
            .individuals
            .iter()
            .map(|ind| ind.markers.iter().map(|m| m.value).collect())
            .collect();
        let grand: f64 =
            values.iter().flatten().sum::<f64>() / (n * k) as f64;
        let group_means: Vec<f64> = values
            .iter()
            .map(|v| v.iter().sum::<f64>() / k as f64)
            .collect();
        let ssw: f64 = values
            .iter()
            .zip(&group_means)
            .map(|(v, m)| v.iter().map(|y| (y - m) * (y - m)).sum::<f64>())
            .sum();
        let ssb_k: f64 = group_means
            .iter()
            .map(|m| k as f64 * (m - grand) * (m - grand))
            .sum();
        let sigma_e2 = ssw / ((n * k - n) as f64);
        let tau = ssb_k / n as f64;
        let sigma_b2 = (tau - sigma_e2) / k as f64;

        assert_abs_diff_eq!(fit.beta[0][0], grand, epsilon = 1e-6);
        assert_abs_diff_eq!(fit.sigma2[0], sigma_e2, epsilon = 1e-6);
        assert_abs_diff_eq!(fit.psi_blocks[0][(0, 0)], sigma_b2, epsilon = 1e-6);
    }

    #[test]
    fn zero_variance_truth_clamps_without_failure() {
        let spec = intercept_spec();
        // No between-group variance at all.
        let data = balanced_one_way(30, 4, -0.5, 0.0, 1.0, 9);
        let fit = fit_marker_submodels(&spec, &data).unwrap();
        assert!(fit.psi_blocks[0][(0, 0)] >= 0.0);
        assert!(fit.psi_blocks[0][(0, 0)] < 0.05);
        assert!(fit.sigma2[0] > 0.5);
    }

    #[test]
    fn simulated_marker_model_recovers_beta() {
        // Random intercept + slope with a covariate; check recovery across
        // replicates against Monte Carlo standard errors.
        let spec = small_univariate_spec();
        let beta_true = [1.0, 0.8, -0.5]; // x1, intercept, slope
        let psi_true = DMatrix::from_row_slice(2, 2, &[0.8, 0.2, 0.2, 0.4]);
        let psi_chol = nalgebra::Cholesky::new(psi_true.clone()).unwrap().l();
        let sigma = 0.5f64;
        let mut estimates: Vec<DVector<f64>> = Vec::new();
        for rep in 0..20 {
            let mut rng = ChaCha12Rng::seed_from_u64(100 + rep);
            let mut individuals = Vec::new();
            for i in 0..60 {
                let x1: f64 = rng.sample(StandardNormal);
                let z = DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal));
                let u = &psi_chol * z;
                let markers = (0..5)
                    .map(|j| {
                        let t = j as f64 * 0.5;
                        let mean =
                            beta_true[0] * x1 + beta_true[1] + beta_true[2] * t + u[0] + u[1] * t;
                        MarkerObservation {
                            time: t,
                            marker: 0,
                            value: mean + sigma * rng.sample::<f64, _>(StandardNormal),
                        }
                    })
                    .collect();
                individuals.push(Individual {
                    id: format!("{i}"),
                    covariates: [("x1".to_string(), x1), ("z1".to_string(), 0.0)]
                        .into_iter()
                        .collect(),
                    markers,
                    ..Default::default()
                });
            }
            let data = JointData { individuals };
            let fit = fit_marker_submodels(&spec, &data).unwrap();
            estimates.push(fit.beta[0].clone());
        }
        for j in 0..3 {
            let vals: Vec<f64> = estimates.iter().map(|e| e[j]).collect();
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / (vals.len() - 1) as f64;
            let se = (var / vals.len() as f64).sqrt();
            assert!(
                (mean - beta_true[j]).abs() < 3.0 * se.max(1e-3),
                "beta[{j}]: {mean} vs {}",
                beta_true[j]
            );
        }
    }

    #[test]
    fn exponential_truth_recovers_log_rate() {
        // Intercept-only baseline: gamma = log(events / exposure).
        let mut spec = small_univariate_spec();
        spec.events[0].fixed_covariates.clear();
        spec.events[0].baseline_basis = crate::basis::TimeBasis::poly(0, true);
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let rate = 0.8f64;
        let mut individuals = Vec::new();
        let mut n_events = 0.0;
        let mut exposure = 0.0;
        for i in 0..200 {
            let u: f64 = rng.random();
            let t = -u.ln() / rate;
            let (stop, status) = if t > 3.0 { (3.0, 0) } else { (t, 1) };
            n_events += status as f64;
            exposure += stop;
            individuals.push(Individual {
                id: format!("{i}"),
                markers: vec![MarkerObservation {
                    time: 0.0,
                    marker: 0,
                    value: 0.0,
                }],
                events: vec![EventRecord {
                    event_type: 0,
                    start: 0.0,
                    stop,
                    status,
                }],
                covariates: [("x1".to_string(), 0.0)].into_iter().collect(),
                ..Default::default()
            });
        }
        let data = JointData { individuals };
        let fit = fit_survival_submodels(&spec, &data, 15).unwrap();
        assert_abs_diff_eq!(
            fit.gammas[0][0],
            (n_events / exposure).ln(),
            epsilon = 1e-6
        );
    }

    #[test]
    fn weibull_fit_matches_dense_optimizer_and_delayed_entry_reduces() {
        // Weibull-form baseline (1, log t), no censoring; compare the Newton
        // fit against a dense BFGS run on the same likelihood.
        let mut spec = small_univariate_spec();
        spec.events[0].fixed_covariates.clear();
        spec.events[0].baseline_basis = crate::basis::TimeBasis::log_poly(1, true);
        let mut rng = ChaCha12Rng::seed_from_u64(33);
        let shape = 1.3f64;
        let scale = 2.0f64;
        let make_data = |entry: f64, rng: &mut ChaCha12Rng| {
            let mut individuals = Vec::new();
            for i in 0..150 {
                let u: f64 = rng.random();
                // Weibull with H(t) = (t/scale)^shape, conditional on t > entry.
                let h0 = (entry / scale).powf(shape);
                let t = scale * (h0 - u.ln()).powf(1.0 / shape);
                individuals.push(Individual {
                    id: format!("{i}"),
                    entry,
                    markers: vec![MarkerObservation {
                        time: entry,
                        marker: 0,
                        value: 0.0,
                    }],
                    events: vec![EventRecord {
                        event_type: 0,
                        start: entry,
                        stop: t,
                        status: 1,
                    }],
                    covariates: [("x1".to_string(), 0.0)].into_iter().collect(),
                    ..Default::default()
                });
            }
            JointData { individuals }
        };
        let data = make_data(0.0, &mut rng);
        let fit = fit_survival_submodels(&spec, &data, 25).unwrap();

        // Dense-optimizer oracle on the same cached likelihood.
        let rule = quad::gauss_legendre(25).unwrap();
        let mut rows = Vec::new();
        let mut nodes = Vec::new();
        for ind in &data.individuals {
            let rec = &ind.events[0];
            rows.push(survival_design(&spec, ind, 0, rec.stop).unwrap());
            let half = 0.5 * (rec.stop - rec.start);
            let mid = 0.5 * (rec.stop + rec.start);
            for (&xq, &wq) in rule.nodes.iter().zip(&rule.weights) {
                nodes.push((wq * half, survival_design(&spec, ind, 0, mid + half * xq).unwrap()));
            }
        }
        let f = |g: &DVector<f64>| {
            let mut ll = 0.0;
            let mut gr = DVector::zeros(2);
            for z in &rows {
                ll += z.dot(g);
                gr += z;
            }
            for (w, z) in &nodes {
                let e_w = w * z.dot(g).exp();
                ll -= e_w;
                gr.axpy(-e_w, z, 1.0);
            }
            (ll, gr)
        };
        let (x_ref, _, _, _) = crate::psqn::tests::dense_bfgs_reference(
            &f,
            &DVector::zeros(2),
            1e-10,
            500,
        );
        assert_abs_diff_eq!((&fit.gammas[0] - &x_ref).amax(), 0.0, epsilon = 1e-6);

        // Sanity: the fitted Weibull parameters are near the truth.
        assert_abs_diff_eq!(fit.gammas[0][1], shape - 1.0, epsilon = 0.2);

        // Delayed entry with v_i > 0 uses (v, t] exposure; the same code
        // path with v = 0 reduces to the previous case, and the truncated
        // fit still recovers the truth.
        let mut rng2 = ChaCha12Rng::seed_from_u64(34);
        let data_trunc = make_data(0.5, &mut rng2);
        let fit_trunc = fit_survival_submodels(&spec, &data_trunc, 25).unwrap();
        assert_abs_diff_eq!(fit_trunc.gammas[0][1], shape - 1.0, epsilon = 0.25);
    }

    #[test]
    fn variational_init_is_stationary_for_lmm_only_model() {
        let mut spec = small_univariate_spec();
        spec.events.clear();
        let data = {
            let mut rng = ChaCha12Rng::seed_from_u64(77);
            let mut individuals = Vec::new();
            for i in 0..40 {
                let x1: f64 = rng.sample(StandardNormal);
                let u0: f64 = 0.9 * rng.sample::<f64, _>(StandardNormal);
                let u1: f64 = 0.5 * rng.sample::<f64, _>(StandardNormal);
                let markers = (0..4)
                    .map(|j| {
                        let t = j as f64 * 0.7;
                        MarkerObservation {
                            time: t,
                            marker: 0,
                            value: 0.5 * x1
                                + 1.0
                                + u0
                                + u1 * t
                                + 0.6 * rng.sample::<f64, _>(StandardNormal),
                        }
                    })
                    .collect();
                individuals.push(Individual {
                    id: format!("{i}"),
                    covariates: [("x1".to_string(), x1)].into_iter().collect(),
                    markers,
                    ..Default::default()
                });
            }
            JointData { individuals }
        };
        // Also include an individual with no observations at all.
        let mut data = data;
        data.individuals.push(Individual {
            id: "empty".into(),
            covariates: [("x1".to_string(), 0.0)].into_iter().collect(),
            ..Default::default()
        });

        let layout = ParameterLayout::from_spec(&spec);
        let terms = build_terms(&spec, &data, 15).unwrap();
        let markers = fit_marker_submodels(&spec, &data).unwrap();
        let survival = SurvivalFit {
            gammas: vec![],
            loglik: vec![],
        };
        let zeta = initial_zeta(&spec, &layout, &markers, &survival).unwrap();
        let thetas = initialize_variational(&spec, &terms, &markers);

        // Individual with no observations: mean zero, covariance = prior.
        let last = terms.len() - 1;
        let (lam, chol) = crate::lowerbound::theta_split(2, &thetas[last]);
        assert_abs_diff_eq!(lam.amax(), 0.0, epsilon = 1e-12);
        let p = layout.unpack(zeta.as_slice());
        assert_abs_diff_eq!(
            ((&chol * chol.transpose()) - &p.psi).amax(),
            0.0,
            epsilon = 1e-6
        );

        // Posterior contraction: with observations the variational
        // covariance is below the prior in the Loewner order.
        let (_, chol0) = crate::lowerbound::theta_split(2, &thetas[0]);
        let gap = &p.psi - &chol0 * chol0.transpose();
        let eig = nalgebra::SymmetricEigen::new(gap);
        assert!(eig.eigenvalues.min() > -1e-8);

        // Stationarity of the theta block at the initializer.
        let lb = LowerBound {
            spec: &spec,
            layout: &layout,
            terms: &terms,
            aghq_nodes: 5,
        };
        for i in 0..terms.len() {
            let mut grad = vec![0.0; layout.v1 + terms[i].v2];
            lb.value_grad_i(i, zeta.as_slice(), &thetas[i], &mut grad)
                .unwrap();
            let theta_grad_norm = grad[layout.v1..]
                .iter()
                .fold(0.0f64, |m, g| m.max(g.abs()));
            assert!(
                theta_grad_norm < 1e-6,
                "individual {i}: theta gradient norm {theta_grad_norm}"
            );
        }
    }
}
