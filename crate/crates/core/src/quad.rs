//! Quadrature rules: Gauss–Legendre, Gauss–Hermite and adaptive
//! Gauss–Hermite (AGHQ) for log-integrals of unimodal integrands.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, DVector};

use crate::{numdiff, Error, Result};

/// Largest supported rule size.
pub const MAX_RULE_SIZE: usize = 128;

/// Nodes and positive weights of a one-dimensional quadrature rule.
#[derive(Debug, Clone)]
pub struct QuadRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Golub–Welsch: nodes are the eigenvalues of the symmetric tridiagonal
/// Jacobi matrix, weights are `mu0` times the squared first components of the
/// normalized eigenvectors.
fn jacobi_rule(n: usize, off_diag: impl Fn(usize) -> f64, mu0: f64) -> QuadRule {
    if n == 1 {
        return QuadRule {
            nodes: vec![0.0],
            weights: vec![mu0],
        };
    }
    let mut j = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = off_diag(k);
        j[(k - 1, k)] = b;
        j[(k, k - 1)] = b;
    }
    let eig = nalgebra::SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], mu0 * eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    QuadRule {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1).collect(),
    }
}

fn check_rule_size(n: usize) -> Result<()> {
    if n < 1 || n > MAX_RULE_SIZE {
        return Err(Error::InvalidInput(format!(
            "rule size must be in 1..={MAX_RULE_SIZE}, got {n}"
        )));
    }
    Ok(())
}

type RuleCache = Mutex<HashMap<usize, Arc<QuadRule>>>;

fn cache_get(cache: &'static OnceLock<RuleCache>, n: usize, build: fn(usize) -> QuadRule) -> Arc<QuadRule> {
    let map = cache.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = map.lock().expect("quadrature cache poisoned");
    guard
        .entry(n)
        .or_insert_with(|| Arc::new(build(n)))
        .clone()
}

/// `n`-node Gauss–Legendre rule on `[-1, 1]`; exact for polynomials of
/// degree `<= 2n - 1`.
pub fn gauss_legendre(n: usize) -> Result<Arc<QuadRule>> {
    check_rule_size(n)?;
    static CACHE: OnceLock<RuleCache> = OnceLock::new();
    Ok(cache_get(&CACHE, n, |n| {
        jacobi_rule(
            n,
            |k| {
                let k = k as f64;
                k / (4.0 * k * k - 1.0).sqrt()
            },
            2.0,
        )
    }))
}

/// `n`-node Gauss–Hermite rule for the weight `exp(-x^2)` on the real line.
pub fn gauss_hermite(n: usize) -> Result<Arc<QuadRule>> {
    check_rule_size(n)?;
    static CACHE: OnceLock<RuleCache> = OnceLock::new();
    Ok(cache_get(&CACHE, n, |n| {
        jacobi_rule(n, |k| (k as f64 / 2.0).sqrt(), std::f64::consts::PI.sqrt())
    }))
}

/// Composite Gauss–Legendre rule on `[-1, 1]` with dyadic segments refining
/// toward the left endpoint, for integrands with an integrable power or log
/// singularity at the interval start (e.g. Weibull-like log baselines at
/// time zero). Returned as a plain rule so [`integrate_on`] applies.
pub fn composite_legendre_toward_start(
    n_per_segment: usize,
    n_segments: usize,
) -> Result<QuadRule> {
    if n_segments == 0 {
        return Err(Error::InvalidInput("need at least one segment".into()));
    }
    let base = gauss_legendre(n_per_segment)?;
    let mut nodes = Vec::with_capacity(n_per_segment * n_segments);
    let mut weights = Vec::with_capacity(n_per_segment * n_segments);
    // Segment edges in u in [0, 1]: 0, 2^-(K-1), ..., 1/2, 1.
    let mut hi = 1.0f64;
    for k in 0..n_segments {
        let lo = if k + 1 == n_segments { 0.0 } else { hi / 2.0 };
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (hi + lo);
        for (&x, &w) in base.nodes.iter().zip(&base.weights) {
            let u = mid + half * x;
            nodes.push(2.0 * u - 1.0);
            weights.push(2.0 * half * w);
        }
        hi = lo;
    }
    // Sort ascending for tidiness.
    let mut pairs: Vec<(f64, f64)> = nodes.into_iter().zip(weights).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(QuadRule {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1).collect(),
    })
}

/// Integrate `f` on `[c, t]` by an affine change of variables.
pub fn integrate_on(rule: &QuadRule, c: f64, t: f64, mut f: impl FnMut(f64) -> f64) -> Result<f64> {
    if !(c <= t) {
        return Err(Error::InvalidInput(format!(
            "integration bounds must satisfy c <= t, got c={c}, t={t}"
        )));
    }
    if c == t {
        return Ok(0.0);
    }
    let half = 0.5 * (t - c);
    let mid = 0.5 * (c + t);
    let mut acc = 0.0;
    for (&x, &w) in rule.nodes.iter().zip(&rule.weights) {
        acc += w * f(mid + half * x);
    }
    Ok(half * acc)
}

/// An integrand for [`aghq_log_integral`] given on the log scale, with an
/// optional analytic gradient/Hessian callback used by the mode search
/// (central finite differences otherwise).
pub struct LogIntegrand<'a> {
    pub log_f: &'a (dyn Fn(&DVector<f64>) -> f64 + 'a),
    pub grad_hess: Option<&'a (dyn Fn(&DVector<f64>) -> (DVector<f64>, DMatrix<f64>) + 'a)>,
}

impl<'a> LogIntegrand<'a> {
    pub fn new(log_f: &'a (dyn Fn(&DVector<f64>) -> f64 + 'a)) -> Self {
        Self {
            log_f,
            grad_hess: None,
        }
    }

    fn grad_hess_at(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        match self.grad_hess {
            Some(gh) => gh(x),
            None => {
                let g = numdiff::gradient(self.log_f, x, 1e-5);
                let h = numdiff::hessian(self.log_f, x, 1e-4);
                (g, h)
            }
        }
    }

    /// High-accuracy curvature for the final adaptation.
    fn curvature_at(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match self.grad_hess {
            Some(gh) => gh(x).1,
            None => numdiff::hessian_richardson(self.log_f, x, 0.02),
        }
    }
}

/// Mode and curvature found by the Newton search inside AGHQ.
pub struct AghqAdaptation {
    pub mode: DVector<f64>,
    /// Lower Cholesky factor of the negative Hessian at the mode.
    pub scale_chol: DMatrix<f64>,
    /// Per-axis width corrections applied when the curvature badly misstates
    /// the integrand's spread (1.0 on the plain curvature path).
    pub axis_widths: DVector<f64>,
    pub log_f_mode: f64,
}

const MODE_MAX_ITER: usize = 100;

fn find_mode(problem: &LogIntegrand, mode_init: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>, f64)> {
    let dim = mode_init.len();
    let mut x = mode_init.clone();
    let mut f = (problem.log_f)(&x);
    if !f.is_finite() {
        return Err(Error::Numerical(format!(
            "AGHQ mode search: log-integrand not finite at the initial point (value {f})"
        )));
    }
    for _ in 0..MODE_MAX_ITER {
        let (g, h) = problem.grad_hess_at(&x);
        if g.amax() <= 1e-10 * (1.0 + f.abs()) {
            return Ok((x, h, f));
        }
        // Newton direction on the concavified Hessian; grow a ridge until the
        // negated Hessian factors.
        let mut tau = 0.0;
        let dir = loop {
            let mut neg_h = -&h;
            for k in 0..dim {
                neg_h[(k, k)] += tau;
            }
            if let Some(chol) = nalgebra::Cholesky::new(neg_h) {
                break chol.solve(&g);
            }
            tau = if tau == 0.0 {
                1e-6 * (1.0 + h.amax())
            } else {
                tau * 10.0
            };
            if tau > 1e12 * (1.0 + h.amax()) {
                return Err(Error::Numerical(
                    "AGHQ mode search: could not regularize the Hessian".into(),
                ));
            }
        };
        let mut alpha = 1.0;
        let mut advanced = false;
        for _ in 0..40 {
            let cand = &x + alpha * &dir;
            let fc = (problem.log_f)(&cand);
            if fc.is_finite() && fc > f {
                x = cand;
                f = fc;
                advanced = true;
                break;
            }
            alpha *= 0.5;
        }
        if !advanced {
            // No ascent along the Newton direction: accept the point as the
            // mode if the gradient is small at a looser tolerance.
            if g.amax() <= 1e-5 * (1.0 + f.abs()) {
                return Ok((x, h, f));
            }
            return Err(Error::Numerical(
                "AGHQ mode search: line search failed before reaching a stationary point".into(),
            ));
        }
    }
    Err(Error::Numerical(format!(
        "AGHQ mode search did not converge within {MODE_MAX_ITER} iterations"
    )))
}

/// Solve the adaptation (mode plus scale) for an AGHQ approximation.
/// `edge_node` is the largest node of the Gauss–Hermite rule in use; it sets
/// the target decay when an axis's curvature misstates the integrand's width.
pub fn aghq_adapt(
    problem: &LogIntegrand,
    mode_init: &DVector<f64>,
    edge_node: f64,
) -> Result<AghqAdaptation> {
    let dim = mode_init.len();
    let (mode, _, f_mode) = find_mode(problem, mode_init)?;
    let hess = problem.curvature_at(&mode);
    if !hess.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("AGHQ: non-finite Hessian at the mode".into()));
    }
    let neg_h = -(&hess + hess.transpose()) * 0.5;
    // A flat mode (zero curvature) falls back to a unit scale and relies on
    // the axis-width recalibration below.
    let (l, curvature_ok) = match nalgebra::Cholesky::new(neg_h) {
        Some(chol) => (chol.l(), true),
        None => (DMatrix::identity(dim, dim), false),
    };

    // Sanity-check the implied width along each transformed axis: a Gaussian
    // integrand drops by exactly 1 at unit z, so accept moderate departures
    // and otherwise recalibrate the axis so that the integrand's log-drop at
    // the outermost node matches the Gauss–Hermite weight's decay there.
    let mut axis_widths = DVector::from_element(dim, 1.0);
    let lt = l.transpose();
    let edge = edge_node.max(1.0);
    let target = edge * edge;
    for j in 0..dim {
        let mut e = DVector::zeros(dim);
        e[j] = 1.0;
        let dir = std::f64::consts::SQRT_2
            * lt.clone()
                .solve_upper_triangular(&e)
                .ok_or_else(|| Error::Numerical("AGHQ: singular scale factor".into()))?;
        let drop_at = |beta: f64| f_mode - (problem.log_f)(&(&mode + beta * &dir));
        if curvature_ok {
            let d_plus = drop_at(1.0);
            let d_minus = drop_at(-1.0);
            if (0.25..=4.0).contains(&d_plus) && (0.25..=4.0).contains(&d_minus) {
                continue;
            }
        }
        let solve_width = |sign: f64| -> Result<f64> {
            let mut lo = 0.0_f64;
            let mut hi = 1.0_f64;
            let mut grow = 0;
            loop {
                let d = drop_at(sign * hi * edge);
                if d.is_nan() || d >= target {
                    break;
                }
                lo = hi;
                hi *= 2.0;
                grow += 1;
                if grow > 200 {
                    return Err(Error::Numerical(
                        "AGHQ: integrand does not decay along an axis".into(),
                    ));
                }
            }
            for _ in 0..80 {
                let midp = 0.5 * (lo + hi);
                let d = drop_at(sign * midp * edge);
                if !d.is_nan() && d < target {
                    lo = midp;
                } else {
                    hi = midp;
                }
            }
            Ok(0.5 * (lo + hi))
        };
        let wp = solve_width(1.0)?;
        let wm = solve_width(-1.0)?;
        axis_widths[j] = (wp * wm).sqrt();
    }

    Ok(AghqAdaptation {
        mode,
        scale_chol: l,
        axis_widths,
        log_f_mode: f_mode,
    })
}

/// Evaluate the AGHQ sum for a fixed adaptation; `visit` receives each grid
/// point and its log-weight contribution before the log-sum-exp reduction.
pub fn aghq_sum_with(
    problem: &LogIntegrand,
    adapt: &AghqAdaptation,
    nodes_per_dim: usize,
    mut visit: impl FnMut(&DVector<f64>, f64),
) -> Result<f64> {
    let dim = adapt.mode.len();
    let rule = gauss_hermite(nodes_per_dim)?;
    let n = rule.len();
    let lt = adapt.scale_chol.transpose();

    // Columns of sqrt(2) * L^{-T} * diag(axis_widths): point = mode + cols * z.
    let mut cols: Vec<DVector<f64>> = Vec::with_capacity(dim);
    for j in 0..dim {
        let mut e = DVector::zeros(dim);
        e[j] = 1.0;
        let c = std::f64::consts::SQRT_2
            * lt.clone()
                .solve_upper_triangular(&e)
                .ok_or_else(|| Error::Numerical("AGHQ: singular scale factor".into()))?
            * adapt.axis_widths[j];
        cols.push(c);
    }
    let mut log_det = (dim as f64 / 2.0) * std::f64::consts::LN_2;
    for j in 0..dim {
        log_det += adapt.axis_widths[j].ln() - adapt.scale_chol[(j, j)].ln();
    }

    let log_w: Vec<f64> = rule.weights.iter().map(|w| w.ln()).collect();
    let mut idx = vec![0usize; dim];
    let mut max_term = f64::NEG_INFINITY;
    let mut terms: Vec<f64> = Vec::with_capacity(n.pow(dim as u32));
    loop {
        let mut point = adapt.mode.clone();
        let mut lw = 0.0;
        let mut z2 = 0.0;
        for (j, &k) in idx.iter().enumerate() {
            let z = rule.nodes[k];
            point += z * &cols[j];
            lw += log_w[k];
            z2 += z * z;
        }
        let lf = (problem.log_f)(&point);
        let term = lw + z2 + lf;
        visit(&point, term);
        if term > max_term {
            max_term = term;
        }
        terms.push(term);
        // Advance the multi-index.
        let mut j = 0;
        loop {
            if j == dim {
                let sum: f64 = terms.iter().map(|t| (t - max_term).exp()).sum();
                return Ok(log_det + max_term + sum.ln());
            }
            idx[j] += 1;
            if idx[j] < n {
                break;
            }
            idx[j] = 0;
            j += 1;
        }
    }
}

/// `log ∫ exp(log_f(x)) dx` by adaptive Gauss–Hermite quadrature: Newton mode
/// search, rescaling by the inverse Cholesky factor of the negative Hessian
/// at the mode, and a log-sum-exp-stabilized weighted sum over the product
/// grid (`nodes_per_dim^dim` evaluations).
pub fn aghq_log_integral(
    problem: &LogIntegrand,
    dim: usize,
    nodes_per_dim: usize,
    mode_init: &DVector<f64>,
) -> Result<f64> {
    if dim < 1 {
        return Err(Error::InvalidInput("AGHQ dimension must be >= 1".into()));
    }
    if nodes_per_dim < 1 {
        return Err(Error::InvalidInput("AGHQ needs >= 1 node per dimension".into()));
    }
    if mode_init.len() != dim {
        return Err(Error::InvalidInput(format!(
            "AGHQ mode_init has length {}, expected {dim}",
            mode_init.len()
        )));
    }
    let edge = gauss_hermite(nodes_per_dim)?
        .nodes
        .iter()
        .fold(0.0f64, |m, &x| m.max(x.abs()));
    let adapt = aghq_adapt(problem, mode_init, edge)?;
    aghq_sum_with(problem, &adapt, nodes_per_dim, |_, _| {})
}
