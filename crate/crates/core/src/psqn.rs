//! Partially separable quasi-Newton maximizer for objectives of the form
//! `Σ_i f_i(global, private_i)`.
//!
//! Each element function gets its own dense BFGS approximation of its
//! (small) Hessian; the implied full-problem Hessian has an arrowhead
//! structure that is never formed. The quasi-Newton step solves the normal
//! equations matrix-free with a block-diagonally preconditioned conjugate
//! gradient, followed by a strong-Wolfe line search and damped BFGS updates
//! per element.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::{Error, Result};

/// One element of a partially separable objective. Gradients are over the
/// concatenated `(global, private)` coordinates.
pub trait ElementFunction: Sync {
    fn global_dim(&self) -> usize;
    fn private_dim(&self) -> usize;
    fn value(&self, global: &[f64], private: &[f64]) -> f64;
    /// Returns the value and fills `grad` (length `global_dim + private_dim`).
    fn value_grad(&self, global: &[f64], private: &[f64], grad: &mut [f64]) -> f64;
}

#[derive(Debug, Clone)]
pub struct PsqnOptions {
    /// Relative objective-change tolerance: `|Δf| <= rel_tol (|f| + 1e-8)`.
    pub rel_tol: f64,
    /// Infinity-norm gradient tolerance.
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Fixed CG forcing tolerance; `None` uses `min(0.5, sqrt(||g||))`.
    pub cg_tol: Option<f64>,
    /// Inner CG iteration cap; `None` uses `10 (v1 + max v2)`.
    pub max_cg: Option<usize>,
    /// Strong-Wolfe constants.
    pub c1: f64,
    pub c2: f64,
    /// Powell damping curvature threshold.
    pub damping: f64,
    pub max_line_search: usize,
    /// Verify element gradients against finite differences on the first
    /// evaluation (debug aid).
    pub check_gradients: bool,
}

impl Default for PsqnOptions {
    fn default() -> Self {
        PsqnOptions {
            rel_tol: 1e-8,
            grad_tol: 1e-3,
            max_iter: 1000,
            cg_tol: None,
            max_cg: None,
            c1: 1e-4,
            c2: 0.9,
            damping: 0.2,
            max_line_search: 30,
            check_gradients: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsqnStatus {
    Converged,
    MaxIter,
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct PsqnResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub n_iter: usize,
    pub status: PsqnStatus,
    /// Number of full objective (value + gradient) evaluations.
    pub n_evals: usize,
    /// Objective value after each accepted outer iteration.
    pub trajectory: Vec<f64>,
    /// Infinity norm of the gradient at the returned point.
    pub grad_norm: f64,
}

/// Coordinate layout of a partially separable problem:
/// `x = [global | private_1 | ... | private_n]`.
#[derive(Debug, Clone)]
pub struct Partition {
    pub v1: usize,
    pub v2: Vec<usize>,
    pub offsets: Vec<usize>,
    pub total: usize,
}

impl Partition {
    pub fn new(v1: usize, v2: Vec<usize>) -> Self {
        let mut offsets = Vec::with_capacity(v2.len());
        let mut pos = v1;
        for &d in &v2 {
            offsets.push(pos);
            pos += d;
        }
        Partition {
            v1,
            v2,
            offsets,
            total: pos,
        }
    }

    fn gather(&self, i: usize, x: &DVector<f64>, out: &mut DVector<f64>) {
        let d = self.v2[i];
        out.rows_mut(0, self.v1)
            .copy_from_slice(&x.as_slice()[0..self.v1]);
        out.rows_mut(self.v1, d)
            .copy_from_slice(&x.as_slice()[self.offsets[i]..self.offsets[i] + d]);
    }
}

/// Per-element dense symmetric BFGS approximations of the negated element
/// Hessians; the implied full matrix has the arrowhead structure.
pub struct ArrowheadApprox {
    pub partition: Partition,
    /// One SPD matrix of size `(v1 + v2_i)^2` per element.
    pub mats: Vec<DMatrix<f64>>,
    scaled: Vec<bool>,
}

impl ArrowheadApprox {
    pub fn identity(partition: Partition) -> Self {
        let mats = partition
            .v2
            .iter()
            .map(|&d| DMatrix::identity(partition.v1 + d, partition.v1 + d))
            .collect();
        let n = partition.v2.len();
        ArrowheadApprox {
            partition,
            mats,
            scaled: vec![false; n],
        }
    }

    /// Matrix-free product of the implied full Hessian approximation with a
    /// full-length vector: scatter-gather of each element matrix against the
    /// element's `(global, private)` slice.
    pub fn hessian_vector_product(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        let p = &self.partition;
        if v.len() != p.total {
            return Err(Error::InvalidInput(format!(
                "vector has length {}, expected {}",
                v.len(),
                p.total
            )));
        }
        let mut out = DVector::zeros(p.total);
        let mut slice = DVector::zeros(0);
        for i in 0..self.mats.len() {
            let d = p.v2[i];
            slice = {
                let mut s = DVector::zeros(p.v1 + d);
                p.gather(i, v, &mut s);
                s
            };
            let prod = &self.mats[i] * &slice;
            for j in 0..p.v1 {
                out[j] += prod[j];
            }
            for j in 0..d {
                out[p.offsets[i] + j] += prod[p.v1 + j];
            }
        }
        let _ = slice;
        Ok(out)
    }

    /// Block-diagonal preconditioner formed by ignoring the global-private
    /// coupling blocks: the inverse of `diag(Σ_i B_i[gg]; B_i[pp] ...)` via
    /// cached Cholesky factors. Falls back to the identity with a warning
    /// when a factorization fails.
    pub fn block_preconditioner(&self) -> BlockPreconditioner {
        let p = &self.partition;
        let mut global = DMatrix::zeros(p.v1, p.v1);
        for m in &self.mats {
            global += m.view((0, 0), (p.v1, p.v1));
        }
        let global_chol = if p.v1 > 0 {
            nalgebra::Cholesky::new(global)
        } else {
            None
        };
        if p.v1 > 0 && global_chol.is_none() {
            eprintln!("warning: global preconditioner block failed to factor; using identity");
            return BlockPreconditioner {
                partition: p.clone(),
                global: None,
                privates: None,
            };
        }
        let mut privates = Vec::with_capacity(self.mats.len());
        for (i, m) in self.mats.iter().enumerate() {
            let d = p.v2[i];
            if d == 0 {
                privates.push(None);
                continue;
            }
            match nalgebra::Cholesky::new(m.view((p.v1, p.v1), (d, d)).into_owned()) {
                Some(c) => privates.push(Some(c)),
                None => {
                    eprintln!(
                        "warning: private preconditioner block {i} failed to factor; using identity"
                    );
                    return BlockPreconditioner {
                        partition: p.clone(),
                        global: None,
                        privates: None,
                    };
                }
            }
        }
        BlockPreconditioner {
            partition: p.clone(),
            global: global_chol,
            privates: Some(privates),
        }
    }

    /// Damped BFGS update of element `i` from the step `s` and gradient
    /// change `y` over the element's coordinates.
    fn update(&mut self, i: usize, s: &DVector<f64>, y: &DVector<f64>, damping: f64) {
        let ss = s.norm_squared();
        if ss == 0.0 || !s.iter().all(|v| v.is_finite()) || !y.iter().all(|v| v.is_finite()) {
            return;
        }
        // First-update scaling heuristic.
        if !self.scaled[i] {
            let sy = s.dot(y);
            if sy > 0.0 {
                let yy = y.norm_squared();
                let scale = (yy / sy).max(1e-8);
                self.mats[i] *= scale;
            }
            self.scaled[i] = true;
        }
        let b = &self.mats[i];
        let bs = b * s;
        let sbs = s.dot(&bs);
        if sbs <= 0.0 || !sbs.is_finite() {
            return;
        }
        let sy = s.dot(y);
        let y_tilde = if sy < damping * sbs {
            let theta = (1.0 - damping) * sbs / (sbs - sy);
            theta * y + (1.0 - theta) * &bs
        } else {
            y.clone()
        };
        let s_yt = s.dot(&y_tilde);
        if s_yt <= 0.0 {
            return;
        }
        let m = self.mats.get_mut(i).unwrap();
        // B <- B - B s sᵀ B / sᵀBs + ỹ ỹᵀ / sᵀỹ
        m.ger(-1.0 / sbs, &bs, &bs, 1.0);
        m.ger(1.0 / s_yt, &y_tilde, &y_tilde, 1.0);
        // Keep exactly symmetric.
        let sym = (m.clone() + m.transpose()) * 0.5;
        m.copy_from(&sym);
    }
}

/// Inverse of the block-diagonal part of an [`ArrowheadApprox`].
pub struct BlockPreconditioner {
    partition: Partition,
    global: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    privates: Option<Vec<Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>>>,
}

impl BlockPreconditioner {
    pub fn apply(&self, r: &DVector<f64>) -> DVector<f64> {
        let p = &self.partition;
        let mut z = r.clone();
        if let Some(g) = &self.global {
            let sol = g.solve(&r.rows(0, p.v1).into_owned());
            z.rows_mut(0, p.v1).copy_from(&sol);
        } else if self.privates.is_none() {
            return z; // identity fallback
        }
        if let Some(priv_chols) = &self.privates {
            for (i, c) in priv_chols.iter().enumerate() {
                let d = p.v2[i];
                if d == 0 {
                    continue;
                }
                if let Some(c) = c {
                    let sol = c.solve(&r.rows(p.offsets[i], d).into_owned());
                    z.rows_mut(p.offsets[i], d).copy_from(&sol);
                }
            }
        }
        z
    }
}

/// Solve `B p = rhs` by preconditioned conjugate gradients; returns the
/// iterate and the iteration count.
pub fn preconditioned_cg(
    approx: &ArrowheadApprox,
    precond: &BlockPreconditioner,
    rhs: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<(DVector<f64>, usize)> {
    let n = rhs.len();
    let mut x = DVector::zeros(n);
    let mut r = rhs.clone();
    let r0_norm = r.norm();
    if r0_norm == 0.0 {
        return Ok((x, 0));
    }
    let mut z = precond.apply(&r);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    let mut iters = 0;
    for _ in 0..max_iter {
        let bp = approx.hessian_vector_product(&p)?;
        let pbp = p.dot(&bp);
        if pbp <= 0.0 || !pbp.is_finite() {
            break;
        }
        let alpha = rz / pbp;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &bp, 1.0);
        iters += 1;
        if r.norm() <= tol * r0_norm {
            break;
        }
        z = precond.apply(&r);
        let rz_new = r.dot(&z);
        let beta = rz_new / rz;
        rz = rz_new;
        p = &z + beta * &p;
    }
    Ok((x, iters))
}

struct Evaluation {
    f: f64,
    grad: DVector<f64>,
    elem_grads: Vec<DVector<f64>>,
}

fn evaluate<E: ElementFunction>(
    elements: &[E],
    partition: &Partition,
    x: &DVector<f64>,
) -> Evaluation {
    // Elements evaluate in parallel; the reduction runs in fixed element
    // order so results are identical for any thread count.
    let results: Vec<(f64, DVector<f64>)> = elements
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let d = partition.v2[i];
            let mut grad = vec![0.0; partition.v1 + d];
            let g_slice = &x.as_slice()[0..partition.v1];
            let p_slice = &x.as_slice()[partition.offsets[i]..partition.offsets[i] + d];
            let f = e.value_grad(g_slice, p_slice, &mut grad);
            (f, DVector::from_vec(grad))
        })
        .collect();
    let mut f = 0.0;
    let mut grad = DVector::zeros(partition.total);
    for (i, (fi, gi)) in results.iter().enumerate() {
        f += fi;
        for j in 0..partition.v1 {
            grad[j] += gi[j];
        }
        let d = partition.v2[i];
        for j in 0..d {
            grad[partition.offsets[i] + j] += gi[partition.v1 + j];
        }
    }
    Evaluation {
        f,
        grad,
        elem_grads: results.into_iter().map(|r| r.1).collect(),
    }
}

fn check_element_gradients<E: ElementFunction>(
    elements: &[E],
    partition: &Partition,
    x: &DVector<f64>,
) -> Result<()> {
    for (i, e) in elements.iter().enumerate() {
        let d = partition.v2[i];
        let mut xe = DVector::zeros(partition.v1 + d);
        partition.gather(i, x, &mut xe);
        let mut grad = vec![0.0; partition.v1 + d];
        e.value_grad(&xe.as_slice()[0..partition.v1], &xe.as_slice()[partition.v1..], &mut grad);
        let fd = crate::numdiff::gradient(
            |v: &DVector<f64>| e.value(&v.as_slice()[0..partition.v1], &v.as_slice()[partition.v1..]),
            &xe,
            1e-6,
        );
        for j in 0..grad.len() {
            let scale = grad[j].abs().max(fd[j].abs()).max(1.0);
            if (grad[j] - fd[j]).abs() > 1e-4 * scale {
                return Err(Error::Numerical(format!(
                    "element {i} gradient coordinate {j} disagrees with finite differences: \
                     {} vs {}",
                    grad[j], fd[j]
                )));
            }
        }
    }
    Ok(())
}

/// Outcome of a strong-Wolfe line search; on failure the best evaluated
/// point is reported.
pub enum LineSearchOutcome<T> {
    Success { alpha: f64, data: T, n_evals: usize },
    Failure { best: Option<(f64, T)>, n_evals: usize },
}

/// Strong-Wolfe line search (bracket and zoom with bisection). `phi`
/// evaluates the one-dimensional function and its derivative at `alpha`,
/// returning the payload to hand back to the caller; non-finite values
/// reject the trial.
pub fn wolfe_line_search<T>(
    mut phi: impl FnMut(f64) -> (f64, f64, T),
    phi0: f64,
    dphi0: f64,
    c1: f64,
    c2: f64,
    max_trials: usize,
) -> LineSearchOutcome<T> {
    let mut n_evals = 0;
    let mut best: Option<(f64, f64, T)> = None; // (phi, alpha, data)
    let consider = |f: f64, alpha: f64, data: T, best: &mut Option<(f64, f64, T)>| {
        if f.is_finite() && best.as_ref().map_or(f < phi0, |b| f < b.0) {
            *best = Some((f, alpha, data));
        }
    };

    // Safeguarded quadratic interpolation from (lo, phi_lo, dphi_lo) and
    // (hi, phi_hi); falls back to bisection. Exact for quadratic objectives,
    // which gives the quasi-Newton method finite termination there.
    let interp = |lo: f64, phi_lo: f64, dlo: f64, hi: f64, phi_hi: f64| -> f64 {
        let h = hi - lo;
        let c = (phi_hi - phi_lo - dlo * h) / (h * h);
        let cand = if c.is_finite() && c > 0.0 {
            lo - dlo / (2.0 * c)
        } else {
            lo + 0.5 * h
        };
        let (a, b) = if lo < hi { (lo, hi) } else { (hi, lo) };
        let margin = 0.05 * (b - a);
        if !cand.is_finite() || cand < a + margin || cand > b - margin {
            lo + 0.5 * h
        } else {
            cand
        }
    };

    // Noise allowance for the sufficient-decrease test near machine
    // precision (approximate Wolfe conditions).
    let eps_a = 1e-14 * (1.0 + phi0.abs());
    let mut alpha_prev = 0.0;
    let mut phi_prev = phi0;
    let mut dphi_prev = dphi0;
    let mut alpha = 1.0;
    // Bracket state: (lo, phi_lo, dphi_lo, hi, phi_hi).
    let mut bracket: Option<(f64, f64, f64, f64, f64)> = None;
    while n_evals < max_trials {
        let (f, d, data) = phi(alpha);
        n_evals += 1;
        let f_eff = if f.is_finite() { f } else { f64::INFINITY };
        if f_eff > phi0 + c1 * alpha * dphi0 + eps_a || (f_eff >= phi_prev && alpha_prev > 0.0) {
            consider(f, alpha, data, &mut best);
            bracket = Some((alpha_prev, phi_prev, dphi_prev, alpha, f_eff));
            break;
        }
        if d.abs() <= -c2 * dphi0 {
            return LineSearchOutcome::Success {
                alpha,
                data,
                n_evals,
            };
        }
        consider(f, alpha, data, &mut best);
        if d >= 0.0 {
            bracket = Some((alpha, f_eff, d, alpha_prev, phi_prev));
            break;
        }
        alpha_prev = alpha;
        phi_prev = f_eff;
        dphi_prev = d;
        alpha *= 2.0;
    }

    if let Some((mut lo, mut phi_lo, mut dlo, mut hi, mut phi_hi)) = bracket {
        while n_evals < max_trials {
            let mid = interp(lo, phi_lo, dlo, hi, phi_hi);
            let (f, d, data) = phi(mid);
            n_evals += 1;
            let f_eff = if f.is_finite() { f } else { f64::INFINITY };
            if f_eff > phi0 + c1 * mid * dphi0 + eps_a || f_eff >= phi_lo {
                consider(f, mid, data, &mut best);
                hi = mid;
                phi_hi = f_eff;
            } else {
                if d.abs() <= -c2 * dphi0 {
                    return LineSearchOutcome::Success {
                        alpha: mid,
                        data,
                        n_evals,
                    };
                }
                consider(f, mid, data, &mut best);
                if d * (hi - lo) >= 0.0 {
                    hi = lo;
                    phi_hi = phi_lo;
                }
                lo = mid;
                phi_lo = f_eff;
                dlo = d;
            }
            if (hi - lo).abs() <= 1e-14 * (1.0 + lo.abs()) {
                break;
            }
        }
    }
    LineSearchOutcome::Failure {
        best: best.map(|(_, a, d)| (a, d)),
        n_evals,
    }
}

/// Maximize `Σ_i f_i(global, private_i)` from `x0 = [global | privates]`.
pub fn maximize<E: ElementFunction>(
    elements: &[E],
    x0: &DVector<f64>,
    opts: &PsqnOptions,
) -> Result<PsqnResult> {
    if elements.is_empty() {
        return Err(Error::InvalidInput("no element functions".into()));
    }
    let v1 = elements[0].global_dim();
    let v2: Vec<usize> = elements.iter().map(|e| e.private_dim()).collect();
    if elements.iter().any(|e| e.global_dim() != v1) {
        return Err(Error::InvalidInput("inconsistent global dimensions".into()));
    }
    let partition = Partition::new(v1, v2.clone());
    if x0.len() != partition.total {
        return Err(Error::InvalidInput(format!(
            "x0 has length {}, expected {}",
            x0.len(),
            partition.total
        )));
    }
    if opts.check_gradients {
        check_element_gradients(elements, &partition, x0)?;
    }
    let max_v2 = v2.iter().copied().max().unwrap_or(0);
    let max_cg = opts.max_cg.unwrap_or(10 * (v1 + max_v2));

    // Work on the negated objective so the approximations stay SPD.
    let neg = |ev: Evaluation| Evaluation {
        f: -ev.f,
        grad: -ev.grad,
        elem_grads: ev.elem_grads.into_iter().map(|g| -g).collect(),
    };

    let mut x = x0.clone();
    let mut cur = neg(evaluate(elements, &partition, &x));
    let mut n_evals = 1;
    if !cur.f.is_finite() {
        return Err(Error::Numerical(format!(
            "objective is not finite at the starting point ({})",
            -cur.f
        )));
    }
    let mut approx = ArrowheadApprox::identity(partition.clone());
    let mut trajectory = vec![-cur.f];
    let mut status = PsqnStatus::MaxIter;
    let mut n_iter = 0;

    for iter in 0..opts.max_iter {
        n_iter = iter + 1;
        let g_norm = cur.grad.amax();
        if g_norm <= opts.grad_tol {
            status = PsqnStatus::Converged;
            n_iter = iter;
            break;
        }
        let cg_tol = opts
            .cg_tol
            .unwrap_or_else(|| cur.grad.norm().sqrt().min(0.5));
        let precond = approx.block_preconditioner();
        let (mut p, _) = preconditioned_cg(&approx, &precond, &(-&cur.grad), cg_tol, max_cg)?;
        let mut dphi0 = cur.grad.dot(&p);
        if !(dphi0 < 0.0) {
            p = -&cur.grad;
            dphi0 = cur.grad.dot(&p);
        }

        let phi = |alpha: f64| {
            let xt = &x + alpha * &p;
            let ev = neg(evaluate(elements, &partition, &xt));
            let d = ev.grad.dot(&p);
            (ev.f, d, (xt, ev))
        };
        let outcome = wolfe_line_search(phi, cur.f, dphi0, opts.c1, opts.c2, opts.max_line_search);
        let (x_new, ev_new) = match outcome {
            LineSearchOutcome::Success {
                data, n_evals: ne, ..
            } => {
                n_evals += ne;
                data
            }
            LineSearchOutcome::Failure { best, n_evals: ne } => {
                n_evals += ne;
                match best {
                    Some((_, data)) => {
                        // Accept the best improving point but stop after the
                        // update: the search direction is no longer trusted.
                        let (xb, evb) = data;
                        update_elements(&mut approx, &x, &xb, &cur, &evb, opts.damping);
                        x = xb;
                        cur = evb;
                        trajectory.push(-cur.f);
                        status = if cur.grad.amax() <= opts.grad_tol {
                            PsqnStatus::Converged
                        } else {
                            PsqnStatus::LineSearchFailed
                        };
                        break;
                    }
                    None => {
                        status = if cur.grad.amax() <= opts.grad_tol {
                            PsqnStatus::Converged
                        } else {
                            PsqnStatus::LineSearchFailed
                        };
                        break;
                    }
                }
            }
        };

        update_elements(&mut approx, &x, &x_new, &cur, &ev_new, opts.damping);
        let delta_f = cur.f - ev_new.f;
        x = x_new;
        cur = ev_new;
        trajectory.push(-cur.f);
        if delta_f.abs() <= opts.rel_tol * (cur.f.abs() + 1e-8) && cur.grad.amax() <= opts.grad_tol
        {
            status = PsqnStatus::Converged;
            break;
        }
    }

    Ok(PsqnResult {
        grad_norm: cur.grad.amax(),
        x,
        value: -cur.f,
        n_iter,
        status,
        n_evals,
        trajectory,
    })
}

fn update_elements(
    approx: &mut ArrowheadApprox,
    x_old: &DVector<f64>,
    x_new: &DVector<f64>,
    ev_old: &Evaluation,
    ev_new: &Evaluation,
    damping: f64,
) {
    let p = approx.partition.clone();
    for i in 0..approx.mats.len() {
        let d = p.v2[i];
        let mut s = DVector::zeros(p.v1 + d);
        let mut xa = DVector::zeros(p.v1 + d);
        let mut xb = DVector::zeros(p.v1 + d);
        p.gather(i, x_old, &mut xa);
        p.gather(i, x_new, &mut xb);
        s.copy_from(&(&xb - &xa));
        let y = &ev_new.elem_grads[i] - &ev_old.elem_grads[i];
        approx.update(i, &s, &y, damping);
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    /// Quadratic element `-(x - center)ᵀ A (x - center)/2` over the
    /// concatenated (global, private) coordinates.
    pub(super) struct QuadElem {
        pub(super) v1: usize,
        pub(super) v2: usize,
        pub(super) a: DMatrix<f64>,
        pub(super) center: DVector<f64>,
    }

    impl ElementFunction for QuadElem {
        fn global_dim(&self) -> usize {
            self.v1
        }
        fn private_dim(&self) -> usize {
            self.v2
        }
        fn value(&self, global: &[f64], private: &[f64]) -> f64 {
            let x = DVector::from_iterator(
                self.v1 + self.v2,
                global.iter().chain(private.iter()).copied(),
            );
            let d = &x - &self.center;
            -0.5 * (&self.a * &d).dot(&d)
        }
        fn value_grad(&self, global: &[f64], private: &[f64], grad: &mut [f64]) -> f64 {
            let x = DVector::from_iterator(
                self.v1 + self.v2,
                global.iter().chain(private.iter()).copied(),
            );
            let d = &x - &self.center;
            let ad = &self.a * &d;
            for (g, v) in grad.iter_mut().zip((-&ad).iter()) {
                *g = *v;
            }
            -0.5 * ad.dot(&d)
        }
    }

    fn random_spd(dim: usize, rng: &mut ChaCha12Rng) -> DMatrix<f64> {
        let m = DMatrix::from_fn(dim, dim, |_, _| rng.random::<f64>() - 0.5);
        &m * m.transpose() + DMatrix::identity(dim, dim) * 0.4
    }

    fn random_arrowhead(
        v1: usize,
        n: usize,
        v2: usize,
        rng: &mut ChaCha12Rng,
    ) -> ArrowheadApprox {
        let partition = Partition::new(v1, vec![v2; n]);
        let mut approx = ArrowheadApprox::identity(partition);
        for m in approx.mats.iter_mut() {
            *m = random_spd(v1 + v2, rng);
        }
        approx
    }

    /// Assemble the implied full matrix of an arrowhead approximation.
    fn dense_from_arrowhead(a: &ArrowheadApprox) -> DMatrix<f64> {
        let p = &a.partition;
        let mut full = DMatrix::zeros(p.total, p.total);
        for (i, m) in a.mats.iter().enumerate() {
            let d = p.v2[i];
            let mut idx = Vec::with_capacity(p.v1 + d);
            idx.extend(0..p.v1);
            idx.extend(p.offsets[i]..p.offsets[i] + d);
            for (r, &ir) in idx.iter().enumerate() {
                for (c, &ic) in idx.iter().enumerate() {
                    full[(ir, ic)] += m[(r, c)];
                }
            }
        }
        full
    }

    #[test]
    fn hessian_vector_product_identity_elements() {
        let partition = Partition::new(2, vec![1, 1, 1]);
        let approx = ArrowheadApprox::identity(partition);
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let out = approx.hessian_vector_product(&v).unwrap();
        // Globals overlap all three elements; privates hit once.
        assert_eq!(out.as_slice(), &[3.0, 6.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn hessian_vector_product_single_element_is_dense() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let partition = Partition::new(3, vec![2]);
        let mut approx = ArrowheadApprox::identity(partition);
        approx.mats[0] = random_spd(5, &mut rng);
        let v = DVector::from_fn(5, |_, _| rng.random::<f64>());
        let got = approx.hessian_vector_product(&v).unwrap();
        let exact = &approx.mats[0] * &v;
        assert_abs_diff_eq!((got - exact).amax(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn hessian_vector_product_matches_assembled_matrix() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let approx = random_arrowhead(2, 3, 2, &mut rng);
        let dense = dense_from_arrowhead(&approx);
        let v = DVector::from_fn(approx.partition.total, |_, _| rng.random::<f64>() - 0.5);
        let got = approx.hessian_vector_product(&v).unwrap();
        assert_abs_diff_eq!((got - dense * v).amax(), 0.0, epsilon = 1e-14);

        let bad = DVector::zeros(3);
        assert!(approx.hessian_vector_product(&bad).is_err());
    }

    #[test]
    fn preconditioner_exact_for_uncoupled_blocks() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut approx = random_arrowhead(2, 4, 3, &mut rng);
        // Zero the global-private coupling.
        for m in approx.mats.iter_mut() {
            for r in 0..2 {
                for c in 2..5 {
                    m[(r, c)] = 0.0;
                    m[(c, r)] = 0.0;
                }
            }
        }
        let precond = approx.block_preconditioner();
        let rhs = DVector::from_fn(approx.partition.total, |_, _| rng.random::<f64>());
        let (x, iters) = preconditioned_cg(&approx, &precond, &rhs, 1e-12, 100).unwrap();
        assert_eq!(iters, 1);
        let dense = dense_from_arrowhead(&approx);
        assert_abs_diff_eq!((dense * x - rhs).amax(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn preconditioning_reduces_cg_iterations() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let approx = random_arrowhead(4, 50, 5, &mut rng);
        let rhs = DVector::from_fn(approx.partition.total, |_, _| rng.random::<f64>() - 0.5);
        let precond = approx.block_preconditioner();
        let identity = BlockPreconditioner {
            partition: approx.partition.clone(),
            global: None,
            privates: None,
        };
        let (_, it_pre) = preconditioned_cg(&approx, &precond, &rhs, 1e-10, 100_000).unwrap();
        let (_, it_plain) = preconditioned_cg(&approx, &identity, &rhs, 1e-10, 100_000).unwrap();
        assert!(
            it_pre < it_plain,
            "preconditioned {it_pre} vs unpreconditioned {it_plain}"
        );
    }

    #[test]
    fn preconditioner_solve_matches_dense_block_inverse() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let approx = random_arrowhead(3, 4, 2, &mut rng);
        let p = &approx.partition;
        // Dense block-diagonal approximation.
        let mut block = DMatrix::zeros(p.total, p.total);
        let mut global = DMatrix::zeros(p.v1, p.v1);
        for m in &approx.mats {
            global += m.view((0, 0), (p.v1, p.v1));
        }
        block.view_mut((0, 0), (p.v1, p.v1)).copy_from(&global);
        for (i, m) in approx.mats.iter().enumerate() {
            let d = p.v2[i];
            block
                .view_mut((p.offsets[i], p.offsets[i]), (d, d))
                .copy_from(&m.view((p.v1, p.v1), (d, d)).into_owned());
        }
        let precond = approx.block_preconditioner();
        let r = DVector::from_fn(p.total, |_, _| rng.random::<f64>() - 0.5);
        let z = precond.apply(&r);
        let exact = block.lu().solve(&r).unwrap();
        assert_abs_diff_eq!((z - exact).amax(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn quadratic_converges_fast_to_known_maximizer() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let (v1, v2, n) = (3usize, 2usize, 8usize);
        // Separable concave quadratic: isotropic element matrices with a
        // shared global center, so the maximizer is known exactly and the
        // maximum value is zero.
        let g_star = DVector::from_fn(v1, |_, _| 2.0 * rng.random::<f64>() - 1.0);
        let elements: Vec<QuadElem> = (0..n)
            .map(|_| {
                let c = 0.5 + 1.5 * rng.random::<f64>();
                let a = DMatrix::identity(v1 + v2, v1 + v2) * c;
                let mut center =
                    DVector::from_fn(v1 + v2, |_, _| 2.0 * rng.random::<f64>() - 1.0);
                center.rows_mut(0, v1).copy_from(&g_star);
                QuadElem { v1, v2, a, center }
            })
            .collect();

        let partition = Partition::new(v1, vec![v2; n]);
        let x0 = DVector::from_fn(partition.total, |_, _| rng.random::<f64>() - 0.5);
        let opts = PsqnOptions {
            grad_tol: 1e-10,
            rel_tol: 1e-15,
            cg_tol: Some(1e-13),
            // Near-exact line searches give finite termination on quadratics.
            c2: 1e-3,
            check_gradients: true,
            // The maximizer must be reached within v1 + max(v2) + 2 steps.
            max_iter: v1 + v2 + 2,
            ..Default::default()
        };
        let res = maximize(&elements, &x0, &opts).unwrap();
        for j in 0..v1 {
            assert_abs_diff_eq!(res.x[j], g_star[j], epsilon = 1e-8);
        }
        for (i, e) in elements.iter().enumerate() {
            for j in 0..v2 {
                assert_abs_diff_eq!(
                    res.x[partition.offsets[i] + j],
                    e.center[v1 + j],
                    epsilon = 1e-8
                );
            }
        }
        // Unrestricted run converges formally and ascends monotonically.
        let res_full = maximize(
            &elements,
            &x0,
            &PsqnOptions {
                max_iter: 1000,
                ..opts.clone()
            },
        )
        .unwrap();
        assert_eq!(res_full.status, PsqnStatus::Converged);
        for w in res_full.trajectory.windows(2) {
            assert!(w[1] >= w[0] - 1e-12);
        }
    }

    /// Textbook dense BFGS (minimization of -f) with the same damped update
    /// and line search, as a reference optimizer.
    pub fn dense_bfgs_reference(
        f: &dyn Fn(&DVector<f64>) -> (f64, DVector<f64>),
        x0: &DVector<f64>,
        grad_tol: f64,
        max_iter: usize,
    ) -> (DVector<f64>, f64, Vec<DVector<f64>>, usize) {
        let n = x0.len();
        let neg = |x: &DVector<f64>| {
            let (v, g) = f(x);
            (-v, -g)
        };
        let mut x = x0.clone();
        let (mut fv, mut g) = neg(&x);
        let mut n_evals = 1;
        let mut b = DMatrix::<f64>::identity(n, n);
        let mut scaled = false;
        let mut path = vec![x.clone()];
        for _ in 0..max_iter {
            if g.amax() <= grad_tol {
                break;
            }
            let p = nalgebra::Cholesky::new(b.clone())
                .map(|c| c.solve(&(-&g)))
                .unwrap_or_else(|| -&g);
            let dphi0 = g.dot(&p);
            let phi = |alpha: f64| {
                let xt = &x + alpha * &p;
                let (v, gt) = neg(&xt);
                let d = gt.dot(&p);
                (v, d, (xt, v, gt))
            };
            match wolfe_line_search(phi, fv, dphi0, 1e-4, 0.9, 30) {
                LineSearchOutcome::Success {
                    data: (xt, ft, gt),
                    n_evals: ne,
                    ..
                } => {
                    n_evals += ne;
                    let s = &xt - &x;
                    let y = &gt - &g;
                    if !scaled {
                        let sy = s.dot(&y);
                        if sy > 0.0 {
                            b *= (y.norm_squared() / sy).max(1e-8);
                        }
                        scaled = true;
                    }
                    let bs = &b * &s;
                    let sbs = s.dot(&bs);
                    if sbs > 0.0 {
                        let sy = s.dot(&y);
                        let y_t = if sy < 0.2 * sbs {
                            let theta = 0.8 * sbs / (sbs - sy);
                            theta * &y + (1.0 - theta) * &bs
                        } else {
                            y.clone()
                        };
                        let syt = s.dot(&y_t);
                        if syt > 0.0 {
                            b.ger(-1.0 / sbs, &bs, &bs, 1.0);
                            b.ger(1.0 / syt, &y_t, &y_t, 1.0);
                            let sym = (b.clone() + b.transpose()) * 0.5;
                            b.copy_from(&sym);
                        }
                    }
                    x = xt;
                    fv = ft;
                    g = gt;
                    path.push(x.clone());
                }
                LineSearchOutcome::Failure { n_evals: ne, .. } => {
                    n_evals += ne;
                    break;
                }
            }
        }
        (x, -fv, path, n_evals)
    }

    #[test]
    fn coupled_elements_match_dense_bfgs_reference() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let (v1, v2, n) = (3usize, 2usize, 20usize);
        let elements: Vec<QuadElem> = (0..n)
            .map(|_| QuadElem {
                v1,
                v2,
                a: random_spd(v1 + v2, &mut rng),
                center: DVector::from_fn(v1 + v2, |_, _| 2.0 * rng.random::<f64>() - 1.0),
            })
            .collect();
        let partition = Partition::new(v1, vec![v2; n]);
        let x0 = DVector::zeros(partition.total);
        let opts = PsqnOptions {
            grad_tol: 1e-9,
            rel_tol: 1e-13,
            ..Default::default()
        };
        let res = maximize(&elements, &x0, &opts).unwrap();

        let fref = |x: &DVector<f64>| {
            let mut f = 0.0;
            let mut g = DVector::zeros(partition.total);
            for (i, e) in elements.iter().enumerate() {
                let mut xe = DVector::zeros(v1 + v2);
                partition.gather(i, x, &mut xe);
                let d = &xe - &e.center;
                let ad = &e.a * &d;
                f += -0.5 * ad.dot(&d);
                for j in 0..v1 {
                    g[j] -= ad[j];
                }
                for j in 0..v2 {
                    g[partition.offsets[i] + j] -= ad[v1 + j];
                }
            }
            (f, g)
        };
        let (x_ref, f_ref, _, _) = dense_bfgs_reference(&fref, &x0, 1e-10, 2000);
        assert!((res.value - f_ref).abs() < 1e-6, "{} vs {f_ref}", res.value);
        assert!((&res.x - &x_ref).amax() < 1e-4);
        for w in res.trajectory.windows(2) {
            assert!(w[1] >= w[0] - 1e-12);
        }
    }

    #[test]
    fn damped_updates_keep_matrices_spd() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let partition = Partition::new(2, vec![3]);
        let mut approx = ArrowheadApprox::identity(partition);
        let a_true = random_spd(5, &mut rng);
        for _ in 0..200 {
            let s = DVector::from_fn(5, |_, _| 2.0 * rng.random::<f64>() - 1.0);
            // Curvature mostly consistent with a concave model, plus noise
            // strong enough to trigger the Powell damping regularly.
            let noise = DVector::from_fn(5, |_, _| rng.random::<f64>() - 0.5);
            let y = &a_true * &s + noise;
            approx.update(0, &s, &y, 0.2);
            let eig = nalgebra::SymmetricEigen::new(approx.mats[0].clone());
            assert!(
                eig.eigenvalues.min() > 0.0,
                "min eigenvalue {}",
                eig.eigenvalues.min()
            );
        }
    }

    #[test]
    fn element_matrices_stay_spd() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let (v1, v2, n) = (2usize, 2usize, 6usize);
        // Non-quadratic concave elements: -log cosh parts plus quadratic.
        struct Soft {
            v1: usize,
            v2: usize,
            w: DVector<f64>,
        }
        impl ElementFunction for Soft {
            fn global_dim(&self) -> usize {
                self.v1
            }
            fn private_dim(&self) -> usize {
                self.v2
            }
            fn value(&self, global: &[f64], private: &[f64]) -> f64 {
                let x = DVector::from_iterator(
                    self.v1 + self.v2,
                    global.iter().chain(private.iter()).copied(),
                );
                let d = &x - &self.w;
                -d.iter().map(|v| v.cosh().ln()).sum::<f64>() - 0.05 * d.norm_squared()
            }
            fn value_grad(&self, global: &[f64], private: &[f64], grad: &mut [f64]) -> f64 {
                let x = DVector::from_iterator(
                    self.v1 + self.v2,
                    global.iter().chain(private.iter()).copied(),
                );
                let d = &x - &self.w;
                for (j, g) in grad.iter_mut().enumerate() {
                    *g = -d[j].tanh() - 0.1 * d[j];
                }
                -d.iter().map(|v| v.cosh().ln()).sum::<f64>() - 0.05 * d.norm_squared()
            }
        }
        let elements: Vec<Soft> = (0..n)
            .map(|_| Soft {
                v1,
                v2,
                w: DVector::from_fn(v1 + v2, |_, _| 3.0 * (rng.random::<f64>() - 0.5)),
            })
            .collect();
        let partition = Partition::new(v1, vec![v2; n]);
        let x0 = DVector::from_fn(partition.total, |_, _| 2.0 * rng.random::<f64>() - 1.0);
        let opts = PsqnOptions {
            grad_tol: 1e-8,
            check_gradients: true,
            ..Default::default()
        };
        let res = maximize(&elements, &x0, &opts).unwrap();
        assert_eq!(res.status, PsqnStatus::Converged);
        for w in res.trajectory.windows(2) {
            assert!(w[1] >= w[0] - 1e-12);
        }
    }

    #[test]
    fn single_element_trajectory_coincides_with_dense_bfgs() {
        // One element with no private block: the method must reduce to
        // textbook dense BFGS under the identical line search.
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let dim = 4;
        let center = DVector::from_fn(dim, |_, _| rng.random::<f64>() - 0.5);
        struct Rosenish {
            center: DVector<f64>,
        }
        impl ElementFunction for Rosenish {
            fn global_dim(&self) -> usize {
                4
            }
            fn private_dim(&self) -> usize {
                0
            }
            fn value(&self, global: &[f64], _private: &[f64]) -> f64 {
                let d = DVector::from_column_slice(global) - &self.center;
                -d.iter().map(|v| v.cosh().ln()).sum::<f64>() - 0.25 * d.norm_squared()
            }
            fn value_grad(&self, global: &[f64], _private: &[f64], grad: &mut [f64]) -> f64 {
                let d = DVector::from_column_slice(global) - &self.center;
                for j in 0..4 {
                    grad[j] = -d[j].tanh() - 0.5 * d[j];
                }
                -d.iter().map(|v| v.cosh().ln()).sum::<f64>() - 0.25 * d.norm_squared()
            }
        }
        let elem = Rosenish {
            center: center.clone(),
        };
        let x0 = DVector::from_fn(dim, |_, _| 1.5 * (rng.random::<f64>() - 0.5));
        let opts = PsqnOptions {
            grad_tol: 1e-9,
            rel_tol: 0.0,
            cg_tol: Some(1e-15),
            max_cg: Some(400),
            ..Default::default()
        };
        // Track the iterate path via the trajectory of values and compare
        // point by point against the dense reference.
        let elems = vec![elem];
        let res = maximize(&elems, &x0, &opts).unwrap();
        let fref = |x: &DVector<f64>| {
            let d = x - &center;
            let f = -d.iter().map(|v| v.cosh().ln()).sum::<f64>() - 0.25 * d.norm_squared();
            let g = DVector::from_fn(4, |j, _| -d[j].tanh() - 0.5 * d[j]);
            (f, g)
        };
        let (_, f_ref, path, _) = dense_bfgs_reference(&fref, &x0, 1e-9, 200);
        // Per-step objective values coincide.
        let ref_vals: Vec<f64> = path
            .iter()
            .map(|x| fref(x).0)
            .collect();
        for (a, b) in res.trajectory.iter().zip(&ref_vals) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
        assert_abs_diff_eq!(res.value, f_ref, epsilon = 1e-10);
    }

    #[test]
    fn rejects_non_finite_start_and_bad_dims() {
        let elem = QuadElem {
            v1: 1,
            v2: 0,
            a: DMatrix::identity(1, 1),
            center: DVector::zeros(1),
        };
        let x0 = DVector::from_vec(vec![f64::NAN]);
        assert!(maximize(&[elem], &x0, &PsqnOptions::default()).is_err());
    }
}
