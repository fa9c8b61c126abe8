//! Time bases: B-splines, natural cubic splines, polynomials and
//! log-time polynomials, with derivatives and running integrals from zero.
//!
//! These back the time-varying fixed effects, the random-effect designs and
//! the log baseline hazards. Evaluation is pure and deterministic.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{quad, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    #[serde(rename = "bspline")]
    BSpline,
    NaturalCubicSpline,
    Poly,
    LogPoly,
}

/// A one-dimensional expansion of time.
///
/// B-splines clamp to the boundary knots outside their range (constant
/// extrapolation keeps hazards finite beyond the last knot); natural cubic
/// splines extrapolate linearly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeBasis {
    pub kind: BasisKind,
    pub degree: usize,
    #[serde(default)]
    pub interior_knots: Vec<f64>,
    #[serde(default)]
    pub boundary_knots: Option<(f64, f64)>,
    pub with_intercept: bool,
}

impl TimeBasis {
    pub fn poly(degree: usize, with_intercept: bool) -> Self {
        TimeBasis {
            kind: BasisKind::Poly,
            degree,
            interior_knots: Vec::new(),
            boundary_knots: None,
            with_intercept,
        }
    }

    pub fn log_poly(degree: usize, with_intercept: bool) -> Self {
        TimeBasis {
            kind: BasisKind::LogPoly,
            degree,
            interior_knots: Vec::new(),
            boundary_knots: None,
            with_intercept,
        }
    }

    pub fn bspline(
        degree: usize,
        interior_knots: Vec<f64>,
        boundary_knots: (f64, f64),
        with_intercept: bool,
    ) -> Result<Self> {
        let b = TimeBasis {
            kind: BasisKind::BSpline,
            degree,
            interior_knots,
            boundary_knots: Some(boundary_knots),
            with_intercept,
        };
        b.check()?;
        Ok(b)
    }

    /// Natural cubic spline on the given knot sequence (boundary knots are
    /// the first and last entries).
    pub fn natural_cubic(knots: &[f64], with_intercept: bool) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::InvalidInput(
                "natural cubic spline needs at least two knots".into(),
            ));
        }
        let b = TimeBasis {
            kind: BasisKind::NaturalCubicSpline,
            degree: 3,
            interior_knots: knots[1..knots.len() - 1].to_vec(),
            boundary_knots: Some((knots[0], knots[knots.len() - 1])),
            with_intercept,
        };
        b.check()?;
        Ok(b)
    }

    pub fn check(&self) -> Result<()> {
        match self.kind {
            BasisKind::Poly | BasisKind::LogPoly => {
                if self.dimension() == 0 {
                    return Err(Error::InvalidInput(
                        "polynomial basis of degree 0 without intercept is empty".into(),
                    ));
                }
                Ok(())
            }
            BasisKind::BSpline | BasisKind::NaturalCubicSpline => {
                let (lo, hi) = self.boundary()?;
                if !(lo < hi) {
                    return Err(Error::InvalidInput(format!(
                        "boundary knots must be increasing, got ({lo}, {hi})"
                    )));
                }
                let mut prev = lo;
                for &k in &self.interior_knots {
                    if !(k > prev) || !(k < hi) {
                        return Err(Error::InvalidInput(format!(
                            "interior knots must be strictly increasing and strictly inside \
                             the boundary knots ({lo}, {hi})"
                        )));
                    }
                    prev = k;
                }
                if self.kind == BasisKind::BSpline && self.degree == 0 {
                    return Err(Error::InvalidInput("B-spline degree must be >= 1".into()));
                }
                Ok(())
            }
        }
    }

    fn boundary(&self) -> Result<(f64, f64)> {
        self.boundary_knots
            .ok_or_else(|| Error::InvalidInput("spline basis is missing boundary knots".into()))
    }

    /// All knots including boundary, sorted.
    fn all_knots(&self) -> Result<Vec<f64>> {
        let (lo, hi) = self.boundary()?;
        let mut ks = Vec::with_capacity(self.interior_knots.len() + 2);
        ks.push(lo);
        ks.extend_from_slice(&self.interior_knots);
        ks.push(hi);
        Ok(ks)
    }

    pub fn dimension(&self) -> usize {
        let full = match self.kind {
            BasisKind::Poly | BasisKind::LogPoly => self.degree + 1,
            BasisKind::BSpline => self.interior_knots.len() + self.degree + 1,
            BasisKind::NaturalCubicSpline => self.interior_knots.len() + 2,
        };
        if self.with_intercept {
            full
        } else {
            full - 1
        }
    }

    fn check_t(&self, t: f64) -> Result<()> {
        if !t.is_finite() {
            return Err(Error::InvalidInput(format!("basis evaluated at non-finite t={t}")));
        }
        if self.kind == BasisKind::LogPoly && t <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "log-time basis requires t > 0, got t={t}"
            )));
        }
        Ok(())
    }

    pub fn eval(&self, t: f64) -> Result<DVector<f64>> {
        self.check_t(t)?;
        let full = match self.kind {
            BasisKind::Poly => poly_eval(self.degree, t),
            BasisKind::LogPoly => poly_eval(self.degree, t.ln()),
            BasisKind::BSpline => self.bspline_eval(t, 0)?,
            BasisKind::NaturalCubicSpline => self.ncs_eval(t, NcsMode::Value)?,
        };
        Ok(self.strip_intercept(full))
    }

    pub fn eval_deriv(&self, t: f64) -> Result<DVector<f64>> {
        self.check_t(t)?;
        let full = match self.kind {
            BasisKind::Poly => poly_deriv(self.degree, t),
            BasisKind::LogPoly => {
                // d/dt p(log t) = p'(log t) / t
                let mut d = poly_deriv(self.degree, t.ln());
                d /= t;
                d
            }
            BasisKind::BSpline => self.bspline_eval(t, 1)?,
            BasisKind::NaturalCubicSpline => self.ncs_eval(t, NcsMode::Deriv)?,
        };
        Ok(self.strip_intercept(full))
    }

    /// Component-wise `∫_0^t eval(s) ds`. Piecewise-polynomial kinds use
    /// per-interval Gauss–Legendre with enough nodes for exactness; the
    /// log-time kind uses composite Gauss–Legendre refined toward zero.
    pub fn eval_integral(&self, t: f64) -> Result<DVector<f64>> {
        if !t.is_finite() {
            return Err(Error::InvalidInput(format!("basis integrated to non-finite t={t}")));
        }
        if t == 0.0 {
            return Ok(DVector::zeros(self.dimension()));
        }
        match self.kind {
            BasisKind::LogPoly => {
                if t < 0.0 {
                    return Err(Error::InvalidInput(
                        "log-time basis integral requires t >= 0".into(),
                    ));
                }
                self.log_poly_integral(t)
            }
            _ => self.piecewise_integral(t),
        }
    }

    fn strip_intercept(&self, full: DVector<f64>) -> DVector<f64> {
        if self.with_intercept {
            full
        } else {
            full.rows(1, full.len() - 1).into_owned()
        }
    }

    /// Full (intercept-including) values or first derivatives of the
    /// B-spline basis; t is clamped to the boundary knots.
    fn bspline_eval(&self, t: f64, order: usize) -> Result<DVector<f64>> {
        let (lo, hi) = self.boundary()?;
        let outside = t < lo || t > hi;
        let tc = t.clamp(lo, hi);
        let p = self.degree;
        let n_basis = self.interior_knots.len() + p + 1;
        // Open knot vector with (p+1)-fold boundary knots.
        let mut tau = Vec::with_capacity(n_basis + p + 1);
        tau.extend(std::iter::repeat(lo).take(p + 1));
        tau.extend_from_slice(&self.interior_knots);
        tau.extend(std::iter::repeat(hi).take(p + 1));

        // Knot span such that tau[span] <= tc < tau[span+1], with the right
        // boundary folded into the last non-empty span.
        let last = n_basis - 1;
        let span = if tc >= hi {
            last
        } else {
            let mut s = p;
            while s < last && tc >= tau[s + 1] {
                s += 1;
            }
            s
        };

        // Triangular Cox–de Boor table of the non-vanishing values per degree.
        let mut tri: Vec<Vec<f64>> = Vec::with_capacity(p + 1);
        tri.push(vec![1.0]);
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        for j in 1..=p {
            left[j] = tc - tau[span + 1 - j];
            right[j] = tau[span + j] - tc;
            let prev = &tri[j - 1];
            let mut cur = vec![0.0; j + 1];
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom != 0.0 { prev[r] / denom } else { 0.0 };
                cur[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            cur[j] = saved;
            tri.push(cur);
        }

        let mut out = DVector::zeros(n_basis);
        match order {
            0 => {
                for (r, &v) in tri[p].iter().enumerate() {
                    out[span - p + r] = v;
                }
            }
            1 => {
                if outside {
                    // Constant extrapolation beyond the boundary.
                    return Ok(out);
                }
                // Derivative from degree p-1 values:
                // B'_{i,p} = p * (B_{i,p-1}/(tau_{i+p}-tau_i)
                //               - B_{i+1,p-1}/(tau_{i+p+1}-tau_{i+1})).
                let lower = &tri[p - 1];
                for r in 0..=p {
                    let i = span - p + r;
                    let mut d = 0.0;
                    if r > 0 {
                        let den = tau[i + p] - tau[i];
                        if den != 0.0 {
                            d += lower[r - 1] / den;
                        }
                    }
                    if r < p {
                        let den = tau[i + p + 1] - tau[i + 1];
                        if den != 0.0 {
                            d -= lower[r] / den;
                        }
                    }
                    out[i] = p as f64 * d;
                }
            }
            _ => unreachable!("only value and first derivative are supported"),
        }
        Ok(out)
    }

    /// The underlying cubic B-spline whose constrained combinations form
    /// the natural spline basis.
    fn ncs_parent(&self) -> TimeBasis {
        TimeBasis {
            kind: BasisKind::BSpline,
            degree: 3,
            interior_knots: self.interior_knots.clone(),
            boundary_knots: self.boundary_knots,
            with_intercept: true,
        }
    }

    /// Cached linear map from the cubic B-spline basis onto the subspace
    /// with zero second derivative at both boundary knots.
    fn ncs_transform(&self) -> Result<Arc<DMatrix<f64>>> {
        static CACHE: OnceLock<Mutex<HashMap<Vec<u64>, Arc<DMatrix<f64>>>>> = OnceLock::new();
        let (lo, hi) = self.boundary()?;
        let mut key: Vec<u64> = vec![lo.to_bits(), hi.to_bits()];
        key.extend(self.interior_knots.iter().map(|k| k.to_bits()));
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        if let Some(h) = cache.lock().expect("ncs cache poisoned").get(&key) {
            return Ok(h.clone());
        }

        let parent = self.ncs_parent();
        let m = parent.dimension();
        // Second derivative of the cubic B-spline basis at a boundary knot:
        // S'' is linear on the end interval, so extrapolate central finite
        // differences of the first derivative back to the knot.
        let second_row = |b: f64, inward: f64| -> Result<DVector<f64>> {
            let span = inward.abs().max(1e-3);
            let delta = 0.05 * span * inward.signum();
            let fd = |x: f64| -> Result<DVector<f64>> {
                let h = 1e-6 * (1.0 + x.abs());
                Ok((parent.bspline_eval(x + h, 1)? - parent.bspline_eval(x - h, 1)?) / (2.0 * h))
            };
            let d1 = fd(b + delta)?;
            let d2 = fd(b + 2.0 * delta)?;
            Ok(2.0 * d1 - d2)
        };
        let first_span = self.interior_knots.first().copied().unwrap_or(hi) - lo;
        let last_span = hi - self.interior_knots.last().copied().unwrap_or(lo);
        let c_lo = second_row(lo, first_span)?;
        let c_hi = second_row(hi, -last_span)?;

        // Orthonormal basis of the null space of the two constraint rows by
        // modified Gram-Schmidt against the constraints and earlier columns.
        let mut constraints = vec![c_lo, c_hi];
        for c in constraints.iter_mut() {
            let n = c.norm();
            if n > 0.0 {
                *c /= n;
            }
        }
        if constraints.len() == 2 {
            let proj = constraints[0].dot(&constraints[1]);
            let c1 = &constraints[1] - proj * &constraints[0];
            let n = c1.norm();
            constraints[1] = if n > 1e-12 { c1 / n } else { DVector::zeros(m) };
        }
        let mut columns: Vec<DVector<f64>> = Vec::with_capacity(m - 2);
        for j in 0..m {
            let mut v = DVector::zeros(m);
            v[j] = 1.0;
            for c in &constraints {
                let p = c.dot(&v);
                v -= p * c;
            }
            for col in &columns {
                let p = col.dot(&v);
                v -= p * col;
            }
            let n = v.norm();
            if n > 1e-8 && columns.len() < m - 2 {
                columns.push(v / n);
            }
        }
        let h0 = DMatrix::from_columns(&columns);

        // Rotate onto the cardinal interpolation basis: function j is one at
        // knot j and zero at the other knots, so coefficients are the curve's
        // values at the knots and the leading coordinate acts at the left
        // boundary.
        let knots = self.all_knots()?;
        let kk = knots.len();
        debug_assert_eq!(kk, h0.ncols());
        let mut at_knots = DMatrix::zeros(kk, kk);
        for (i, &kn) in knots.iter().enumerate() {
            let row = parent.bspline_eval(kn, 0)?.transpose() * &h0;
            at_knots.view_mut((i, 0), (1, kk)).copy_from(&row);
        }
        let a = at_knots
            .lu()
            .try_inverse()
            .ok_or_else(|| Error::Numerical("degenerate natural spline knot set".into()))?;
        let h = Arc::new(h0 * a);
        cache
            .lock()
            .expect("ncs cache poisoned")
            .insert(key, h.clone());
        Ok(h)
    }

    /// Natural cubic spline values or derivatives (intercept-including);
    /// linear extrapolation beyond the boundary knots.
    fn ncs_eval(&self, t: f64, mode: NcsMode) -> Result<DVector<f64>> {
        let (lo, hi) = self.boundary()?;
        let parent = self.ncs_parent();
        let h = self.ncs_transform()?;
        let eval_at = |x: f64, order: usize| -> Result<DVector<f64>> {
            Ok((parent.bspline_eval(x, order)?.transpose() * h.as_ref())
                .transpose())
        };
        if t >= lo && t <= hi {
            return match mode {
                NcsMode::Value => eval_at(t, 0),
                NcsMode::Deriv => eval_at(t, 1),
            };
        }
        let b = if t < lo { lo } else { hi };
        let slope = eval_at(b, 1)?;
        match mode {
            NcsMode::Value => Ok(eval_at(b, 0)? + (t - b) * slope),
            NcsMode::Deriv => Ok(slope),
        }
    }

    fn piecewise_integral(&self, t: f64) -> Result<DVector<f64>> {
        // Breakpoints: 0, t, and every knotin between; the integrand is a
        // polynomial on each resulting segment.
        let (a, b) = if t >= 0.0 { (0.0, t) } else { (t, 0.0) };
        let mut brk = vec![a, b];
        if matches!(self.kind, BasisKind::BSpline | BasisKind::NaturalCubicSpline) {
            for &kn in &self.all_knots()? {
                if kn > a && kn < b {
                    brk.push(kn);
                }
            }
        }
        brk.sort_by(f64::total_cmp);
        brk.dedup();
        let n_nodes = ((self.degree + 1) / 2 + 1).max(1);
        let rule = quad::gauss_legendre(n_nodes)?;
        let dim = self.dimension();
        let mut acc = DVector::zeros(dim);
        for w in brk.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            let half = 0.5 * (hi - lo);
            let mid = 0.5 * (lo + hi);
            for (&x, &wq) in rule.nodes.iter().zip(&rule.weights) {
                let v = self.eval(mid + half * x)?;
                acc.axpy(half * wq, &v, 1.0);
            }
        }
        if t < 0.0 {
            acc = -acc;
        }
        Ok(acc)
    }

    /// Composite Gauss–Legendre on dyadic subintervals refining toward the
    /// integrable log singularity at zero.
    fn log_poly_integral(&self, t: f64) -> Result<DVector<f64>> {
        let rule = quad::gauss_legendre(25)?;
        let dim = self.dimension();
        let mut acc = DVector::zeros(dim);
        let mut hi = t;
        for _ in 0..64 {
            let lo = hi / 2.0;
            let half = 0.5 * (hi - lo);
            let mid = 0.5 * (lo + hi);
            let mut seg = DVector::zeros(dim);
            for (&x, &wq) in rule.nodes.iter().zip(&rule.weights) {
                let v = self.eval(mid + half * x)?;
                seg.axpy(half * wq, &v, 1.0);
            }
            let seg_norm = seg.amax();
            acc += seg;
            if seg_norm <= 1e-15 * acc.amax().max(1e-300) {
                break;
            }
            hi = lo;
        }
        Ok(acc)
    }
}

#[derive(Clone, Copy, PartialEq)]
enum NcsMode {
    Value,
    Deriv,
}

fn poly_eval(degree: usize, x: f64) -> DVector<f64> {
    let mut v = DVector::zeros(degree + 1);
    let mut p = 1.0;
    for j in 0..=degree {
        v[j] = p;
        p *= x;
    }
    v
}

fn poly_deriv(degree: usize, x: f64) -> DVector<f64> {
    let mut v = DVector::zeros(degree + 1);
    let mut p = 1.0;
    for j in 1..=degree {
        v[j] = j as f64 * p;
        p *= x;
    }
    v
}

/// Type-7 quantile of sorted data.
fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let h = (n as f64 - 1.0) * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 < n {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    } else {
        sorted[n - 1]
    }
}

/// Knot placement at quantiles: boundary knots at min/max, interior knots at
/// equally spaced probability quantiles (type-7 interpolation). `n_knots`
/// counts boundary plus interior knots.
pub fn knots_from_quantiles(times: &[f64], n_knots: usize) -> Result<(Vec<f64>, (f64, f64))> {
    if times.is_empty() {
        return Err(Error::InvalidInput("knot placement needs at least one time".into()));
    }
    if n_knots < 2 {
        return Err(Error::InvalidInput("need at least two knots".into()));
    }
    let mut sorted: Vec<f64> = times.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    if lo == hi {
        return Err(Error::InvalidInput(
            "all times identical; cannot place knots".into(),
        ));
    }
    let mut interior = Vec::with_capacity(n_knots - 2);
    for j in 1..=(n_knots - 2) {
        let p = j as f64 / (n_knots - 1) as f64;
        let q = quantile_type7(&sorted, p);
        if q > lo && q < hi && interior.last().map_or(true, |&prev| q > prev) {
            interior.push(q);
        }
    }
    Ok((interior, (lo, hi)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn fd_deriv(basis: &TimeBasis, t: f64) -> DVector<f64> {
        let h = 1e-6;
        (basis.eval(t + h).unwrap() - basis.eval(t - h).unwrap()) / (2.0 * h)
    }

    #[test]
    fn poly_examples() {
        let b = TimeBasis::poly(1, true);
        let v = b.eval(3.0).unwrap();
        assert_eq!(v.as_slice(), &[1.0, 3.0]);
        let d = b.eval_deriv(7.0).unwrap();
        assert_eq!(d.as_slice(), &[0.0, 1.0]);
        let i = b.eval_integral(2.0).unwrap();
        assert_abs_diff_eq!(i[0], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(i[1], 2.0, epsilon = 1e-14);
        assert!(b.eval(f64::NAN).is_err());
    }

    #[test]
    fn integral_at_zero_is_zero() {
        for b in [
            TimeBasis::poly(2, true),
            TimeBasis::log_poly(1, true),
            TimeBasis::natural_cubic(&[0.0, 2.0, 5.0], true).unwrap(),
            TimeBasis::bspline(3, vec![1.0, 2.0], (0.0, 5.0), true).unwrap(),
        ] {
            let v = b.eval_integral(0.0).unwrap();
            assert!(v.iter().all(|&x| x == 0.0));
            assert_eq!(v.len(), b.dimension());
        }
    }

    #[test]
    fn bspline_partition_of_unity() {
        let b = TimeBasis::bspline(3, vec![1.0, 2.5, 4.0], (0.0, 5.0), true).unwrap();
        for &t in &[0.0, 0.3, 1.0, 2.2, 3.7, 4.99, 5.0] {
            let v = b.eval(t).unwrap();
            assert_abs_diff_eq!(v.sum(), 1.0, epsilon = 1e-12);
            assert!(v.iter().all(|&x| x >= -1e-14));
        }
        // Clamped outside the boundary.
        let inside = b.eval(5.0).unwrap();
        let outside = b.eval(8.0).unwrap();
        assert_abs_diff_eq!((inside - outside).amax(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn bspline_derivative_sums_to_zero_inside() {
        let b = TimeBasis::bspline(3, vec![1.0, 2.5, 4.0], (0.0, 5.0), true).unwrap();
        for &t in &[0.4, 1.7, 3.1, 4.6] {
            let d = b.eval_deriv(t).unwrap();
            assert_abs_diff_eq!(d.sum(), 0.0, epsilon = 1e-10);
            let fd = fd_deriv(&b, t);
            assert_abs_diff_eq!((d - fd).amax(), 0.0, epsilon = 1e-5);
        }
    }

    #[test]
    fn natural_spline_dimensions_and_boundary_curvature() {
        let b = TimeBasis::natural_cubic(&[0.0, 2.0, 5.0], true).unwrap();
        assert_eq!(b.dimension(), 3);
        let b5 = TimeBasis::natural_cubic(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0], false).unwrap();
        assert_eq!(b5.dimension(), 5);

        // Second derivative vanishes at both boundary knots (finite
        // differences of eval; the basis extrapolates linearly).
        let h = 1e-4;
        for &t in &[0.0, 5.0] {
            let v0 = b.eval(t - h).unwrap();
            let v1 = b.eval(t).unwrap();
            let v2 = b.eval(t + h).unwrap();
            let second = (v0 + v2 - 2.0 * v1) / (h * h);
            assert_abs_diff_eq!(second.amax(), 0.0, epsilon = 1e-4);
        }
    }

    #[test]
    fn derivative_and_integral_consistent_with_eval() {
        // FTC and FD checks on 100 random interior points per basis.
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let bases = vec![
            TimeBasis::poly(3, true),
            TimeBasis::natural_cubic(&[0.0, 1.5, 3.0, 5.0], true).unwrap(),
            TimeBasis::bspline(3, vec![1.0, 2.0, 3.5], (0.0, 5.0), true).unwrap(),
            TimeBasis::bspline(2, vec![2.0], (0.5, 4.5), false).unwrap(),
            TimeBasis::log_poly(2, true),
        ];
        for b in bases {
            for _ in 0..100 {
                let t = 0.6 + 3.8 * rng.random::<f64>();
                let d = b.eval_deriv(t).unwrap();
                let fd = fd_deriv(&b, t);
                for j in 0..d.len() {
                    let scale = d[j].abs().max(1.0);
                    assert!(
                        (d[j] - fd[j]).abs() <= 1e-5 * scale,
                        "deriv mismatch {:?} at t={t}: {} vs {}",
                        b.kind,
                        d[j],
                        fd[j]
                    );
                }
                let h = 1e-5;
                let ip = b.eval_integral(t + h).unwrap();
                let im = b.eval_integral(t - h).unwrap();
                let v = b.eval(t).unwrap();
                for j in 0..v.len() {
                    let fd_v = (ip[j] - im[j]) / (2.0 * h);
                    let scale = v[j].abs().max(1.0);
                    assert!(
                        (v[j] - fd_v).abs() <= 1e-5 * scale,
                        "FTC mismatch {:?} at t={t}",
                        b.kind
                    );
                }
            }
        }
    }

    #[test]
    fn log_poly_integral_matches_closed_form() {
        // ∫_0^t (1, log s) ds = (t, t log t - t).
        let b = TimeBasis::log_poly(1, true);
        let t = 2.7;
        let i = b.eval_integral(t).unwrap();
        assert_abs_diff_eq!(i[0], t, epsilon = 1e-10);
        assert_abs_diff_eq!(i[1], t * t.ln() - t, epsilon = 1e-10);
        assert!(b.eval(0.0).is_err());
        assert!(b.eval(-1.0).is_err());
    }

    #[test]
    fn quantile_knots_examples() {
        let (interior, bounds) = knots_from_quantiles(&[1.0, 2.0, 3.0, 4.0, 5.0], 2).unwrap();
        assert!(interior.is_empty());
        assert_eq!(bounds, (1.0, 5.0));

        let times: Vec<f64> = (0..=10).map(|k| k as f64).collect();
        let (interior, bounds) = knots_from_quantiles(&times, 3).unwrap();
        assert_eq!(bounds, (0.0, 10.0));
        assert_eq!(interior.len(), 1);
        assert_abs_diff_eq!(interior[0], 5.0, epsilon = 1e-12);

        let mut rng = ChaCha12Rng::seed_from_u64(40);
        let draws: Vec<f64> = (0..1000).map(|_| 5.0 * rng.random::<f64>()).collect();
        let (interior, _) = knots_from_quantiles(&draws, 4).unwrap();
        assert_eq!(interior.len(), 2);
        assert_abs_diff_eq!(interior[0], 5.0 / 3.0, epsilon = 0.1);
        assert_abs_diff_eq!(interior[1], 10.0 / 3.0, epsilon = 0.1);

        assert!(knots_from_quantiles(&[2.0, 2.0, 2.0], 3).is_err());
    }

    #[test]
    fn invalid_knot_configurations_rejected() {
        assert!(TimeBasis::bspline(3, vec![2.0, 1.0], (0.0, 5.0), true).is_err());
        assert!(TimeBasis::bspline(3, vec![6.0], (0.0, 5.0), true).is_err());
        assert!(TimeBasis::bspline(3, vec![], (5.0, 5.0), true).is_err());
        assert!(TimeBasis::natural_cubic(&[1.0], true).is_err());
    }

    proptest! {
        #[test]
        fn bspline_partition_of_unity_prop(
            t in 0.0_f64..5.0,
            k1 in 0.5_f64..2.0,
            gap in 0.5_f64..2.0,
            degree in 1_usize..5,
        ) {
            let b = TimeBasis::bspline(degree, vec![k1, k1 + gap], (0.0, 5.0), true).unwrap();
            let v = b.eval(t).unwrap();
            prop_assert!((v.sum() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn dimension_matches_eval_length(
            degree in 1_usize..4,
            with_intercept in proptest::bool::ANY,
        ) {
            for b in [
                TimeBasis::poly(degree, with_intercept),
                TimeBasis::bspline(degree, vec![1.0, 2.0], (0.0, 4.0), with_intercept).unwrap(),
                TimeBasis::natural_cubic(&[0.0, 1.0, 2.0, 4.0], with_intercept).unwrap(),
            ] {
                prop_assert_eq!(b.eval(1.3).unwrap().len(), b.dimension());
                prop_assert_eq!(b.eval_deriv(1.3).unwrap().len(), b.dimension());
                prop_assert_eq!(b.eval_integral(1.3).unwrap().len(), b.dimension());
            }
        }
    }
}
