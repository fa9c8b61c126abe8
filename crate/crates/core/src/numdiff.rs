//! Central finite differences with Richardson extrapolation.
//!
//! Used for the observed-information blocks, starting-value checks and as the
//! default derivative mechanism inside the adaptive Gauss–Hermite mode search.

use nalgebra::{DMatrix, DVector};

/// Per-coordinate step `base * (1 + |x_j|)`.
pub fn scaled_step(base: f64, x: f64) -> f64 {
    base * (1.0 + x.abs())
}

/// Central-difference gradient of a scalar function.
pub fn gradient<F: FnMut(&DVector<f64>) -> f64>(
    mut f: F,
    x: &DVector<f64>,
    base_step: f64,
) -> DVector<f64> {
    let n = x.len();
    let mut g = DVector::zeros(n);
    let mut xp = x.clone();
    for j in 0..n {
        let h = scaled_step(base_step, x[j]);
        xp[j] = x[j] + h;
        let fp = f(&xp);
        xp[j] = x[j] - h;
        let fm = f(&xp);
        xp[j] = x[j];
        g[j] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Central-difference Hessian of a scalar function.
pub fn hessian<F: FnMut(&DVector<f64>) -> f64>(
    mut f: F,
    x: &DVector<f64>,
    base_step: f64,
) -> DMatrix<f64> {
    let n = x.len();
    let f0 = f(x);
    let mut h = DMatrix::zeros(n, n);
    let steps: Vec<f64> = (0..n).map(|j| scaled_step(base_step, x[j])).collect();
    let mut xp = x.clone();
    for j in 0..n {
        xp[j] = x[j] + steps[j];
        let fp = f(&xp);
        xp[j] = x[j] - steps[j];
        let fm = f(&xp);
        xp[j] = x[j];
        h[(j, j)] = (fp - 2.0 * f0 + fm) / (steps[j] * steps[j]);
    }
    for j in 0..n {
        for k in 0..j {
            let (hj, hk) = (steps[j], steps[k]);
            xp[j] = x[j] + hj;
            xp[k] = x[k] + hk;
            let fpp = f(&xp);
            xp[k] = x[k] - hk;
            let fpm = f(&xp);
            xp[j] = x[j] - hj;
            xp[k] = x[k] + hk;
            let fmp = f(&xp);
            xp[k] = x[k] - hk;
            let fmm = f(&xp);
            xp[j] = x[j];
            xp[k] = x[k];
            let v = (fpp - fpm - fmp + fmm) / (4.0 * hj * hk);
            h[(j, k)] = v;
            h[(k, j)] = v;
        }
    }
    h
}

/// Hessian refined by Richardson extrapolation over step sizes `h, h/2, h/4`.
/// Exact (up to roundoff) for quadratics at any step; the base step is
/// shrunk automatically when evaluations come back non-finite.
pub fn hessian_richardson<F: FnMut(&DVector<f64>) -> f64>(
    mut f: F,
    x: &DVector<f64>,
    base_step: f64,
) -> DMatrix<f64> {
    let mut h = base_step;
    for _ in 0..4 {
        let t0 = hessian(&mut f, x, h);
        let t1 = hessian(&mut f, x, h / 2.0);
        let t2 = hessian(&mut f, x, h / 4.0);
        if t0.iter().all(|v| v.is_finite())
            && t1.iter().all(|v| v.is_finite())
            && t2.iter().all(|v| v.is_finite())
        {
            let r1 = (4.0 * &t1 - &t0) / 3.0;
            let r2 = (4.0 * &t2 - &t1) / 3.0;
            return (16.0 * r2 - r1) / 15.0;
        }
        h /= 10.0;
    }
    hessian(&mut f, x, h)
}

/// Central-difference Jacobian of a vector-valued function, one column per
/// input coordinate.
pub fn jacobian<F: FnMut(&DVector<f64>) -> DVector<f64>>(
    mut g: F,
    x: &DVector<f64>,
    base_step: f64,
) -> DMatrix<f64> {
    let n = x.len();
    let mut xp = x.clone();
    let mut cols: Vec<DVector<f64>> = Vec::with_capacity(n);
    for j in 0..n {
        let h = scaled_step(base_step, x[j]);
        xp[j] = x[j] + h;
        let gp = g(&xp);
        xp[j] = x[j] - h;
        let gm = g(&xp);
        xp[j] = x[j];
        cols.push((gp - gm) / (2.0 * h));
    }
    DMatrix::from_columns(&cols)
}

/// Jacobian refined by Richardson extrapolation over step sizes
/// `h, h/2, h/4`, together with a per-entry error estimate.
pub fn jacobian_richardson<F: FnMut(&DVector<f64>) -> DVector<f64>>(
    mut g: F,
    x: &DVector<f64>,
    base_step: f64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let t0 = jacobian(&mut g, x, base_step);
    let t1 = jacobian(&mut g, x, base_step / 2.0);
    let t2 = jacobian(&mut g, x, base_step / 4.0);
    // Central differences have even error expansions, so each halving gains a
    // factor 4 per extrapolation level.
    let r1 = (4.0 * &t1 - &t0) / 3.0;
    let r2 = (4.0 * &t2 - &t1) / 3.0;
    let refined = (16.0 * &r2 - &r1) / 15.0;
    let err = (&refined - &r2).abs();
    (refined, err)
}
