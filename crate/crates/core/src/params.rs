//! Parameter packing: unconstrained coordinates for all model parameters
//! with covariance matrices in log-Cholesky form (Cholesky factor with
//! log-transformed diagonal), so the optimizer works on an unconstrained
//! space while every covariance stays positive definite by construction.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::spec::{PsiStructure, ResolvedSpec, SigmaStructure, XiStructure};
use crate::{Error, Result};

pub fn n_lower_tri(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

/// Lower-triangular factor from packed coordinates (row-major lower
/// triangle, diagonal entries on the log scale).
pub fn factor_from_packed(dim: usize, coords: &[f64]) -> DMatrix<f64> {
    debug_assert_eq!(coords.len(), n_lower_tri(dim));
    let mut l = DMatrix::zeros(dim, dim);
    let mut idx = 0;
    for k in 0..dim {
        for j in 0..=k {
            l[(k, j)] = if j == k { coords[idx].exp() } else { coords[idx] };
            idx += 1;
        }
    }
    l
}

pub fn packed_from_factor(l: &DMatrix<f64>) -> Vec<f64> {
    let dim = l.nrows();
    let mut coords = Vec::with_capacity(n_lower_tri(dim));
    for k in 0..dim {
        for j in 0..=k {
            coords.push(if j == k { l[(k, j)].ln() } else { l[(k, j)] });
        }
    }
    coords
}

/// Accumulate the packed-coordinate gradient of `f(A)` with `A = L Lᵀ`,
/// given the unconstrained matrix gradient `G` (the coefficient of `dA`
/// under the trace inner product): `∂f/∂L = (G + Gᵀ) L`, with the diagonal
/// chained through the log transform.
pub fn chain_factor_grad(g: &DMatrix<f64>, l: &DMatrix<f64>, out: &mut [f64]) {
    let dim = l.nrows();
    debug_assert_eq!(out.len(), n_lower_tri(dim));
    let w = (g + g.transpose()) * l;
    let mut idx = 0;
    for k in 0..dim {
        for j in 0..=k {
            out[idx] += if j == k { w[(k, k)] * l[(k, k)] } else { w[(k, j)] };
            idx += 1;
        }
    }
}

/// Structure of a covariance block in the parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum CovStructure {
    /// Independent coordinates, one log standard deviation per dimension.
    Diagonal,
    /// Dense SPD matrix via log-Cholesky.
    Full,
    /// Block-diagonal with the given block sizes, each block dense.
    Blocks(Vec<usize>),
}

impl CovStructure {
    pub fn n_coords(&self, dim: usize) -> usize {
        match self {
            CovStructure::Diagonal => dim,
            CovStructure::Full => n_lower_tri(dim),
            CovStructure::Blocks(sizes) => {
                debug_assert_eq!(sizes.iter().sum::<usize>(), dim);
                sizes.iter().map(|&s| n_lower_tri(s)).sum()
            }
        }
    }

    /// Full `dim x dim` lower factor (diagonal or block-diagonal outside the
    /// structured part).
    pub fn factor(&self, dim: usize, coords: &[f64]) -> DMatrix<f64> {
        match self {
            CovStructure::Diagonal => {
                let mut l = DMatrix::zeros(dim, dim);
                for k in 0..dim {
                    l[(k, k)] = coords[k].exp();
                }
                l
            }
            CovStructure::Full => factor_from_packed(dim, coords),
            CovStructure::Blocks(sizes) => {
                let mut l = DMatrix::zeros(dim, dim);
                let mut off = 0;
                let mut coff = 0;
                for &s in sizes {
                    let lb = factor_from_packed(s, &coords[coff..coff + n_lower_tri(s)]);
                    l.view_mut((off, off), (s, s)).copy_from(&lb);
                    off += s;
                    coff += n_lower_tri(s);
                }
                l
            }
        }
    }

    /// Coordinates reproducing the given SPD matrix; errors when the matrix
    /// does not factor or violates the declared structure.
    pub fn pack(&self, cov: &DMatrix<f64>) -> Result<Vec<f64>> {
        let dim = cov.nrows();
        let check_zero_outside = |mask: &dyn Fn(usize, usize) -> bool| -> Result<()> {
            for i in 0..dim {
                for j in 0..dim {
                    if !mask(i, j) && cov[(i, j)].abs() > 1e-10 * (1.0 + cov[(i, i)].abs()) {
                        return Err(Error::InvalidInput(format!(
                            "covariance entry ({i},{j}) is nonzero but the declared structure \
                             fixes it at zero"
                        )));
                    }
                }
            }
            Ok(())
        };
        match self {
            CovStructure::Diagonal => {
                check_zero_outside(&|i, j| i == j)?;
                (0..dim)
                    .map(|k| {
                        if cov[(k, k)] > 0.0 {
                            Ok(0.5 * cov[(k, k)].ln())
                        } else {
                            Err(Error::InvalidInput("variance must be positive".into()))
                        }
                    })
                    .collect()
            }
            CovStructure::Full => {
                let chol = nalgebra::Cholesky::new(cov.clone()).ok_or_else(|| {
                    Error::InvalidInput("covariance matrix is not positive definite".into())
                })?;
                Ok(packed_from_factor(&chol.l()))
            }
            CovStructure::Blocks(sizes) => {
                let mut off = 0;
                let blocks: Vec<Range<usize>> = sizes
                    .iter()
                    .map(|&s| {
                        let r = off..off + s;
                        off += s;
                        r
                    })
                    .collect();
                check_zero_outside(&|i, j| {
                    blocks.iter().any(|b| b.contains(&i) && b.contains(&j))
                })?;
                let mut coords = Vec::new();
                for b in &blocks {
                    let sub = cov.view((b.start, b.start), (b.len(), b.len())).into_owned();
                    let chol = nalgebra::Cholesky::new(sub).ok_or_else(|| {
                        Error::InvalidInput("covariance block is not positive definite".into())
                    })?;
                    coords.extend(packed_from_factor(&chol.l()));
                }
                Ok(coords)
            }
        }
    }

    /// Accumulate the coordinate gradient given the full-matrix gradient `G`
    /// and the full factor `L` from [`CovStructure::factor`].
    pub fn chain(&self, g: &DMatrix<f64>, l: &DMatrix<f64>, out: &mut [f64]) {
        let dim = l.nrows();
        match self {
            CovStructure::Diagonal => {
                for k in 0..dim {
                    out[k] += 2.0 * g[(k, k)] * l[(k, k)] * l[(k, k)];
                }
            }
            CovStructure::Full => chain_factor_grad(g, l, out),
            CovStructure::Blocks(sizes) => {
                let mut off = 0;
                let mut coff = 0;
                for &s in sizes {
                    let gb = g.view((off, off), (s, s)).into_owned();
                    let lb = l.view((off, off), (s, s)).into_owned();
                    chain_factor_grad(&gb, &lb, &mut out[coff..coff + n_lower_tri(s)]);
                    off += s;
                    coff += n_lower_tri(s);
                }
            }
        }
    }

    /// Coordinate names for a block called `label`, with dimension labels
    /// `dims` (1-based display indices).
    fn names(&self, label: &str, dims: &[usize]) -> Vec<String> {
        match self {
            CovStructure::Diagonal => dims.iter().map(|d| format!("{label}2[{d}]")).collect(),
            CovStructure::Full => {
                let mut out = Vec::new();
                for k in 0..dims.len() {
                    for j in 0..=k {
                        out.push(format!("chol_{label}[{}][{}]", dims[k], dims[j]));
                    }
                }
                out
            }
            CovStructure::Blocks(sizes) => {
                let mut out = Vec::new();
                let mut off = 0;
                for &s in sizes {
                    for k in 0..s {
                        for j in 0..=k {
                            out.push(format!("chol_{label}[{}][{}]", dims[off + k], dims[off + j]));
                        }
                    }
                    off += s;
                }
                out
            }
        }
    }

    fn transforms(&self, dim: usize) -> Vec<NaturalTransform> {
        match self {
            CovStructure::Diagonal => vec![NaturalTransform::ExpTwice; dim],
            CovStructure::Full => {
                let mut out = Vec::new();
                for k in 0..dim {
                    for j in 0..=k {
                        out.push(if j == k {
                            NaturalTransform::Exp
                        } else {
                            NaturalTransform::Identity
                        });
                    }
                }
                out
            }
            CovStructure::Blocks(sizes) => {
                let mut out = Vec::new();
                for &s in sizes {
                    out.extend(CovStructure::Full.transforms(s));
                }
                out
            }
        }
    }
}

/// Scalar map from an unconstrained coordinate to its reporting scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NaturalTransform {
    Identity,
    /// Cholesky diagonal: natural value `exp(c)`.
    Exp,
    /// Log standard deviation of an independent coordinate: natural value is
    /// the variance `exp(2c)`.
    ExpTwice,
}

impl NaturalTransform {
    pub fn apply(&self, c: f64) -> f64 {
        match self {
            NaturalTransform::Identity => c,
            NaturalTransform::Exp => c.exp(),
            NaturalTransform::ExpTwice => (2.0 * c).exp(),
        }
    }

    /// Derivative of the natural value with respect to the coordinate, for
    /// delta-method standard errors.
    pub fn deriv(&self, c: f64) -> f64 {
        match self {
            NaturalTransform::Identity => 1.0,
            NaturalTransform::Exp => c.exp(),
            NaturalTransform::ExpTwice => 2.0 * (2.0 * c).exp(),
        }
    }
}

/// Coordinate ranges for every model-parameter block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParameterLayout {
    pub v1: usize,
    /// Per-marker fixed-effect ranges; the concatenation is the stacked beta.
    pub beta: Vec<Range<usize>>,
    pub sigma: CovBlock,
    pub psi: CovBlock,
    pub gamma: Vec<Range<usize>>,
    pub alpha: Vec<Range<usize>>,
    pub xi: CovBlock,
    /// Event-type index of each frailty coordinate of Xi, in order.
    pub frailty_types: Vec<usize>,
    pub names: Vec<String>,
    pub transforms: Vec<NaturalTransform>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovBlock {
    pub range: Range<usize>,
    pub dim: usize,
    pub structure: CovStructure,
}

impl ParameterLayout {
    pub fn from_spec(spec: &ResolvedSpec) -> Self {
        let mut names = Vec::new();
        let mut transforms = Vec::new();
        let mut pos = 0usize;

        let mut beta = Vec::new();
        for (l, m) in spec.markers.iter().enumerate() {
            let d = m.fixed_dim();
            beta.push(pos..pos + d);
            for j in 0..d {
                names.push(format!("beta[{}][{}]", l + 1, j + 1));
                transforms.push(NaturalTransform::Identity);
            }
            pos += d;
        }

        let n_l = spec.n_markers();
        let sigma_struct = match spec.sigma {
            SigmaStructure::Diagonal => CovStructure::Diagonal,
            SigmaStructure::Full => CovStructure::Full,
        };
        let sigma_n = sigma_struct.n_coords(n_l);
        let sigma = CovBlock {
            range: pos..pos + sigma_n,
            dim: n_l,
            structure: sigma_struct.clone(),
        };
        let dims: Vec<usize> = (1..=n_l).collect();
        names.extend(sigma_struct.names("sigma", &dims));
        transforms.extend(sigma_struct.transforms(n_l));
        pos += sigma_n;

        let r = spec.total_random_dim();
        let psi_struct = match spec.psi {
            PsiStructure::Full => CovStructure::Full,
            PsiStructure::ByMarker => {
                CovStructure::Blocks(spec.markers.iter().map(|m| m.random_dim()).collect())
            }
        };
        let psi_n = psi_struct.n_coords(r);
        let psi = CovBlock {
            range: pos..pos + psi_n,
            dim: r,
            structure: psi_struct.clone(),
        };
        let dims: Vec<usize> = (1..=r).collect();
        names.extend(psi_struct.names("psi", &dims));
        transforms.extend(psi_struct.transforms(r));
        pos += psi_n;

        let mut gamma = Vec::new();
        let mut alpha = Vec::new();
        for (e, ev) in spec.events.iter().enumerate() {
            let gd = ev.gamma_dim();
            gamma.push(pos..pos + gd);
            for j in 0..gd {
                names.push(format!("gamma[{}][{}]", e + 1, j + 1));
                transforms.push(NaturalTransform::Identity);
            }
            pos += gd;
            let ad = ev.alpha_dim();
            alpha.push(pos..pos + ad);
            for j in 0..ad {
                names.push(format!("alpha[{}][{}]", e + 1, j + 1));
                transforms.push(NaturalTransform::Identity);
            }
            pos += ad;
        }

        let frailty_types = spec.frailty_types();
        let h = frailty_types.len();
        let xi_struct = match spec.xi {
            XiStructure::Diagonal => CovStructure::Diagonal,
            XiStructure::Full => CovStructure::Full,
        };
        let xi_n = xi_struct.n_coords(h);
        let xi = CovBlock {
            range: pos..pos + xi_n,
            dim: h,
            structure: xi_struct.clone(),
        };
        let dims: Vec<usize> = frailty_types.iter().map(|&e| e + 1).collect();
        names.extend(xi_struct.names("xi", &dims));
        transforms.extend(xi_struct.transforms(h));
        pos += xi_n;

        ParameterLayout {
            v1: pos,
            beta,
            sigma,
            psi,
            gamma,
            alpha,
            xi,
            frailty_types,
            names,
            transforms,
        }
    }

    /// Total stacked fixed-effect dimension.
    pub fn p_beta(&self) -> usize {
        self.beta.iter().map(|r| r.len()).sum()
    }

    pub fn coord_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Structured view of an unconstrained coordinate vector.
    pub fn unpack(&self, zeta: &[f64]) -> Parameters {
        debug_assert_eq!(zeta.len(), self.v1);
        let beta = DVector::from_column_slice(&zeta[0..self.p_beta()]);
        let build = |b: &CovBlock| {
            let l = b.structure.factor(b.dim, &zeta[b.range.clone()]);
            let cov = &l * l.transpose();
            (l, cov)
        };
        let (sigma_chol, sigma) = build(&self.sigma);
        let (psi_chol, psi) = build(&self.psi);
        let (xi_chol, xi) = build(&self.xi);
        let gammas = self
            .gamma
            .iter()
            .map(|r| DVector::from_column_slice(&zeta[r.clone()]))
            .collect();
        let alphas = self
            .alpha
            .iter()
            .map(|r| DVector::from_column_slice(&zeta[r.clone()]))
            .collect();
        Parameters {
            coords: DVector::from_column_slice(zeta),
            beta,
            sigma_chol,
            sigma,
            psi_chol,
            psi,
            gammas,
            alphas,
            xi_chol,
            xi,
        }
    }

    /// Inverse of [`ParameterLayout::unpack`]; returns the raw coordinates.
    pub fn pack(&self, params: &Parameters) -> DVector<f64> {
        params.coords.clone()
    }

    /// Coordinates from natural-scale parameters.
    #[allow(clippy::too_many_arguments)]
    pub fn pack_natural(
        &self,
        beta: &DVector<f64>,
        sigma: &DMatrix<f64>,
        psi: &DMatrix<f64>,
        gammas: &[DVector<f64>],
        alphas: &[DVector<f64>],
        xi: &DMatrix<f64>,
    ) -> Result<DVector<f64>> {
        if beta.len() != self.p_beta() {
            return Err(Error::InvalidInput(format!(
                "beta has length {}, expected {}",
                beta.len(),
                self.p_beta()
            )));
        }
        let mut coords = vec![0.0; self.v1];
        coords[0..self.p_beta()].copy_from_slice(beta.as_slice());
        coords[self.sigma.range.clone()].copy_from_slice(&self.sigma.structure.pack(sigma)?);
        coords[self.psi.range.clone()].copy_from_slice(&self.psi.structure.pack(psi)?);
        for (r, g) in self.gamma.iter().zip(gammas) {
            if g.len() != r.len() {
                return Err(Error::InvalidInput("gamma dimension mismatch".into()));
            }
            coords[r.clone()].copy_from_slice(g.as_slice());
        }
        for (r, a) in self.alpha.iter().zip(alphas) {
            if a.len() != r.len() {
                return Err(Error::InvalidInput("alpha dimension mismatch".into()));
            }
            coords[r.clone()].copy_from_slice(a.as_slice());
        }
        coords[self.xi.range.clone()].copy_from_slice(&self.xi.structure.pack(xi)?);
        Ok(DVector::from_vec(coords))
    }
}

/// Unpacked model parameters; covariance factors are lower Cholesky.
#[derive(Debug, Clone)]
pub struct Parameters {
    pub coords: DVector<f64>,
    pub beta: DVector<f64>,
    pub sigma_chol: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub psi_chol: DMatrix<f64>,
    pub psi: DMatrix<f64>,
    pub gammas: Vec<DVector<f64>>,
    pub alphas: Vec<DVector<f64>>,
    pub xi_chol: DMatrix<f64>,
    pub xi: DMatrix<f64>,
}

/// Map survival fixed effects from the mean-hazard parameterization to the
/// deviation parameterization, given an invertible linear map
/// `z(t) = G1 zbar(t) + G2 x(t)` from the survival design to the marker
/// fixed design. `alpha` and `beta` are the association coefficient and the
/// marker fixed effects of the mapped marker.
pub fn reparameterize_from_mean_hazard(
    gamma_star: &DVector<f64>,
    alpha: f64,
    beta: &DVector<f64>,
    g1: &DMatrix<f64>,
    g2: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let k = gamma_star.len();
    let (k1, k2) = (g1.ncols(), g2.ncols());
    if g1.nrows() != k || g2.nrows() != k || k1 + k2 != k {
        return Err(Error::InvalidInput(
            "map matrices must stack to a square G = (G1, G2)".into(),
        ));
    }
    if beta.len() != k2 {
        return Err(Error::InvalidInput(format!(
            "beta has length {}, expected {k2} to match G2",
            beta.len()
        )));
    }
    let g2_pinv = g2.clone().pseudo_inverse(1e-12).map_err(|e| {
        Error::Numerical(format!("pseudo-inverse of G2 failed: {e}"))
    })?;
    let top = g1.transpose() * gamma_star;
    let bottom = g2.transpose() * (gamma_star + g2_pinv.transpose() * (alpha * beta));
    let mut stacked = DVector::zeros(k);
    stacked.rows_mut(0, k1).copy_from(&top);
    stacked.rows_mut(k1, k2).copy_from(&bottom);
    let mut g = DMatrix::zeros(k, k);
    g.view_mut((0, 0), (k, k1)).copy_from(g1);
    g.view_mut((0, k1), (k, k2)).copy_from(g2);
    g.transpose()
        .lu()
        .solve(&stacked)
        .ok_or_else(|| Error::Numerical("G is singular".into()))
}
