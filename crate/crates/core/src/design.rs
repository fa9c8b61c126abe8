//! Cached design matrices: the stacked marker designs `X_i(s)` / `M_i(s)`,
//! the survival designs `z_ie(t)` and the association matrices `B_ie(t)`,
//! plus per-individual term caches used by the lower bound. Names resolve to
//! dense designs once per individual before optimization.

use nalgebra::{DMatrix, DVector};

use crate::data::{Individual, JointData};
use crate::params::ParameterLayout;
use crate::spec::{AssocKind, ResolvedSpec};
use crate::{quad, Error, Result};

/// Per-marker fixed and random design rows at one time, with the observed
/// mask for that time.
#[derive(Debug, Clone)]
pub struct MarkerDesign {
    pub x_rows: Vec<DVector<f64>>,
    pub m_rows: Vec<DVector<f64>>,
    pub observed: Vec<bool>,
}

fn covariate(ind: &Individual, name: &str) -> Result<f64> {
    ind.covariates.get(name).copied().ok_or_else(|| {
        Error::InvalidInput(format!(
            "covariate '{name}' missing for individual {}",
            ind.id
        ))
    })
}

/// Fixed-effect design row of one marker: covariates, time basis, then the
/// varying-coefficient expansion.
pub fn marker_fixed_row(
    spec: &ResolvedSpec,
    ind: &Individual,
    l: usize,
    s: f64,
) -> Result<DVector<f64>> {
    let m = &spec.markers[l];
    let mut row = DVector::zeros(m.fixed_dim());
    let mut pos = 0;
    for name in &m.fixed_covariates {
        row[pos] = covariate(ind, name)?;
        pos += 1;
    }
    let g = m.time_basis.eval(s)?;
    row.rows_mut(pos, g.len()).copy_from(&g);
    pos += g.len();
    if let Some((name, basis)) = &m.varying_coeff {
        let f = covariate(ind, name)?;
        let gf = basis.eval(s)?;
        row.rows_mut(pos, gf.len()).copy_from(&(f * gf));
    }
    Ok(row)
}

/// Marker design rows at time `s`; rows are laid out block-diagonally by
/// marker and the mask selects markers observed at `s`.
pub fn build_marker_design(
    spec: &ResolvedSpec,
    ind: &Individual,
    s: f64,
) -> Result<MarkerDesign> {
    if !(s >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "marker design requires s >= 0, got {s}"
        )));
    }
    let mut x_rows = Vec::with_capacity(spec.n_markers());
    let mut m_rows = Vec::with_capacity(spec.n_markers());
    let mut observed = vec![false; spec.n_markers()];
    for l in 0..spec.n_markers() {
        x_rows.push(marker_fixed_row(spec, ind, l, s)?);
        m_rows.push(spec.markers[l].random_basis.eval(s)?);
    }
    for obs in &ind.markers {
        if obs.marker >= spec.n_markers() {
            return Err(Error::InvalidInput(format!(
                "marker index {} out of range for individual {}",
                obs.marker + 1,
                ind.id
            )));
        }
        if obs.time == s {
            observed[obs.marker] = true;
        }
    }
    Ok(MarkerDesign {
        x_rows,
        m_rows,
        observed,
    })
}

/// Association design `B_ie(t)`: one row per (marker, kind) pair in declared
/// order, each placed in the marker's random-effect column block.
pub fn build_association_design(spec: &ResolvedSpec, event: usize, t: f64) -> Result<DMatrix<f64>> {
    let ev = &spec.events[event];
    let r = spec.total_random_dim();
    let mut b = DMatrix::zeros(ev.associations.len(), r);
    for (row, &(l, kind)) in ev.associations.iter().enumerate() {
        let m = &spec.markers[l];
        if m.random_dim() == 0 {
            return Err(Error::InvalidInput(format!(
                "association references marker {} which has no random effects",
                l + 1
            )));
        }
        let v = match kind {
            AssocKind::Value => m.random_basis.eval(t)?,
            AssocKind::Derivative => m.random_basis.eval_deriv(t)?,
            AssocKind::Integral => m.random_basis.eval_integral(t)?,
        };
        let off = spec.random_offset(l);
        b.view_mut((row, off), (1, v.len())).copy_from(&v.transpose());
    }
    Ok(b)
}

/// Survival fixed design `z_ie(t)`: covariates then the baseline expansion.
pub fn survival_design(
    spec: &ResolvedSpec,
    ind: &Individual,
    event: usize,
    t: f64,
) -> Result<DVector<f64>> {
    let ev = &spec.events[event];
    let mut z = DVector::zeros(ev.gamma_dim());
    let mut pos = 0;
    for name in &ev.fixed_covariates {
        z[pos] = covariate(ind, name)?;
        pos += 1;
    }
    let b = ev.baseline_basis.eval(t)?;
    z.rows_mut(pos, b.len()).copy_from(&b);
    Ok(z)
}

/// Markers co-observed at one time: observed values, the stacked fixed
/// design rows (global beta coordinates) and the random design rows.
#[derive(Debug, Clone)]
pub struct MarkerGroup {
    pub time: f64,
    pub obs_markers: Vec<usize>,
    pub y: DVector<f64>,
    /// `n_obs x p_beta`.
    pub x: DMatrix<f64>,
    /// `n_obs x R`.
    pub s_u: DMatrix<f64>,
}

/// One quadrature node of an expected cumulative hazard.
#[derive(Debug, Clone)]
pub struct EventNode {
    /// Weight including the interval scaling.
    pub w: f64,
    pub z: DVector<f64>,
    pub b: DMatrix<f64>,
}

/// Cached designs for one counting-process record.
#[derive(Debug, Clone)]
pub struct EventTermDesign {
    pub event: usize,
    pub status: bool,
    pub start: f64,
    pub stop: f64,
    pub z_stop: DVector<f64>,
    pub b_stop: DMatrix<f64>,
    pub nodes: Vec<EventNode>,
    /// Position of this event type's frailty coordinate in the individual's
    /// frailty block, when the type carries a frailty.
    pub frailty_idx: Option<usize>,
}

/// Designs for one terminal type's cumulative hazard on `(0, v_i]`.
#[derive(Debug, Clone)]
pub struct EntryTypeDesign {
    pub event: usize,
    pub nodes: Vec<EventNode>,
    /// Position of the type's frailty coordinate within the delayed-entry
    /// integration variable `(u, w_terminal)`.
    pub frailty_idx: Option<usize>,
}

/// Delayed-entry correction designs; the integral runs over the random
/// effects and the frailties of terminal types only.
#[derive(Debug, Clone)]
pub struct EntryDesign {
    pub entry: f64,
    pub types: Vec<EntryTypeDesign>,
    /// Terminal event types with a frailty, in Xi coordinate order.
    pub frailty_types: Vec<usize>,
    /// Integration dimension: R plus the number of terminal frailties.
    pub dim: usize,
}

/// All cached designs of one individual's lower-bound term.
#[derive(Debug, Clone)]
pub struct IndividualTerm {
    pub index: usize,
    pub entry: f64,
    /// Event types with a frailty and at least one record for this
    /// individual; their coordinates extend the random effects in `o_i`.
    pub frailty_types: Vec<usize>,
    /// `R + E_i`: random effects plus this individual's frailty count.
    pub q: usize,
    /// Variational-parameter count: `q + q(q+1)/2`.
    pub v2: usize,
    pub marker_groups: Vec<MarkerGroup>,
    pub events: Vec<EventTermDesign>,
    pub entry_design: Option<EntryDesign>,
}

impl IndividualTerm {
    /// Positions of this individual's frailty types within the global Xi
    /// coordinate order.
    pub fn xi_positions(&self, layout: &ParameterLayout) -> Vec<usize> {
        self.frailty_types
            .iter()
            .map(|e| {
                layout
                    .frailty_types
                    .iter()
                    .position(|f| f == e)
                    .expect("frailty type missing from layout")
            })
            .collect()
    }
}

/// Build the per-individual term caches. `gl_nodes` is the Gauss–Legendre
/// node count for the expected cumulative hazards.
pub fn build_terms(
    spec: &ResolvedSpec,
    data: &JointData,
    gl_nodes: usize,
) -> Result<Vec<IndividualTerm>> {
    let rule = quad::gauss_legendre(gl_nodes)?;
    let r = spec.total_random_dim();
    let p_beta: usize = spec.markers.iter().map(|m| m.fixed_dim()).sum();
    let beta_offsets: Vec<usize> = spec
        .markers
        .iter()
        .scan(0usize, |acc, m| {
            let o = *acc;
            *acc += m.fixed_dim();
            Some(o)
        })
        .collect();
    let terminal_frailties: Vec<usize> = spec
        .terminal_types()
        .into_iter()
        .filter(|&e| spec.events[e].frailty)
        .collect();

    let mut terms = Vec::with_capacity(data.individuals.len());
    for (index, ind) in data.individuals.iter().enumerate() {
        // Frailty coordinates present for this individual.
        let frailty_types: Vec<usize> = spec
            .frailty_types()
            .into_iter()
            .filter(|&e| ind.events.iter().any(|rec| rec.event_type == e))
            .collect();
        let q = r + frailty_types.len();

        // Group marker observations by exact time.
        let mut marker_groups = Vec::new();
        let mut i = 0;
        while i < ind.markers.len() {
            let t = ind.markers[i].time;
            let mut j = i;
            while j < ind.markers.len() && ind.markers[j].time == t {
                j += 1;
            }
            let obs = &ind.markers[i..j];
            let n_obs = obs.len();
            let mut y = DVector::zeros(n_obs);
            let mut x = DMatrix::zeros(n_obs, p_beta);
            let mut s_u = DMatrix::zeros(n_obs, r);
            let mut obs_markers = Vec::with_capacity(n_obs);
            for (row, o) in obs.iter().enumerate() {
                if o.marker >= spec.n_markers() {
                    return Err(Error::InvalidInput(format!(
                        "marker index {} out of range for individual {}",
                        o.marker + 1,
                        ind.id
                    )));
                }
                y[row] = o.value;
                obs_markers.push(o.marker);
                let xr = marker_fixed_row(spec, ind, o.marker, t)?;
                x.view_mut((row, beta_offsets[o.marker]), (1, xr.len()))
                    .copy_from(&xr.transpose());
                let mr = spec.markers[o.marker].random_basis.eval(t)?;
                s_u.view_mut((row, spec.random_offset(o.marker)), (1, mr.len()))
                    .copy_from(&mr.transpose());
            }
            marker_groups.push(MarkerGroup {
                time: t,
                obs_markers,
                y,
                x,
                s_u,
            });
            i = j;
        }

        // Event records.
        let mut events = Vec::with_capacity(ind.events.len());
        for rec in &ind.events {
            if rec.event_type >= spec.n_events() {
                return Err(Error::InvalidInput(format!(
                    "event type {} out of range for individual {}",
                    rec.event_type + 1,
                    ind.id
                )));
            }
            let e = rec.event_type;
            let z_stop = survival_design(spec, ind, e, rec.stop)?;
            let b_stop = build_association_design(spec, e, rec.stop)?;
            let mut nodes = Vec::with_capacity(rule.len());
            let half = 0.5 * (rec.stop - rec.start);
            let mid = 0.5 * (rec.stop + rec.start);
            for (&xq, &wq) in rule.nodes.iter().zip(&rule.weights) {
                let s = mid + half * xq;
                nodes.push(EventNode {
                    w: wq * half,
                    z: survival_design(spec, ind, e, s)?,
                    b: build_association_design(spec, e, s)?,
                });
            }
            events.push(EventTermDesign {
                event: e,
                status: rec.status == 1,
                start: rec.start,
                stop: rec.stop,
                z_stop,
                b_stop,
                nodes,
                frailty_idx: frailty_types.iter().position(|&f| f == e),
            });
        }

        // Delayed-entry correction designs over (0, v_i].
        let entry_design = if ind.entry > 0.0 && !spec.terminal_types().is_empty() {
            let mut types = Vec::new();
            for &e in &spec.terminal_types() {
                let mut nodes = Vec::with_capacity(rule.len());
                let half = 0.5 * ind.entry;
                for (&xq, &wq) in rule.nodes.iter().zip(&rule.weights) {
                    let s = half + half * xq;
                    nodes.push(EventNode {
                        w: wq * half,
                        z: survival_design(spec, ind, e, s)?,
                        b: build_association_design(spec, e, s)?,
                    });
                }
                types.push(EntryTypeDesign {
                    event: e,
                    nodes,
                    frailty_idx: terminal_frailties.iter().position(|&f| f == e).map(|k| r + k),
                });
            }
            Some(EntryDesign {
                entry: ind.entry,
                types,
                frailty_types: terminal_frailties.clone(),
                dim: r + terminal_frailties.len(),
            })
        } else {
            None
        };

        terms.push(IndividualTerm {
            index,
            entry: ind.entry,
            frailty_types,
            q,
            v2: q + q * (q + 1) / 2,
            marker_groups,
            events,
            entry_design,
        });
    }
    Ok(terms)
}
