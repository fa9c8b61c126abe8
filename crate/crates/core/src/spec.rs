//! Model specification: marker and survival sub-model designs, association
//! structure, frailty flags and covariance structure flags.
//!
//! A `ModelSpec` round-trips through a single JSON document so fits are
//! reproducible from configuration alone.

use serde::{Deserialize, Serialize};

use crate::basis::{knots_from_quantiles, TimeBasis};
use crate::data::JointData;
use crate::{Error, Result};

/// A time basis given either directly or as a number of quantile-placed
/// knots to be resolved against observed times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BasisConfig {
    Quantile {
        kind: crate::basis::BasisKind,
        degree: usize,
        quantile_knots: usize,
        with_intercept: bool,
    },
    Fixed(TimeBasis),
}

impl BasisConfig {
    /// Resolve quantile-knot placeholders against the given times.
    pub fn resolve(&self, times: &[f64]) -> Result<TimeBasis> {
        match self {
            BasisConfig::Fixed(b) => {
                b.check()?;
                Ok(b.clone())
            }
            BasisConfig::Quantile {
                kind,
                degree,
                quantile_knots,
                with_intercept,
            } => {
                let (interior, boundary) = knots_from_quantiles(times, *quantile_knots)?;
                let b = TimeBasis {
                    kind: *kind,
                    degree: *degree,
                    interior_knots: interior,
                    boundary_knots: Some(boundary),
                    with_intercept: *with_intercept,
                };
                b.check()?;
                Ok(b)
            }
        }
    }
}

/// A "varying-coefficient" term: covariate times a time expansion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaryingCoeff {
    pub covariate: String,
    pub basis: BasisConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerSpec {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub fixed_covariates: Vec<String>,
    pub time_basis: BasisConfig,
    #[serde(default)]
    pub varying_coeff: Option<VaryingCoeff>,
    pub random_basis: BasisConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Terminal,
    Recurrent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssocKind {
    Value,
    Derivative,
    Integral,
}

/// Association of one marker's random deviation with an event type's
/// log-hazard; one coefficient per kind, in declared order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerAssoc {
    /// 1-based marker index, matching the markers CSV.
    pub marker: usize,
    pub kinds: Vec<AssocKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalSpec {
    #[serde(default)]
    pub name: Option<String>,
    pub kind: EventKind,
    /// Competing-risk group; terminal types sharing a group censor each
    /// other at the first occurrence.
    #[serde(default)]
    pub competing_group: Option<usize>,
    #[serde(default)]
    pub fixed_covariates: Vec<String>,
    pub baseline_basis: BasisConfig,
    #[serde(default)]
    pub associations: Vec<MarkerAssoc>,
    #[serde(default)]
    pub frailty: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaStructure {
    #[default]
    Diagonal,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsiStructure {
    #[default]
    Full,
    ByMarker,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XiStructure {
    #[default]
    Diagonal,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub markers: Vec<MarkerSpec>,
    pub events: Vec<SurvivalSpec>,
    #[serde(default)]
    pub sigma: SigmaStructure,
    #[serde(default)]
    pub psi: PsiStructure,
    #[serde(default)]
    pub xi: XiStructure,
}

impl ModelSpec {
    pub fn n_markers(&self) -> usize {
        self.markers.len()
    }

    pub fn n_events(&self) -> usize {
        self.events.len()
    }

    /// Event-type indices with a frailty term.
    pub fn frailty_types(&self) -> Vec<usize> {
        self.events
            .iter()
            .enumerate()
            .filter(|(_, e)| e.frailty)
            .map(|(i, _)| i)
            .collect()
    }

    /// Terminal (competing) event-type indices; these enter the delayed-entry
    /// correction.
    pub fn terminal_types(&self) -> Vec<usize> {
        self.events
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == EventKind::Terminal)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let spec: ModelSpec = serde_json::from_str(json)?;
        if spec.markers.is_empty() {
            return Err(Error::InvalidInput("model needs at least one marker".into()));
        }
        Ok(spec)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Resolve all quantile-knot bases against the data: marker bases use the
    /// marker's observation times, baseline bases the uncensored event times
    /// of their type.
    pub fn resolve(&self, data: &JointData) -> Result<ResolvedSpec> {
        let mut markers = Vec::with_capacity(self.markers.len());
        for (l, m) in self.markers.iter().enumerate() {
            let times = data.marker_times(l);
            markers.push(ResolvedMarker {
                name: m.name.clone().unwrap_or_else(|| format!("marker{}", l + 1)),
                fixed_covariates: m.fixed_covariates.clone(),
                time_basis: m.time_basis.resolve(&times)?,
                varying_coeff: m
                    .varying_coeff
                    .as_ref()
                    .map(|vc| -> Result<_> {
                        Ok((vc.covariate.clone(), vc.basis.resolve(&times)?))
                    })
                    .transpose()?,
                random_basis: m.random_basis.resolve(&times)?,
            });
        }
        let mut events = Vec::with_capacity(self.events.len());
        for (e, ev) in self.events.iter().enumerate() {
            let times = data.uncensored_event_times(e);
            let mut associations = Vec::new();
            for a in &ev.associations {
                if a.marker == 0 || a.marker > self.markers.len() {
                    return Err(Error::InvalidInput(format!(
                        "association references marker {} but the model has {} markers",
                        a.marker,
                        self.markers.len()
                    )));
                }
                for &k in &a.kinds {
                    associations.push((a.marker - 1, k));
                }
            }
            events.push(ResolvedEvent {
                name: ev.name.clone().unwrap_or_else(|| format!("event{}", e + 1)),
                kind: ev.kind,
                competing_group: ev.competing_group,
                fixed_covariates: ev.fixed_covariates.clone(),
                baseline_basis: ev.baseline_basis.resolve(&times)?,
                associations,
                frailty: ev.frailty,
            });
        }
        Ok(ResolvedSpec {
            markers,
            events,
            sigma: self.sigma,
            psi: self.psi,
            xi: self.xi,
        })
    }
}

/// Marker sub-model with concrete bases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedMarker {
    pub name: String,
    pub fixed_covariates: Vec<String>,
    pub time_basis: TimeBasis,
    pub varying_coeff: Option<(String, TimeBasis)>,
    pub random_basis: TimeBasis,
}

impl ResolvedMarker {
    /// Fixed-effect design dimension: covariates, time basis, then the
    /// varying-coefficient expansion.
    pub fn fixed_dim(&self) -> usize {
        self.fixed_covariates.len()
            + self.time_basis.dimension()
            + self.varying_coeff.as_ref().map_or(0, |(_, b)| b.dimension())
    }

    pub fn random_dim(&self) -> usize {
        self.random_basis.dimension()
    }
}

/// Survival sub-model with concrete bases and flattened association pairs
/// (0-based marker index, kind) in declared order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedEvent {
    pub name: String,
    pub kind: EventKind,
    pub competing_group: Option<usize>,
    pub fixed_covariates: Vec<String>,
    pub baseline_basis: TimeBasis,
    pub associations: Vec<(usize, AssocKind)>,
    pub frailty: bool,
}

impl ResolvedEvent {
    pub fn gamma_dim(&self) -> usize {
        self.fixed_covariates.len() + self.baseline_basis.dimension()
    }

    pub fn alpha_dim(&self) -> usize {
        self.associations.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedSpec {
    pub markers: Vec<ResolvedMarker>,
    pub events: Vec<ResolvedEvent>,
    pub sigma: SigmaStructure,
    pub psi: PsiStructure,
    pub xi: XiStructure,
}

impl ResolvedSpec {
    pub fn n_markers(&self) -> usize {
        self.markers.len()
    }

    pub fn n_events(&self) -> usize {
        self.events.len()
    }

    /// Total random-effect dimension `R`.
    pub fn total_random_dim(&self) -> usize {
        self.markers.iter().map(|m| m.random_dim()).sum()
    }

    /// Column offset of marker `l`'s random-effect block.
    pub fn random_offset(&self, l: usize) -> usize {
        self.markers[..l].iter().map(|m| m.random_dim()).sum()
    }

    pub fn frailty_types(&self) -> Vec<usize> {
        self.events
            .iter()
            .enumerate()
            .filter(|(_, e)| e.frailty)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn terminal_types(&self) -> Vec<usize> {
        self.events
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == EventKind::Terminal)
            .map(|(i, _)| i)
            .collect()
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisKind;

    #[test]
    fn spec_json_round_trip() {
        let json = r#"{
            "markers": [{
                "fixed_covariates": ["x1"],
                "time_basis": {"kind": "natural_cubic_spline", "degree": 3,
                               "interior_knots": [1.0, 2.0, 3.0, 4.0],
                               "boundary_knots": [0.0, 5.0], "with_intercept": true},
                "random_basis": {"kind": "natural_cubic_spline", "degree": 3,
                                 "interior_knots": [2.0],
                                 "boundary_knots": [0.0, 5.0], "with_intercept": true}
            }],
            "events": [{
                "kind": "terminal",
                "fixed_covariates": ["z1"],
                "baseline_basis": {"kind": "bspline", "degree": 3,
                                   "quantile_knots": 10, "with_intercept": true},
                "associations": [{"marker": 1, "kinds": ["value"]}],
                "frailty": false
            }],
            "sigma": "diagonal"
        }"#;
        let spec = ModelSpec::from_json(json).unwrap();
        assert_eq!(spec.n_markers(), 1);
        assert!(matches!(
            spec.events[0].baseline_basis,
            BasisConfig::Quantile { quantile_knots: 10, .. }
        ));
        let round = ModelSpec::from_json(&spec.to_json().unwrap()).unwrap();
        assert_eq!(round, spec);
    }

    #[test]
    fn quantile_basis_resolves_against_event_times() {
        let mut data = crate::data::JointData::default();
        for k in 0..60 {
            let t = 0.1 + (k as f64) * 0.08;
            data.individuals.push(crate::data::Individual {
                id: format!("{k}"),
                markers: vec![crate::data::MarkerObservation {
                    time: t,
                    marker: 0,
                    value: 0.0,
                }],
                events: vec![crate::data::EventRecord {
                    event_type: 0,
                    start: 0.0,
                    stop: t,
                    status: 1,
                }],
                ..Default::default()
            });
        }
        let spec = ModelSpec {
            markers: vec![MarkerSpec {
                name: None,
                fixed_covariates: vec![],
                time_basis: BasisConfig::Fixed(TimeBasis::poly(1, true)),
                varying_coeff: None,
                random_basis: BasisConfig::Fixed(TimeBasis::poly(1, true)),
            }],
            events: vec![SurvivalSpec {
                name: None,
                kind: EventKind::Terminal,
                competing_group: None,
                fixed_covariates: vec![],
                baseline_basis: BasisConfig::Quantile {
                    kind: BasisKind::BSpline,
                    degree: 3,
                    quantile_knots: 10,
                    with_intercept: true,
                },
                associations: vec![],
                frailty: false,
            }],
            sigma: SigmaStructure::Diagonal,
            psi: PsiStructure::Full,
            xi: XiStructure::Diagonal,
        };
        let resolved = spec.resolve(&data).unwrap();
        let b = &resolved.events[0].baseline_basis;
        assert_eq!(b.interior_knots.len(), 8);
        assert_eq!(b.dimension(), 12);
    }
}
