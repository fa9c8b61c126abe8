//! Identifiability and data-consistency checks. A fit refuses to start when
//! any error-severity diagnostic is present.

use std::collections::HashSet;

use crate::data::JointData;
use crate::spec::{EventKind, ResolvedSpec, SigmaStructure, XiStructure};
use crate::{Diagnostic, Severity};

fn error(code: &str, message: String) -> Diagnostic {
    Diagnostic {
        severity: Severity::Error,
        code: code.into(),
        message,
    }
}

fn warning(code: &str, message: String) -> Diagnostic {
    Diagnostic {
        severity: Severity::Warning,
        code: code.into(),
        message,
    }
}

/// Validate a resolved model against the data.
pub fn validate(spec: &ResolvedSpec, data: &JointData) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let n_markers = spec.n_markers();
    let n_events = spec.n_events();

    // Covariates referenced by the model must exist on every individual.
    let mut needed: Vec<&str> = Vec::new();
    for m in &spec.markers {
        needed.extend(m.fixed_covariates.iter().map(String::as_str));
        if let Some((name, _)) = &m.varying_coeff {
            needed.push(name);
        }
    }
    for e in &spec.events {
        needed.extend(e.fixed_covariates.iter().map(String::as_str));
    }
    needed.sort_unstable();
    needed.dedup();
    for name in needed {
        let missing: Vec<&str> = data
            .individuals
            .iter()
            .filter(|ind| !ind.covariates.contains_key(name))
            .map(|ind| ind.id.as_str())
            .take(4)
            .collect();
        if !missing.is_empty() {
            diags.push(error(
                "missing-covariate",
                format!(
                    "covariate '{name}' missing for individual(s) {}{}",
                    missing.join(", "),
                    if missing.len() == 4 { ", ..." } else { "" }
                ),
            ));
        }
    }

    // Free Sigma covariances need co-observed marker pairs.
    if spec.sigma == SigmaStructure::Full && n_markers > 1 {
        let mut co_observed: HashSet<(usize, usize)> = HashSet::new();
        for ind in &data.individuals {
            let mut i = 0;
            while i < ind.markers.len() {
                let t = ind.markers[i].time;
                let mut j = i;
                while j < ind.markers.len() && ind.markers[j].time == t {
                    j += 1;
                }
                for a in i..j {
                    for b in (a + 1)..j {
                        let (ma, mb) = (ind.markers[a].marker, ind.markers[b].marker);
                        if ma != mb {
                            co_observed.insert((ma.min(mb), ma.max(mb)));
                        }
                    }
                }
                i = j;
            }
        }
        for a in 0..n_markers {
            for b in (a + 1)..n_markers {
                if !co_observed.contains(&(a, b)) {
                    diags.push(error(
                        "sigma-not-identified",
                        format!(
                            "free covariance between markers {} and {} is not identifiable: \
                             the pair is never observed at the same time",
                            a + 1,
                            b + 1
                        ),
                    ));
                }
            }
        }
    }

    // Frailty covariances across competing event types are not identifiable.
    if spec.xi == XiStructure::Full {
        let frailty_terminal: Vec<usize> = spec
            .events
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == EventKind::Terminal && e.frailty)
            .map(|(i, _)| i)
            .collect();
        for i in 0..frailty_terminal.len() {
            for j in (i + 1)..frailty_terminal.len() {
                let (a, b) = (frailty_terminal[i], frailty_terminal[j]);
                let same_group = spec.events[a].competing_group.unwrap_or(0)
                    == spec.events[b].competing_group.unwrap_or(0);
                if same_group {
                    diags.push(error(
                        "xi-competing-frailty",
                        format!(
                            "frailty covariance between competing event types {} and {} \
                             is not identifiable; use a diagonal frailty covariance",
                            a + 1,
                            b + 1
                        ),
                    ));
                }
            }
        }
    }

    // Per-individual event-record structure.
    for ind in &data.individuals {
        for rec in &ind.events {
            if rec.event_type >= n_events {
                diags.push(error(
                    "event-type-range",
                    format!(
                        "individual {}: event type {} exceeds the {} declared types",
                        ind.id,
                        rec.event_type + 1,
                        n_events
                    ),
                ));
                continue;
            }
            if !(rec.start < rec.stop) {
                diags.push(error(
                    "bad-interval",
                    format!(
                        "individual {}: event record ({}, {}] is not a valid interval",
                        ind.id, rec.start, rec.stop
                    ),
                ));
            }
            if rec.stop <= ind.entry {
                diags.push(error(
                    "event-before-entry",
                    format!(
                        "individual {}: event stop {} is at or before the entry time {}",
                        ind.id, rec.stop, ind.entry
                    ),
                ));
            }
        }
        for m in &ind.markers {
            if m.marker >= n_markers {
                diags.push(error(
                    "marker-range",
                    format!(
                        "individual {}: marker index {} exceeds the {} declared markers",
                        ind.id,
                        m.marker + 1,
                        n_markers
                    ),
                ));
            }
        }
        for (e, ev) in spec.events.iter().enumerate() {
            let mut recs: Vec<_> = ind.events.iter().filter(|r| r.event_type == e).collect();
            recs.sort_by(|a, b| a.start.total_cmp(&b.start));
            match ev.kind {
                EventKind::Terminal => {
                    if recs.len() > 1 {
                        diags.push(error(
                            "terminal-duplicate",
                            format!(
                                "individual {}: terminal type {} has {} records, at most one allowed",
                                ind.id,
                                e + 1,
                                recs.len()
                            ),
                        ));
                    }
                    if let Some(r) = recs.first() {
                        if (r.start - ind.entry).abs() > 1e-9 * (1.0 + ind.entry.abs()) {
                            diags.push(error(
                                "terminal-start",
                                format!(
                                    "individual {}: terminal record of type {} starts at {} \
                                     instead of the entry time {}",
                                    ind.id,
                                    e + 1,
                                    r.start,
                                    ind.entry
                                ),
                            ));
                        }
                    }
                }
                EventKind::Recurrent => {
                    if let Some(first) = recs.first() {
                        if (first.start - ind.entry).abs() > 1e-9 * (1.0 + ind.entry.abs()) {
                            diags.push(error(
                                "recurrent-gap",
                                format!(
                                    "individual {}: recurrent chain of type {} starts at {} \
                                     instead of the entry time {}",
                                    ind.id,
                                    e + 1,
                                    first.start,
                                    ind.entry
                                ),
                            ));
                        }
                    }
                    for w in recs.windows(2) {
                        if (w[1].start - w[0].stop).abs() > 1e-9 * (1.0 + w[0].stop.abs()) {
                            diags.push(error(
                                "recurrent-gap",
                                format!(
                                    "individual {}: recurrent chain of type {} has a gap \
                                     between stop {} and start {}",
                                    ind.id,
                                    e + 1,
                                    w[0].stop,
                                    w[1].start
                                ),
                            ));
                        }
                    }
                }
            }
        }
    }

    // Sparse markers make the fixed effects fragile.
    for (l, m) in spec.markers.iter().enumerate() {
        let count = data
            .individuals
            .iter()
            .map(|ind| ind.markers.iter().filter(|o| o.marker == l).count())
            .sum::<usize>();
        if count < 2 * m.fixed_dim() {
            diags.push(warning(
                "sparse-marker",
                format!(
                    "marker {} has only {count} observations for {} fixed effects",
                    l + 1,
                    m.fixed_dim()
                ),
            ));
        }
    }

    diags
}

/// Keep only the error-severity diagnostics.
pub fn errors_only(diags: &[Diagnostic]) -> Vec<Diagnostic> {
    diags
        .iter()
        .filter(|d| d.severity == Severity::Error)
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{EventRecord, Individual, MarkerObservation};
    use crate::spec::tests_support::{small_multivariate_spec, small_univariate_spec};

    fn ok_individual() -> Individual {
        Individual {
            id: "1".into(),
            entry: 0.0,
            covariates: [("x1".to_string(), 0.1), ("z1".to_string(), -0.4)]
                .into_iter()
                .collect(),
            markers: (0..6)
                .map(|k| MarkerObservation {
                    time: k as f64 * 0.3,
                    marker: 0,
                    value: 0.0,
                })
                .collect(),
            events: vec![EventRecord {
                event_type: 0,
                start: 0.0,
                stop: 2.0,
                status: 1,
            }],
        }
    }

    #[test]
    fn well_formed_univariate_scenario_is_clean() {
        let spec = small_univariate_spec();
        let data = JointData {
            individuals: vec![ok_individual(), ok_individual()],
        };
        let diags = validate(&spec, &data);
        assert!(errors_only(&diags).is_empty(), "{diags:?}");
    }

    #[test]
    fn never_co_observed_pair_with_full_sigma() {
        let mut spec = small_multivariate_spec();
        spec.sigma = SigmaStructure::Full;
        let mut ind = ok_individual();
        ind.markers = vec![
            MarkerObservation {
                time: 0.0,
                marker: 0,
                value: 0.0,
            },
            MarkerObservation {
                time: 1.0,
                marker: 1,
                value: 0.0,
            },
        ];
        ind.events.push(EventRecord {
            event_type: 1,
            start: 0.0,
            stop: 2.0,
            status: 0,
        });
        let data = JointData {
            individuals: vec![ind],
        };
        let diags = validate(&spec, &data);
        let errs = errors_only(&diags);
        assert!(errs.iter().any(|d| d.code == "sigma-not-identified"
            && d.message.contains("markers 1 and 2")));
    }

    #[test]
    fn competing_frailty_covariance_rejected() {
        let mut spec = small_multivariate_spec();
        // Make both events terminal with frailty and request a full Xi.
        spec.events[1].kind = EventKind::Terminal;
        spec.events[0].frailty = true;
        spec.events[1].frailty = true;
        spec.xi = XiStructure::Full;
        let data = JointData {
            individuals: vec![ok_individual()],
        };
        let diags = validate(&spec, &data);
        assert!(errors_only(&diags)
            .iter()
            .any(|d| d.code == "xi-competing-frailty"));
    }

    #[test]
    fn recurrent_gaps_and_entry_violations_detected() {
        let spec = small_multivariate_spec();
        let mut ind = ok_individual();
        ind.markers.push(MarkerObservation {
            time: 0.2,
            marker: 1,
            value: 0.0,
        });
        ind.entry = 0.5;
        ind.events = vec![
            EventRecord {
                event_type: 0,
                start: 0.5,
                stop: 0.4,
                status: 1,
            },
            EventRecord {
                event_type: 1,
                start: 0.5,
                stop: 1.0,
                status: 1,
            },
            EventRecord {
                event_type: 1,
                start: 1.5,
                stop: 2.0,
                status: 0,
            },
        ];
        let data = JointData {
            individuals: vec![ind],
        };
        let diags = validate(&spec, &data);
        let codes: Vec<&str> = diags.iter().map(|d| d.code.as_str()).collect();
        assert!(codes.contains(&"bad-interval"));
        assert!(codes.contains(&"event-before-entry"));
        assert!(codes.contains(&"recurrent-gap"));
    }
}
