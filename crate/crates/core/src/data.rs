//! In-memory data schema and CSV ingestion.
//!
//! File formats (headers mandatory, UTF-8, '.' decimal, rows in any order):
//! * `markers.csv`: `id,time,marker,value` with 1-based marker indices
//! * `events.csv`: `id,event_type,start,stop,status` with 1-based types
//! * `individuals.csv` (optional): `id,entry,<covariate columns>`

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One longitudinal measurement; missingness is encoded by absence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerObservation {
    pub time: f64,
    /// 0-based marker index.
    pub marker: usize,
    pub value: f64,
}

/// One counting-process row `(start, stop]` with an event indicator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    /// 0-based event-type index.
    pub event_type: usize,
    pub start: f64,
    pub stop: f64,
    pub status: u8,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Individual {
    pub id: String,
    /// Delayed entry time; zero when the individual is followed from origin.
    pub entry: f64,
    pub covariates: BTreeMap<String, f64>,
    pub markers: Vec<MarkerObservation>,
    pub events: Vec<EventRecord>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct JointData {
    pub individuals: Vec<Individual>,
}

impl JointData {
    pub fn n_individuals(&self) -> usize {
        self.individuals.len()
    }

    /// Observation times of one marker across all individuals.
    pub fn marker_times(&self, marker: usize) -> Vec<f64> {
        self.individuals
            .iter()
            .flat_map(|ind| ind.markers.iter())
            .filter(|m| m.marker == marker)
            .map(|m| m.time)
            .collect()
    }

    /// Uncensored stop times of one event type across all individuals.
    pub fn uncensored_event_times(&self, event_type: usize) -> Vec<f64> {
        self.individuals
            .iter()
            .flat_map(|ind| ind.events.iter())
            .filter(|e| e.event_type == event_type && e.status == 1)
            .map(|e| e.stop)
            .collect()
    }

    /// Assemble from CSV files. Individuals are ordered by id (numerically
    /// when every id parses as an integer, lexicographically otherwise).
    pub fn from_csv_files(
        markers_path: &Path,
        events_path: &Path,
        individuals_path: Option<&Path>,
    ) -> Result<Self> {
        let mut by_id: HashMap<String, Individual> = HashMap::new();
        let mut order: Vec<String> = Vec::new();
        let touch = |by_id: &mut HashMap<String, Individual>, order: &mut Vec<String>, id: &str| {
            if !by_id.contains_key(id) {
                by_id.insert(
                    id.to_string(),
                    Individual {
                        id: id.to_string(),
                        ..Default::default()
                    },
                );
                order.push(id.to_string());
            }
        };

        if let Some(path) = individuals_path {
            let mut rdr = csv::Reader::from_path(path)?;
            let headers = rdr.headers()?.clone();
            let id_col = find_col(&headers, "id", path)?;
            let entry_col = headers.iter().position(|h| h == "entry");
            for rec in rdr.records() {
                let rec = rec?;
                let id = rec
                    .get(id_col)
                    .ok_or_else(|| bad_row(path, "missing id"))?
                    .trim()
                    .to_string();
                touch(&mut by_id, &mut order, &id);
                let ind = by_id.get_mut(&id).unwrap();
                if let Some(c) = entry_col {
                    ind.entry = parse_f64(rec.get(c).unwrap_or(""), "entry", path)?;
                    if !(ind.entry >= 0.0) {
                        return Err(Error::InvalidInput(format!(
                            "entry time must be >= 0 for individual {id}"
                        )));
                    }
                }
                for (j, h) in headers.iter().enumerate() {
                    if j == id_col || Some(j) == entry_col {
                        continue;
                    }
                    let v = parse_f64(rec.get(j).unwrap_or(""), h, path)?;
                    ind.covariates.insert(h.to_string(), v);
                }
            }
        }

        {
            let mut rdr = csv::Reader::from_path(markers_path)?;
            let headers = rdr.headers()?.clone();
            let (ci, ct, cm, cv) = (
                find_col(&headers, "id", markers_path)?,
                find_col(&headers, "time", markers_path)?,
                find_col(&headers, "marker", markers_path)?,
                find_col(&headers, "value", markers_path)?,
            );
            for rec in rdr.records() {
                let rec = rec?;
                let id = rec.get(ci).unwrap_or("").trim().to_string();
                touch(&mut by_id, &mut order, &id);
                let marker_1based = parse_usize(rec.get(cm).unwrap_or(""), "marker", markers_path)?;
                if marker_1based == 0 {
                    return Err(Error::InvalidInput("marker indices are 1-based".into()));
                }
                by_id.get_mut(&id).unwrap().markers.push(MarkerObservation {
                    time: parse_f64(rec.get(ct).unwrap_or(""), "time", markers_path)?,
                    marker: marker_1based - 1,
                    value: parse_f64(rec.get(cv).unwrap_or(""), "value", markers_path)?,
                });
            }
        }

        {
            let mut rdr = csv::Reader::from_path(events_path)?;
            let headers = rdr.headers()?.clone();
            let (ci, ce, cs, cp, cd) = (
                find_col(&headers, "id", events_path)?,
                find_col(&headers, "event_type", events_path)?,
                find_col(&headers, "start", events_path)?,
                find_col(&headers, "stop", events_path)?,
                find_col(&headers, "status", events_path)?,
            );
            for rec in rdr.records() {
                let rec = rec?;
                let id = rec.get(ci).unwrap_or("").trim().to_string();
                touch(&mut by_id, &mut order, &id);
                let type_1based = parse_usize(rec.get(ce).unwrap_or(""), "event_type", events_path)?;
                if type_1based == 0 {
                    return Err(Error::InvalidInput("event_type indices are 1-based".into()));
                }
                let status = parse_usize(rec.get(cd).unwrap_or(""), "status", events_path)?;
                if status > 1 {
                    return Err(Error::InvalidInput("status must be 0 or 1".into()));
                }
                by_id.get_mut(&id).unwrap().events.push(EventRecord {
                    event_type: type_1based - 1,
                    start: parse_f64(rec.get(cs).unwrap_or(""), "start", events_path)?,
                    stop: parse_f64(rec.get(cp).unwrap_or(""), "stop", events_path)?,
                    status: status as u8,
                });
            }
        }

        order.sort_by(|a, b| match (a.parse::<i64>(), b.parse::<i64>()) {
            (Ok(x), Ok(y)) => x.cmp(&y),
            _ => a.cmp(b),
        });
        let mut individuals = Vec::with_capacity(order.len());
        for id in order {
            let mut ind = by_id.remove(&id).unwrap();
            ind.markers
                .sort_by(|a, b| a.time.total_cmp(&b.time).then(a.marker.cmp(&b.marker)));
            ind.events
                .sort_by(|a, b| a.event_type.cmp(&b.event_type).then(a.start.total_cmp(&b.start)));
            individuals.push(ind);
        }
        Ok(JointData { individuals })
    }
}

fn find_col(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    headers.iter().position(|h| h == name).ok_or_else(|| {
        Error::InvalidInput(format!("{}: missing required column '{name}'", path.display()))
    })
}

fn bad_row(path: &Path, msg: &str) -> Error {
    Error::InvalidInput(format!("{}: {msg}", path.display()))
}

fn parse_f64(s: &str, field: &str, path: &Path) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| bad_row(path, &format!("cannot parse '{s}' as number in column '{field}'")))
}

fn parse_usize(s: &str, field: &str, path: &Path) -> Result<usize> {
    s.trim()
        .parse::<usize>()
        .map_err(|_| bad_row(path, &format!("cannot parse '{s}' as integer in column '{field}'")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(dir: &Path, name: &str, content: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        let mut f = std::fs::File::create(&p).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        p
    }

    #[test]
    fn csv_round_trip_and_ordering() {
        let dir = std::env::temp_dir().join("jointva_data_test");
        std::fs::create_dir_all(&dir).unwrap();
        let markers = write_tmp(
            &dir,
            "m.csv",
            "id,time,marker,value\n10,0.5,1,1.25\n2,0.0,1,-0.5\n2,1.0,2,3.0\n",
        );
        let events = write_tmp(
            &dir,
            "e.csv",
            "id,event_type,start,stop,status\n10,1,0,2.5,1\n2,1,0,4.0,0\n",
        );
        let individuals = write_tmp(&dir, "i.csv", "id,entry,x1\n10,0.0,0.3\n2,0.5,-1.0\n");

        let data = JointData::from_csv_files(&markers, &events, Some(&individuals)).unwrap();
        assert_eq!(data.n_individuals(), 2);
        // Numeric ordering: 2 before 10.
        assert_eq!(data.individuals[0].id, "2");
        assert_eq!(data.individuals[1].id, "10");
        assert_eq!(data.individuals[0].entry, 0.5);
        assert_eq!(data.individuals[0].covariates["x1"], -1.0);
        assert_eq!(data.individuals[0].markers.len(), 2);
        assert_eq!(data.individuals[1].events[0].status, 1);
        assert_eq!(data.uncensored_event_times(0), vec![2.5]);
        assert_eq!(data.marker_times(1), vec![1.0]);
    }

    #[test]
    fn missing_column_is_an_error() {
        let dir = std::env::temp_dir().join("jointva_data_test2");
        std::fs::create_dir_all(&dir).unwrap();
        let markers = write_tmp(&dir, "m.csv", "id,time,value\n1,0.5,1.25\n");
        let events = write_tmp(&dir, "e.csv", "id,event_type,start,stop,status\n");
        let err = JointData::from_csv_files(&markers, &events, None).unwrap_err();
        assert!(err.to_string().contains("marker"));
    }
}
