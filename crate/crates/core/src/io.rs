//! JSON and CSV file formats.
//!
//! * Rate matrix: `{"dim": n, "rates": [[..]], "edges": [[bool]]}`
//! * Model: `{"rates": <rate matrix>, "emissions": [{"mean": [..], "std": [..]}], "pi": [..]}`
//! * Observations CSV: `subject_id,time,v1[,v2,...]`
//! * Trajectory CSV: `state,dwell` (last row is the residual dwell)
//! * Decoded trajectories CSV: `subject_id,segment,state,dwell`

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cthmm::{CthmmError, CthmmModel, Gaussian, ObservationSequence};
use crate::ctmc::{CtmcError, RateMatrix, Trajectory};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error(transparent)]
    Ctmc(#[from] CtmcError),
    #[error(transparent)]
    Cthmm(#[from] CthmmError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateMatrixFile {
    pub dim: usize,
    pub rates: Vec<Vec<f64>>,
    pub edges: Vec<Vec<bool>>,
}

impl From<&RateMatrix> for RateMatrixFile {
    fn from(q: &RateMatrix) -> Self {
        let n = q.dim();
        Self {
            dim: n,
            rates: (0..n).map(|i| (0..n).map(|j| q.rates()[(i, j)]).collect()).collect(),
            edges: (0..n).map(|i| (0..n).map(|j| q.edges()[(i, j)]).collect()).collect(),
        }
    }
}

impl RateMatrixFile {
    pub fn to_rate_matrix(&self) -> Result<RateMatrix, IoError> {
        let n = self.dim;
        if self.rates.len() != n || self.rates.iter().any(|r| r.len() != n) {
            return Err(IoError::Malformed(format!("rates must be {n}x{n}")));
        }
        if self.edges.len() != n || self.edges.iter().any(|r| r.len() != n) {
            return Err(IoError::Malformed(format!("edges must be {n}x{n}")));
        }
        let raw = DMatrix::from_fn(n, n, |i, j| self.rates[i][j]);
        let mask = DMatrix::from_fn(n, n, |i, j| self.edges[i][j]);
        Ok(RateMatrix::validate(&raw, Some(&mask))?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub rates: RateMatrixFile,
    pub emissions: Vec<Gaussian>,
    pub pi: Vec<f64>,
}

impl From<&CthmmModel> for ModelFile {
    fn from(m: &CthmmModel) -> Self {
        Self { rates: (&m.rates).into(), emissions: m.emissions.clone(), pi: m.initial.clone() }
    }
}

impl ModelFile {
    pub fn to_model(&self) -> Result<CthmmModel, IoError> {
        Ok(CthmmModel::new(self.rates.to_rate_matrix()?, self.emissions.clone(), self.pi.clone())?)
    }
}

pub fn model_to_json(model: &CthmmModel) -> Result<String, IoError> {
    Ok(serde_json::to_string_pretty(&ModelFile::from(model))?)
}

pub fn model_from_json(text: &str) -> Result<CthmmModel, IoError> {
    let f: ModelFile = serde_json::from_str(text)?;
    f.to_model()
}

pub fn read_model(path: &Path) -> Result<CthmmModel, IoError> {
    model_from_json(&std::fs::read_to_string(path)?)
}

pub fn write_model(path: &Path, model: &CthmmModel) -> Result<(), IoError> {
    std::fs::write(path, model_to_json(model)?)?;
    Ok(())
}

/// Parse observations; rows are grouped by subject in order of first
/// appearance and sorted by time within a subject.
pub fn read_observations<R: Read>(reader: R) -> Result<Vec<ObservationSequence>, IoError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.len() < 3 || &headers[0] != "subject_id" || &headers[1] != "time" {
        return Err(IoError::Malformed("expected header subject_id,time,v1[,v2,...]".into()));
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: std::collections::HashMap<String, Vec<(f64, Vec<f64>)>> = std::collections::HashMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse = |s: &str| s.parse::<f64>().map_err(|_| IoError::Malformed(format!("row {}: '{s}' is not a number", line + 2)));
        let id = rec[0].to_string();
        let t = parse(&rec[1])?;
        let vals = rec.iter().skip(2).map(parse).collect::<Result<Vec<_>, _>>()?;
        if !groups.contains_key(&id) {
            order.push(id.clone());
        }
        groups.entry(id).or_default().push((t, vals));
    }
    let mut out = Vec::with_capacity(order.len());
    for id in order {
        let mut rows = groups.remove(&id).unwrap();
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (times, values) = rows.into_iter().unzip();
        out.push(ObservationSequence::new(id, times, values)?);
    }
    Ok(out)
}

pub fn write_observations<W: Write>(writer: W, sequences: &[ObservationSequence]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(writer);
    let d = sequences.first().map(|s| s.values[0].len()).unwrap_or(1);
    let mut header = vec!["subject_id".to_string(), "time".to_string()];
    header.extend((1..=d).map(|i| format!("v{i}")));
    w.write_record(&header)?;
    for s in sequences {
        for (t, v) in s.times.iter().zip(&s.values) {
            let mut row = vec![s.subject_id.clone(), t.to_string()];
            row.extend(v.iter().map(|x| x.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectory<R: Read>(reader: R) -> Result<Trajectory, IoError> {
    #[derive(Deserialize)]
    struct Row {
        state: usize,
        dwell: f64,
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let (states, dwell) = rdr.deserialize::<Row>().map(|r| r.map(|r| (r.state, r.dwell))).collect::<Result<Vec<_>, _>>()?.into_iter().unzip();
    Ok(Trajectory::new(states, dwell)?)
}

pub fn write_trajectory<W: Write>(writer: W, traj: &Trajectory) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["state", "dwell"])?;
    for (s, d) in traj.states.iter().zip(&traj.dwell_times) {
        w.write_record([s.to_string(), d.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// One row per decoded segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRow {
    pub subject_id: String,
    pub segment: usize,
    pub state: usize,
    pub dwell: f64,
}

pub fn write_segments<W: Write>(writer: W, rows: &[SegmentRow]) -> Result<(), IoError> {
    write_rows(writer, rows)
}

/// Any serializable records as CSV with a header from the field names.
pub fn write_rows<W: Write, T: Serialize>(writer: W, rows: &[T]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
