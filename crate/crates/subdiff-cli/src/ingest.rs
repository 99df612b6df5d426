//! CSV ingestion of equally spaced observations.

use std::path::Path;

use subdiff::simulate::{ObservedSeries, Origin};

use crate::error::CliError;

/// Relative tolerance on the spacing of consecutive time stamps.
pub const SPACING_TOL: f64 = 1e-9;

/// Column names of the time and value fields.
#[derive(Clone, Debug)]
pub struct Schema {
    pub time: String,
    pub value: String,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            time: "t".into(),
            value: "y".into(),
        }
    }
}

/// Reads `path` and infers the sampling interval from the time column, or
/// takes `delta` as given (the time column is then not parsed). Line numbers
/// in errors count the header as line 1.
pub fn ingest_csv(path: &Path, schema: &Schema, delta: Option<f64>) -> Result<ObservedSeries, CliError> {
    let name = path.display().to_string();
    let parse = |line: usize, message: String| CliError::Parse {
        path: name.clone(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Io {
            path: name.clone(),
            message: e.to_string(),
        })?;
    let headers = rdr.headers().map_err(|e| parse(1, e.to_string()))?.clone();
    if headers.is_empty() || headers.iter().all(|h| h.is_empty()) {
        return Err(parse(1, "empty file".into()));
    }
    let column = |c: &str| {
        headers
            .iter()
            .position(|h| h == c)
            .ok_or_else(|| parse(1, format!("missing column `{c}`")))
    };
    let vi = column(&schema.value)?;
    let ti = if delta.is_none() { Some(column(&schema.time)?) } else { None };

    let mut times = Vec::new();
    let mut values = Vec::new();
    let mut bad = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| parse(line, e.to_string()))?;
        let cell = |i: usize, col: &str| -> Result<f64, String> {
            let s = rec.get(i).ok_or_else(|| format!("missing `{col}`"))?;
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| format!("`{col}` = {s:?} is not a finite number"))
        };
        match cell(vi, &schema.value) {
            Ok(v) => values.push(v),
            Err(m) => bad.push((line, m)),
        }
        if let Some(ti) = ti {
            match cell(ti, &schema.time) {
                Ok(t) => times.push(t),
                Err(m) => bad.push((line, m)),
            }
        }
    }
    if let Some((line, _)) = bad.first() {
        let message = bad.iter().map(|(l, m)| format!("line {l}: {m}")).collect::<Vec<_>>().join("; ");
        return Err(parse(*line, message));
    }
    if values.is_empty() {
        return Err(parse(2, "no data rows".into()));
    }
    if values.len() < 2 {
        return Err(parse(2, "need at least two observations".into()));
    }
    let delta = match delta {
        Some(d) => d,
        None => infer_delta(&name, &times)?,
    };
    Ok(ObservedSeries::new(delta, values, Origin::Ingested { source: name })?)
}

/// Median spacing, with every step checked against it. Offending rows are
/// reported as file line numbers of the later time stamp.
fn infer_delta(path: &str, times: &[f64]) -> Result<f64, CliError> {
    let steps: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    let mut sorted = steps.clone();
    sorted.sort_by(f64::total_cmp);
    let delta = sorted[sorted.len() / 2];
    if !(delta > 0.0) {
        return Err(CliError::Spacing {
            path: path.into(),
            rows: (0..steps.len()).filter(|&i| !(steps[i] > 0.0)).map(|i| i + 3).collect(),
            delta,
        });
    }
    let rows: Vec<usize> = steps
        .iter()
        .enumerate()
        .filter(|(_, s)| ((*s - delta) / delta).abs() > SPACING_TOL)
        .map(|(i, _)| i + 3)
        .collect();
    if rows.is_empty() {
        Ok(delta)
    } else {
        Err(CliError::Spacing {
            path: path.into(),
            rows,
            delta,
        })
    }
}

/// Writes `t,y` rows.
pub fn write_series(path: &Path, series: &ObservedSeries) -> Result<(), CliError> {
    let io = |e: csv::Error| CliError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["t", "y"]).map_err(io)?;
    for (t, y) in series.rows() {
        w.write_record([fmt(t), fmt(y)]).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Shortest representation that round-trips.
pub fn fmt(v: f64) -> String {
    format!("{v:?}")
}
