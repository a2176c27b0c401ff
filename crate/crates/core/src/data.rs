//! Repeated cross-section samples, CSV ingestion and overlap diagnostics.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One repeated cross-section dataset.
///
/// `dy` holds the outcome change `Y(i,1) - Y(i,0)`, `d` the treatment
/// indicator, `x` the (possibly high-dimensional) covariates that enter the
/// effect linearly and `z` the scalar covariate that enters it smoothly.
/// All invariants are checked once at construction; the value is immutable
/// afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    dy: DVector<f64>,
    d: Vec<bool>,
    x: DMatrix<f64>,
    z: DVector<f64>,
}

impl Sample {
    pub fn new(dy: DVector<f64>, d: Vec<bool>, x: DMatrix<f64>, z: DVector<f64>) -> Result<Self> {
        let n = dy.len();
        if d.len() != n || x.nrows() != n || z.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "dy has {n} rows, d {}, x {}, z {}",
                d.len(),
                x.nrows(),
                z.len()
            )));
        }
        if n < 2 {
            return Err(Error::InvalidSample(format!("need at least 2 rows, got {n}")));
        }
        if x.ncols() == 0 {
            return Err(Error::InvalidSample("need at least one x column".into()));
        }
        if let Some(row) = dy.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue { row, col: "dy".into() });
        }
        if let Some(row) = z.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue { row, col: "z".into() });
        }
        for (j, col) in x.column_iter().enumerate() {
            if let Some(row) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteValue { row, col: format!("x{}", j + 1) });
            }
        }
        let treated = d.iter().filter(|&&t| t).count();
        if treated == 0 {
            return Err(Error::DegenerateTreatment(0));
        }
        if treated == n {
            return Err(Error::DegenerateTreatment(1));
        }
        Ok(Sample { dy, d, x, z })
    }

    pub fn n(&self) -> usize {
        self.dy.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn dy(&self) -> &DVector<f64> {
        &self.dy
    }

    pub fn d(&self) -> &[bool] {
        &self.d
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn z(&self) -> &DVector<f64> {
        &self.z
    }

    pub fn n_treated(&self) -> usize {
        self.d.iter().filter(|&&t| t).count()
    }

    pub fn treated_fraction(&self) -> f64 {
        self.n_treated() as f64 / self.n() as f64
    }

    /// Rows reordered by `perm` (row `i` of the result is row `perm[i]`).
    pub fn permute_rows(&self, perm: &[usize]) -> Result<Sample> {
        if perm.len() != self.n() {
            return Err(Error::DimensionMismatch("permutation length".into()));
        }
        let dy = DVector::from_iterator(perm.len(), perm.iter().map(|&i| self.dy[i]));
        let z = DVector::from_iterator(perm.len(), perm.iter().map(|&i| self.z[i]));
        let d = perm.iter().map(|&i| self.d[i]).collect();
        let x = self.x.select_rows(perm);
        Sample::new(dy, d, x, z)
    }

    pub fn meta(&self) -> SampleMeta {
        SampleMeta { n: self.n(), p: self.p(), treated_fraction: self.treated_fraction() }
    }
}

/// Summary of a sample for reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub n: usize,
    pub p: usize,
    pub treated_fraction: f64,
}

/// Ground truth attached to simulated samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthInfo {
    /// Effect coefficients, treated trend minus control trend.
    pub beta0: Vec<f64>,
    pub beta_treated: Vec<f64>,
    pub beta_control: Vec<f64>,
    /// Propensity index coefficients.
    pub theta: Vec<f64>,
    #[serde(skip, default = "default_f0")]
    pub f0: fn(f64) -> f64,
}

impl PartialEq for TruthInfo {
    // the smooth component is compared by its values on a few points
    fn eq(&self, other: &Self) -> bool {
        self.beta0 == other.beta0
            && self.beta_treated == other.beta_treated
            && self.beta_control == other.beta_control
            && self.theta == other.theta
            && [-1.0, 0.0, 0.5, 2.0].iter().all(|&z| (self.f0)(z) == (other.f0)(z))
    }
}

fn default_f0() -> fn(f64) -> f64 {
    f64::exp
}

fn dot(a: &[f64], x: impl Iterator<Item = f64>) -> f64 {
    a.iter().zip(x).map(|(a, b)| a * b).sum()
}

impl TruthInfo {
    pub fn pi0(&self, x: &[f64], _z: f64) -> f64 {
        let eta = dot(&self.theta, x.iter().copied());
        1.0 - 1.0 / (1.0 + eta.exp())
    }

    pub fn phi1(&self, x: &[f64], z: f64) -> f64 {
        dot(&self.beta_treated, x.iter().copied()) + (self.f0)(z)
    }

    pub fn phi0(&self, x: &[f64], _z: f64) -> f64 {
        dot(&self.beta_control, x.iter().copied())
    }

    /// Conditional effect on the treated, `x'beta0 + f0(z)`.
    pub fn att(&self, x: &[f64], z: f64) -> f64 {
        dot(&self.beta0, x.iter().copied()) + (self.f0)(z)
    }
}

/// How the x covariates are located in a CSV header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XColumns {
    List(Vec<String>),
    Prefix(String),
}

/// Outcome source: a ready-made difference or a post/pre pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeColumns {
    Diff(String),
    Pair { post: String, pre: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub d: String,
    pub z: String,
    pub x: XColumns,
    pub outcome: OutcomeColumns,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        ColumnSchema {
            d: "d".into(),
            z: "z".into(),
            x: XColumns::Prefix("x".into()),
            outcome: OutcomeColumns::Diff("dy".into()),
        }
    }
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::MissingColumn(name.to_string()))
}

fn parse_cell(record: &csv::StringRecord, idx: usize, row: usize, col: &str) -> Result<f64> {
    let raw = record.get(idx).unwrap_or("").trim();
    let v: f64 = raw.parse().map_err(|_| Error::ParseValue {
        row,
        col: col.to_string(),
        value: raw.to_string(),
    })?;
    if !v.is_finite() {
        return Err(Error::NonFiniteValue { row, col: col.to_string() });
    }
    Ok(v)
}

/// Reads a wide CSV (header required, `#` lines ignored) into a [`Sample`].
pub fn load_csv(path: impl AsRef<Path>, schema: &ColumnSchema) -> Result<Sample> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers()?.clone();

    let d_idx = column_index(&headers, &schema.d)?;
    let z_idx = column_index(&headers, &schema.z)?;
    let x_cols: Vec<(usize, String)> = match &schema.x {
        XColumns::List(names) => names
            .iter()
            .map(|name| column_index(&headers, name).map(|i| (i, name.clone())))
            .collect::<Result<_>>()?,
        XColumns::Prefix(prefix) => {
            let reserved = [schema.d.as_str(), schema.z.as_str()];
            let cols: Vec<_> = headers
                .iter()
                .enumerate()
                .filter(|(_, h)| h.starts_with(prefix.as_str()) && !reserved.contains(h))
                .map(|(i, h)| (i, h.to_string()))
                .collect();
            if cols.is_empty() {
                return Err(Error::MissingColumn(format!("{prefix}*")));
            }
            cols
        }
    };
    let outcome_idx = match &schema.outcome {
        OutcomeColumns::Diff(name) => (column_index(&headers, name)?, None),
        OutcomeColumns::Pair { post, pre } => {
            (column_index(&headers, post)?, Some(column_index(&headers, pre)?))
        }
    };

    let mut dy = Vec::new();
    let mut d = Vec::new();
    let mut z = Vec::new();
    let mut x_rows: Vec<f64> = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let dv = parse_cell(&record, d_idx, row, &schema.d)?;
        d.push(if dv == 1.0 {
            true
        } else if dv == 0.0 {
            false
        } else {
            return Err(Error::InvalidSample(format!("row {row}: treatment must be 0 or 1, got {dv}")));
        });
        z.push(parse_cell(&record, z_idx, row, &schema.z)?);
        let outcome = match (&schema.outcome, outcome_idx) {
            (OutcomeColumns::Diff(name), (i, None)) => parse_cell(&record, i, row, name)?,
            (OutcomeColumns::Pair { post, pre }, (i, Some(j))) => {
                parse_cell(&record, i, row, post)? - parse_cell(&record, j, row, pre)?
            }
            _ => unreachable!("outcome schema and indices agree"),
        };
        dy.push(outcome);
        for (idx, name) in &x_cols {
            x_rows.push(parse_cell(&record, *idx, row, name)?);
        }
    }
    let n = dy.len();
    let x = DMatrix::from_row_slice(n, x_cols.len(), &x_rows);
    Sample::new(DVector::from_vec(dy), d, x, DVector::from_vec(z))
}

/// Writes `d, dy, z, x1..xp` with shortest round-trip float formatting.
pub fn write_csv(sample: &Sample, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv_to(sample, &mut file).map_err(|e| Error::io(path, e))
}

pub fn write_csv_to<W: Write>(sample: &Sample, out: &mut W) -> std::io::Result<()> {
    let mut header = String::from("d,dy,z");
    for j in 1..=sample.p() {
        header.push_str(&format!(",x{j}"));
    }
    writeln!(out, "{header}")?;
    for i in 0..sample.n() {
        let mut line = format!("{},{},{}", u8::from(sample.d[i]), sample.dy[i], sample.z[i]);
        for j in 0..sample.p() {
            line.push(',');
            line.push_str(&sample.x[(i, j)].to_string());
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Overlap summary of (clipped) propensity scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapDiagnostics {
    pub min_pi_hat: f64,
    pub max_pi_hat: f64,
    pub n_clipped: usize,
    /// Mean of the clipped scores, i.e. the implied treated share.
    pub treated_fraction: f64,
}

/// Clips `pi_hat` into `[epsilon, 1 - epsilon]` for reporting and counts
/// how many entries the clip moved.
pub fn validate_overlap(pi_hat: &[f64], epsilon: f64) -> OverlapDiagnostics {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut n_clipped = 0;
    let mut sum = 0.0;
    for &p in pi_hat {
        let c = p.clamp(epsilon, 1.0 - epsilon);
        if c != p {
            n_clipped += 1;
        }
        min = min.min(c);
        max = max.max(c);
        sum += c;
    }
    OverlapDiagnostics {
        min_pi_hat: min,
        max_pi_hat: max,
        n_clipped,
        treated_fraction: sum / pi_hat.len().max(1) as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_three_row_file() {
        let f = write_tmp("d,dy,z,x1,x2\n1,0.5,0.1,1,2\n0,1.5,0.2,3,4\n1,-1,0.3,5,6\n");
        let s = load_csv(f.path(), &ColumnSchema::default()).unwrap();
        assert_eq!((s.n(), s.p()), (3, 2));
        assert_eq!(s.x()[(1, 1)], 4.0);
        assert_eq!(s.d(), &[true, false, true]);
    }

    #[test]
    fn pair_outcome_is_differenced() {
        let f = write_tmp("d,y_post,y_pre,z,x1\n1,2.0,0.5,0,1\n0,1,1,1,2\n");
        let schema = ColumnSchema {
            outcome: OutcomeColumns::Pair { post: "y_post".into(), pre: "y_pre".into() },
            ..ColumnSchema::default()
        };
        let s = load_csv(f.path(), &schema).unwrap();
        assert_eq!(s.dy()[0], 1.5);
        assert_eq!(s.dy()[1], 0.0);
    }

    #[test]
    fn all_treated_is_rejected() {
        let f = write_tmp("d,dy,z,x1\n1,0,0,1\n1,1,1,2\n1,2,2,3\n");
        let err = load_csv(f.path(), &ColumnSchema::default()).unwrap_err();
        assert!(matches!(err, Error::DegenerateTreatment(1)));
    }

    #[test]
    fn missing_and_nonfinite_columns() {
        let f = write_tmp("d,dy,x1\n1,0,1\n0,1,2\n");
        assert!(matches!(load_csv(f.path(), &ColumnSchema::default()), Err(Error::MissingColumn(c)) if c == "z"));
        let f = write_tmp("d,dy,z,x1\n1,0,0,1\n0,NaN,1,2\n");
        assert!(matches!(
            load_csv(f.path(), &ColumnSchema::default()),
            Err(Error::NonFiniteValue { row: 1, .. })
        ));
    }

    #[test]
    fn explicit_x_list_keeps_requested_order() {
        let f = write_tmp("d,dy,z,a,b\n1,0,0,1,2\n0,1,1,3,4\n");
        let schema = ColumnSchema { x: XColumns::List(vec!["b".into(), "a".into()]), ..Default::default() };
        let s = load_csv(f.path(), &schema).unwrap();
        assert_eq!(s.x()[(0, 0)], 2.0);
    }

    #[test]
    fn construction_rejects_bad_shapes() {
        let x = DMatrix::zeros(3, 1);
        let err = Sample::new(DVector::zeros(3), vec![true, false], x, DVector::zeros(3));
        assert!(matches!(err, Err(Error::DimensionMismatch(_))));
        let err = Sample::new(
            DVector::from_vec(vec![0.0, f64::INFINITY]),
            vec![true, false],
            DMatrix::zeros(2, 1),
            DVector::zeros(2),
        );
        assert!(matches!(err, Err(Error::NonFiniteValue { row: 1, .. })));
    }

    #[test]
    fn overlap_examples() {
        let o = validate_overlap(&[0.2, 0.5, 0.8], 0.01);
        assert_eq!(o.n_clipped, 0);
        assert_eq!((o.min_pi_hat, o.max_pi_hat), (0.2, 0.8));
        let o = validate_overlap(&[0.001, 0.5], 0.01);
        assert_eq!(o.n_clipped, 1);
        assert_eq!(o.min_pi_hat, 0.01);
    }

    #[test]
    fn csv_round_trip_is_bitwise() {
        let x = DMatrix::from_row_slice(3, 2, &[0.1, -2.5e-7, 1.0 / 3.0, 4.0, -0.0, 1e300]);
        let s = Sample::new(
            DVector::from_vec(vec![0.3, -1.0 / 7.0, 2.0]),
            vec![true, false, false],
            x,
            DVector::from_vec(vec![std::f64::consts::PI, 0.0, -1.5]),
        )
        .unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_csv(&s, f.path()).unwrap();
        let back = load_csv(f.path(), &ColumnSchema::default()).unwrap();
        assert_eq!(back, s);
    }
}
