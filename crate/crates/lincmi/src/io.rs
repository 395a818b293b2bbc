//! CSV ingestion for moment-inequality data.
//!
//! One file with a header row; columns `y_1..y_k`, `x_1_1..x_k_p` (row-major
//! per-observation coefficient matrix), `z_1..z_dz`; one data row per
//! observation. The shape `(k, p, d_z)` comes from a sidecar config.

use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::moments::ObservationSet;

/// Declared shape of a data file.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct ProblemShape {
    pub k: usize,
    #[serde(default)]
    pub p: usize,
    pub d_z: usize,
}

/// Expected header for a shape, in file order.
pub fn expected_columns(shape: &ProblemShape) -> Vec<String> {
    let mut cols = Vec::new();
    for j in 1..=shape.k {
        cols.push(format!("y_{j}"));
    }
    for j in 1..=shape.k {
        for c in 1..=shape.p {
            cols.push(format!("x_{j}_{c}"));
        }
    }
    for d in 1..=shape.d_z {
        cols.push(format!("z_{d}"));
    }
    cols
}

/// Reads an observation set from CSV. Rows with missing or unparseable values
/// are rejected with the offending line number; the sampling frame has no
/// missingness, so there is nothing sensible to impute.
pub fn read_observations(path: &Path, shape: &ProblemShape) -> Result<ObservationSet> {
    if shape.k == 0 {
        return Err(Error::InvalidConfig("k must be >= 1".into()));
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let expected = expected_columns(shape);
    {
        let headers = reader.headers()?;
        let got: Vec<String> = headers.iter().map(|h| h.trim().to_string()).collect();
        if got != expected {
            return Err(Error::InvalidConfig(format!(
                "csv header mismatch: expected [{}], got [{}]",
                expected.join(","),
                got.join(",")
            )));
        }
    }

    let width = expected.len();
    let mut y_rows: Vec<f64> = Vec::new();
    let mut x_mats: Vec<DMatrix<f64>> = Vec::new();
    let mut z_rows: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != width {
            return Err(Error::CsvData {
                line,
                msg: format!("expected {width} fields, got {}", record.len()),
            });
        }
        let mut vals = Vec::with_capacity(width);
        for (idx, field) in record.iter().enumerate() {
            let trimmed = field.trim();
            if trimmed.is_empty() {
                return Err(Error::CsvData {
                    line,
                    msg: format!("missing value in column '{}'", expected[idx]),
                });
            }
            let v: f64 = trimmed.parse().map_err(|_| Error::CsvData {
                line,
                msg: format!("cannot parse '{}' in column '{}'", trimmed, expected[idx]),
            })?;
            if !v.is_finite() {
                return Err(Error::CsvData {
                    line,
                    msg: format!("non-finite value in column '{}'", expected[idx]),
                });
            }
            vals.push(v);
        }
        y_rows.extend_from_slice(&vals[..shape.k]);
        let x_flat = &vals[shape.k..shape.k + shape.k * shape.p];
        x_mats.push(DMatrix::from_row_slice(shape.k, shape.p, x_flat));
        z_rows.extend_from_slice(&vals[shape.k + shape.k * shape.p..]);
        n += 1;
    }
    if n == 0 {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let y = DMatrix::from_row_slice(n, shape.k, &y_rows);
    let z = DMatrix::from_row_slice(n, shape.d_z, &z_rows);
    ObservationSet::new(y, x_mats, z)
}

/// Writes a matrix as headerless CSV (used by the sigma-estimation command).
pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{}", m[(i, j)])).collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn parses_well_formed_file() {
        let f = write_tmp("y_1,y_2,x_1_1,x_2_1,z_1\n1.0,2.0,0.5,-0.5,3.0\n4.0,5.0,1.5,2.5,6.0\n");
        let shape = ProblemShape { k: 2, p: 1, d_z: 1 };
        let obs = read_observations(f.path(), &shape).unwrap();
        assert_eq!(obs.n(), 2);
        assert_eq!(obs.y[(1, 0)], 4.0);
        assert_eq!(obs.x[0][(1, 0)], -0.5);
        assert_eq!(obs.z[(1, 0)], 6.0);
    }

    #[test]
    fn no_nuisance_columns() {
        let f = write_tmp("y_1,z_1\n1.0,0.0\n2.0,1.0\n");
        let shape = ProblemShape { k: 1, p: 0, d_z: 1 };
        let obs = read_observations(f.path(), &shape).unwrap();
        assert_eq!(obs.p(), 0);
    }

    #[test]
    fn missing_value_reports_line() {
        let f = write_tmp("y_1,z_1\n1.0,0.0\n,1.0\n");
        let shape = ProblemShape { k: 1, p: 0, d_z: 1 };
        let err = read_observations(f.path(), &shape).unwrap_err();
        match err {
            Error::CsvData { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn header_mismatch_rejected() {
        let f = write_tmp("a,b\n1,2\n");
        let shape = ProblemShape { k: 1, p: 0, d_z: 1 };
        assert!(matches!(
            read_observations(f.path(), &shape),
            Err(Error::InvalidConfig(_))
        ));
    }
}
