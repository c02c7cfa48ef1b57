//! Tabular ingestion and assembly of validated regression problems.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// How to treat rows with missing or non-finite values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MissingPolicy {
    /// Any unparseable or non-finite cell in a declared column is an error.
    #[default]
    Strict,
    /// Drop offending rows; the count is reported in [`LoadReport`].
    DropRows,
}

/// Declared type of a column in the input file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

/// Which columns to read and how to parse them.
#[derive(Debug, Clone, Default)]
pub struct ColumnSchema {
    pub columns: Vec<(String, ColumnKind)>,
    pub missing: MissingPolicy,
}

impl ColumnSchema {
    pub fn numeric(names: &[&str]) -> Self {
        ColumnSchema {
            columns: names
                .iter()
                .map(|n| (n.to_string(), ColumnKind::Numeric))
                .collect(),
            missing: MissingPolicy::Strict,
        }
    }

    pub fn with_missing(mut self, missing: MissingPolicy) -> Self {
        self.missing = missing;
        self
    }

    pub fn push(&mut self, name: &str, kind: ColumnKind) {
        if !self.columns.iter().any(|(n, _)| n == name) {
            self.columns.push((name.to_string(), kind));
        }
    }
}

#[derive(Debug, Clone)]
pub enum Column {
    Numeric(Vec<f64>),
    /// Level codes plus the level names in order of first appearance.
    Categorical {
        codes: Vec<usize>,
        levels: Vec<String>,
    },
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Numeric(v) => v.len(),
            Column::Categorical { codes, .. } => codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A validated table: equal-length columns, no NaN/Inf in numeric columns.
#[derive(Debug, Clone)]
pub struct Dataset {
    columns: HashMap<String, Column>,
    /// Original data-row index (0-based, first row after the header) of each
    /// retained row; differs from 0..n_rows only when rows were dropped.
    pub source_rows: Vec<usize>,
    pub n_rows: usize,
}

/// What happened during ingestion.
#[derive(Debug, Clone, Copy)]
pub struct LoadReport {
    pub n_rows: usize,
    pub dropped_rows: usize,
}

impl Dataset {
    pub fn from_columns(columns: Vec<(String, Column)>) -> Result<Self> {
        let n_rows = columns.first().map(|(_, c)| c.len()).unwrap_or(0);
        if n_rows == 0 {
            return Err(Error::Config("dataset has no rows".into()));
        }
        let mut map = HashMap::new();
        for (name, col) in columns {
            if col.len() != n_rows {
                return Err(Error::Config(format!(
                    "column {name:?} has {} rows, expected {n_rows}",
                    col.len()
                )));
            }
            if let Column::Numeric(v) = &col {
                if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                    return Err(Error::Parse {
                        row: i,
                        column: name,
                        message: "non-finite value".into(),
                    });
                }
            }
            map.insert(name, col);
        }
        Ok(Dataset {
            columns: map,
            source_rows: (0..n_rows).collect(),
            n_rows,
        })
    }

    /// Convenience constructor for numeric data.
    pub fn from_numeric(columns: Vec<(&str, Vec<f64>)>) -> Result<Self> {
        Self::from_columns(
            columns
                .into_iter()
                .map(|(n, v)| (n.to_string(), Column::Numeric(v)))
                .collect(),
        )
    }

    pub fn column(&self, name: &str) -> Result<&Column> {
        self.columns
            .get(name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }

    pub fn numeric(&self, name: &str) -> Result<&[f64]> {
        match self.column(name)? {
            Column::Numeric(v) => Ok(v),
            Column::Categorical { .. } => Err(Error::Config(format!(
                "column {name:?} is categorical, expected numeric"
            ))),
        }
    }
}

/// Parse a CSV file (RFC-4180 style, UTF-8, header row required) into a
/// [`Dataset`] containing the schema's columns.
pub fn load_csv(path: impl AsRef<Path>, schema: &ColumnSchema) -> Result<(Dataset, LoadReport)> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e),
        })?;

    let headers = reader
        .headers()
        .map_err(|e| Error::Config(format!("cannot read header row: {e}")))?
        .clone();
    let mut field_index = Vec::with_capacity(schema.columns.len());
    for (name, kind) in &schema.columns {
        let idx = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.clone()))?;
        field_index.push((name.clone(), *kind, idx));
    }

    enum Raw {
        Numeric(Vec<f64>),
        Categorical(Vec<String>),
    }
    let mut raw: Vec<Raw> = field_index
        .iter()
        .map(|(_, kind, _)| match kind {
            ColumnKind::Numeric => Raw::Numeric(Vec::new()),
            ColumnKind::Categorical => Raw::Categorical(Vec::new()),
        })
        .collect();
    let mut source_rows = Vec::new();
    let mut dropped = 0usize;

    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            row: row_idx,
            column: String::new(),
            message: e.to_string(),
        })?;
        // Parse the whole row first so strict mode reports the first bad cell
        // and drop mode discards the row atomically.
        let mut parsed: Vec<std::result::Result<f64, String>> = Vec::new();
        let mut bad: Option<(String, String)> = None;
        for (name, kind, idx) in &field_index {
            let cell = record.get(*idx).unwrap_or("");
            match kind {
                ColumnKind::Numeric => {
                    let value = if cell.is_empty() {
                        Err("empty cell".to_string())
                    } else {
                        cell.parse::<f64>()
                            .map_err(|e| e.to_string())
                            .and_then(|x| {
                                if x.is_finite() {
                                    Ok(x)
                                } else {
                                    Err("non-finite value".to_string())
                                }
                            })
                    };
                    if let Err(msg) = &value {
                        bad.get_or_insert_with(|| (name.clone(), msg.clone()));
                    }
                    parsed.push(value);
                }
                ColumnKind::Categorical => parsed.push(Err(cell.to_string())),
            }
        }
        if let Some((column, message)) = bad {
            match schema.missing {
                MissingPolicy::Strict => {
                    return Err(Error::Parse {
                        row: row_idx,
                        column,
                        message,
                    })
                }
                MissingPolicy::DropRows => {
                    dropped += 1;
                    continue;
                }
            }
        }
        for (slot, value) in raw.iter_mut().zip(parsed) {
            match (slot, value) {
                (Raw::Numeric(v), Ok(x)) => v.push(x),
                (Raw::Categorical(v), Err(s)) => v.push(s),
                _ => unreachable!(),
            }
        }
        source_rows.push(row_idx);
    }

    let n_rows = source_rows.len();
    if n_rows == 0 {
        return Err(Error::Config("no data rows remain after filtering".into()));
    }
    let mut columns = HashMap::new();
    for ((name, _, _), slot) in field_index.into_iter().zip(raw) {
        let col = match slot {
            Raw::Numeric(v) => Column::Numeric(v),
            Raw::Categorical(values) => {
                let mut levels: Vec<String> = Vec::new();
                let codes = values
                    .iter()
                    .map(|v| match levels.iter().position(|l| l == v) {
                        Some(i) => i,
                        None => {
                            levels.push(v.clone());
                            levels.len() - 1
                        }
                    })
                    .collect();
                Column::Categorical { codes, levels }
            }
        };
        columns.insert(name, col);
    }
    Ok((
        Dataset {
            columns,
            source_rows,
            n_rows,
        },
        LoadReport {
            n_rows,
            dropped_rows: dropped,
        },
    ))
}

/// Model description used to assemble a [`RegressionProblem`].
#[derive(Debug, Clone, Default)]
pub struct ModelSpec {
    pub outcome: String,
    pub regressors: Vec<String>,
    pub instruments: Vec<String>,
    pub intercept: bool,
    pub weights: Option<String>,
    pub clusters: Option<String>,
}

/// Outcome, design, optional instruments, weights, and cluster labels.
#[derive(Debug, Clone)]
pub struct RegressionProblem {
    pub y: DVector<f64>,
    /// N x P regressor matrix; first column is the intercept when requested.
    pub x: DMatrix<f64>,
    /// Optional N x P instrument matrix (just-identified IV).
    pub z: Option<DMatrix<f64>>,
    /// Strictly positive per-row weights (e.g. survey weights).
    pub base_weights: Option<DVector<f64>>,
    pub clusters: Option<Vec<usize>>,
    pub regressor_names: Vec<String>,
    /// Original data-row index of each observation.
    pub source_rows: Vec<usize>,
}

impl RegressionProblem {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Instrument matrix, which defaults to the regressors (OLS).
    pub fn instruments(&self) -> &DMatrix<f64> {
        self.z.as_ref().unwrap_or(&self.x)
    }

    pub fn is_iv(&self) -> bool {
        self.z.is_some()
    }

    /// Build a problem directly from raw vectors (single regressor, no
    /// intercept); convenient in tests and simulations.
    pub fn univariate(x: Vec<f64>, y: Vec<f64>) -> Self {
        let n = x.len();
        RegressionProblem {
            y: DVector::from_vec(y),
            x: DMatrix::from_vec(n, 1, x),
            z: None,
            base_weights: None,
            clusters: None,
            regressor_names: vec!["x".into()],
            source_rows: (0..n).collect(),
        }
    }
}

/// Relative tolerance on the singular-value ratio below which a design is
/// treated as rank deficient.
pub const RANK_TOLERANCE: f64 = 1e-10;

fn check_full_rank(m: &DMatrix<f64>, what: &str) -> Result<()> {
    let svd = m.clone().svd(false, false);
    let max = svd.singular_values.max();
    let min = svd.singular_values.min();
    if !(max > 0.0) || min / max <= RANK_TOLERANCE {
        return Err(Error::DegenerateDesign(format!(
            "{what} is rank deficient (singular value ratio {:.3e})",
            if max > 0.0 { min / max } else { 0.0 }
        )));
    }
    Ok(())
}

/// Assemble a validated [`RegressionProblem`] from a dataset and model spec.
///
/// Categorical regressors expand into dummy indicators with the first level
/// as the reference.
pub fn build_problem(data: &Dataset, spec: &ModelSpec) -> Result<RegressionProblem> {
    let n = data.n_rows;
    let y = DVector::from_vec(data.numeric(&spec.outcome)?.to_vec());

    let mut cols: Vec<(String, Vec<f64>)> = Vec::new();
    if spec.intercept {
        cols.push(("(intercept)".into(), vec![1.0; n]));
    }
    for name in &spec.regressors {
        match data.column(name)? {
            Column::Numeric(v) => cols.push((name.clone(), v.clone())),
            Column::Categorical { codes, levels } => {
                // Dummy-expand, skipping the first level as reference.
                for (code, level) in levels.iter().enumerate().skip(1) {
                    let col = codes
                        .iter()
                        .map(|&c| if c == code { 1.0 } else { 0.0 })
                        .collect();
                    cols.push((format!("{name}[{level}]"), col));
                }
            }
        }
    }
    let p = cols.len();
    if p == 0 {
        return Err(Error::Config("no regressors specified".into()));
    }
    if n <= p {
        return Err(Error::InsufficientData { n, p });
    }
    let regressor_names: Vec<String> = cols.iter().map(|(n, _)| n.clone()).collect();
    let x = DMatrix::from_fn(n, p, |i, j| cols[j].1[i]);
    check_full_rank(&x, "regressor matrix")?;

    let z = if spec.instruments.is_empty() {
        None
    } else {
        let mut zcols: Vec<Vec<f64>> = Vec::new();
        if spec.intercept {
            zcols.push(vec![1.0; n]);
        }
        for name in &spec.instruments {
            zcols.push(data.numeric(name)?.to_vec());
        }
        if zcols.len() != p {
            return Err(Error::Config(format!(
                "instrument count {} does not match regressor count {p} \
                 (just-identified IV required)",
                zcols.len()
            )));
        }
        let z = DMatrix::from_fn(n, p, |i, j| zcols[j][i]);
        check_full_rank(&z, "instrument matrix")?;
        // Z^T X must be invertible for the IV estimator to exist.
        check_full_rank(&(z.transpose() * &x), "Z'X cross-product")?;
        Some(z)
    };

    let base_weights = match &spec.weights {
        None => None,
        Some(name) => {
            let v = data.numeric(name)?;
            if let Some(i) = v.iter().position(|&w| w <= 0.0) {
                return Err(Error::Config(format!(
                    "base weight at data row {} is not strictly positive",
                    data.source_rows[i]
                )));
            }
            Some(DVector::from_vec(v.to_vec()))
        }
    };

    let clusters = match &spec.clusters {
        None => None,
        Some(name) => match data.column(name)? {
            Column::Numeric(v) => {
                let mut seen: Vec<i64> = Vec::new();
                Some(
                    v.iter()
                        .map(|&x| {
                            let key = x.round() as i64;
                            match seen.iter().position(|&s| s == key) {
                                Some(i) => i,
                                None => {
                                    seen.push(key);
                                    seen.len() - 1
                                }
                            }
                        })
                        .collect(),
                )
            }
            Column::Categorical { codes, .. } => Some(codes.clone()),
        },
    };

    Ok(RegressionProblem {
        y,
        x,
        z,
        base_weights,
        clusters,
        regressor_names,
        source_rows: data.source_rows.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_simple_csv() {
        let f = write_csv("y,t\n1.0,0\n2.0,1\n3.0,0\n");
        let (data, report) = load_csv(f.path(), &ColumnSchema::numeric(&["y", "t"])).unwrap();
        assert_eq!(data.n_rows, 3);
        assert_eq!(report.dropped_rows, 0);
        assert_eq!(data.numeric("y").unwrap(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn drop_mode_drops_nan_row() {
        let f = write_csv("y,t\n1.0,0\nNaN,1\n3.0,0\n");
        let schema = ColumnSchema::numeric(&["y", "t"]).with_missing(MissingPolicy::DropRows);
        let (data, report) = load_csv(f.path(), &schema).unwrap();
        assert_eq!(data.n_rows, 2);
        assert_eq!(report.dropped_rows, 1);
        assert_eq!(data.source_rows, vec![0, 2]);
    }

    #[test]
    fn strict_mode_reports_location() {
        let f = write_csv("y,t\n1.0,0\noops,1\n");
        let err = load_csv(f.path(), &ColumnSchema::numeric(&["y", "t"])).unwrap_err();
        match err {
            Error::Parse { row, column, .. } => {
                assert_eq!(row, 1);
                assert_eq!(column, "y");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn missing_declared_column_named_in_error() {
        let f = write_csv("y,t\n1.0,0\n");
        let err = load_csv(f.path(), &ColumnSchema::numeric(&["y", "profit"])).unwrap_err();
        assert!(matches!(err, Error::MissingColumn(ref c) if c == "profit"));
    }

    #[test]
    fn build_problem_passthrough() {
        let data = Dataset::from_numeric(vec![("y", vec![1.0, 4.0]), ("x", vec![1.0, 2.0])]).unwrap();
        let spec = ModelSpec {
            outcome: "y".into(),
            regressors: vec!["x".into()],
            ..Default::default()
        };
        let problem = build_problem(&data, &spec).unwrap();
        assert_eq!(problem.n(), 2);
        assert_eq!(problem.p(), 1);
    }

    #[test]
    fn duplicated_regressor_is_degenerate() {
        let data = Dataset::from_numeric(vec![
            ("y", vec![1.0, 4.0, 2.0]),
            ("x", vec![1.0, 2.0, 3.0]),
            ("x2", vec![1.0, 2.0, 3.0]),
        ])
        .unwrap();
        let spec = ModelSpec {
            outcome: "y".into(),
            regressors: vec!["x".into(), "x2".into()],
            ..Default::default()
        };
        assert!(matches!(
            build_problem(&data, &spec),
            Err(Error::DegenerateDesign(_))
        ));
    }

    #[test]
    fn intercept_prepends_ones() {
        let data = Dataset::from_numeric(vec![
            ("y", vec![1.0, 2.0, 3.0, 4.0, 5.0]),
            ("x", vec![0.0, 1.0, 0.5, 2.0, -1.0]),
        ])
        .unwrap();
        let spec = ModelSpec {
            outcome: "y".into(),
            regressors: vec!["x".into()],
            intercept: true,
            ..Default::default()
        };
        let problem = build_problem(&data, &spec).unwrap();
        assert_eq!((problem.x.nrows(), problem.x.ncols()), (5, 2));
        assert!(problem.x.column(0).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn rank_check_matches_determinant_on_small_designs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let n = rng.gen_range(4..10);
            let p = rng.gen_range(1..=3.min(n - 1));
            let degenerate = rng.gen_bool(0.3);
            let mut cols: Vec<Vec<f64>> = (0..p)
                .map(|_| (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect();
            if degenerate && p >= 2 {
                cols[p - 1] = cols[0].iter().map(|v| v * 2.0).collect();
            }
            let x = DMatrix::from_fn(n, p, |i, j| cols[j][i]);
            let gram = x.transpose() * &x;
            let det = gram.determinant();
            let scale: f64 = gram.diagonal().iter().product();
            let brute_singular = det.abs() <= 1e-9 * scale.max(1.0);
            let svd_singular = check_full_rank(&x, "x").is_err();
            assert_eq!(svd_singular, brute_singular, "n={n} p={p}");
        }
    }

    #[test]
    fn categorical_expands_to_dummies() {
        let data = Dataset::from_columns(vec![
            ("y".into(), Column::Numeric(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])),
            (
                "site".into(),
                Column::Categorical {
                    codes: vec![0, 1, 2, 0, 1, 2],
                    levels: vec!["a".into(), "b".into(), "c".into()],
                },
            ),
        ])
        .unwrap();
        let spec = ModelSpec {
            outcome: "y".into(),
            regressors: vec!["site".into()],
            intercept: true,
            ..Default::default()
        };
        let problem = build_problem(&data, &spec).unwrap();
        assert_eq!(problem.p(), 3); // intercept + 2 dummies, first level dropped
        assert_eq!(problem.regressor_names[1], "site[b]");
    }
}
