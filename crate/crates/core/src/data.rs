//! Tabular input: CSV ingestion, min–max rescaling of covariates and response
//! centering.

use std::path::Path;

use thiserror::Error;

use crate::num::{max_abs, mean, Scalar};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("column `{0}` not found in header")]
    MissingColumn(String),
    #[error("non-numeric or non-finite cell at line {0}, column `{1}`")]
    NonNumericCell(usize, String),
    #[error("file has no data rows")]
    EmptyFile,
    #[error("row at line {line} has {got} fields, header has {expected}")]
    RaggedRow { line: usize, expected: usize, got: usize },
    #[error("column `{0}` is constant and cannot be rescaled")]
    ConstantColumn(String),
    #[error("column lengths disagree: `{name}` has {got} values, expected {expected}")]
    LengthMismatch { name: String, expected: usize, got: usize },
    #[error("non-finite value in column `{0}`")]
    NonFinite(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Affine map `x ↦ (x − min) / (max − min)` recorded per rescaled column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitTransform<T> {
    pub min: T,
    pub max: T,
}

impl<T: Scalar> UnitTransform<T> {
    pub fn identity() -> Self {
        Self { min: T::zero(), max: T::one() }
    }

    #[inline]
    pub fn apply(&self, x: T) -> T {
        (x - self.min) / (self.max - self.min)
    }

    #[inline]
    pub fn invert(&self, u: T) -> T {
        self.min + u * (self.max - self.min)
    }

    /// Composition `outer ∘ self`, expressed in raw units.
    fn then(&self, outer: &Self) -> Self {
        Self { min: self.invert(outer.min), max: self.invert(outer.max) }
    }
}

/// Response, covariates (stored by column) and optional index variable.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub response_name: String,
    pub y: Vec<T>,
    pub x_names: Vec<String>,
    /// Covariate columns, each of length `n`.
    pub x: Vec<Vec<T>>,
    pub z_name: Option<String>,
    pub z: Option<Vec<T>>,
    /// Full-sample mean of `y`.
    pub y_bar: T,
    /// Per-column map from raw units to the current values; identity until rescaled.
    pub x_transforms: Vec<UnitTransform<T>>,
    pub z_transform: Option<UnitTransform<T>>,
}

impl<T: Scalar> Dataset<T> {
    /// Assembles and validates a dataset from raw columns.
    pub fn new(
        response_name: impl Into<String>,
        y: Vec<T>,
        x_names: Vec<String>,
        x: Vec<Vec<T>>,
        z: Option<(String, Vec<T>)>,
    ) -> Result<Self, DataError> {
        let response_name = response_name.into();
        let n = y.len();
        if n == 0 {
            return Err(DataError::EmptyFile);
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(DataError::NonFinite(response_name));
        }
        assert_eq!(x_names.len(), x.len(), "one name per covariate column");
        for (name, col) in x_names.iter().zip(&x) {
            check_column(name, col, n)?;
        }
        let (z_name, z) = match z {
            Some((name, col)) => {
                check_column(&name, &col, n)?;
                (Some(name), Some(col))
            }
            None => (None, None),
        };
        let y_bar = mean(&y);
        let x_transforms = vec![UnitTransform::identity(); x.len()];
        let z_transform = z.as_ref().map(|_| UnitTransform::identity());
        Ok(Self { response_name, y, x_names, x, z_name, z, y_bar, x_transforms, z_transform })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.y.len()
    }

    #[inline]
    pub fn p(&self) -> usize {
        self.x.len()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.x_names.iter().position(|c| c == name)
    }

    /// A covariate column by name, or the index variable if `name` is its name.
    pub fn column(&self, name: &str) -> Option<&[T]> {
        if let Some(j) = self.column_index(name) {
            return Some(&self.x[j]);
        }
        match (&self.z_name, &self.z) {
            (Some(zn), Some(z)) if zn == name => Some(z),
            _ => None,
        }
    }

    /// Rows `rows` in the given order; `y_bar` is recomputed for the subset.
    pub fn subset(&self, rows: &[usize]) -> Self {
        let pick = |col: &[T]| rows.iter().map(|&i| col[i]).collect::<Vec<_>>();
        let y = pick(&self.y);
        let y_bar = mean(&y);
        Self {
            response_name: self.response_name.clone(),
            y,
            x_names: self.x_names.clone(),
            x: self.x.iter().map(|c| pick(c)).collect(),
            z_name: self.z_name.clone(),
            z: self.z.as_ref().map(|c| pick(c)),
            y_bar,
            x_transforms: self.x_transforms.clone(),
            z_transform: self.z_transform,
        }
    }
}

fn check_column<T: Scalar>(name: &str, col: &[T], n: usize) -> Result<(), DataError> {
    if col.len() != n {
        return Err(DataError::LengthMismatch { name: name.to_string(), expected: n, got: col.len() });
    }
    if col.iter().any(|v| !v.is_finite()) {
        return Err(DataError::NonFinite(name.to_string()));
    }
    Ok(())
}

/// Column roles when reading a CSV file.
#[derive(Debug, Clone, Default)]
pub struct CsvColumns {
    pub response: String,
    pub index: Option<String>,
    /// Covariates to keep, in order; `None` keeps every remaining column.
    pub covariates: Option<Vec<String>>,
}

impl CsvColumns {
    pub fn new(response: impl Into<String>, index: Option<&str>) -> Self {
        Self { response: response.into(), index: index.map(str::to_string), covariates: None }
    }
}

/// Reads a comma-separated file with a header row. Every non-response,
/// non-index column becomes a covariate unless `columns.covariates` narrows it.
pub fn load_csv<T: Scalar>(path: impl AsRef<Path>, columns: &CsvColumns) -> Result<Dataset<T>, DataError> {
    let file = std::fs::File::open(path)?;
    read_csv(file, columns)
}

pub fn read_csv<T: Scalar, R: std::io::Read>(reader: R, columns: &CsvColumns) -> Result<Dataset<T>, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let y_idx = find(&columns.response)?;
    let z_idx = columns.index.as_deref().map(find).transpose()?;
    let x_idx: Vec<usize> = match &columns.covariates {
        Some(names) => names.iter().map(|c| find(c)).collect::<Result<_, _>>()?,
        None => (0..header.len()).filter(|&i| i != y_idx && Some(i) != z_idx).collect(),
    };

    let mut cols: Vec<Vec<T>> = vec![Vec::new(); header.len()];
    let mut wanted: Vec<usize> = std::iter::once(y_idx).chain(z_idx).chain(x_idx.iter().copied()).collect();
    wanted.sort_unstable();
    wanted.dedup();
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        // header is line 1
        let line = r + 2;
        if record.len() != header.len() {
            return Err(DataError::RaggedRow { line, expected: header.len(), got: record.len() });
        }
        for &c in &wanted {
            let v = record[c]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .and_then(T::from_f64)
                .filter(|v| v.is_finite())
                .ok_or_else(|| DataError::NonNumericCell(line, header[c].clone()))?;
            cols[c].push(v);
        }
    }
    if cols[y_idx].is_empty() {
        return Err(DataError::EmptyFile);
    }
    let y = cols[y_idx].clone();
    let z = z_idx.map(|i| (header[i].clone(), cols[i].clone()));
    let x_names = x_idx.iter().map(|&i| header[i].clone()).collect();
    let x = x_idx.iter().map(|&i| cols[i].clone()).collect();
    Dataset::new(header[y_idx].clone(), y, x_names, x, z)
}

/// Range of a column as the transform mapping it onto `[0, 1]`.
pub fn unit_transform<T: Scalar>(name: &str, col: &[T]) -> Result<UnitTransform<T>, DataError> {
    let min = col.iter().copied().fold(T::infinity(), T::min);
    let max = col.iter().copied().fold(T::neg_infinity(), T::max);
    if !(max > min) {
        return Err(DataError::ConstantColumn(name.to_string()));
    }
    Ok(UnitTransform { min, max })
}

/// Min–max rescales every covariate and the index variable to `[0, 1]`,
/// composing the recorded transforms. The response is left untouched.
pub fn rescale_unit_interval<T: Scalar>(d: &Dataset<T>) -> Result<Dataset<T>, DataError> {
    let xt = d.x_names.iter().zip(&d.x).map(|(name, col)| unit_transform(name, col)).collect::<Result<Vec<_>, _>>()?;
    let zt = match (&d.z_name, &d.z) {
        (Some(name), Some(z)) => Some(unit_transform(name, z)?),
        _ => None,
    };
    Ok(rescale_with(d, &xt, zt))
}

/// Applies given per-column transforms (for example ranges computed over
/// the union of several shards).
pub fn rescale_with<T: Scalar>(d: &Dataset<T>, x_transforms: &[UnitTransform<T>], z_transform: Option<UnitTransform<T>>) -> Dataset<T> {
    assert_eq!(x_transforms.len(), d.p(), "one transform per covariate");
    let mut out = d.clone();
    for (j, (col, t)) in out.x.iter_mut().zip(x_transforms).enumerate() {
        for v in col.iter_mut() {
            *v = t.apply(*v);
        }
        out.x_transforms[j] = d.x_transforms[j].then(t);
    }
    if let (Some(z), Some(t)) = (out.z.as_mut(), z_transform) {
        for v in z.iter_mut() {
            *v = t.apply(*v);
        }
        out.z_transform = Some(d.z_transform.unwrap_or_else(UnitTransform::identity).then(&t));
    }
    out
}

/// Response centered at the full-sample mean, together with that mean.
pub fn center_response<T: Scalar>(d: &Dataset<T>) -> (Vec<T>, T) {
    let y_bar = d.y_bar;
    (d.y.iter().map(|&v| v - y_bar).collect(), y_bar)
}

/// Tolerance on `|mean(centered)|` used by the centering checks.
pub fn centering_tolerance<T: Scalar>(y: &[T]) -> T {
    T::of(1e-10) * (T::one() + max_abs(y))
}
