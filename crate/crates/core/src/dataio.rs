//! Dataset ingestion, preprocessing and the synthetic generator.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal};
use thiserror::Error;

use crate::clearref::{sigmoid_exact, Dataset};
use crate::fxp::{decode, encode, FxConfig, RingMatrix};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at row {row}, column {col}: {msg}")]
    Parse { row: usize, col: usize, msg: String },
    #[error("column '{column}' is not binary (values: {values})")]
    NonBinaryColumn { column: String, values: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("value {value} at ({matrix}, row {row}, col {col}) is outside the fixed-point range")]
    Overflow {
        matrix: &'static str,
        row: usize,
        col: usize,
        value: f64,
    },
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
}

/// Column roles and preprocessing parameters for a CSV file.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub path: PathBuf,
    pub label: String,
    /// Value of the label column mapped to 1.
    pub label_positive: Option<String>,
    pub sensitive: Vec<String>,
    /// Per sensitive column, the value mapped to 1.
    pub sensitive_positive: BTreeMap<String, String>,
    /// Feature columns; empty means every remaining column.
    pub features: Vec<String>,
    /// Columns one-hot encoded even when numeric.
    pub categorical: Vec<String>,
    pub seed: u64,
    pub test_fraction: f64,
}

impl DatasetSpec {
    pub fn new(path: impl Into<PathBuf>, label: &str, sensitive: &[&str]) -> Self {
        Self {
            path: path.into(),
            label: label.into(),
            label_positive: None,
            sensitive: sensitive.iter().map(|s| s.to_string()).collect(),
            sensitive_positive: BTreeMap::new(),
            features: Vec::new(),
            categorical: Vec::new(),
            seed: 0,
            test_fraction: 0.2,
        }
    }

    /// Parses a sidecar file of `key=value` lines. Keys: `label`,
    /// `label_positive`, `sensitive`, `positive.<column>`, `features`,
    /// `categorical`, `seed`, `test_fraction`. Lists are comma-separated;
    /// `#` starts a comment.
    pub fn from_sidecar(csv_path: impl Into<PathBuf>, text: &str) -> Result<Self, DataError> {
        let mut spec = DatasetSpec::new(csv_path, "", &[]);
        let list = |v: &str| -> Vec<String> { v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect() };
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| DataError::InvalidSpec(format!("line {}: expected key=value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "label" => spec.label = value.into(),
                "label_positive" => spec.label_positive = Some(value.into()),
                "sensitive" => spec.sensitive = list(value),
                "features" => spec.features = list(value),
                "categorical" => spec.categorical = list(value),
                "seed" => {
                    spec.seed = value
                        .parse()
                        .map_err(|_| DataError::InvalidSpec(format!("bad seed '{value}'")))?
                }
                "test_fraction" => {
                    spec.test_fraction = value
                        .parse()
                        .map_err(|_| DataError::InvalidSpec(format!("bad test_fraction '{value}'")))?
                }
                k => match k.strip_prefix("positive.") {
                    Some(col) => {
                        spec.sensitive_positive.insert(col.to_string(), value.to_string());
                    }
                    None => return Err(DataError::InvalidSpec(format!("unknown key '{k}'"))),
                },
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.label.is_empty() {
            return Err(DataError::InvalidSpec("no label column".into()));
        }
        if self.sensitive.is_empty() {
            return Err(DataError::InvalidSpec("no sensitive column".into()));
        }
        if self.sensitive.contains(&self.label) || self.features.contains(&self.label) {
            return Err(DataError::InvalidSpec("label column has a second role".into()));
        }
        if self.sensitive.iter().any(|s| self.features.contains(s)) {
            return Err(DataError::InvalidSpec("sensitive column declared as feature".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(DataError::InvalidSpec(format!("test_fraction {} outside [0, 1)", self.test_fraction)));
        }
        Ok(())
    }
}

/// Column-wise affine transform fitted on the training split. A scale of 0
/// marks the intercept column, whose value is always 1 and which consumes no
/// raw input.
#[derive(Debug, Clone, PartialEq)]
pub struct Whitening {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Whitening {
    /// Fits on `raw` (population standard deviation) and appends an
    /// intercept column.
    pub fn fit(raw: &DMatrix<f64>) -> Self {
        let n = raw.nrows() as f64;
        let mut mean = Vec::with_capacity(raw.ncols() + 1);
        let mut scale = Vec::with_capacity(raw.ncols() + 1);
        for col in raw.column_iter() {
            let m = col.sum() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            let sd = var.sqrt();
            mean.push(m);
            scale.push(if sd > 0.0 { 1.0 / sd } else { 1.0 });
        }
        mean.push(0.0);
        scale.push(0.0);
        Self { mean, scale }
    }

    /// Model dimension.
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Number of raw inputs consumed.
    pub fn raw_dim(&self) -> usize {
        self.scale.iter().filter(|&&s| s != 0.0).count()
    }

    pub fn apply_row(&self, raw: &[f64]) -> Result<Vec<f64>, DataError> {
        if raw.len() != self.raw_dim() {
            return Err(DataError::InvalidSpec(format!(
                "expected {} raw features, got {}",
                self.raw_dim(),
                raw.len()
            )));
        }
        let mut it = raw.iter();
        Ok(self
            .mean
            .iter()
            .zip(&self.scale)
            .map(|(&m, &s)| if s == 0.0 { 1.0 } else { (it.next().unwrap() - m) * s })
            .collect())
    }

    pub fn apply(&self, raw: &DMatrix<f64>) -> Result<DMatrix<f64>, DataError> {
        let mut out = DMatrix::zeros(raw.nrows(), self.dim());
        for r in 0..raw.nrows() {
            let row: Vec<f64> = raw.row(r).iter().copied().collect();
            for (c, v) in self.apply_row(&row)?.into_iter().enumerate() {
                out[(r, c)] = v;
            }
        }
        Ok(out)
    }
}

/// Train/test split with the whitening fitted on the training part.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub whitening: Whitening,
    /// Names of the model coordinates (last one is the intercept).
    pub feature_names: Vec<String>,
}

/// Largest power of two not above `n`.
pub fn largest_pow2(n: usize) -> usize {
    if n == 0 {
        0
    } else {
        1 << (usize::BITS - 1 - n.leading_zeros())
    }
}

/// Shuffles, splits off the test rows, subsamples the training rows to a
/// power of two without replacement, whitens, and appends the intercept.
/// `raw.x` holds unwhitened features without intercept.
pub fn prepare(raw: &Dataset, names: &[String], test_fraction: f64, seed: u64) -> Result<Prepared, DataError> {
    let n = raw.n();
    if n == 0 {
        return Err(DataError::EmptyDataset);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n_test = (n as f64 * test_fraction).round() as usize;
    let perm = sample(&mut rng, n, n).into_vec();
    let (test_rows, rest) = perm.split_at(n_test.min(n - 1));
    let keep = largest_pow2(rest.len());
    let mut train_rows: Vec<usize> = sample(&mut rng, rest.len(), keep).into_iter().map(|i| rest[i]).collect();
    train_rows.sort_unstable();
    let mut test_rows = test_rows.to_vec();
    test_rows.sort_unstable();

    let train_raw = raw.select_rows(&train_rows);
    let test_raw = raw.select_rows(&test_rows);
    let whitening = Whitening::fit(&train_raw.x);
    let train = Dataset::new(whitening.apply(&train_raw.x)?, train_raw.y, train_raw.z);
    let test = Dataset::new(whitening.apply(&test_raw.x)?, test_raw.y, test_raw.z);
    let mut feature_names = names.to_vec();
    feature_names.push("intercept".into());
    Ok(Prepared {
        train,
        test,
        whitening,
        feature_names,
    })
}

fn binary_map(column: &str, values: &[String], positive: Option<&str>) -> Result<Vec<f64>, DataError> {
    let distinct: BTreeSet<&str> = values.iter().map(|s| s.as_str()).collect();
    let non_binary = || DataError::NonBinaryColumn {
        column: column.into(),
        values: distinct.iter().take(5).cloned().collect::<Vec<_>>().join(", "),
    };
    if distinct.len() > 2 {
        return Err(non_binary());
    }
    let one = match positive {
        Some(p) => p.to_string(),
        None => {
            let numeric: Option<Vec<f64>> = distinct.iter().map(|v| v.parse::<f64>().ok()).collect();
            match numeric {
                Some(vals) if vals.iter().all(|&v| v == 0.0 || v == 1.0) => {
                    return Ok(values.iter().map(|v| v.parse::<f64>().unwrap()).collect());
                }
                Some(_) => return Err(non_binary()),
                // two labels without a declared positive: the lexicographically larger is 1
                None => distinct.iter().next_back().unwrap().to_string(),
            }
        }
    };
    Ok(values.iter().map(|v| if *v == one { 1.0 } else { 0.0 }).collect())
}

/// Reads the CSV into raw (unwhitened) features with named columns.
pub fn read_csv(spec: &DatasetSpec) -> Result<(Dataset, Vec<String>), DataError> {
    spec.validate()?;
    let io = |source| DataError::Io {
        path: spec.path.clone(),
        source,
    };
    let text = std::fs::read_to_string(&spec.path).map_err(io)?;
    parse_csv(spec, &text)
}

fn csv_err(e: csv::Error) -> DataError {
    let (row, col) = match e.position() {
        Some(p) => (p.line() as usize, 0),
        None => (0, 0),
    };
    DataError::Parse {
        row,
        col,
        msg: e.to_string(),
    }
}

/// Parses CSV text under `spec`'s column roles.
pub fn parse_csv(spec: &DatasetSpec, text: &str) -> Result<(Dataset, Vec<String>), DataError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers().map_err(csv_err)?.iter().map(String::from).collect();
    let index = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::InvalidSpec(format!("no column named '{name}'")))
    };
    let mut rows: Vec<Vec<String>> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != header.len() {
            return Err(DataError::Parse {
                row: i + 2,
                col: rec.len() + 1,
                msg: format!("expected {} fields", header.len()),
            });
        }
        rows.push(rec.iter().map(String::from).collect());
    }
    if rows.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let column = |c: usize| -> Vec<String> { rows.iter().map(|r| r[c].clone()).collect() };

    let label_idx = index(&spec.label)?;
    let y = binary_map(&spec.label, &column(label_idx), spec.label_positive.as_deref())?;
    let mut z_cols = Vec::new();
    let mut role_idx = vec![label_idx];
    for s in &spec.sensitive {
        let c = index(s)?;
        role_idx.push(c);
        z_cols.push(binary_map(s, &column(c), spec.sensitive_positive.get(s).map(String::as_str))?);
    }
    let feature_idx: Vec<usize> = if spec.features.is_empty() {
        (0..header.len()).filter(|c| !role_idx.contains(c)).collect()
    } else {
        spec.features.iter().map(|f| index(f)).collect::<Result<_, _>>()?
    };

    let mut names = Vec::new();
    let mut feature_cols: Vec<Vec<f64>> = Vec::new();
    for &c in &feature_idx {
        let values = column(c);
        let parsed: Result<Vec<f64>, usize> = values
            .iter()
            .enumerate()
            .map(|(r, v)| v.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or(r))
            .collect();
        match parsed {
            Ok(vals) if !spec.categorical.contains(&header[c]) => {
                names.push(header[c].clone());
                feature_cols.push(vals);
            }
            Ok(_) | Err(_) => {
                if let Err(r) = &parsed {
                    if values[*r].is_empty() {
                        return Err(DataError::Parse {
                            row: r + 2,
                            col: c + 1,
                            msg: "missing value".into(),
                        });
                    }
                }
                let categories: BTreeSet<&str> = values.iter().map(String::as_str).collect();
                for cat in categories {
                    names.push(format!("{}={cat}", header[c]));
                    feature_cols.push(values.iter().map(|v| (v == cat) as u8 as f64).collect());
                }
            }
        }
    }
    let n = rows.len();
    let x = DMatrix::from_fn(n, feature_cols.len(), |r, c| feature_cols[c][r]);
    let z = DMatrix::from_fn(n, z_cols.len(), |r, c| z_cols[c][r]);
    Ok((Dataset::new(x, DVector::from_vec(y), z), names))
}

/// Reads, splits, subsamples and whitens a CSV dataset.
pub fn load_csv(spec: &DatasetSpec) -> Result<Prepared, DataError> {
    let (raw, names) = read_csv(spec)?;
    prepare(&raw, &names, spec.test_fraction, spec.seed)
}

/// Loads a CSV with its sidecar role file `<csv>.roles` or an explicit path.
pub fn load_with_sidecar(csv: &Path, sidecar: Option<&Path>) -> Result<Prepared, DataError> {
    let side = sidecar.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut p = csv.as_os_str().to_owned();
        p.push(".roles");
        PathBuf::from(p)
    });
    let text = std::fs::read_to_string(&side).map_err(|source| DataError::Io { path: side.clone(), source })?;
    load_csv(&DatasetSpec::from_sidecar(csv, &text)?)
}

/// Synthetic two-cluster data with a rotation-controlled sensitive attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    /// Training rows; a power of two.
    pub n: usize,
    pub n_test: usize,
    /// Rotation angle; smaller angles correlate z more strongly with y.
    pub phi: f64,
    pub mean_pos: [f64; 2],
    pub cov_pos: [[f64; 2]; 2],
    pub mean_neg: [f64; 2],
    pub cov_neg: [[f64; 2]; 2],
    /// Additional pure-noise N(0, 1) features.
    pub noise_dims: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(n: usize, phi: f64, seed: u64) -> Self {
        Self {
            n,
            n_test: n / 4,
            phi,
            mean_pos: [2.0, 2.0],
            cov_pos: [[5.0, 1.0], [1.0, 5.0]],
            mean_neg: [-2.0, -2.0],
            cov_neg: [[10.0, 1.0], [1.0, 3.0]],
            noise_dims: 1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if !self.n.is_power_of_two() {
            return Err(DataError::InvalidSpec(format!("n = {} is not a power of two", self.n)));
        }
        if !(self.phi > 0.0 && self.phi <= std::f64::consts::FRAC_PI_2 + 1e-12) {
            return Err(DataError::InvalidSpec(format!("phi = {} outside (0, π/2]", self.phi)));
        }
        Ok(())
    }
}

fn gaussian<R: Rng>(rng: &mut R, mean: [f64; 2], cov: [[f64; 2]; 2]) -> Vector2<f64> {
    let l = Matrix2::new(cov[0][0], cov[0][1], cov[1][0], cov[1][1])
        .cholesky()
        .expect("covariance must be positive definite")
        .l();
    let e = Vector2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
    Vector2::new(mean[0], mean[1]) + l * e
}

/// `n + n_test` raw rows: two cluster features, then noise features.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let total = spec.n + spec.n_test;
    let d = 2 + spec.noise_dims;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let coin = Bernoulli::new(0.5).unwrap();
    let (s, c) = spec.phi.sin_cos();
    let mut x = DMatrix::zeros(total, d);
    let mut y = DVector::zeros(total);
    let mut z = DMatrix::zeros(total, 1);
    for i in 0..total {
        let label = coin.sample(&mut rng);
        let v = if label {
            gaussian(&mut rng, spec.mean_pos, spec.cov_pos)
        } else {
            gaussian(&mut rng, spec.mean_neg, spec.cov_neg)
        };
        let rotated = Vector2::new(c * v[0] - s * v[1], s * v[0] + c * v[1]);
        let p = sigmoid_exact((rotated[0] + rotated[1]) * 2.0 / 3.0);
        z[(i, 0)] = rng.gen_bool(p) as u8 as f64;
        y[i] = label as u8 as f64;
        x[(i, 0)] = v[0];
        x[(i, 1)] = v[1];
        for k in 2..d {
            x[(i, k)] = rng.sample(StandardNormal);
        }
    }
    Ok(Dataset::new(x, y, z))
}

/// Generates and whitens synthetic data; the first `n` rows train.
pub fn synthetic_prepared(spec: &SyntheticSpec) -> Result<Prepared, DataError> {
    let raw = gen_synthetic(spec)?;
    let train_rows: Vec<usize> = (0..spec.n).collect();
    let test_rows: Vec<usize> = (spec.n..spec.n + spec.n_test).collect();
    let (train_raw, test_raw) = (raw.select_rows(&train_rows), raw.select_rows(&test_rows));
    let whitening = Whitening::fit(&train_raw.x);
    let mut names = vec!["x1".to_string(), "x2".to_string()];
    names.extend((0..spec.noise_dims).map(|k| format!("noise{k}")));
    names.push("intercept".into());
    Ok(Prepared {
        train: Dataset::new(whitening.apply(&train_raw.x)?, train_raw.y, train_raw.z),
        test: Dataset::new(whitening.apply(&test_raw.x)?, test_raw.y, test_raw.z),
        whitening,
        feature_names: names,
    })
}

/// Ring-encoded dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedDataset {
    pub x: RingMatrix,
    pub y: RingMatrix,
    pub z: RingMatrix,
    /// Largest absolute encoding error over all entries.
    pub max_error: u64,
    pub fx: FxConfig,
}

impl QuantizedDataset {
    pub fn max_error_f64(&self) -> f64 {
        self.max_error as f64 / self.fx.scale()
    }
}

fn quantize(m: &DMatrix<f64>, name: &'static str, fx: &FxConfig, max_err: &mut f64) -> Result<RingMatrix, DataError> {
    let mut data = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            let v = m[(r, c)];
            let e = encode(v, fx).map_err(|_| DataError::Overflow {
                matrix: name,
                row: r,
                col: c,
                value: v,
            })?;
            *max_err = max_err.max((decode(e, fx) - v).abs());
            data.push(e);
        }
    }
    Ok(RingMatrix::from_vec(m.nrows(), m.ncols(), data))
}

pub fn fx_quantize(d: &Dataset, fx: &FxConfig) -> Result<QuantizedDataset, DataError> {
    let mut err = 0.0f64;
    let x = quantize(&d.x, "x", fx, &mut err)?;
    let y = quantize(&DMatrix::from_column_slice(d.n(), 1, d.y.as_slice()), "y", fx, &mut err)?;
    let z = quantize(&d.z, "z", fx, &mut err)?;
    Ok(QuantizedDataset {
        x,
        y,
        z,
        max_error: (err * fx.scale()).round() as u64,
        fx: *fx,
    })
}
