//! Cleartext reference implementations: the three constrained optimizers in
//! floating point, a fixed-point replica of the secure Lagrangian training,
//! sigmoid variants and fairness metrics.
//!
//! The fixed-point trainer performs exactly the ring operations of the
//! secure protocol (same shifts, same comparison semantics), so its output
//! is bit-identical to a protocol run with exact truncation.

use std::fmt;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::boolgadget::sigmoid_approx_clear;
use crate::engine::blocked_mult_shift_avg_clear;
use crate::fxp::{decode, encode, encode_coefficient, round_shift, FxConfig, FxError, RingElement, RingMatrix};

/// Features, labels and sensitive attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// n×d, whitened.
    pub x: DMatrix<f64>,
    /// n labels in {0, 1}.
    pub y: DVector<f64>,
    /// n×p sensitive attributes in {0, 1}.
    pub z: DMatrix<f64>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, z: DMatrix<f64>) -> Self {
        assert_eq!(x.nrows(), y.len(), "x and y row counts differ");
        assert_eq!(x.nrows(), z.nrows(), "x and z row counts differ");
        Self { x, y, z }
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn p(&self) -> usize {
        self.z.ncols()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(rows),
            y: DVector::from_iterator(rows.len(), rows.iter().map(|&r| self.y[r])),
            z: self.z.select_rows(rows),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Optimizer {
    Lagrange,
    Projected,
    Iplb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SigmoidKind {
    Exact,
    /// Clamp of `x + 1/2` to `[0, 1]`.
    SecureMl,
    /// Per-unit-interval minimax line on `[-5, 5]`.
    Chebyshev,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arithmetic {
    Float,
    Fixed,
}

macro_rules! name_enum {
    ($ty:ty, $($variant:path => $name:literal),+) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $name),+ })
            }
        }
        impl std::str::FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(format!("unknown value '{other}'")),
                }
            }
        }
    };
}

name_enum!(Optimizer, Optimizer::Lagrange => "lagrange", Optimizer::Projected => "projected", Optimizer::Iplb => "iplb");
name_enum!(SigmoidKind, SigmoidKind::Exact => "exact", SigmoidKind::SecureMl => "secureml", SigmoidKind::Chebyshev => "chebyshev");
name_enum!(Arithmetic, Arithmetic::Float => "float", Arithmetic::Fixed => "fixed");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClearError {
    #[error("non-finite value in epoch {epoch}")]
    NonFinite { epoch: usize },
    #[error("fixed-point overflow: {0}")]
    Overflow(String),
    #[error("projection matrix is singular (condition number {cond:.3e}) in epoch {epoch}")]
    SingularProjection { epoch: usize, cond: f64 },
    #[error("barrier left its domain: |a_{row}·θ| ≥ c_{row} in epoch {epoch}")]
    BarrierDomain { epoch: usize, row: usize },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
}

impl From<FxError> for ClearError {
    fn from(e: FxError) -> Self {
        ClearError::Overflow(e.to_string())
    }
}

/// Updates performed by the default epoch count.
pub const TARGET_UPDATES: usize = 15_000;

/// Epochs giving roughly [`TARGET_UPDATES`] minibatch updates.
pub fn default_epochs(n: usize, batch_exp: u32) -> usize {
    let per_epoch = (n >> batch_exp).max(1);
    TARGET_UPDATES.div_ceil(per_epoch)
}

/// Gradient weights `(ξ_BCE, ξ_CON)` for 0-based epoch `j` of `epochs`.
pub fn schedules(epochs: usize, j: usize) -> (f64, f64) {
    let ne = epochs as f64;
    let j = j as f64;
    (ne / (ne + j), (ne + 10.0 * j) / ne)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub eta_theta: f64,
    pub eta_lambda: f64,
    /// Minibatch size is `2^batch_exp`.
    pub batch_exp: u32,
    pub epochs: usize,
    /// One bound per sensitive attribute.
    pub c: Vec<f64>,
    pub optimizer: Optimizer,
    pub sigmoid: SigmoidKind,
    pub arithmetic: Arithmetic,
    /// Seeds the per-epoch minibatch permutation shared by both parties.
    pub public_seed: [u8; 32],
    pub fx: FxConfig,
    /// Block width for the fixed-point constraint matrix.
    pub block: usize,
}

impl TrainingConfig {
    /// Defaults for `n` training rows and bounds `c`.
    pub fn new(n: usize, c: Vec<f64>) -> Self {
        Self {
            eta_theta: 1e-4,
            eta_lambda: 0.05,
            batch_exp: 6,
            epochs: default_epochs(n, 6),
            c,
            optimizer: Optimizer::Lagrange,
            sigmoid: SigmoidKind::Exact,
            arithmetic: Arithmetic::Float,
            public_seed: [0u8; 32],
            fx: FxConfig::default(),
            block: 64.min(n.max(1)),
        }
    }

    pub fn batch(&self) -> usize {
        1 << self.batch_exp
    }

    pub fn validate(&self, n: usize, p: usize) -> Result<(), ClearError> {
        let bad = |m: String| Err(ClearError::InvalidConfig(m));
        if n == 0 || !n.is_power_of_two() {
            return bad(format!("n = {n} is not a power of two"));
        }
        if self.batch() > n {
            return bad(format!("batch {} exceeds n = {n}", self.batch()));
        }
        if self.c.len() != p {
            return bad(format!("{} bounds for {p} sensitive attributes", self.c.len()));
        }
        if self.c.iter().any(|&c| !(c >= 0.0)) {
            return bad("bounds must be non-negative".into());
        }
        if !(self.eta_theta > 0.0 && self.eta_lambda >= 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.epochs == 0 {
            return bad("zero epochs".into());
        }
        if self.arithmetic == Arithmetic::Fixed {
            if self.optimizer != Optimizer::Lagrange {
                return bad(format!("{} runs in floating point only", self.optimizer));
            }
            if self.sigmoid != SigmoidKind::SecureMl {
                return bad("fixed-point training uses the secureml sigmoid".into());
            }
            if !self.block.is_power_of_two() || n % self.block != 0 {
                return bad(format!("block {} does not divide n = {n}", self.block));
            }
            self.fx.validate()?;
        }
        Ok(())
    }
}

/// Learned parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub theta: Vec<f64>,
    pub lambda: Vec<f64>,
}

/// Ring-encoded parameters of a fixed-point run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixedModel {
    pub theta: RingMatrix,
    pub lambda: RingMatrix,
}

/// Per-epoch training statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub max_f: f64,
    pub lambda_norm: f64,
    /// Positive rate for (z = 0, z = 1) per sensitive attribute.
    pub positive_rates: Vec<[Option<f64>; 2]>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub records: Vec<EpochRecord>,
}

impl Trace {
    /// One CSV row per epoch.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        let p = self.records.first().map_or(0, |r| r.positive_rates.len());
        let mut header = vec![
            "epoch".to_string(),
            "loss".into(),
            "accuracy".into(),
            "max_f".into(),
            "lambda_norm".into(),
        ];
        for j in 0..p {
            header.push(format!("pos_rate_z{j}_0"));
            header.push(format!("pos_rate_z{j}_1"));
        }
        out.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                r.epoch.to_string(),
                format!("{:.6}", r.loss),
                format!("{:.6}", r.accuracy),
                format!("{:.6e}", r.max_f),
                format!("{:.6e}", r.lambda_norm),
            ];
            for pr in &r.positive_rates {
                for v in pr {
                    row.push(v.map_or(String::new(), |v| format!("{v:.6}")));
                }
            }
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub trace: Trace,
    /// Present for fixed-point runs.
    pub fixed: Option<FixedModel>,
}

/// `(1/n)(Z - z̄)ᵀ X`.
pub fn constraint_matrix(d: &Dataset) -> DMatrix<f64> {
    let n = d.n() as f64;
    let mut zc = d.z.clone();
    for mut col in zc.column_iter_mut() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
    }
    zc.transpose() * &d.x / n
}

/// `|Aθ| - c` elementwise.
pub fn fairness_value(a: &DMatrix<f64>, theta: &DVector<f64>, c: &[f64]) -> DVector<f64> {
    let u = a * theta;
    DVector::from_iterator(u.len(), u.iter().zip(c).map(|(u, c)| u.abs() - c))
}

/// Centered sensitive attributes in fixed point: `Z - (colsum(Z) >> log2 n)`.
pub fn center_fixed(z: &RingMatrix) -> RingMatrix {
    let shift = z.rows.trailing_zeros();
    let mean = z.column_sums().map(|v| round_shift(v, shift));
    let mut out = z.clone();
    for r in 0..z.rows {
        for c in 0..z.cols {
            out.set(r, c, z.get(r, c) - mean.data[c]);
        }
    }
    out
}

/// Fixed-point constraint matrix as computed by the protocol.
pub fn constraint_matrix_fixed(z: &RingMatrix, x: &RingMatrix, block: usize, fx: &FxConfig) -> RingMatrix {
    blocked_mult_shift_avg_clear(&center_fixed(z).transpose(), x, block, fx)
}

/// Minibatch permutation of `0..n` for 0-based `epoch`.
pub fn minibatch_order(seed: &[u8; 32], epoch: usize, n: usize) -> Vec<usize> {
    let key: [u8; 32] = Sha256::new()
        .chain_update(b"blindfair/minibatch")
        .chain_update(seed)
        .chain_update((epoch as u64).to_le_bytes())
        .finalize()
        .into();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha20Rng::from_seed(key));
    order
}

pub fn sigmoid_exact(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Slope and intercept of the minimax line for the sigmoid on `[k, k+1]`.
pub fn chebyshev_line(k: i32) -> (f64, f64) {
    let (a, b) = (k as f64, k as f64 + 1.0);
    let (fa, fb) = (sigmoid_exact(a), sigmoid_exact(b));
    let slope = fb - fa;
    // tangent point: σ(ξ)(1 - σ(ξ)) = slope, on the concave (k ≥ 0) or convex side
    let disc = (1.0 - 4.0 * slope).max(0.0).sqrt();
    let s = if k >= 0 { (1.0 + disc) / 2.0 } else { (1.0 - disc) / 2.0 };
    let xi = (s / (1.0 - s)).ln();
    let intercept = (fa + s - slope * (a + xi)) / 2.0;
    (slope, intercept)
}

fn chebyshev_table() -> &'static [(f64, f64); 10] {
    static TABLE: std::sync::OnceLock<[(f64, f64); 10]> = std::sync::OnceLock::new();
    TABLE.get_or_init(|| std::array::from_fn(|i| chebyshev_line(i as i32 - 5)))
}

pub fn sigmoid(x: f64, kind: SigmoidKind) -> f64 {
    match kind {
        SigmoidKind::Exact => sigmoid_exact(x),
        SigmoidKind::SecureMl => (x + 0.5).clamp(0.0, 1.0),
        SigmoidKind::Chebyshev => {
            if x < -5.0 {
                0.0
            } else if x >= 5.0 {
                1.0
            } else {
                let (m, q) = chebyshev_table()[(x.floor() as i32 + 5) as usize];
                m * x + q
            }
        }
    }
}

/// Mean binary cross-entropy of the exact-sigmoid model.
pub fn bce_loss(x: &DMatrix<f64>, y: &DVector<f64>, theta: &DVector<f64>) -> f64 {
    let z = x * theta;
    let total: f64 = z
        .iter()
        .zip(y.iter())
        .map(|(&z, &y)| {
            // log(1 + e^z) - y z, stable for large |z|
            let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
            softplus - y * z
        })
        .sum();
    total / x.nrows() as f64
}

/// Gradient of [`bce_loss`] with the given sigmoid variant.
pub fn bce_gradient(x: &DMatrix<f64>, y: &DVector<f64>, theta: &DVector<f64>, kind: SigmoidKind) -> DVector<f64> {
    let z = x * theta;
    let r = DVector::from_iterator(z.len(), z.iter().zip(y.iter()).map(|(&z, &y)| sigmoid(z, kind) - y));
    x.transpose() * r / x.nrows() as f64
}

/// `-(1/t) Σ_j [log(c_j + a_jθ) + log(c_j - a_jθ)]`; `None` outside the domain.
pub fn barrier_value(a: &DMatrix<f64>, theta: &DVector<f64>, c: &[f64], t: f64) -> Option<f64> {
    let u = a * theta;
    let mut acc = 0.0;
    for (u, &c) in u.iter().zip(c) {
        if u.abs() >= c {
            return None;
        }
        acc += (c + u).ln() + (c - u).ln();
    }
    Some(-acc / t)
}

pub fn barrier_gradient(a: &DMatrix<f64>, theta: &DVector<f64>, c: &[f64], t: f64) -> DVector<f64> {
    let u = a * theta;
    let w = DVector::from_iterator(u.len(), u.iter().zip(c).map(|(&u, &c)| 1.0 / (c - u) - 1.0 / (c + u)));
    a.transpose() * w / t
}

/// Conditioning threshold above which a projection counts as singular.
pub const MAX_PROJECTION_CONDITION: f64 = 1e12;

/// `(I - Âᵀ(ÂÂᵀ)⁻¹Â) g` for the given active rows; `Err(cond)` when `ÂÂᵀ`
/// is numerically singular.
pub fn project_gradient(a_hat: &DMatrix<f64>, g: &DVector<f64>) -> Result<DVector<f64>, f64> {
    if a_hat.nrows() == 0 {
        return Ok(g.clone());
    }
    let gram = a_hat * a_hat.transpose();
    let sv = gram.singular_values();
    let (max, min) = (sv.max(), sv.min());
    let cond = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(cond <= MAX_PROJECTION_CONDITION) {
        return Err(cond);
    }
    let rhs = a_hat * g;
    let coef = gram.lu().solve(&rhs).ok_or(f64::INFINITY)?;
    Ok(g - a_hat.transpose() * coef)
}

/// Trains with the configured optimizer and arithmetic.
pub fn train(d: &Dataset, cfg: &TrainingConfig) -> Result<TrainOutcome, ClearError> {
    cfg.validate(d.n(), d.p())?;
    match (cfg.arithmetic, cfg.optimizer) {
        (Arithmetic::Fixed, _) => train_lagrange_fixed(d, cfg),
        (Arithmetic::Float, Optimizer::Lagrange) => train_lagrange(d, cfg),
        (Arithmetic::Float, Optimizer::Projected) => train_projected(d, cfg),
        (Arithmetic::Float, Optimizer::Iplb) => train_iplb(d, cfg),
    }
}

fn epoch_record(d: &Dataset, a: &DMatrix<f64>, theta: &DVector<f64>, lambda: &DVector<f64>, c: &[f64], epoch: usize) -> EpochRecord {
    let report = evaluate(d, theta.as_slice());
    let f = fairness_value(a, theta, c);
    EpochRecord {
        epoch,
        loss: bce_loss(&d.x, &d.y, theta),
        accuracy: report.accuracy,
        max_f: f.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        lambda_norm: lambda.norm(),
        positive_rates: report
            .attributes
            .iter()
            .map(|at| [at.groups[0].positive_rate, at.groups[1].positive_rate])
            .collect(),
    }
}

fn check_finite(v: &DVector<f64>, epoch: usize) -> Result<(), ClearError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(ClearError::NonFinite { epoch })
    }
}

/// Floating-point Lagrangian-multiplier SGD.
pub fn train_lagrange(d: &Dataset, cfg: &TrainingConfig) -> Result<TrainOutcome, ClearError> {
    cfg.validate(d.n(), d.p())?;
    let a = constraint_matrix(d);
    let (n, dim, p, batch) = (d.n(), d.d(), d.p(), cfg.batch());
    let mut theta = DVector::zeros(dim);
    let mut lambda = DVector::zeros(p);
    let mut trace = Trace::default();
    for epoch in 0..cfg.epochs {
        let (xi_b, xi_c) = schedules(cfg.epochs, epoch);
        let order = minibatch_order(&cfg.public_seed, epoch, n);
        for idx in order.chunks_exact(batch) {
            let u = &a * &theta;
            let f = DVector::from_iterator(p, u.iter().zip(&cfg.c).map(|(u, c)| u.abs() - c));
            let grad_lambda = f.map(|v| v.max(0.0));
            let xb = d.x.select_rows(idx);
            let yb = DVector::from_iterator(batch, idx.iter().map(|&i| d.y[i]));
            let grad_bce = bce_gradient(&xb, &yb, &theta, cfg.sigmoid);
            let mut grad_con = DVector::zeros(dim);
            for j in 0..p {
                if f[j] > 0.0 {
                    let sign = if u[j] >= 0.0 { 1.0 } else { -1.0 };
                    grad_con += a.row(j).transpose() * (sign * lambda[j]);
                }
            }
            theta -= (grad_bce * xi_b + grad_con * xi_c) * cfg.eta_theta;
            lambda = (lambda + grad_lambda * cfg.eta_lambda).map(|v| v.max(0.0));
        }
        check_finite(&theta, epoch)?;
        check_finite(&lambda, epoch)?;
        trace.records.push(epoch_record(d, &a, &theta, &lambda, &cfg.c, epoch));
    }
    Ok(TrainOutcome {
        params: ModelParams {
            theta: theta.as_slice().to_vec(),
            lambda: lambda.as_slice().to_vec(),
        },
        trace,
        fixed: None,
    })
}

/// Projected-gradient SGD: the BCE gradient is projected onto the null space
/// of the currently violated constraint rows.
pub fn train_projected(d: &Dataset, cfg: &TrainingConfig) -> Result<TrainOutcome, ClearError> {
    cfg.validate(d.n(), d.p())?;
    let a = constraint_matrix(d);
    let (n, dim, batch) = (d.n(), d.d(), cfg.batch());
    let mut theta = DVector::zeros(dim);
    let lambda = DVector::zeros(d.p());
    let mut trace = Trace::default();
    for epoch in 0..cfg.epochs {
        let (xi_b, _) = schedules(cfg.epochs, epoch);
        let order = minibatch_order(&cfg.public_seed, epoch, n);
        for idx in order.chunks_exact(batch) {
            let f = fairness_value(&a, &theta, &cfg.c);
            let active: Vec<usize> = (0..f.len()).filter(|&j| f[j] > 0.0).collect();
            let a_hat = a.select_rows(&active);
            let xb = d.x.select_rows(idx);
            let yb = DVector::from_iterator(batch, idx.iter().map(|&i| d.y[i]));
            let g = bce_gradient(&xb, &yb, &theta, cfg.sigmoid);
            let g = project_gradient(&a_hat, &g).map_err(|cond| ClearError::SingularProjection { epoch, cond })?;
            theta -= g * (cfg.eta_theta * xi_b);
        }
        check_finite(&theta, epoch)?;
        trace.records.push(epoch_record(d, &a, &theta, &lambda, &cfg.c, epoch));
    }
    Ok(TrainOutcome {
        params: ModelParams {
            theta: theta.as_slice().to_vec(),
            lambda: lambda.as_slice().to_vec(),
        },
        trace,
        fixed: None,
    })
}

/// Log-barrier SGD; `t` starts at 1 and doubles every epoch.
pub fn train_iplb(d: &Dataset, cfg: &TrainingConfig) -> Result<TrainOutcome, ClearError> {
    cfg.validate(d.n(), d.p())?;
    let a = constraint_matrix(d);
    let (n, dim, batch) = (d.n(), d.d(), cfg.batch());
    let mut theta = DVector::zeros(dim);
    let lambda = DVector::zeros(d.p());
    if let Some(row) = cfg.c.iter().position(|&c| c <= 0.0) {
        return Err(ClearError::BarrierDomain { epoch: 0, row });
    }
    let mut trace = Trace::default();
    let mut t = 1.0f64;
    for epoch in 0..cfg.epochs {
        let (xi_b, xi_c) = schedules(cfg.epochs, epoch);
        let order = minibatch_order(&cfg.public_seed, epoch, n);
        for idx in order.chunks_exact(batch) {
            let xb = d.x.select_rows(idx);
            let yb = DVector::from_iterator(batch, idx.iter().map(|&i| d.y[i]));
            let g = bce_gradient(&xb, &yb, &theta, cfg.sigmoid) * xi_b + barrier_gradient(&a, &theta, &cfg.c, t) * xi_c;
            theta -= g * cfg.eta_theta;
            let u = &a * &theta;
            if let Some(row) = (0..u.len()).find(|&j| !(u[j].abs() < cfg.c[j])) {
                return Err(ClearError::BarrierDomain { epoch, row });
            }
        }
        check_finite(&theta, epoch)?;
        trace.records.push(epoch_record(d, &a, &theta, &lambda, &cfg.c, epoch));
        t *= 2.0;
    }
    Ok(TrainOutcome {
        params: ModelParams {
            theta: theta.as_slice().to_vec(),
            lambda: lambda.as_slice().to_vec(),
        },
        trace,
        fixed: None,
    })
}

/// Public multipliers of one epoch of fixed-point training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpochCoefficients {
    pub bce: (RingElement, u32),
    pub con: (RingElement, u32),
    pub lambda: (RingElement, u32),
}

impl EpochCoefficients {
    pub fn new(cfg: &TrainingConfig, epoch: usize) -> Result<Self, FxError> {
        let (xi_b, xi_c) = schedules(cfg.epochs, epoch);
        Ok(Self {
            bce: encode_coefficient(cfg.eta_theta * xi_b, &cfg.fx)?,
            con: encode_coefficient(cfg.eta_theta * xi_c, &cfg.fx)?,
            lambda: encode_coefficient(cfg.eta_lambda, &cfg.fx)?,
        })
    }
}

fn scale_by(v: RingElement, (k, shift): (RingElement, u32)) -> RingElement {
    round_shift(v * k, shift)
}

/// Fixed-point Lagrangian training with floor truncation; mirrors the secure
/// protocol operation by operation.
pub fn train_lagrange_fixed(d: &Dataset, cfg: &TrainingConfig) -> Result<TrainOutcome, ClearError> {
    cfg.validate(d.n(), d.p())?;
    let fx = cfg.fx;
    let f = fx.frac_bits;
    let q = crate::dataio::fx_quantize(d, &fx).map_err(|e| ClearError::Overflow(e.to_string()))?;
    let (n, dim, p, batch) = (d.n(), d.d(), d.p(), cfg.batch());
    let a = constraint_matrix_fixed(&q.z, &q.x, cfg.block, &fx);
    let at = a.transpose();
    let c_enc: Vec<RingElement> = cfg.c.iter().map(|&c| encode(c, &fx)).collect::<Result<_, _>>()?;
    let a_float = constraint_matrix(d);
    let limit = 1i64 << (fx.int_bits + f - 1);

    let mut theta = RingMatrix::zeros(dim, 1);
    let mut lambda = RingMatrix::zeros(p, 1);
    let mut trace = Trace::default();
    for epoch in 0..cfg.epochs {
        let k = EpochCoefficients::new(cfg, epoch)?;
        let order = minibatch_order(&cfg.public_seed, epoch, n);
        for idx in order.chunks_exact(batch) {
            let xb = q.x.select_rows(idx);
            let yb = q.y.select_rows(idx);
            let u = a.matmul(&theta).map(|v| round_shift(v, f));
            let z = xb.matmul(&theta).map(|v| round_shift(v, f));

            let neg_u: Vec<bool> = u.data.iter().map(|v| v.msb()).collect();
            let abs_u: Vec<RingElement> = u.data.iter().map(|&v| if v.msb() { -v } else { v }).collect();
            let signed_lambda: Vec<RingElement> = lambda
                .data
                .iter()
                .zip(&neg_u)
                .map(|(&l, &neg)| if neg { -l } else { l })
                .collect();
            let sigma = z.map(|v| sigmoid_approx_clear(v, f));
            let r = sigma.sub(&yb);

            let fval: Vec<RingElement> = abs_u.iter().zip(&c_enc).map(|(&u, &c)| u - c).collect();
            let grad_lambda: Vec<RingElement> = fval.iter().map(|&v| if v.msb() { RingElement(0) } else { v }).collect();
            let w: Vec<RingElement> = fval
                .iter()
                .zip(&signed_lambda)
                .map(|(&fv, &sl)| if (-fv).msb() { sl } else { RingElement(0) })
                .collect();

            let g_bce = xb.transpose().matmul(&r).map(|v| round_shift(v, f + cfg.batch_exp));
            let g_con = at.matmul(&RingMatrix::column(w)).map(|v| round_shift(v, f));
            let step_b = g_bce.map(|v| scale_by(v, k.bce));
            let step_c = g_con.map(|v| scale_by(v, k.con));
            let d_lambda: Vec<RingElement> = grad_lambda.iter().map(|&v| scale_by(v, k.lambda)).collect();

            theta = theta.sub(&step_b).sub(&step_c);
            lambda = RingMatrix::column(
                lambda
                    .data
                    .iter()
                    .zip(&d_lambda)
                    .map(|(&l, &dl)| {
                        let v = l + dl;
                        if v.msb() {
                            RingElement(0)
                        } else {
                            v
                        }
                    })
                    .collect(),
            );
        }
        if let Some(v) = theta.data.iter().chain(&lambda.data).find(|v| v.signed().abs() >= limit) {
            return Err(ClearError::Overflow(format!(
                "parameter magnitude {} in epoch {epoch}",
                decode(*v, &fx)
            )));
        }
        let theta_f = DVector::from_vec(theta.decode(&fx));
        let lambda_f = DVector::from_vec(lambda.decode(&fx));
        trace.records.push(epoch_record(d, &a_float, &theta_f, &lambda_f, &cfg.c, epoch));
    }
    Ok(TrainOutcome {
        params: ModelParams {
            theta: theta.decode(&fx),
            lambda: lambda.decode(&fx),
        },
        trace,
        fixed: Some(FixedModel { theta, lambda }),
    })
}

/// Metrics of one group (rows with a given sensitive value).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GroupRates {
    pub count: usize,
    pub accuracy: Option<f64>,
    pub tpr: Option<f64>,
    pub tnr: Option<f64>,
    pub ppv: Option<f64>,
    pub npv: Option<f64>,
    /// `P(ŷ = 1 | group)`.
    pub positive_rate: Option<f64>,
}

/// Absolute between-group differences; absent when either side is undefined.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricGaps {
    pub accuracy: Option<f64>,
    pub tpr: Option<f64>,
    pub tnr: Option<f64>,
    pub ppv: Option<f64>,
    pub npv: Option<f64>,
    pub positive_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeReport {
    /// Index 0: z = 0, index 1: z = 1.
    pub groups: [GroupRates; 2],
    pub gaps: MetricGaps,
    /// `min(AR1/AR0, AR0/AR1)`.
    pub p_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FairnessReport {
    pub n: usize,
    pub accuracy: f64,
    pub attributes: Vec<AttributeReport>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn gap(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some((a? - b?).abs())
}

/// Metrics of given predictions.
pub fn report_from_predictions(pred: &[bool], y: &[bool], z: &[Vec<bool>]) -> FairnessReport {
    let n = pred.len();
    let correct = pred.iter().zip(y).filter(|(p, y)| p == y).count();
    let attributes = z
        .iter()
        .map(|col| {
            let groups = [false, true].map(|g| {
                let mut c = [[0usize; 2]; 2]; // c[y][ŷ]
                for i in 0..n {
                    if col[i] == g {
                        c[y[i] as usize][pred[i] as usize] += 1;
                    }
                }
                let count = c[0][0] + c[0][1] + c[1][0] + c[1][1];
                GroupRates {
                    count,
                    accuracy: ratio(c[0][0] + c[1][1], count),
                    tpr: ratio(c[1][1], c[1][0] + c[1][1]),
                    tnr: ratio(c[0][0], c[0][0] + c[0][1]),
                    ppv: ratio(c[1][1], c[0][1] + c[1][1]),
                    npv: ratio(c[0][0], c[0][0] + c[1][0]),
                    positive_rate: ratio(c[0][1] + c[1][1], count),
                }
            });
            let [g0, g1] = groups;
            let p_ratio = match (g0.positive_rate, g1.positive_rate) {
                (Some(a), Some(b)) if a > 0.0 && b > 0.0 => Some((a / b).min(b / a)),
                (Some(a), Some(b)) if a > 0.0 || b > 0.0 => Some(0.0),
                _ => None,
            };
            AttributeReport {
                groups,
                gaps: MetricGaps {
                    accuracy: gap(g0.accuracy, g1.accuracy),
                    tpr: gap(g0.tpr, g1.tpr),
                    tnr: gap(g0.tnr, g1.tnr),
                    ppv: gap(g0.ppv, g1.ppv),
                    npv: gap(g0.npv, g1.npv),
                    positive_rate: gap(g0.positive_rate, g1.positive_rate),
                },
                p_ratio,
            }
        })
        .collect();
    FairnessReport {
        n,
        accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
        attributes,
    }
}

/// Predicts `ŷ = [xᵀθ ≥ 0]`.
pub fn predict(x: &DMatrix<f64>, theta: &[f64]) -> Vec<bool> {
    let th = DVector::from_column_slice(theta);
    (x * th).iter().map(|&v| v >= 0.0).collect()
}

/// Fairness and accuracy of `θ` on a dataset.
pub fn evaluate(d: &Dataset, theta: &[f64]) -> FairnessReport {
    let pred = predict(&d.x, theta);
    let y: Vec<bool> = d.y.iter().map(|&v| v > 0.5).collect();
    let z: Vec<Vec<bool>> = (0..d.p()).map(|j| d.z.column(j).iter().map(|&v| v > 0.5).collect()).collect();
    report_from_predictions(&pred, &y, &z)
}

/// One configuration/bound combination of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub optimizer: Optimizer,
    pub arithmetic: Arithmetic,
    pub sigmoid: SigmoidKind,
    pub c: f64,
    /// `None` on success, else the failure reason.
    pub failure: Option<String>,
    pub accuracy: Option<f64>,
    pub positive_rate_gap: Option<f64>,
    /// Test-set `P(ŷ = 1 | z = 0)` and `P(ŷ = 1 | z = 1)` of the first attribute.
    pub positive_rates: [Option<f64>; 2],
    pub p_ratio: Option<f64>,
    /// Largest `F(θ)` entry on the training set.
    pub max_f: Option<f64>,
    pub theta_norm: Option<f64>,
    /// Per-epoch statistics; empty for failed runs.
    pub trace: Trace,
}

/// `steps` log-spaced values from `hi` down to `lo`.
pub fn log_space_desc(lo: f64, hi: f64, steps: usize) -> Vec<f64> {
    if steps <= 1 {
        return vec![hi];
    }
    let (l, h) = (lo.log10(), hi.log10());
    (0..steps).map(|i| 10f64.powf(h + (l - h) * i as f64 / (steps - 1) as f64)).collect()
}

/// Trains `base` for every bound in `cs` (applied to all attributes) and
/// evaluates on `test`. Failed runs are recorded, not propagated.
pub fn sweep(train_set: &Dataset, test: &Dataset, base: &TrainingConfig, cs: &[f64]) -> Vec<SweepRow> {
    let a = constraint_matrix(train_set);
    cs.iter()
        .map(|&c| {
            let mut cfg = base.clone();
            cfg.c = vec![c; train_set.p()];
            let mut row = SweepRow {
                optimizer: cfg.optimizer,
                arithmetic: cfg.arithmetic,
                sigmoid: cfg.sigmoid,
                c,
                failure: None,
                accuracy: None,
                positive_rate_gap: None,
                positive_rates: [None; 2],
                p_ratio: None,
                max_f: None,
                theta_norm: None,
                trace: Trace::default(),
            };
            match train(train_set, &cfg) {
                Ok(out) => {
                    let report = evaluate(test, &out.params.theta);
                    let theta = DVector::from_column_slice(&out.params.theta);
                    row.accuracy = Some(report.accuracy);
                    row.positive_rate_gap = report.attributes.first().and_then(|a| a.gaps.positive_rate);
                    row.p_ratio = report.attributes.first().and_then(|a| a.p_ratio);
                    if let Some(a) = report.attributes.first() {
                        row.positive_rates = [a.groups[0].positive_rate, a.groups[1].positive_rate];
                    }
                    row.trace = out.trace;
                    row.max_f = fairness_value(&a, &theta, &cfg.c).iter().copied().reduce(f64::max);
                    row.theta_norm = Some(theta.norm());
                }
                Err(e) => row.failure = Some(e.to_string()),
            }
            row
        })
        .collect()
}

/// Writes sweep rows as CSV.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], w: W) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "optimizer",
        "arithmetic",
        "sigmoid",
        "c",
        "status",
        "accuracy",
        "positive_rate_gap",
        "pos_rate_z0",
        "pos_rate_z1",
        "p_ratio",
        "max_f",
        "theta_norm",
        "failure",
    ])?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6e}"));
    for r in rows {
        out.write_record([
            r.optimizer.to_string(),
            r.arithmetic.to_string(),
            r.sigmoid.to_string(),
            format!("{:.6e}", r.c),
            if r.failure.is_some() { "failed".into() } else { "ok".into() },
            opt(r.accuracy),
            opt(r.positive_rate_gap),
            opt(r.positive_rates[0]),
            opt(r.positive_rates[1]),
            opt(r.p_ratio),
            opt(r.max_f),
            opt(r.theta_norm),
            r.failure.clone().unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn toy(n: usize, d: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, d, |_, _| rng.gen_range(-1.5..1.5));
        let y = DVector::from_fn(n, |i, _| if x[(i, 0)] + 0.3 * rng.gen_range(-1.0..1.0) > 0.0 { 1.0 } else { 0.0 });
        let z = DMatrix::from_fn(n, 1, |i, _| if x[(i, 1)] + x[(i, 0)] > 0.0 { 1.0 } else { 0.0 });
        Dataset::new(x, y, z)
    }

    #[test]
    fn constraint_matrix_examples() {
        let d = Dataset::new(
            DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]),
            DVector::zeros(4),
            DMatrix::from_column_slice(4, 1, &[0.0, 0.0, 1.0, 1.0]),
        );
        assert!((constraint_matrix(&d)[(0, 0)] - 0.5).abs() < 1e-15);

        let mut t = toy(32, 3, 1);
        t.z = DMatrix::from_fn(32, 2, |i, j| if j == 0 { 1.0 } else { (i % 3 == 0) as u8 as f64 });
        let a = constraint_matrix(&t);
        assert!(a.row(0).iter().all(|v| v.abs() < 1e-15));
        // brute force
        let n = 32.0;
        let zbar: f64 = t.z.column(1).sum() / n;
        for k in 0..3 {
            let mut acc = 0.0;
            for i in 0..32 {
                acc += (t.z[(i, 1)] - zbar) * t.x[(i, k)];
            }
            assert!((a[(1, k)] - acc / n).abs() < 1e-12);
        }
    }

    #[test]
    fn fairness_value_examples() {
        let a = DMatrix::from_row_slice(1, 1, &[0.5]);
        let f = fairness_value(&a, &DVector::from_vec(vec![0.2]), &[1e-4]);
        assert!((f[0] - 0.0999).abs() < 1e-15);
        let f0 = fairness_value(&a, &DVector::zeros(1), &[0.3]);
        assert_eq!(f0[0], -0.3);
        let a2 = DMatrix::from_row_slice(1, 3, &[0.3, -0.2, 0.1]);
        let th = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        let base = fairness_value(&a2, &th, &[0.0])[0];
        let scaled = fairness_value(&a2, &(&th * 3.0), &[0.0])[0];
        assert!((scaled - 3.0 * base).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_variants_examples() {
        assert_eq!(sigmoid(0.0, SigmoidKind::Exact), 0.5);
        assert_eq!(sigmoid(0.0, SigmoidKind::SecureMl), 0.5);
        assert_eq!(sigmoid(-0.75, SigmoidKind::SecureMl), 0.0);
        assert_eq!(sigmoid(0.25, SigmoidKind::SecureMl), 0.75);
        assert_eq!(sigmoid(-0.5, SigmoidKind::SecureMl), 0.0);
        assert_eq!(sigmoid(0.5, SigmoidKind::SecureMl), 1.0);
    }

    #[test]
    fn chebyshev_lines_are_minimax() {
        for k in -5..5 {
            let (m, q) = chebyshev_line(k);
            let grid: Vec<f64> = (0..=20_000).map(|i| k as f64 + i as f64 / 20_000.0).collect();
            let err = |m: f64, q: f64| grid.iter().map(|&x| (sigmoid_exact(x) - m * x - q).abs()).fold(0.0, f64::max);
            let e = err(m, q);
            // equioscillation at both endpoints
            let ea = sigmoid_exact(k as f64) - m * k as f64 - q;
            let eb = sigmoid_exact(k as f64 + 1.0) - m * (k as f64 + 1.0) - q;
            assert!((ea - eb).abs() < 1e-12 && (ea.abs() - e).abs() < 1e-9, "k={k}");
            // no nearby line does better on the grid
            for dm in [-1e-3, 0.0, 1e-3] {
                for dq in [-1e-3, 0.0, 1e-3] {
                    if dm != 0.0 || dq != 0.0 {
                        assert!(err(m + dm, q + dq) >= e - 1e-12, "k={k}");
                    }
                }
            }
            // and the piecewise function uses it
            let mid = k as f64 + 0.37;
            assert!((sigmoid(mid, SigmoidKind::Chebyshev) - (m * mid + q)).abs() < 1e-15);
        }
        assert_eq!(sigmoid(-6.0, SigmoidKind::Chebyshev), 0.0);
        assert_eq!(sigmoid(6.0, SigmoidKind::Chebyshev), 1.0);
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let d = toy(64, 4, 2);
        let theta = DVector::from_vec(vec![0.3, -0.7, 0.2, 1.1]);
        let g = bce_gradient(&d.x, &d.y, &theta, SigmoidKind::Exact);
        let h = 1e-5;
        for k in 0..4 {
            let mut tp = theta.clone();
            tp[k] += h;
            let mut tm = theta.clone();
            tm[k] -= h;
            let fd = (bce_loss(&d.x, &d.y, &tp) - bce_loss(&d.x, &d.y, &tm)) / (2.0 * h);
            assert!(((fd - g[k]) / g[k].abs().max(1e-8)).abs() < 1e-5);
        }
    }

    #[test]
    fn barrier_gradient_matches_finite_differences_and_is_zero_at_origin() {
        let a = DMatrix::from_row_slice(2, 3, &[0.3, -0.1, 0.2, -0.05, 0.4, 0.1]);
        let c = [0.5, 0.6];
        assert!(barrier_gradient(&a, &DVector::zeros(3), &c, 1.0).norm() == 0.0);
        assert!(barrier_value(&a, &DVector::zeros(3), &c, 1.0).unwrap().is_finite());
        let theta = DVector::from_vec(vec![0.4, 0.3, -0.2]);
        let g = barrier_gradient(&a, &theta, &c, 2.0);
        let h = 1e-6;
        for k in 0..3 {
            let mut tp = theta.clone();
            tp[k] += h;
            let mut tm = theta.clone();
            tm[k] -= h;
            let fd = (barrier_value(&a, &tp, &c, 2.0).unwrap() - barrier_value(&a, &tm, &c, 2.0).unwrap()) / (2.0 * h);
            assert!(((fd - g[k]) / g[k].abs()).abs() < 1e-5);
        }
    }

    #[test]
    fn one_lagrange_step_matches_hand_gradient() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.5, -1.0, 0.2, 0.3, -0.7, 0.9, 0.1]);
        let y = DVector::from_vec(vec![1.0, 0.0, 1.0, 0.0]);
        let z = DMatrix::from_column_slice(4, 1, &[0.0, 1.0, 0.0, 1.0]);
        let d = Dataset::new(x.clone(), y.clone(), z);
        let mut cfg = TrainingConfig::new(4, vec![1e6]);
        cfg.batch_exp = 2;
        cfg.epochs = 1;
        let out = train_lagrange(&d, &cfg).unwrap();
        // θ = 0: σ = 1/2 everywhere, gradient = Xᵀ(1/2 - y)/4
        let mut expected = [0.0; 2];
        for i in 0..4 {
            for k in 0..2 {
                expected[k] -= 1e-4 * x[(i, k)] * (0.5 - y[i]) / 4.0;
            }
        }
        for k in 0..2 {
            assert!((out.params.theta[k] - expected[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn huge_bound_gives_unconstrained_sgd() {
        let d = toy(256, 3, 3);
        let mut cfg = TrainingConfig::new(256, vec![1e9]);
        cfg.epochs = 5;
        let out = train_lagrange(&d, &cfg).unwrap();
        // hand-rolled plain SGD with the same batches
        let mut theta = DVector::zeros(3);
        for epoch in 0..5 {
            let (xi_b, _) = schedules(5, epoch);
            for idx in minibatch_order(&cfg.public_seed, epoch, 256).chunks_exact(64) {
                let xb = d.x.select_rows(idx);
                let yb = DVector::from_iterator(64, idx.iter().map(|&i| d.y[i]));
                theta -= bce_gradient(&xb, &yb, &theta, SigmoidKind::Exact) * (1e-4 * xi_b);
            }
        }
        for (a, b) in out.params.theta.iter().zip(theta.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(out.params.lambda.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn schedules_start_at_one() {
        assert_eq!(schedules(10, 0), (1.0, 1.0));
        assert_eq!(schedules(10, 5), (10.0 / 15.0, 6.0));
        assert_eq!(default_epochs(1024, 6), 938);
    }

    #[test]
    fn lambda_stays_non_negative() {
        let d = toy(256, 3, 4);
        let mut cfg = TrainingConfig::new(256, vec![1e-3]);
        cfg.epochs = 20;
        let out = train_lagrange(&d, &cfg).unwrap();
        assert!(out.trace.records.iter().all(|r| r.lambda_norm >= 0.0));
        assert!(out.params.lambda.iter().all(|&l| l >= 0.0));
    }

    #[test]
    fn projection_properties() {
        let g = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let empty = DMatrix::<f64>::zeros(0, 3);
        assert_eq!(project_gradient(&empty, &g).unwrap(), g);
        let a = DMatrix::from_row_slice(1, 3, &[0.3, -0.4, 0.5]);
        let pg = project_gradient(&a, &g).unwrap();
        assert!((a.row(0) * &pg)[0].abs() < 1e-10);
        let dup = DMatrix::from_row_slice(2, 3, &[0.3, -0.4, 0.5, 0.3, -0.4, 0.5]);
        assert!(project_gradient(&dup, &g).is_err());
    }

    #[test]
    fn iplb_domain_and_convergence_on_toy_problem() {
        // 1-d: the barrier optimum approaches the constrained optimum as t grows
        let a = DMatrix::from_row_slice(1, 1, &[1.0]);
        let c = [0.5];
        // minimize (θ - 2)^2 / 2 subject to |θ| ≤ 0.5 → θ* = 0.5
        let objective = |th: f64, t: f64| {
            (th - 2.0).powi(2) / 2.0 + barrier_value(&a, &DVector::from_vec(vec![th]), &c, t).unwrap_or(f64::INFINITY)
        };
        let mut prev_gap = f64::INFINITY;
        for t in [1.0, 10.0, 100.0, 1000.0] {
            let best = (1..100_000)
                .map(|i| -0.5 + i as f64 * 1e-5)
                .min_by(|&x, &y| objective(x, t).partial_cmp(&objective(y, t)).unwrap())
                .unwrap();
            let gap = 0.5 - best;
            assert!(gap < prev_gap);
            prev_gap = gap;
        }
        assert!(prev_gap < 1e-3);
    }

    #[test]
    fn iplb_rejects_zero_bound() {
        let d = toy(64, 2, 5);
        let mut cfg = TrainingConfig::new(64, vec![0.0]);
        cfg.optimizer = Optimizer::Iplb;
        cfg.epochs = 1;
        assert!(matches!(train(&d, &cfg), Err(ClearError::BarrierDomain { .. })));
    }

    #[test]
    fn evaluate_examples() {
        let pred = [true, false, true, false];
        let y = [true, false, false, true];
        let z = vec![vec![false, false, true, true]];
        let r = report_from_predictions(&pred, &y, &z);
        assert_eq!(r.attributes[0].groups[0].positive_rate, Some(0.5));
        assert_eq!(r.attributes[0].groups[1].positive_rate, Some(0.5));
        assert_eq!(r.attributes[0].p_ratio, Some(1.0));
        // group z=1 has no positive label predicted correctly and no y=1 & ŷ=1
        assert_eq!(r.attributes[0].groups[1].tpr, Some(0.0));

        let all = report_from_predictions(&y, &y, &z);
        assert_eq!(all.accuracy, 1.0);
        assert_eq!(all.attributes[0].gaps.accuracy, Some(0.0));

        let same = report_from_predictions(&[true, true, true, true], &[true, false, true, false], &z);
        let g = same.attributes[0].gaps;
        assert_eq!(g.positive_rate, Some(0.0));
        assert_eq!(g.accuracy, Some(0.0));
        assert_eq!(g.tpr, Some(0.0));
        assert_eq!(g.tnr, Some(0.0));
        assert_eq!(g.ppv, Some(0.0));
        // no negative predictions anywhere: NPV undefined, not zero
        assert_eq!(g.npv, None);
        assert_eq!(same.attributes[0].groups[0].npv, None);
    }

    #[test]
    fn minibatch_order_is_a_seeded_permutation() {
        let a = minibatch_order(&[1; 32], 0, 100);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        assert_eq!(a, minibatch_order(&[1; 32], 0, 100));
        assert_ne!(a, minibatch_order(&[1; 32], 1, 100));
    }

    #[test]
    fn fixed_constraint_matrix_close_to_float() {
        let d = toy(256, 3, 6);
        let fx = FxConfig::default();
        let q = crate::dataio::fx_quantize(&d, &fx).unwrap();
        let a = constraint_matrix_fixed(&q.z, &q.x, 64, &fx).decode(&fx);
        let af = constraint_matrix(&d);
        for k in 0..3 {
            assert!((a[k] - af[(0, k)]).abs() < 1e-3);
        }
    }

    #[test]
    fn fixed_training_tracks_float() {
        let d = toy(256, 3, 7);
        let mut cfg = TrainingConfig::new(256, vec![100.0]);
        cfg.epochs = 30;
        cfg.sigmoid = SigmoidKind::SecureMl;
        let float = train_lagrange(&d, &cfg).unwrap();
        cfg.arithmetic = Arithmetic::Fixed;
        let fixed = train(&d, &cfg).unwrap();
        assert!(fixed.fixed.is_some());
        for (a, b) in float.params.theta.iter().zip(&fixed.params.theta) {
            assert!((a - b).abs() < 0.02, "{a} vs {b}");
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainingConfig::new(64, vec![0.1]);
        assert!(cfg.validate(64, 1).is_ok());
        assert!(cfg.validate(48, 1).is_err());
        assert!(cfg.validate(64, 2).is_err());
        cfg.arithmetic = Arithmetic::Fixed;
        assert!(cfg.validate(64, 1).is_err());
        cfg.sigmoid = SigmoidKind::SecureMl;
        assert!(cfg.validate(64, 1).is_ok());
        cfg.optimizer = Optimizer::Iplb;
        assert!(cfg.validate(64, 1).is_err());
    }

    #[test]
    fn trace_csv_has_one_row_per_epoch() {
        let d = toy(128, 2, 8);
        let mut cfg = TrainingConfig::new(128, vec![0.1]);
        cfg.epochs = 3;
        let out = train_lagrange(&d, &cfg).unwrap();
        let mut buf = Vec::new();
        out.trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("epoch,loss,accuracy,max_f,lambda_norm,pos_rate_z0_0,pos_rate_z0_1"));
    }

    #[test]
    fn sweep_rows_and_log_space() {
        let cs = log_space_desc(1e-4, 1.0, 10);
        assert_eq!(cs.len(), 10);
        assert!((cs[0] - 1.0).abs() < 1e-12 && (cs[9] - 1e-4).abs() < 1e-16);
        let d = toy(128, 2, 9);
        let mut cfg = TrainingConfig::new(128, vec![1.0]);
        cfg.epochs = 2;
        let rows = sweep(&d, &d, &cfg, &cs);
        assert_eq!(rows.len(), 10);
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 11);
    }
}
