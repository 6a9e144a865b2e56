//! Fixed-point arithmetic over the ring `Z_{2^64}`.
//!
//! Reals are encoded as two's-complement residues scaled by `2^frac_bits`.
//! Addition, subtraction and negation are exact ring operations; products
//! carry `2 * frac_bits` fractional bits and must be rescaled.

use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

use thiserror::Error;

/// Width of the ring in bits.
pub const RING_BITS: u32 = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FxError {
    #[error("value {value} is outside the representable range ±2^{int_bits}")]
    Overflow { value: f64, int_bits: u32 },
    #[error("invalid fixed-point configuration: {0}")]
    InvalidConfig(String),
}

/// Fixed-point layout inside the 64-bit ring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FxConfig {
    pub total_bits: u32,
    pub frac_bits: u32,
    pub int_bits: u32,
}

impl Default for FxConfig {
    fn default() -> Self {
        Self {
            total_bits: RING_BITS,
            frac_bits: 16,
            int_bits: 16,
        }
    }
}

impl FxConfig {
    pub fn new(frac_bits: u32, int_bits: u32) -> Result<Self, FxError> {
        let cfg = Self {
            total_bits: RING_BITS,
            frac_bits,
            int_bits,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), FxError> {
        if self.total_bits != RING_BITS {
            return Err(FxError::InvalidConfig(format!(
                "total_bits must be {RING_BITS}, got {}",
                self.total_bits
            )));
        }
        if self.frac_bits < 1 {
            return Err(FxError::InvalidConfig("frac_bits must be at least 1".into()));
        }
        if self.frac_bits + self.int_bits > self.total_bits {
            return Err(FxError::InvalidConfig(format!(
                "frac_bits + int_bits = {} exceeds {}",
                self.frac_bits + self.int_bits,
                self.total_bits
            )));
        }
        Ok(())
    }

    /// `2^frac_bits` as a float.
    pub fn scale(&self) -> f64 {
        (self.frac_bits as f64).exp2()
    }

    /// Smallest positive representable value, `2^-frac_bits`.
    pub fn ulp(&self) -> f64 {
        1.0 / self.scale()
    }

    /// Exclusive magnitude bound `2^int_bits`.
    pub fn bound(&self) -> f64 {
        (self.int_bits as f64).exp2()
    }

    /// Encoding of `1.0`.
    pub fn one(&self) -> RingElement {
        RingElement(1u64 << self.frac_bits)
    }
}

/// A residue modulo `2^64`.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(transparent)]
pub struct RingElement(pub u64);

impl RingElement {
    pub const ZERO: RingElement = RingElement(0);

    pub fn from_signed(v: i64) -> Self {
        RingElement(v as u64)
    }

    /// Two's-complement interpretation of the residue.
    pub fn signed(self) -> i64 {
        self.0 as i64
    }

    /// Most significant bit, i.e. the sign under the signed interpretation.
    pub fn msb(self) -> bool {
        self.0 >> 63 == 1
    }

    pub fn to_le_bytes(self) -> [u8; 8] {
        self.0.to_le_bytes()
    }

    pub fn from_le_bytes(bytes: [u8; 8]) -> Self {
        RingElement(u64::from_le_bytes(bytes))
    }
}

impl fmt::Debug for RingElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "R({})", self.signed())
    }
}

impl Add for RingElement {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        RingElement(self.0.wrapping_add(rhs.0))
    }
}

impl Sub for RingElement {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        RingElement(self.0.wrapping_sub(rhs.0))
    }
}

impl Mul for RingElement {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        RingElement(self.0.wrapping_mul(rhs.0))
    }
}

impl Neg for RingElement {
    type Output = Self;
    fn neg(self) -> Self {
        RingElement(self.0.wrapping_neg())
    }
}

impl AddAssign for RingElement {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl SubAssign for RingElement {
    fn sub_assign(&mut self, rhs: Self) {
        *self = *self - rhs;
    }
}

impl std::iter::Sum for RingElement {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(RingElement::ZERO, |acc, x| acc + x)
    }
}

/// Encodes `x` as `round(x * 2^frac_bits) mod 2^64`, ties away from zero.
pub fn encode(x: f64, cfg: &FxConfig) -> Result<RingElement, FxError> {
    if !x.is_finite() || x.abs() >= cfg.bound() {
        return Err(FxError::Overflow {
            value: x,
            int_bits: cfg.int_bits,
        });
    }
    // f64::round rounds half away from zero.
    Ok(RingElement::from_signed((x * cfg.scale()).round() as i64))
}

pub fn decode(e: RingElement, cfg: &FxConfig) -> f64 {
    e.signed() as f64 / cfg.scale()
}

/// Fixed-point product with exact truncation of the 128-bit intermediate.
pub fn fx_mul_trunc(a: RingElement, b: RingElement, cfg: &FxConfig) -> Result<RingElement, FxError> {
    let wide = (a.signed() as i128) * (b.signed() as i128);
    let shifted = wide >> cfg.frac_bits;
    let limit = 1i128 << (cfg.int_bits + cfg.frac_bits);
    if shifted >= limit || shifted <= -limit {
        return Err(FxError::Overflow {
            value: shifted as f64 / cfg.scale(),
            int_bits: cfg.int_bits,
        });
    }
    Ok(RingElement::from_signed(shifted as i64))
}

/// Arithmetic right shift by `s` bits: division by `2^s` rounding toward -inf.
pub fn shift_divide(a: RingElement, s: u32) -> RingElement {
    RingElement::from_signed(a.signed() >> s.min(63))
}

/// Division by `2^s` rounding to nearest, ties toward +inf.
pub fn round_shift(a: RingElement, s: u32) -> RingElement {
    if s == 0 {
        return a;
    }
    let s = s.min(63);
    let v = a.signed();
    // floor(v / 2^s) plus the dropped bit just below the cut
    RingElement::from_signed((v >> s) + ((v >> (s - 1)) & 1))
}

/// Canonical serialization: 8 bytes little-endian per element, in index order.
pub fn serialize_elements(values: &[RingElement]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Inverse of [`serialize_elements`]; trailing bytes that do not form a full
/// element are rejected.
pub fn deserialize_elements(bytes: &[u8]) -> Option<Vec<RingElement>> {
    if bytes.len() % 8 != 0 {
        return None;
    }
    Some(
        bytes
            .chunks_exact(8)
            .map(|c| RingElement::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    )
}

/// Dense row-major matrix of ring elements.
#[derive(Clone, PartialEq, Eq)]
pub struct RingMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<RingElement>,
}

impl fmt::Debug for RingMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RingMatrix({}x{}) {:?}", self.rows, self.cols, self.data)
    }
}

impl RingMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![RingElement::ZERO; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<RingElement>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn column(data: Vec<RingElement>) -> Self {
        let rows = data.len();
        Self::from_vec(rows, 1, data)
    }

    pub fn identity(n: usize, cfg: &FxConfig) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = cfg.one();
        }
        m
    }

    pub fn encode(rows: usize, cols: usize, values: &[f64], cfg: &FxConfig) -> Result<Self, FxError> {
        let data = values
            .iter()
            .map(|&v| encode(v, cfg))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::from_vec(rows, cols, data))
    }

    pub fn decode(&self, cfg: &FxConfig) -> Vec<f64> {
        self.data.iter().map(|&e| decode(e, cfg)).collect()
    }

    pub fn get(&self, r: usize, c: usize) -> RingElement {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: RingElement) {
        self.data[r * self.cols + c] = v;
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Exact ring product (no rescaling).
    pub fn matmul(&self, rhs: &RingMatrix) -> RingMatrix {
        assert_eq!(self.cols, rhs.rows, "inner dimensions differ");
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            let dst = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in row.iter().enumerate() {
                if a.0 == 0 {
                    continue;
                }
                let src = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (d, &b) in dst.iter_mut().zip(src) {
                    *d += a * b;
                }
            }
        }
        out
    }

    pub fn add(&self, rhs: &RingMatrix) -> RingMatrix {
        self.zip_with(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &RingMatrix) -> RingMatrix {
        self.zip_with(rhs, |a, b| a - b)
    }

    pub fn map(&self, f: impl Fn(RingElement) -> RingElement) -> RingMatrix {
        RingMatrix::from_vec(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    fn zip_with(&self, rhs: &RingMatrix, f: impl Fn(RingElement, RingElement) -> RingElement) -> RingMatrix {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols), "shape mismatch");
        RingMatrix::from_vec(
            self.rows,
            self.cols,
            self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    /// Rows `start..end` as a new matrix.
    pub fn row_slice(&self, start: usize, end: usize) -> RingMatrix {
        RingMatrix::from_vec(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        )
    }

    /// Gathers the given rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> RingMatrix {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(&self.data[r * self.cols..(r + 1) * self.cols]);
        }
        RingMatrix::from_vec(rows.len(), self.cols, data)
    }

    /// Columns `start..end` as a new matrix.
    pub fn col_slice(&self, start: usize, end: usize) -> RingMatrix {
        let mut data = Vec::with_capacity(self.rows * (end - start));
        for r in 0..self.rows {
            data.extend_from_slice(&self.data[r * self.cols + start..r * self.cols + end]);
        }
        RingMatrix::from_vec(self.rows, end - start, data)
    }

    /// Sum over rows, giving a 1×cols matrix.
    pub fn column_sums(&self) -> RingMatrix {
        let mut out = RingMatrix::zeros(1, self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c] += self.data[r * self.cols + c];
            }
        }
        out
    }
}

/// Significant bits kept when encoding a public multiplier.
pub const COEFFICIENT_PRECISION: u32 = 16;

/// Encodes a public non-negative multiplier `x` as `(k, shift)` with
/// `k = round(x * 2^shift)` carrying at least [`COEFFICIENT_PRECISION`]
/// significant bits, so that `(v * k) >> shift` approximates `v * x` for a
/// fixed-point `v`. `shift` never drops below `frac_bits`.
pub fn encode_coefficient(x: f64, cfg: &FxConfig) -> Result<(RingElement, u32), FxError> {
    if !x.is_finite() || x < 0.0 || x >= cfg.bound() {
        return Err(FxError::Overflow {
            value: x,
            int_bits: cfg.int_bits,
        });
    }
    let mut shift = cfg.frac_bits;
    if x > 0.0 {
        let needed = COEFFICIENT_PRECISION as i64 - x.log2().ceil() as i64;
        shift = shift.max(needed.clamp(0, 48) as u32);
    }
    Ok((RingElement::from_signed((x * (shift as f64).exp2()).round() as i64), shift))
}
