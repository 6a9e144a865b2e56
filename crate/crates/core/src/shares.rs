//! Additive secret sharing over `Z_{2^64}` and the preprocessing material it
//! consumes.
//!
//! A secret `x` is split as `(x - r, r)` with `r` uniform; the Modeler holds
//! the first share and the Regulator the second. Multiplications consume
//! dealer-generated triples (scalar, matrix and Boolean AND), which are
//! derived deterministically from a dealer seed so that the offline phase can
//! be materialized to disk or streamed in-process with identical contents.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fxp::{RingElement, RingMatrix, RING_BITS};

/// The two computing parties. The Modeler holds share 1, the Regulator share 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Modeler,
    Regulator,
}

impl Role {
    /// Party index as used in the sharing notation (1 or 2).
    pub fn index(self) -> u8 {
        match self {
            Role::Modeler => 1,
            Role::Regulator => 2,
        }
    }

    pub fn from_index(i: u8) -> Option<Role> {
        match i {
            1 => Some(Role::Modeler),
            2 => Some(Role::Regulator),
            _ => None,
        }
    }

    pub fn peer(self) -> Role {
        match self {
            Role::Modeler => Role::Regulator,
            Role::Regulator => Role::Modeler,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Modeler => f.write_str("modeler"),
            Role::Regulator => f.write_str("regulator"),
        }
    }
}

impl std::str::FromStr for Role {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "modeler" => Ok(Role::Modeler),
            "regulator" => Ok(Role::Regulator),
            other => Err(format!("unknown role '{other}' (expected modeler|regulator)")),
        }
    }
}

/// Identifier of one protocol run; binds a pair of triple stores together.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct RunId(pub [u8; 16]);

impl RunId {
    pub fn from_seed(seed: &[u8]) -> Self {
        let digest = Sha256::new()
            .chain_update(b"blindfair/run-id")
            .chain_update(seed)
            .finalize();
        let mut id = [0u8; 16];
        id.copy_from_slice(&digest[..16]);
        RunId(id)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s.trim()).ok()?;
        Some(RunId(bytes.try_into().ok()?))
    }
}

impl fmt::Debug for RunId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RunId({})", self.to_hex())
    }
}

/// One party's additive share of a ring element.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Share {
    pub role: Role,
    pub value: RingElement,
}

/// Splits `x` into `(x - r, r)` with `r` drawn uniformly from the ring.
pub fn share_secret<R: Rng + ?Sized>(x: RingElement, rng: &mut R) -> (Share, Share) {
    share_with_mask(x, RingElement(rng.next_u64()))
}

/// Deterministic sharing with an explicit mask `r`.
pub fn share_with_mask(x: RingElement, r: RingElement) -> (Share, Share) {
    (
        Share {
            role: Role::Modeler,
            value: x - r,
        },
        Share {
            role: Role::Regulator,
            value: r,
        },
    )
}

pub fn reconstruct(a: Share, b: Share) -> RingElement {
    debug_assert_ne!(a.role, b.role, "reconstruct needs one share per party");
    a.value + b.value
}

/// Shares every element of a matrix; returns (Modeler half, Regulator half).
pub fn share_matrix<R: Rng + ?Sized>(m: &RingMatrix, rng: &mut R) -> (RingMatrix, RingMatrix) {
    let masks: Vec<RingElement> = (0..m.data.len()).map(|_| RingElement(rng.next_u64())).collect();
    let first = m
        .data
        .iter()
        .zip(&masks)
        .map(|(&x, &r)| x - r)
        .collect();
    (
        RingMatrix::from_vec(m.rows, m.cols, first),
        RingMatrix::from_vec(m.rows, m.cols, masks),
    )
}

/// One party's half of a scalar multiplication triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripleShare {
    pub a: RingElement,
    pub b: RingElement,
    pub c: RingElement,
}

/// Both halves of a scalar triple, as handed out by the dealer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triple {
    pub modeler: TripleShare,
    pub regulator: TripleShare,
}

impl Triple {
    pub fn reconstruct(&self) -> (RingElement, RingElement, RingElement) {
        (
            self.modeler.a + self.regulator.a,
            self.modeler.b + self.regulator.b,
            self.modeler.c + self.regulator.c,
        )
    }
}

/// One party's half of 64 independent AND triples packed into words:
/// for every bit lane, `(a1^a2) & (b1^b2) == c1^c2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BitTripleShare {
    pub a: u64,
    pub b: u64,
    pub c: u64,
}

/// Shape `(n, k, m)` of a matrix triple: `A` is n×k, `B` k×m, `C` n×m.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MatShape {
    pub n: usize,
    pub k: usize,
    pub m: usize,
}

impl MatShape {
    pub fn new(n: usize, k: usize, m: usize) -> Self {
        Self { n, k, m }
    }

    fn element_count(&self) -> usize {
        self.n * self.k + self.k * self.m + self.n * self.m
    }
}

impl fmt::Display for MatShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.n, self.k, self.m)
    }
}

/// One party's half of a matrix multiplication triple.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatrixTripleShare {
    pub shape: MatShape,
    pub a: RingMatrix,
    pub b: RingMatrix,
    pub c: RingMatrix,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TripleError {
    #[error("triple store exhausted: requested {requested} {kind} triple(s), {available} left")]
    Exhausted {
        kind: String,
        requested: usize,
        available: usize,
    },
}

/// Triple counts per kind; the dealer budget of a protocol run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TripleBudget {
    pub scalar: u64,
    pub and_words: u64,
    pub matrix: BTreeMap<MatShape, u64>,
}

impl TripleBudget {
    pub fn add_matrix(&mut self, shape: MatShape, count: u64) {
        if count > 0 {
            *self.matrix.entry(shape).or_insert(0) += count;
        }
    }

    pub fn merge(&mut self, other: &TripleBudget) {
        self.scalar += other.scalar;
        self.and_words += other.and_words;
        for (&s, &c) in &other.matrix {
            self.add_matrix(s, c);
        }
    }

    pub fn scaled(&self, times: u64) -> TripleBudget {
        TripleBudget {
            scalar: self.scalar * times,
            and_words: self.and_words * times,
            matrix: self
                .matrix
                .iter()
                .filter(|(_, &c)| c * times > 0)
                .map(|(&s, &c)| (s, c * times))
                .collect(),
        }
    }

    /// Matrix shapes expanded into one entry per triple, in shape order.
    pub fn shape_list(&self) -> Vec<MatShape> {
        self.matrix
            .iter()
            .flat_map(|(&s, &c)| std::iter::repeat(s).take(c as usize))
            .collect()
    }

    pub fn matrix_count(&self) -> u64 {
        self.matrix.values().sum()
    }
}

impl fmt::Display for TripleBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "scalar={} and_words={} matrix={}",
            self.scalar,
            self.and_words,
            self.matrix_count()
        )?;
        for (s, c) in &self.matrix {
            write!(f, " [{s}]x{c}")?;
        }
        Ok(())
    }
}

/// A party's supply of correlated randomness for one run. Both parties must
/// request triples in the same order.
pub trait TripleSource: Send {
    fn role(&self) -> Role;
    fn run_id(&self) -> RunId;
    fn take_scalar(&mut self, count: usize) -> Result<Vec<TripleShare>, TripleError>;
    fn take_and(&mut self, words: usize) -> Result<Vec<BitTripleShare>, TripleError>;
    fn take_matrix(&mut self, shape: MatShape) -> Result<MatrixTripleShare, TripleError>;
    /// Everything taken so far.
    fn consumed(&self) -> TripleBudget;
}

const STREAM_SCALAR: u64 = 1;
const STREAM_AND: u64 = 2;

/// The trusted dealer of the offline phase. Triple `i` of each kind is a
/// pure function of the seed, so halves can be produced independently and in
/// any order.
pub struct Dealer {
    key: [u8; 32],
    run_id: RunId,
}

impl Dealer {
    pub fn new(seed: &[u8]) -> Self {
        let key: [u8; 32] = Sha256::new()
            .chain_update(b"blindfair/dealer")
            .chain_update(seed)
            .finalize()
            .into();
        Self {
            key,
            run_id: RunId::from_seed(seed),
        }
    }

    pub fn run_id(&self) -> RunId {
        self.run_id
    }

    fn rng_at(&self, stream: u64, word_pos: u128) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::from_seed(self.key);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        rng
    }

    /// Both halves of scalar triples `start..start+count`.
    pub fn scalar_triples(&self, start: u64, count: usize) -> Vec<Triple> {
        // five u64 values (10 words) per triple
        let mut rng = self.rng_at(STREAM_SCALAR, start as u128 * 10);
        (0..count)
            .map(|_| {
                let a = RingElement(rng.next_u64());
                let b = RingElement(rng.next_u64());
                let (ra, rb, rc) = (
                    RingElement(rng.next_u64()),
                    RingElement(rng.next_u64()),
                    RingElement(rng.next_u64()),
                );
                let c = a * b;
                Triple {
                    modeler: TripleShare {
                        a: a - ra,
                        b: b - rb,
                        c: c - rc,
                    },
                    regulator: TripleShare { a: ra, b: rb, c: rc },
                }
            })
            .collect()
    }

    /// Both halves of AND-triple words `start..start+count`.
    pub fn and_triples(&self, start: u64, count: usize) -> Vec<(BitTripleShare, BitTripleShare)> {
        let mut rng = self.rng_at(STREAM_AND, start as u128 * 10);
        (0..count)
            .map(|_| {
                let (a, b) = (rng.next_u64(), rng.next_u64());
                let (ra, rb, rc) = (rng.next_u64(), rng.next_u64(), rng.next_u64());
                let c = a & b;
                (
                    BitTripleShare {
                        a: a ^ ra,
                        b: b ^ rb,
                        c: c ^ rc,
                    },
                    BitTripleShare { a: ra, b: rb, c: rc },
                )
            })
            .collect()
    }

    /// Both halves of the `index`-th matrix triple of the given shape.
    pub fn matrix_triple(&self, shape: MatShape, index: u64) -> (MatrixTripleShare, MatrixTripleShare) {
        let stream_digest = Sha256::new()
            .chain_update(b"blindfair/matrix")
            .chain_update((shape.n as u64).to_le_bytes())
            .chain_update((shape.k as u64).to_le_bytes())
            .chain_update((shape.m as u64).to_le_bytes())
            .finalize();
        let stream = u64::from_le_bytes(stream_digest[..8].try_into().unwrap()) | (1 << 63);
        let per_triple = 2 * (shape.element_count() + shape.n * shape.k + shape.k * shape.m) as u128;
        let mut rng = self.rng_at(stream, index as u128 * per_triple);
        let mut draw = |rows: usize, cols: usize| {
            RingMatrix::from_vec(rows, cols, (0..rows * cols).map(|_| RingElement(rng.next_u64())).collect())
        };
        let a = draw(shape.n, shape.k);
        let b = draw(shape.k, shape.m);
        let ra = draw(shape.n, shape.k);
        let rb = draw(shape.k, shape.m);
        let rc = draw(shape.n, shape.m);
        let c = a.matmul(&b);
        (
            MatrixTripleShare {
                shape,
                a: a.sub(&ra),
                b: b.sub(&rb),
                c: c.sub(&rc),
            },
            MatrixTripleShare {
                shape,
                a: ra,
                b: rb,
                c: rc,
            },
        )
    }
}

/// Materializes a dealer run into one store per party.
pub fn dealer_generate(
    count_scalar: usize,
    count_and: usize,
    shapes: &[MatShape],
    seed: &[u8],
) -> (TripleStore, TripleStore) {
    let dealer = Dealer::new(seed);
    let mut m = TripleStore::empty(Role::Modeler, dealer.run_id());
    let mut r = TripleStore::empty(Role::Regulator, dealer.run_id());
    for t in dealer.scalar_triples(0, count_scalar) {
        m.scalar.push(t.modeler);
        r.scalar.push(t.regulator);
    }
    for (a, b) in dealer.and_triples(0, count_and) {
        m.and.push(a);
        r.and.push(b);
    }
    let mut next_index: BTreeMap<MatShape, u64> = BTreeMap::new();
    for &shape in shapes {
        let idx = next_index.entry(shape).or_insert(0);
        let (a, b) = dealer.matrix_triple(shape, *idx);
        *idx += 1;
        m.matrix.entry(shape).or_default().push(a);
        r.matrix.entry(shape).or_default().push(b);
    }
    (m, r)
}

/// Generates exactly the given budget.
pub fn dealer_generate_budget(budget: &TripleBudget, seed: &[u8]) -> (TripleStore, TripleStore) {
    dealer_generate(
        budget.scalar as usize,
        budget.and_words as usize,
        &budget.shape_list(),
        seed,
    )
}

/// A materialized, single-consumer supply of one party's triples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripleStore {
    role: Role,
    run_id: RunId,
    scalar: Vec<TripleShare>,
    and: Vec<BitTripleShare>,
    matrix: BTreeMap<MatShape, Vec<MatrixTripleShare>>,
    scalar_cursor: usize,
    and_cursor: usize,
    matrix_cursor: BTreeMap<MatShape, usize>,
}

impl TripleStore {
    pub fn empty(role: Role, run_id: RunId) -> Self {
        Self {
            role,
            run_id,
            scalar: Vec::new(),
            and: Vec::new(),
            matrix: BTreeMap::new(),
            scalar_cursor: 0,
            and_cursor: 0,
            matrix_cursor: BTreeMap::new(),
        }
    }

    /// Total contents, independent of consumption.
    pub fn capacity(&self) -> TripleBudget {
        TripleBudget {
            scalar: self.scalar.len() as u64,
            and_words: self.and.len() as u64,
            matrix: self.matrix.iter().map(|(&s, v)| (s, v.len() as u64)).collect(),
        }
    }

    pub fn scalar_shares(&self) -> &[TripleShare] {
        &self.scalar
    }

    pub fn and_shares(&self) -> &[BitTripleShare] {
        &self.and
    }

    pub fn matrix_shares(&self, shape: MatShape) -> &[MatrixTripleShare] {
        self.matrix.get(&shape).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn save(&self, path: &Path) -> Result<(), TripleFileError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TripleFileError> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    /// Writes the `BFTR` file layout (all integers little-endian):
    /// magic, version u16, ring_bits u16, party u16, run_id[16],
    /// scalar count u64, and-word count u64, matrix count u64, then the
    /// scalar records (a, b, c), the AND records (a, b, c) and the matrix
    /// records (n, k, m as u64 followed by A, B, C row-major).
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), TripleFileError> {
        w.write_all(TRIPLE_MAGIC)?;
        w.write_all(&TRIPLE_VERSION.to_le_bytes())?;
        w.write_all(&(RING_BITS as u16).to_le_bytes())?;
        w.write_all(&(self.role.index() as u16).to_le_bytes())?;
        w.write_all(&self.run_id.0)?;
        let matrix_total: usize = self.matrix.values().map(Vec::len).sum();
        for count in [self.scalar.len(), self.and.len(), matrix_total] {
            w.write_all(&(count as u64).to_le_bytes())?;
        }
        for t in &self.scalar {
            for v in [t.a, t.b, t.c] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for t in &self.and {
            for v in [t.a, t.b, t.c] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for triples in self.matrix.values() {
            for t in triples {
                for d in [t.shape.n, t.shape.k, t.shape.m] {
                    w.write_all(&(d as u64).to_le_bytes())?;
                }
                for m in [&t.a, &t.b, &t.c] {
                    for v in &m.data {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, TripleFileError> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != TRIPLE_MAGIC {
            return Err(TripleFileError::BadMagic);
        }
        let version = read_u16(r)?;
        if version != TRIPLE_VERSION {
            return Err(TripleFileError::UnsupportedVersion(version));
        }
        let ring_bits = read_u16(r)?;
        if ring_bits as u32 != RING_BITS {
            return Err(TripleFileError::RingMismatch(ring_bits));
        }
        let party = read_u16(r)?;
        let role = u8::try_from(party)
            .ok()
            .and_then(Role::from_index)
            .ok_or(TripleFileError::BadParty(party))?;
        let mut run_id = [0u8; 16];
        read_exact(r, &mut run_id)?;
        let n_scalar = read_u64(r)? as usize;
        let n_and = read_u64(r)? as usize;
        let n_matrix = read_u64(r)? as usize;

        let mut store = TripleStore::empty(role, RunId(run_id));
        store.scalar.reserve(n_scalar.min(1 << 24));
        for _ in 0..n_scalar {
            let (a, b, c) = (read_u64(r)?, read_u64(r)?, read_u64(r)?);
            store.scalar.push(TripleShare {
                a: RingElement(a),
                b: RingElement(b),
                c: RingElement(c),
            });
        }
        for _ in 0..n_and {
            let (a, b, c) = (read_u64(r)?, read_u64(r)?, read_u64(r)?);
            store.and.push(BitTripleShare { a, b, c });
        }
        for _ in 0..n_matrix {
            let dims = [read_u64(r)?, read_u64(r)?, read_u64(r)?];
            if dims.iter().any(|&d| d > (1 << 24)) {
                return Err(TripleFileError::Truncated);
            }
            let shape = MatShape::new(dims[0] as usize, dims[1] as usize, dims[2] as usize);
            let mut read_matrix = |rows: usize, cols: usize| -> Result<RingMatrix, TripleFileError> {
                let data = (0..rows * cols)
                    .map(|_| read_u64(r).map(RingElement))
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(RingMatrix::from_vec(rows, cols, data))
            };
            let a = read_matrix(shape.n, shape.k)?;
            let b = read_matrix(shape.k, shape.m)?;
            let c = read_matrix(shape.n, shape.m)?;
            store
                .matrix
                .entry(shape)
                .or_default()
                .push(MatrixTripleShare { shape, a, b, c });
        }
        Ok(store)
    }
}

impl TripleSource for TripleStore {
    fn role(&self) -> Role {
        self.role
    }

    fn run_id(&self) -> RunId {
        self.run_id
    }

    fn take_scalar(&mut self, count: usize) -> Result<Vec<TripleShare>, TripleError> {
        let available = self.scalar.len() - self.scalar_cursor;
        if count > available {
            return Err(TripleError::Exhausted {
                kind: "scalar".into(),
                requested: count,
                available,
            });
        }
        let out = self.scalar[self.scalar_cursor..self.scalar_cursor + count].to_vec();
        self.scalar_cursor += count;
        Ok(out)
    }

    fn take_and(&mut self, words: usize) -> Result<Vec<BitTripleShare>, TripleError> {
        let available = self.and.len() - self.and_cursor;
        if words > available {
            return Err(TripleError::Exhausted {
                kind: "and-word".into(),
                requested: words,
                available,
            });
        }
        let out = self.and[self.and_cursor..self.and_cursor + words].to_vec();
        self.and_cursor += words;
        Ok(out)
    }

    fn take_matrix(&mut self, shape: MatShape) -> Result<MatrixTripleShare, TripleError> {
        let pool = self.matrix.get(&shape).map(Vec::as_slice).unwrap_or(&[]);
        let cursor = self.matrix_cursor.entry(shape).or_insert(0);
        match pool.get(*cursor) {
            Some(t) => {
                *cursor += 1;
                Ok(t.clone())
            }
            None => Err(TripleError::Exhausted {
                kind: format!("matrix {shape}"),
                requested: 1,
                available: 0,
            }),
        }
    }

    fn consumed(&self) -> TripleBudget {
        TripleBudget {
            scalar: self.scalar_cursor as u64,
            and_words: self.and_cursor as u64,
            matrix: self
                .matrix_cursor
                .iter()
                .filter(|(_, &c)| c > 0)
                .map(|(&s, &c)| (s, c as u64))
                .collect(),
        }
    }
}

/// In-process stand-in for a dealer that streams triples on demand. Each
/// party's feed only ever receives its own halves.
pub struct DealerFeed {
    dealer: Arc<Dealer>,
    role: Role,
    used: TripleBudget,
}

impl DealerFeed {
    pub fn new(dealer: Arc<Dealer>, role: Role) -> Self {
        Self {
            dealer,
            role,
            used: TripleBudget::default(),
        }
    }

    /// Convenience: one feed per party from a shared seed.
    pub fn pair(seed: &[u8]) -> (DealerFeed, DealerFeed) {
        let dealer = Arc::new(Dealer::new(seed));
        (
            DealerFeed::new(dealer.clone(), Role::Modeler),
            DealerFeed::new(dealer, Role::Regulator),
        )
    }
}

impl TripleSource for DealerFeed {
    fn role(&self) -> Role {
        self.role
    }

    fn run_id(&self) -> RunId {
        self.dealer.run_id()
    }

    fn take_scalar(&mut self, count: usize) -> Result<Vec<TripleShare>, TripleError> {
        let triples = self.dealer.scalar_triples(self.used.scalar, count);
        self.used.scalar += count as u64;
        Ok(triples
            .into_iter()
            .map(|t| match self.role {
                Role::Modeler => t.modeler,
                Role::Regulator => t.regulator,
            })
            .collect())
    }

    fn take_and(&mut self, words: usize) -> Result<Vec<BitTripleShare>, TripleError> {
        let triples = self.dealer.and_triples(self.used.and_words, words);
        self.used.and_words += words as u64;
        Ok(triples
            .into_iter()
            .map(|(m, r)| match self.role {
                Role::Modeler => m,
                Role::Regulator => r,
            })
            .collect())
    }

    fn take_matrix(&mut self, shape: MatShape) -> Result<MatrixTripleShare, TripleError> {
        let index = self.used.matrix.get(&shape).copied().unwrap_or(0);
        let (m, r) = self.dealer.matrix_triple(shape, index);
        self.used.add_matrix(shape, 1);
        Ok(match self.role {
            Role::Modeler => m,
            Role::Regulator => r,
        })
    }

    fn consumed(&self) -> TripleBudget {
        self.used.clone()
    }
}

/// Local first half of a Beaver multiplication: the masked values
/// `(x_i - a_i, y_i - b_i)` this party publishes.
pub fn beaver_masks(x: RingElement, y: RingElement, t: &TripleShare) -> (RingElement, RingElement) {
    (x - t.a, y - t.b)
}

/// Local second half: `z_i = (i-1)·e·f + f·a_i + e·b_i + c_i` given the opened
/// `e = x - a` and `f = y - b`.
pub fn beaver_combine(role: Role, e: RingElement, f: RingElement, t: &TripleShare) -> RingElement {
    let base = f * t.a + e * t.b + t.c;
    match role {
        Role::Modeler => base,
        Role::Regulator => base + e * f,
    }
}

/// Both parties' view of one Beaver multiplication, including the exchange of
/// `e` and `f`. Returns the raw (untruncated) product shares.
pub fn beaver_mul_with(x: (Share, Share), y: (Share, Share), t: &Triple) -> (Share, Share) {
    let (e1, f1) = beaver_masks(x.0.value, y.0.value, &t.modeler);
    let (e2, f2) = beaver_masks(x.1.value, y.1.value, &t.regulator);
    let (e, f) = (e1 + e2, f1 + f2);
    (
        Share {
            role: Role::Modeler,
            value: beaver_combine(Role::Modeler, e, f, &t.modeler),
        },
        Share {
            role: Role::Regulator,
            value: beaver_combine(Role::Regulator, e, f, &t.regulator),
        },
    )
}

/// Like [`beaver_mul_with`], drawing the triple halves from each party's store.
pub fn beaver_mul(
    x: (Share, Share),
    y: (Share, Share),
    modeler: &mut dyn TripleSource,
    regulator: &mut dyn TripleSource,
) -> Result<(Share, Share), TripleError> {
    let tm = modeler.take_scalar(1)?[0];
    let tr = regulator.take_scalar(1)?[0];
    Ok(beaver_mul_with(
        x,
        y,
        &Triple {
            modeler: tm,
            regulator: tr,
        },
    ))
}

/// Local probabilistic truncation of one share by `bits`.
pub fn truncate_share(role: Role, v: RingElement, bits: u32) -> RingElement {
    let bits = bits.min(63);
    match role {
        Role::Modeler => RingElement::from_signed(v.signed() >> bits),
        Role::Regulator => -RingElement::from_signed((-v).signed() >> bits),
    }
}

/// Rescales a share locally. The reconstruction equals the exact shift or
/// exceeds it by one ulp, except with probability about `|x| / 2^64`.
pub fn prob_truncate(s: Share, bits: u32) -> Share {
    Share {
        role: s.role,
        value: truncate_share(s.role, s.value, bits),
    }
}

/// Local AND-gate helpers on packed XOR shares (64 lanes per word).
pub fn and_masks(x: u64, y: u64, t: &BitTripleShare) -> (u64, u64) {
    (x ^ t.a, y ^ t.b)
}

pub fn and_combine(role: Role, d: u64, e: u64, t: &BitTripleShare) -> u64 {
    let base = t.c ^ (d & t.b) ^ (e & t.a);
    match role {
        Role::Modeler => base ^ (d & e),
        Role::Regulator => base,
    }
}

pub const TRIPLE_MAGIC: &[u8; 4] = b"BFTR";
pub const TRIPLE_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum TripleFileError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("not a triple file (bad magic)")]
    BadMagic,
    #[error("unsupported triple file version {0}")]
    UnsupportedVersion(u16),
    #[error("triple file ring size {0} does not match {RING_BITS}")]
    RingMismatch(u16),
    #[error("invalid party index {0}")]
    BadParty(u16),
    #[error("triple file truncated or corrupt")]
    Truncated,
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), TripleFileError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => TripleFileError::Truncated,
        _ => TripleFileError::Io(e),
    })
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16, TripleFileError> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, TripleFileError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fxp::{encode, shift_divide, FxConfig};

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    #[test]
    fn share_examples() {
        let (s1, s2) = share_with_mask(RingElement(98304), RingElement(5));
        assert_eq!((s1.value, s2.value), (RingElement(98299), RingElement(5)));
        assert_eq!(reconstruct(s1, s2), RingElement(98304));

        let (s1, s2) = share_with_mask(RingElement(0), RingElement(7));
        assert_eq!(s1.value, RingElement(u64::MAX - 6));
        assert_eq!(s2.value, RingElement(7));
    }

    #[test]
    fn share_reconstruct_randomized() {
        let mut r = rng(1);
        for _ in 0..10_000 {
            let x = RingElement(r.next_u64());
            let (a, b) = share_secret(x, &mut r);
            assert_eq!(reconstruct(a, b), x);
        }
    }

    #[test]
    fn single_share_low_bits_look_uniform() {
        // chi-square on the low 16 bits bucketed into 256 cells
        let mut r = rng(2);
        let secret = RingElement(123_456);
        let mut counts = [0u64; 256];
        let samples = 100_000;
        for _ in 0..samples {
            let (s1, _) = share_secret(secret, &mut r);
            counts[((s1.value.0 & 0xffff) >> 8) as usize] += 1;
        }
        let expected = samples as f64 / 256.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 255 dof: mean 255, sd ~22.6; 350 is beyond p = 1e-4
        assert!(chi2 < 350.0, "chi2 = {chi2}");
    }

    #[test]
    fn dealer_scalar_triple_is_valid() {
        let (m, r) = dealer_generate(1, 0, &[], b"seed");
        let t = Triple {
            modeler: m.scalar[0],
            regulator: r.scalar[0],
        };
        let (a, b, c) = t.reconstruct();
        assert_eq!(c, a * b);
    }

    #[test]
    fn dealer_matrix_triple_matches_naive_product() {
        let shape = MatShape::new(2, 2, 2);
        let (m, r) = dealer_generate(0, 0, &[shape], b"seed");
        let (tm, tr) = (&m.matrix_shares(shape)[0], &r.matrix_shares(shape)[0]);
        let a = tm.a.add(&tr.a);
        let b = tm.b.add(&tr.b);
        let c = tm.c.add(&tr.c);
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = 0u64;
                for k in 0..2 {
                    acc = acc.wrapping_add(a.get(i, k).0.wrapping_mul(b.get(k, j).0));
                }
                assert_eq!(c.get(i, j).0, acc);
            }
        }
    }

    #[test]
    fn dealer_and_triple_is_valid() {
        let (m, r) = dealer_generate(0, 1, &[], b"seed");
        let (x, y) = (m.and[0], r.and[0]);
        assert_eq!(x.c ^ y.c, (x.a ^ y.a) & (x.b ^ y.b));
    }

    #[test]
    fn dealer_is_deterministic_and_feed_matches_store() {
        let shapes = [MatShape::new(3, 2, 1), MatShape::new(1, 4, 2), MatShape::new(3, 2, 1)];
        let (m1, r1) = dealer_generate(5, 3, &shapes, b"abc");
        let (m2, r2) = dealer_generate(5, 3, &shapes, b"abc");
        assert_eq!(m1, m2);
        assert_eq!(r1, r2);

        let (mut fm, mut fr) = DealerFeed::pair(b"abc");
        assert_eq!(fm.take_scalar(5).unwrap(), m1.scalar);
        assert_eq!(fr.take_and(3).unwrap(), r1.and);
        let s = MatShape::new(3, 2, 1);
        assert_eq!(fm.take_matrix(s).unwrap(), m1.matrix_shares(s)[0]);
        assert_eq!(fm.take_matrix(s).unwrap(), m1.matrix_shares(s)[1]);
        assert_eq!(fm.run_id(), m1.run_id);
    }

    #[test]
    fn store_exhaustion_is_reported() {
        let (mut m, _) = dealer_generate(2, 0, &[], b"x");
        assert_eq!(m.take_scalar(2).unwrap().len(), 2);
        assert!(matches!(m.take_scalar(1), Err(TripleError::Exhausted { .. })));
        assert!(m.take_and(1).is_err());
        assert!(m.take_matrix(MatShape::new(1, 1, 1)).is_err());
        assert_eq!(m.consumed().scalar, 2);
    }

    #[test]
    fn beaver_example() {
        let x = share_with_mask(RingElement(6), RingElement(100));
        let y = share_with_mask(RingElement(7), RingElement(200));
        let (ta, tb, tc) = (RingElement(2), RingElement(3), RingElement(6));
        let t = Triple {
            modeler: TripleShare {
                a: ta - RingElement(11),
                b: tb - RingElement(12),
                c: tc - RingElement(13),
            },
            regulator: TripleShare {
                a: RingElement(11),
                b: RingElement(12),
                c: RingElement(13),
            },
        };
        let (e1, f1) = beaver_masks(x.0.value, y.0.value, &t.modeler);
        let (e2, f2) = beaver_masks(x.1.value, y.1.value, &t.regulator);
        assert_eq!((e1 + e2, f1 + f2), (RingElement(4), RingElement(4)));
        let (z1, z2) = beaver_mul_with(x, y, &t);
        assert_eq!(reconstruct(z1, z2), RingElement(42));
    }

    #[test]
    fn beaver_zero_triple_zero_input() {
        let zero = TripleShare {
            a: RingElement(0),
            b: RingElement(0),
            c: RingElement(0),
        };
        let t = Triple {
            modeler: zero,
            regulator: zero,
        };
        let x = share_with_mask(RingElement(0), RingElement(99));
        let y = share_with_mask(RingElement(12345), RingElement(3));
        let (z1, z2) = beaver_mul_with(x, y, &t);
        assert_eq!(reconstruct(z1, z2), RingElement(0));
    }

    #[test]
    fn beaver_randomized() {
        let mut r = rng(3);
        let (mut m, mut g) = dealer_generate(10_000, 0, &[], b"beaver");
        for _ in 0..10_000 {
            let (x, y) = (RingElement(r.next_u64()), RingElement(r.next_u64()));
            let xs = share_secret(x, &mut r);
            let ys = share_secret(y, &mut r);
            let (z1, z2) = beaver_mul(xs, ys, &mut m, &mut g).unwrap();
            assert_eq!(reconstruct(z1, z2), x * y);
        }
        let xs = share_secret(RingElement(1), &mut r);
        assert!(beaver_mul(xs, xs, &mut m, &mut g).is_err());
    }

    #[test]
    fn prob_truncate_examples() {
        let cfg = FxConfig::default();
        let six = encode(6.0, &cfg).unwrap();
        // squaring: 6*6 raw product, truncated, reconstructs within an ulp of 36
        let raw = six * six;
        let (s1, s2) = share_with_mask(raw, RingElement(1));
        let t = reconstruct(prob_truncate(s1, 16), prob_truncate(s2, 16));
        let exact = shift_divide(raw, 16);
        assert!((t - exact).signed().abs() <= 1);
        assert_eq!(exact, encode(36.0, &cfg).unwrap());

        let mut r = rng(4);
        for _ in 0..1000 {
            let (s1, s2) = share_secret(RingElement(0), &mut r);
            let t = reconstruct(prob_truncate(s1, 16), prob_truncate(s2, 16));
            assert!(t.signed().abs() <= 1);
        }
    }

    #[test]
    fn prob_truncate_monte_carlo() {
        let mut r = rng(5);
        let trials = 100_000;
        let mut failures = 0;
        for _ in 0..trials {
            let x = RingElement::from_signed(r.gen_range(-(1i64 << 20) + 1..(1i64 << 20)));
            let (s1, s2) = share_secret(x, &mut r);
            let t = reconstruct(prob_truncate(s1, 16), prob_truncate(s2, 16));
            if (t - shift_divide(x, 16)).signed().abs() > 1 {
                failures += 1;
            }
        }
        assert!((failures as f64) / (trials as f64) < 1e-4, "{failures} failures");
    }

    #[test]
    fn and_gate_helpers() {
        let (m, g) = dealer_generate(0, 1, &[], b"and");
        let (tm, tg) = (m.and[0], g.and[0]);
        let mut r = rng(6);
        let (x, y) = (r.next_u64(), r.next_u64());
        let (x1, y1) = (r.next_u64(), r.next_u64());
        let (x2, y2) = (x ^ x1, y ^ y1);
        let (d1, e1) = and_masks(x1, y1, &tm);
        let (d2, e2) = and_masks(x2, y2, &tg);
        let (d, e) = (d1 ^ d2, e1 ^ e2);
        let z = and_combine(Role::Modeler, d, e, &tm) ^ and_combine(Role::Regulator, d, e, &tg);
        assert_eq!(z, x & y);
    }

    #[test]
    fn triple_file_roundtrip_and_errors() {
        let shapes = [MatShape::new(2, 3, 1)];
        let (m, _) = dealer_generate(3, 2, &shapes, b"file");
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"BFTR");
        let back = TripleStore::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, m);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            TripleStore::read_from(&mut bad.as_slice()),
            Err(TripleFileError::BadMagic)
        ));
        assert!(matches!(
            TripleStore::read_from(&mut &buf[..buf.len() - 3]),
            Err(TripleFileError::Truncated)
        ));
    }

    #[test]
    fn empty_store_file_is_valid() {
        let (m, _) = dealer_generate(0, 0, &[], b"empty");
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        let back = TripleStore::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.capacity(), TripleBudget::default());
    }
}
