//! Two-party protocol runtime.
//!
//! A [`PartyContext`] bundles one party's channel, triple supply and session
//! parameters. All secure operations are blocking and must be invoked in the
//! same order by both parties; each batched operation costs exactly one
//! exchange on the channel, independent of the secret values.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fxp::{deserialize_elements, round_shift, serialize_elements, FxConfig, RingElement, RingMatrix};
use crate::shares::{
    and_combine, and_masks, truncate_share, MatShape, Role, RunId, TripleBudget, TripleError, TripleSource,
};
use crate::transport::{Channel, ChannelStats, Tag, TransportError, PROTOCOL_VERSION};

/// How shared fixed-point values are rescaled after a multiplication.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TruncMode {
    /// Open, shift, re-share under a public mask. Leaks the value; for
    /// reproducible testing against the cleartext reference only.
    Exact,
    /// Local share truncation; the protocol mode.
    Probabilistic,
}

impl TruncMode {
    fn code(self) -> u8 {
        match self {
            TruncMode::Exact => 0,
            TruncMode::Probabilistic => 1,
        }
    }
}

impl std::str::FromStr for TruncMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact" => Ok(TruncMode::Exact),
            "prob" | "probabilistic" => Ok(TruncMode::Probabilistic),
            other => Err(format!("unknown truncation mode '{other}' (expected exact|prob)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Triple(#[from] TripleError),
    #[error("protocol version mismatch: local {local}, peer {peer}")]
    VersionMismatch { local: u16, peer: u16 },
    #[error("session configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("run {0:?} was already used; refusing to reuse its triples")]
    StaleRun(RunId),
    #[error("peer rejected the session: {0}")]
    PeerRejected(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid block size: {0}")]
    BlockSizeError(String),
    #[error("malformed message from peer")]
    Malformed,
    #[error("run registry I/O error: {0}")]
    Registry(#[from] io::Error),
}

/// Parameters both parties must agree on before computing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionConfig {
    pub fx: FxConfig,
    pub public_seed: [u8; 32],
    pub mode: TruncMode,
}

impl SessionConfig {
    pub fn new(fx: FxConfig, public_seed: [u8; 32], mode: TruncMode) -> Self {
        Self { fx, public_seed, mode }
    }
}

/// Run ids a party has already consumed triples for.
#[derive(Debug, Default)]
pub struct RunRegistry {
    spent: BTreeSet<RunId>,
    path: Option<PathBuf>,
}

impl RunRegistry {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Loads (or starts) a registry persisted as one hex run id per line.
    pub fn open(path: &Path) -> Result<Self, io::Error> {
        let mut spent = BTreeSet::new();
        match File::open(path) {
            Ok(f) => {
                for line in BufReader::new(f).lines() {
                    if let Some(id) = RunId::from_hex(&line?) {
                        spent.insert(id);
                    }
                }
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(e),
        }
        Ok(Self {
            spent,
            path: Some(path.to_path_buf()),
        })
    }

    pub fn contains(&self, id: &RunId) -> bool {
        self.spent.contains(id)
    }

    pub fn insert(&mut self, id: RunId) -> Result<(), io::Error> {
        if self.spent.insert(id) {
            if let Some(path) = &self.path {
                let mut f = OpenOptions::new().create(true).append(true).open(path)?;
                writeln!(f, "{}", id.to_hex())?;
            }
        }
        Ok(())
    }
}

/// One party's additive share of a matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SharedMatrix {
    pub role: Role,
    pub share: RingMatrix,
}

impl SharedMatrix {
    pub fn new(role: Role, share: RingMatrix) -> Self {
        Self { role, share }
    }

    pub fn zeros(role: Role, rows: usize, cols: usize) -> Self {
        Self::new(role, RingMatrix::zeros(rows, cols))
    }

    /// Sharing of a public matrix: the Modeler holds it, the Regulator zero.
    pub fn from_public(role: Role, m: &RingMatrix) -> Self {
        match role {
            Role::Modeler => Self::new(role, m.clone()),
            Role::Regulator => Self::zeros(role, m.rows, m.cols),
        }
    }

    pub fn rows(&self) -> usize {
        self.share.rows
    }

    pub fn cols(&self) -> usize {
        self.share.cols
    }

    pub fn len(&self) -> usize {
        self.share.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.share.data.is_empty()
    }

    pub fn add(&self, rhs: &SharedMatrix) -> SharedMatrix {
        Self::new(self.role, self.share.add(&rhs.share))
    }

    pub fn sub(&self, rhs: &SharedMatrix) -> SharedMatrix {
        Self::new(self.role, self.share.sub(&rhs.share))
    }

    pub fn neg(&self) -> SharedMatrix {
        Self::new(self.role, self.share.map(|v| -v))
    }

    pub fn add_public(&self, m: &RingMatrix) -> SharedMatrix {
        self.add(&SharedMatrix::from_public(self.role, m))
    }

    /// Adds the same public constant to every entry.
    pub fn add_public_scalar(&self, c: RingElement) -> SharedMatrix {
        match self.role {
            Role::Modeler => Self::new(self.role, self.share.map(|v| v + c)),
            Role::Regulator => self.clone(),
        }
    }

    /// Multiplies by a public ring element (no rescaling).
    pub fn mul_public_scalar(&self, k: RingElement) -> SharedMatrix {
        Self::new(self.role, self.share.map(|v| v * k))
    }

    /// Left-multiplies by a public ring matrix (no rescaling).
    pub fn public_matmul(&self, lhs: &RingMatrix) -> SharedMatrix {
        Self::new(self.role, lhs.matmul(&self.share))
    }

    pub fn transpose(&self) -> SharedMatrix {
        Self::new(self.role, self.share.transpose())
    }

    pub fn select_rows(&self, rows: &[usize]) -> SharedMatrix {
        Self::new(self.role, self.share.select_rows(rows))
    }

    pub fn row_slice(&self, start: usize, end: usize) -> SharedMatrix {
        Self::new(self.role, self.share.row_slice(start, end))
    }

    pub fn col_slice(&self, start: usize, end: usize) -> SharedMatrix {
        Self::new(self.role, self.share.col_slice(start, end))
    }

    pub fn column_sums(&self) -> SharedMatrix {
        Self::new(self.role, self.share.column_sums())
    }

    pub fn reshape(&self, rows: usize, cols: usize) -> SharedMatrix {
        assert_eq!(rows * cols, self.len(), "reshape changes element count");
        Self::new(self.role, RingMatrix::from_vec(rows, cols, self.share.data.clone()))
    }

    /// Stacks column vectors / flattens several matrices into one column.
    pub fn concat(role: Role, parts: &[&SharedMatrix]) -> SharedMatrix {
        let data: Vec<RingElement> = parts.iter().flat_map(|p| p.share.data.iter().copied()).collect();
        let n = data.len();
        Self::new(role, RingMatrix::from_vec(n, 1, data))
    }

    /// Inverse of [`SharedMatrix::concat`] given the original shapes.
    pub fn split(&self, shapes: &[(usize, usize)]) -> Vec<SharedMatrix> {
        let mut out = Vec::with_capacity(shapes.len());
        let mut at = 0;
        for &(r, c) in shapes {
            out.push(Self::new(
                self.role,
                RingMatrix::from_vec(r, c, self.share.data[at..at + r * c].to_vec()),
            ));
            at += r * c;
        }
        assert_eq!(at, self.len(), "split does not cover the matrix");
        out
    }
}

/// One party's runtime state for a protocol run.
pub struct PartyContext {
    role: Role,
    channel: Box<dyn Channel>,
    triples: Box<dyn TripleSource>,
    session: SessionConfig,
    run_id: RunId,
    rng: ChaCha20Rng,
    reshare: ChaCha20Rng,
}

impl PartyContext {
    /// `private_seed` drives this party's input-sharing randomness.
    pub fn new(
        role: Role,
        channel: Box<dyn Channel>,
        triples: Box<dyn TripleSource>,
        session: SessionConfig,
        private_seed: [u8; 32],
    ) -> Result<Self, EngineError> {
        session
            .fx
            .validate()
            .map_err(|e| EngineError::ConfigMismatch(e.to_string()))?;
        if triples.role() != role {
            return Err(EngineError::ConfigMismatch(format!(
                "triple store belongs to the {}, not the {role}",
                triples.role()
            )));
        }
        let run_id = triples.run_id();
        let reshare_seed: [u8; 32] = Sha256::new()
            .chain_update(b"blindfair/exact-reshare")
            .chain_update(session.public_seed)
            .chain_update(run_id.0)
            .finalize()
            .into();
        Ok(Self {
            role,
            channel,
            triples,
            session,
            run_id,
            rng: ChaCha20Rng::from_seed(private_seed),
            reshare: ChaCha20Rng::from_seed(reshare_seed),
        })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn fx(&self) -> FxConfig {
        self.session.fx
    }

    pub fn mode(&self) -> TruncMode {
        self.session.mode
    }

    pub fn session(&self) -> SessionConfig {
        self.session
    }

    pub fn run_id(&self) -> RunId {
        self.run_id
    }

    pub fn stats(&self) -> ChannelStats {
        self.channel.stats()
    }

    pub fn consumed(&self) -> TripleBudget {
        self.triples.consumed()
    }

    pub fn channel(&mut self) -> &mut dyn Channel {
        self.channel.as_mut()
    }

    /// Releases the channel, e.g. to run another session on the same connection.
    pub fn into_channel(self) -> Box<dyn Channel> {
        self.channel
    }

    /// Tells the peer this side is giving up.
    pub fn abort(&mut self, reason: &str) {
        self.channel.abort(reason);
    }

    /// Agrees on version, roles, run id, fixed-point format, truncation mode
    /// and public seed. With a registry, refuses run ids already spent and
    /// records this one on success.
    pub fn handshake(&mut self, registry: Option<&mut RunRegistry>) -> Result<(), EngineError> {
        let fx = self.session.fx;
        let mut hello = Vec::with_capacity(64);
        hello.extend_from_slice(&PROTOCOL_VERSION.to_le_bytes());
        hello.push(self.role.index());
        hello.extend_from_slice(&self.run_id.0);
        for v in [fx.total_bits, fx.frac_bits, fx.int_bits] {
            hello.extend_from_slice(&(v as u16).to_le_bytes());
        }
        hello.push(self.session.mode.code());
        hello.extend_from_slice(&self.session.public_seed);
        let peer = self.channel.exchange(Tag::Handshake, hello.clone())?;

        let local_check = self.check_peer_hello(&hello, &peer, registry.as_deref());
        let verdict = match &local_check {
            Ok(()) => vec![0u8],
            Err(e) => {
                let mut v = vec![1u8];
                v.extend_from_slice(e.to_string().as_bytes());
                v
            }
        };
        let peer_verdict = self.channel.exchange(Tag::Handshake, verdict)?;
        local_check?;
        match peer_verdict.first() {
            Some(0) => {}
            Some(_) => {
                return Err(EngineError::PeerRejected(
                    String::from_utf8_lossy(&peer_verdict[1..]).into_owned(),
                ))
            }
            None => return Err(EngineError::Malformed),
        }
        if let Some(reg) = registry {
            reg.insert(self.run_id)?;
        }
        Ok(())
    }

    fn check_peer_hello(&self, mine: &[u8], peer: &[u8], registry: Option<&RunRegistry>) -> Result<(), EngineError> {
        if peer.len() != mine.len() {
            return Err(EngineError::Malformed);
        }
        let peer_version = u16::from_le_bytes([peer[0], peer[1]]);
        if peer_version != PROTOCOL_VERSION {
            return Err(EngineError::VersionMismatch {
                local: PROTOCOL_VERSION,
                peer: peer_version,
            });
        }
        if peer[2] == self.role.index() {
            return Err(EngineError::ConfigMismatch(format!("both parties are the {}", self.role)));
        }
        if peer[3..19] != mine[3..19] {
            return Err(EngineError::ConfigMismatch("run ids differ (triple stores from different dealer runs)".into()));
        }
        if peer[19..25] != mine[19..25] {
            let field = |b: &[u8], i: usize| u16::from_le_bytes([b[19 + 2 * i], b[20 + 2 * i]]);
            return Err(EngineError::ConfigMismatch(format!(
                "fixed-point config local {}/{}/{} vs peer {}/{}/{} (total/frac/int bits)",
                field(mine, 0),
                field(mine, 1),
                field(mine, 2),
                field(peer, 0),
                field(peer, 1),
                field(peer, 2)
            )));
        }
        if peer[25] != mine[25] {
            return Err(EngineError::ConfigMismatch("truncation modes differ".into()));
        }
        if peer[26..] != mine[26..] {
            return Err(EngineError::ConfigMismatch("public seeds differ".into()));
        }
        if registry.is_some_and(|r| r.contains(&self.run_id)) {
            return Err(EngineError::StaleRun(self.run_id));
        }
        Ok(())
    }

    fn exchange_elements(&mut self, tag: Tag, values: &[RingElement]) -> Result<Vec<RingElement>, EngineError> {
        let reply = self.channel.exchange(tag, serialize_elements(values))?;
        let theirs = deserialize_elements(&reply).ok_or(EngineError::Malformed)?;
        if theirs.len() != values.len() {
            return Err(EngineError::DimensionMismatch(format!(
                "peer sent {} elements, expected {}",
                theirs.len(),
                values.len()
            )));
        }
        Ok(theirs)
    }

    /// Secret-shares a matrix held by `owner`. The owner passes `Some(m)`,
    /// the other party `None`; both pass the expected dimensions.
    pub fn input_share(
        &mut self,
        owner: Role,
        m: Option<&RingMatrix>,
        rows: usize,
        cols: usize,
    ) -> Result<SharedMatrix, EngineError> {
        if owner == self.role {
            let m = m.ok_or_else(|| EngineError::DimensionMismatch("owner supplied no input".into()))?;
            if (m.rows, m.cols) != (rows, cols) {
                return Err(EngineError::DimensionMismatch(format!(
                    "input is {}x{}, declared {rows}x{cols}",
                    m.rows, m.cols
                )));
            }
            let masks: Vec<RingElement> = (0..m.data.len()).map(|_| RingElement(self.rng.next_u64())).collect();
            let masked: Vec<RingElement> = m.data.iter().zip(&masks).map(|(&x, &r)| x - r).collect();
            // the Modeler keeps x - r, the Regulator r
            let (kept, sent) = match owner {
                Role::Modeler => (masked, masks),
                Role::Regulator => (masks, masked),
            };
            let mut payload = Vec::with_capacity(8 + sent.len() * 8);
            payload.extend_from_slice(&(rows as u32).to_le_bytes());
            payload.extend_from_slice(&(cols as u32).to_le_bytes());
            payload.extend_from_slice(&serialize_elements(&sent));
            self.channel.send(crate::transport::Frame::new(Tag::ShareBatch, payload))?;
            Ok(SharedMatrix::new(self.role, RingMatrix::from_vec(rows, cols, kept)))
        } else {
            let payload = self.channel.recv_expect(Tag::ShareBatch)?;
            if payload.len() < 8 {
                return Err(EngineError::Malformed);
            }
            let r = u32::from_le_bytes(payload[..4].try_into().unwrap()) as usize;
            let c = u32::from_le_bytes(payload[4..8].try_into().unwrap()) as usize;
            if (r, c) != (rows, cols) {
                let msg = format!("peer shares a {r}x{c} input, expected {rows}x{cols}");
                self.abort(&msg);
                return Err(EngineError::DimensionMismatch(msg));
            }
            let data = deserialize_elements(&payload[8..]).ok_or(EngineError::Malformed)?;
            if data.len() != rows * cols {
                return Err(EngineError::Malformed);
            }
            Ok(SharedMatrix::new(self.role, RingMatrix::from_vec(rows, cols, data)))
        }
    }

    /// Reveals a shared matrix to both parties.
    pub fn open(&mut self, s: &SharedMatrix) -> Result<RingMatrix, EngineError> {
        let theirs = self.exchange_elements(Tag::Reconstruct, &s.share.data)?;
        let data = s.share.data.iter().zip(&theirs).map(|(&a, &b)| a + b).collect();
        Ok(RingMatrix::from_vec(s.rows(), s.cols(), data))
    }

    /// Reveals a shared matrix to `target` only; the other party returns `None`.
    pub fn reconstruct_to(&mut self, target: Role, s: &SharedMatrix) -> Result<Option<RingMatrix>, EngineError> {
        if self.role == target {
            let payload = self.channel.recv_expect(Tag::Reconstruct)?;
            let theirs = deserialize_elements(&payload).ok_or(EngineError::Malformed)?;
            if theirs.len() != s.len() {
                return Err(EngineError::DimensionMismatch("reconstruction size".into()));
            }
            let data = s.share.data.iter().zip(&theirs).map(|(&a, &b)| a + b).collect();
            Ok(Some(RingMatrix::from_vec(s.rows(), s.cols(), data)))
        } else {
            self.channel.send(crate::transport::Frame::new(
                Tag::Reconstruct,
                serialize_elements(&s.share.data),
            ))?;
            Ok(None)
        }
    }

    /// Divides every entry by `2^bits` (round to nearest in exact mode,
    /// stochastic rounding with a small failure probability in probabilistic
    /// mode).
    pub fn truncate(&mut self, s: &SharedMatrix, bits: u32) -> Result<SharedMatrix, EngineError> {
        Ok(self.truncate_many(&[(s, bits)])?.remove(0))
    }

    /// Several truncations with at most one exchange.
    pub fn truncate_many(&mut self, items: &[(&SharedMatrix, u32)]) -> Result<Vec<SharedMatrix>, EngineError> {
        match self.session.mode {
            TruncMode::Probabilistic => Ok(items
                .iter()
                .map(|(s, bits)| SharedMatrix::new(self.role, s.share.map(|v| truncate_share(self.role, v, *bits))))
                .collect()),
            TruncMode::Exact => {
                let to_open: Vec<&SharedMatrix> = items.iter().filter(|(_, b)| *b > 0).map(|(s, _)| *s).collect();
                let flat = SharedMatrix::concat(self.role, &to_open);
                let opened = if flat.is_empty() { Vec::new() } else { self.open(&flat)?.data };
                let mut at = 0;
                let mut out = Vec::with_capacity(items.len());
                for (s, bits) in items {
                    if *bits == 0 {
                        out.push((*s).clone());
                        continue;
                    }
                    let mut data = Vec::with_capacity(s.len());
                    for &v in &opened[at..at + s.len()] {
                        let r = RingElement(self.reshare.next_u64());
                        let t = round_shift(v, *bits);
                        data.push(match self.role {
                            Role::Modeler => t - r,
                            Role::Regulator => r,
                        });
                    }
                    at += s.len();
                    out.push(SharedMatrix::new(self.role, RingMatrix::from_vec(s.rows(), s.cols(), data)));
                }
                Ok(out)
            }
        }
    }

    /// Elementwise ring products of equal-shaped pairs, one exchange total.
    /// Results are not rescaled.
    pub fn hadamard_many(&mut self, pairs: &[(&SharedMatrix, &SharedMatrix)]) -> Result<Vec<SharedMatrix>, EngineError> {
        for (x, y) in pairs {
            if (x.rows(), x.cols()) != (y.rows(), y.cols()) {
                return Err(EngineError::DimensionMismatch(format!(
                    "hadamard of {}x{} and {}x{}",
                    x.rows(),
                    x.cols(),
                    y.rows(),
                    y.cols()
                )));
            }
        }
        let total: usize = pairs.iter().map(|(x, _)| x.len()).sum();
        if total == 0 {
            return Ok(pairs.iter().map(|(x, _)| (*x).clone()).collect());
        }
        let triples = self.triples.take_scalar(total)?;
        let mut masked = Vec::with_capacity(2 * total);
        let mut k = 0;
        for (x, y) in pairs {
            for (&xv, &yv) in x.share.data.iter().zip(&y.share.data) {
                let t = &triples[k];
                masked.push(xv - t.a);
                masked.push(yv - t.b);
                k += 1;
            }
        }
        let theirs = self.exchange_elements(Tag::BeaverEf, &masked)?;
        let mut out = Vec::with_capacity(pairs.len());
        let mut k = 0;
        for (x, _) in pairs {
            let mut data = Vec::with_capacity(x.len());
            for _ in 0..x.len() {
                let e = masked[2 * k] + theirs[2 * k];
                let f = masked[2 * k + 1] + theirs[2 * k + 1];
                data.push(crate::shares::beaver_combine(self.role, e, f, &triples[k]));
                k += 1;
            }
            out.push(SharedMatrix::new(self.role, RingMatrix::from_vec(x.rows(), x.cols(), data)));
        }
        Ok(out)
    }

    pub fn hadamard(&mut self, x: &SharedMatrix, y: &SharedMatrix) -> Result<SharedMatrix, EngineError> {
        Ok(self.hadamard_many(&[(x, y)])?.remove(0))
    }

    /// Ring matrix products (not rescaled) of several pairs, one exchange total.
    pub fn matmul_raw_many(&mut self, pairs: &[(&SharedMatrix, &SharedMatrix)]) -> Result<Vec<SharedMatrix>, EngineError> {
        let mut triples = Vec::with_capacity(pairs.len());
        for (a, b) in pairs {
            if a.cols() != b.rows() {
                return Err(EngineError::DimensionMismatch(format!(
                    "matmul of {}x{} by {}x{}",
                    a.rows(),
                    a.cols(),
                    b.rows(),
                    b.cols()
                )));
            }
            triples.push(self.triples.take_matrix(MatShape::new(a.rows(), a.cols(), b.cols()))?);
        }
        let mut masked = Vec::new();
        for ((a, b), t) in pairs.iter().zip(&triples) {
            masked.extend(a.share.data.iter().zip(&t.a.data).map(|(&x, &u)| x - u));
            masked.extend(b.share.data.iter().zip(&t.b.data).map(|(&y, &v)| y - v));
        }
        let theirs = self.exchange_elements(Tag::BeaverEf, &masked)?;
        let mut out = Vec::with_capacity(pairs.len());
        let mut at = 0;
        for ((a, b), t) in pairs.iter().zip(&triples) {
            let open = |at: usize, rows: usize, cols: usize| {
                RingMatrix::from_vec(
                    rows,
                    cols,
                    (at..at + rows * cols).map(|i| masked[i] + theirs[i]).collect(),
                )
            };
            let e = open(at, a.rows(), a.cols());
            at += a.len();
            let f = open(at, b.rows(), b.cols());
            at += b.len();
            let mut z = e.matmul(&t.b).add(&t.a.matmul(&f)).add(&t.c);
            if self.role == Role::Regulator {
                z = z.add(&e.matmul(&f));
            }
            out.push(SharedMatrix::new(self.role, z));
        }
        Ok(out)
    }

    pub fn matmul_raw(&mut self, a: &SharedMatrix, b: &SharedMatrix) -> Result<SharedMatrix, EngineError> {
        Ok(self.matmul_raw_many(&[(a, b)])?.remove(0))
    }

    /// Fixed-point matrix product: ring product followed by one truncation
    /// by `frac_bits` per output entry.
    pub fn matmul(&mut self, a: &SharedMatrix, b: &SharedMatrix) -> Result<SharedMatrix, EngineError> {
        let raw = self.matmul_raw(a, b)?;
        self.truncate(&raw, self.session.fx.frac_bits)
    }

    /// `(1/n)·Zt·X` for `Zt` p×n and `X` n×d, computed blockwise: each b-wide
    /// block product is rescaled by `2^frac_bits · b`, the blocks are summed
    /// and the sum is divided by `n/b`.
    pub fn blocked_mult_shift_avg(
        &mut self,
        zt: &SharedMatrix,
        x: &SharedMatrix,
        block: usize,
    ) -> Result<SharedMatrix, EngineError> {
        let n = zt.cols();
        if x.rows() != n {
            return Err(EngineError::DimensionMismatch(format!(
                "{}x{} by {}x{}",
                zt.rows(),
                n,
                x.rows(),
                x.cols()
            )));
        }
        check_block(n, block, &self.session.fx)?;
        let blocks = n / block;
        let parts: Vec<(SharedMatrix, SharedMatrix)> = (0..blocks)
            .map(|k| (zt.col_slice(k * block, (k + 1) * block), x.row_slice(k * block, (k + 1) * block)))
            .collect();
        let pairs: Vec<(&SharedMatrix, &SharedMatrix)> = parts.iter().map(|(a, b)| (a, b)).collect();
        let raw = self.matmul_raw_many(&pairs)?;
        let shift = self.session.fx.frac_bits + block.trailing_zeros();
        let items: Vec<(&SharedMatrix, u32)> = raw.iter().map(|r| (r, shift)).collect();
        let scaled = self.truncate_many(&items)?;
        let mut sum = SharedMatrix::zeros(self.role, zt.rows(), x.cols());
        for s in &scaled {
            sum = sum.add(s);
        }
        self.truncate(&sum, blocks.trailing_zeros())
    }

    /// Bitwise AND of packed XOR-shared words, one exchange.
    pub fn and_words(&mut self, x: &[u64], y: &[u64]) -> Result<Vec<u64>, EngineError> {
        assert_eq!(x.len(), y.len(), "and_words length mismatch");
        if x.is_empty() {
            return Ok(Vec::new());
        }
        let triples = self.triples.take_and(x.len())?;
        let mut masked = Vec::with_capacity(2 * x.len());
        for ((&a, &b), t) in x.iter().zip(y).zip(&triples) {
            let (d, e) = and_masks(a, b, t);
            masked.push(d);
            masked.push(e);
        }
        let mut payload = Vec::with_capacity(masked.len() * 8);
        for w in &masked {
            payload.extend_from_slice(&w.to_le_bytes());
        }
        let reply = self.channel.exchange(Tag::BitBatch, payload)?;
        if reply.len() != masked.len() * 8 {
            return Err(EngineError::Malformed);
        }
        Ok(triples
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let d = masked[2 * i] ^ u64::from_le_bytes(reply[16 * i..16 * i + 8].try_into().unwrap());
                let e = masked[2 * i + 1] ^ u64::from_le_bytes(reply[16 * i + 8..16 * i + 16].try_into().unwrap());
                and_combine(self.role, d, e, t)
            })
            .collect())
    }

    /// Reveals packed XOR-shared words to both parties.
    pub fn open_words(&mut self, x: &[u64]) -> Result<Vec<u64>, EngineError> {
        let payload: Vec<u8> = x.iter().flat_map(|w| w.to_le_bytes()).collect();
        let reply = self.channel.exchange(Tag::BitBatch, payload)?;
        if reply.len() != x.len() * 8 {
            return Err(EngineError::Malformed);
        }
        Ok(x.iter()
            .zip(reply.chunks_exact(8))
            .map(|(&a, c)| a ^ u64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Runs both parties in one process over an in-process channel, with
/// triples streamed from a shared dealer seeded by `dealer_seed`.
pub fn run_in_process<A, B, FM, FR>(
    session: SessionConfig,
    dealer_seed: &[u8],
    modeler: FM,
    regulator: FR,
) -> Result<(A, B), EngineError>
where
    A: Send,
    B: Send,
    FM: FnOnce(&mut PartyContext) -> A + Send,
    FR: FnOnce(&mut PartyContext) -> B + Send,
{
    let (tm, tr) = crate::shares::DealerFeed::pair(dealer_seed);
    let private_seed = |role: Role| -> [u8; 32] {
        Sha256::new()
            .chain_update(b"blindfair/private")
            .chain_update(dealer_seed)
            .chain_update([role.index()])
            .finalize()
            .into()
    };
    let parties = LoopbackParties {
        triples: (Box::new(tm), Box::new(tr)),
        private_seeds: (private_seed(Role::Modeler), private_seed(Role::Regulator)),
        registries: (None, None),
    };
    run_loopback(session, parties, modeler, regulator)
}

/// Per-party resources of a loopback run, Modeler first.
pub struct LoopbackParties {
    pub triples: (Box<dyn TripleSource>, Box<dyn TripleSource>),
    pub private_seeds: ([u8; 32], [u8; 32]),
    pub registries: (Option<RunRegistry>, Option<RunRegistry>),
}

/// Runs both parties on two threads over an in-process channel. Each party
/// performs the session handshake before its closure runs.
pub fn run_loopback<A, B, FM, FR>(
    session: SessionConfig,
    parties: LoopbackParties,
    modeler: FM,
    regulator: FR,
) -> Result<(A, B), EngineError>
where
    A: Send,
    B: Send,
    FM: FnOnce(&mut PartyContext) -> A + Send,
    FR: FnOnce(&mut PartyContext) -> B + Send,
{
    let (cm, cr) = crate::transport::mem_pair();
    let LoopbackParties {
        triples: (tm, tr),
        private_seeds: (sm, sr),
        registries: (mut reg_m, mut reg_r),
    } = parties;
    let mut ctx_m = PartyContext::new(Role::Modeler, Box::new(cm), tm, session, sm)?;
    let mut ctx_r = PartyContext::new(Role::Regulator, Box::new(cr), tr, session, sr)?;
    std::thread::scope(|scope| {
        let h = scope.spawn(move || -> Result<B, EngineError> {
            ctx_r.handshake(reg_r.as_mut())?;
            Ok(regulator(&mut ctx_r))
        });
        let a = ctx_m.handshake(reg_m.as_mut()).map(|_| modeler(&mut ctx_m));
        let b = h.join().expect("regulator thread panicked");
        Ok((a?, b?))
    })
}

/// Validates block parameters for [`PartyContext::blocked_mult_shift_avg`].
pub fn check_block(n: usize, block: usize, fx: &FxConfig) -> Result<(), EngineError> {
    if block == 0 || !block.is_power_of_two() {
        return Err(EngineError::BlockSizeError(format!("block {block} is not a power of two")));
    }
    if n == 0 || !n.is_power_of_two() || n % block != 0 {
        return Err(EngineError::BlockSizeError(format!(
            "n = {n} must be a power of two divisible by the block {block}"
        )));
    }
    if (block as u64) >= (1u64 << fx.int_bits.min(62)) {
        return Err(EngineError::BlockSizeError(format!("block {block} exceeds the integer range")));
    }
    Ok(())
}

/// Cleartext model of [`PartyContext::blocked_mult_shift_avg`] in exact
/// truncation mode.
pub fn blocked_mult_shift_avg_clear(zt: &RingMatrix, x: &RingMatrix, block: usize, fx: &FxConfig) -> RingMatrix {
    let n = zt.cols;
    let shift = fx.frac_bits + block.trailing_zeros();
    let mut sum = RingMatrix::zeros(zt.rows, x.cols);
    for k in 0..n / block {
        let prod = zt
            .col_slice(k * block, (k + 1) * block)
            .matmul(&x.row_slice(k * block, (k + 1) * block));
        sum = sum.add(&prod.map(|v| round_shift(v, shift)));
    }
    sum.map(|v| round_shift(v, (n / block).trailing_zeros()))
}

/// Triples consumed by the primitive operations.
pub mod cost {
    use super::*;

    pub fn hadamard(elements: usize) -> TripleBudget {
        TripleBudget {
            scalar: elements as u64,
            ..Default::default()
        }
    }

    pub fn matmul(n: usize, k: usize, m: usize) -> TripleBudget {
        let mut b = TripleBudget::default();
        b.add_matrix(MatShape::new(n, k, m), 1);
        b
    }

    pub fn blocked_mult_shift_avg(p: usize, n: usize, d: usize, block: usize) -> TripleBudget {
        let mut b = TripleBudget::default();
        b.add_matrix(MatShape::new(p, block, d), (n / block) as u64);
        b
    }

    pub fn and_words(words: usize) -> TripleBudget {
        TripleBudget {
            and_words: words as u64,
            ..Default::default()
        }
    }
}
