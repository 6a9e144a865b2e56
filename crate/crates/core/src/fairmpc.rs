//! The three two-party protocols: fair training, fairness certification with
//! model signing, and decision verification.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::boolgadget::{a2b_msb, and_all, b2a, secure_relu, SharedBits};
use crate::clearref::{minibatch_order, EpochCoefficients, TrainingConfig};
use crate::dataio::Whitening;
use crate::engine::{cost as ecost, EngineError, PartyContext, SharedMatrix};
use crate::fxp::{encode, serialize_elements, FxConfig, RingElement, RingMatrix};
use crate::shares::{Role, RunId, TripleBudget};
use crate::transport::{Frame, Tag};

#[derive(Debug, Error)]
pub enum FairError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("no valid certificate: {0}")]
    NoCertificate(String),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("public parameters differ between the parties")]
    ParameterMismatch,
}

impl From<crate::transport::TransportError> for FairError {
    fn from(e: crate::transport::TransportError) -> Self {
        FairError::Engine(e.into())
    }
}

/// Public problem dimensions known to both parties.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n: usize,
    pub d: usize,
    pub p: usize,
}

/// SHA-256 of the canonical serialization of `θ`.
pub fn model_digest(theta: &RingMatrix) -> [u8; 32] {
    Sha256::digest(serialize_elements(&theta.data)).into()
}

/// Both parties confirm they run with identical public parameters.
fn agree(ctx: &mut PartyContext, label: &[u8], fields: &[&[u8]]) -> Result<(), FairError> {
    let mut h = Sha256::new().chain_update(label);
    for f in fields {
        h.update((f.len() as u64).to_le_bytes());
        h.update(f);
    }
    let mine: [u8; 32] = h.finalize().into();
    let theirs = ctx.channel().exchange(Tag::Handshake, mine.to_vec())?;
    if theirs != mine {
        return Err(FairError::ParameterMismatch);
    }
    Ok(())
}

fn f64_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn dims_bytes(d: Dims) -> Vec<u8> {
    [d.n as u64, d.d as u64, d.p as u64].iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn encode_bounds(c: &[f64], fx: &FxConfig) -> Result<RingMatrix, FairError> {
    let data = c
        .iter()
        .map(|&v| encode(v, fx))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| FairError::InvalidConfig(e.to_string()))?;
    Ok(RingMatrix::column(data))
}

/// Secret-shares the sensitive attributes held in the clear by the
/// Regulator (the other party passes `None`).
pub fn share_sensitive(ctx: &mut PartyContext, z: Option<&RingMatrix>, n: usize, p: usize) -> Result<SharedMatrix, FairError> {
    Ok(ctx.input_share(Role::Regulator, z, n, p)?)
}

/// `(1/n)·(Z - z̄)ᵀ·X` on shares.
fn shared_constraint_matrix(
    ctx: &mut PartyContext,
    z: &SharedMatrix,
    x: &SharedMatrix,
    block: usize,
) -> Result<SharedMatrix, FairError> {
    let n = z.rows();
    let mean = ctx.truncate(&z.column_sums(), n.trailing_zeros())?;
    let mut centered = z.clone();
    for r in 0..n {
        for c in 0..z.cols() {
            let v = centered.share.get(r, c) - mean.share.data[c];
            centered.share.set(r, c, v);
        }
    }
    Ok(ctx.blocked_mult_shift_avg(&centered.transpose(), x, block)?)
}

/// Inputs of one party to [`protocol_train`].
pub struct TrainInputs<'a> {
    pub dims: Dims,
    /// Encoded features (n×d) and labels (n×1); the Modeler's only.
    pub xy: Option<(&'a RingMatrix, &'a RingMatrix)>,
    /// This party's share of the sensitive attributes (n×p).
    pub z: &'a SharedMatrix,
}

fn check_train(cfg: &TrainingConfig, dims: Dims, fx: &FxConfig) -> Result<(), FairError> {
    let bad = |m: String| Err(FairError::InvalidConfig(m));
    if !dims.n.is_power_of_two() || cfg.batch() > dims.n {
        return bad(format!("n = {} with batch {}", dims.n, cfg.batch()));
    }
    if cfg.c.len() != dims.p {
        return bad(format!("{} bounds for {} sensitive attributes", cfg.c.len(), dims.p));
    }
    if cfg.fx != *fx {
        return bad("training and session fixed-point formats differ".into());
    }
    if cfg.epochs == 0 {
        return bad("zero epochs".into());
    }
    Ok(())
}

fn train_parameters(cfg: &TrainingConfig, dims: Dims) -> Vec<Vec<u8>> {
    vec![
        dims_bytes(dims),
        f64_bytes(&cfg.c),
        f64_bytes(&[cfg.eta_theta, cfg.eta_lambda]),
        [cfg.batch_exp as u64, cfg.epochs as u64, cfg.block as u64]
            .iter()
            .flat_map(|x| x.to_le_bytes())
            .collect(),
        cfg.public_seed.to_vec(),
    ]
}

/// Lagrangian-multiplier fair training entirely on shares. Returns `θ` at
/// the Modeler and `None` at the Regulator.
pub fn protocol_train(ctx: &mut PartyContext, cfg: &TrainingConfig, inputs: TrainInputs) -> Result<Option<RingMatrix>, FairError> {
    let fx = ctx.fx();
    let Dims { n, d, p } = inputs.dims;
    check_train(cfg, inputs.dims, &fx)?;
    let params = train_parameters(cfg, inputs.dims);
    let fields: Vec<&[u8]> = params.iter().map(Vec::as_slice).collect();
    agree(ctx, b"blindfair/train", &fields)?;
    if (inputs.z.rows(), inputs.z.cols()) != (n, p) {
        return Err(EngineError::DimensionMismatch(format!("sensitive share is {}x{}", inputs.z.rows(), inputs.z.cols())).into());
    }

    let role = ctx.role();
    let f = fx.frac_bits;
    let batch = cfg.batch();
    let x = ctx.input_share(Role::Modeler, inputs.xy.map(|(x, _)| x), n, d)?;
    let y = ctx.input_share(Role::Modeler, inputs.xy.map(|(_, y)| y), n, 1)?;
    let a = shared_constraint_matrix(ctx, inputs.z, &x, cfg.block)?;
    let at = a.transpose();
    let c = encode_bounds(&cfg.c, &fx)?;
    let half = RingElement(1u64 << (f - 1));
    let one = fx.one();

    let mut theta = SharedMatrix::zeros(role, d, 1);
    let mut lambda = SharedMatrix::zeros(role, p, 1);
    for epoch in 0..cfg.epochs {
        let k = EpochCoefficients::new(cfg, epoch).map_err(|e| FairError::InvalidConfig(e.to_string()))?;
        let order = minibatch_order(&cfg.public_seed, epoch, n);
        for idx in order.chunks_exact(batch) {
            let xb = x.select_rows(idx);
            let yb = y.select_rows(idx);

            let raw = ctx.matmul_raw_many(&[(&a, &theta), (&xb, &theta)])?;
            let t = ctx.truncate_many(&[(&raw[0], f), (&raw[1], f)])?;
            let (u, z) = (&t[0], &t[1]);

            // sign of Aθ and the two sigmoid breakpoints in one comparison
            let upper = z.add_public_scalar(-half);
            let lower = z.neg().add_public_scalar(-half);
            let bits = a2b_msb(ctx, &SharedMatrix::concat(role, &[u, &upper, &lower]))?;
            let flags = b2a(ctx, &crate::boolgadget::concat_bits(role, &[&bits.slice(0, p), &bits.slice(p, 2 * batch).not()]))?;
            let neg_u = flags.row_slice(0, p);
            let alpha = flags.row_slice(p, p + batch);
            let beta = flags.row_slice(p + batch, p + 2 * batch);
            let middle = alpha.add(&beta).neg().add_public_scalar(RingElement(1));
            let prods = ctx.hadamard_many(&[(&neg_u, u), (&neg_u, &lambda), (&middle, &z.add_public_scalar(half))])?;
            let two = RingElement(2);
            let abs_u = u.sub(&prods[0].mul_public_scalar(two));
            let signed_lambda = lambda.sub(&prods[1].mul_public_scalar(two));
            let sigma = alpha.mul_public_scalar(one).add(&prods[2]);

            let fval = abs_u.sub(&SharedMatrix::from_public(role, &c));
            let residual = sigma.sub(&yb);

            // [F ≥ 0] for the multiplier gradient, [F > 0] for the active rows
            let fbits = a2b_msb(ctx, &SharedMatrix::concat(role, &[&fval, &fval.neg()]))?;
            let gates = b2a(ctx, &crate::boolgadget::concat_bits(role, &[&fbits.slice(0, p).not(), &fbits.slice(p, p)]))?;
            let gp = ctx.hadamard_many(&[(&gates.row_slice(0, p), &fval), (&gates.row_slice(p, 2 * p), &signed_lambda)])?;
            let (grad_lambda, w) = (&gp[0], &gp[1]);

            let graw = ctx.matmul_raw_many(&[(&xb.transpose(), &residual), (&at, w)])?;
            let g = ctx.truncate_many(&[(&graw[0], f + cfg.batch_exp), (&graw[1], f)])?;
            let scaled = [
                g[0].mul_public_scalar(k.bce.0),
                g[1].mul_public_scalar(k.con.0),
                grad_lambda.mul_public_scalar(k.lambda.0),
            ];
            let steps = ctx.truncate_many(&[(&scaled[0], k.bce.1), (&scaled[1], k.con.1), (&scaled[2], k.lambda.1)])?;

            theta = theta.sub(&steps[0]).sub(&steps[1]);
            lambda = secure_relu(ctx, &lambda.add(&steps[2]))?;
        }
    }
    Ok(ctx.reconstruct_to(Role::Modeler, &theta)?)
}

/// Triples consumed by one minibatch update.
pub fn train_iteration_budget(d: usize, p: usize, batch: usize) -> TripleBudget {
    use crate::boolgadget::cost as g;
    let mut b = TripleBudget::default();
    for part in [
        ecost::matmul(p, d, 1),
        ecost::matmul(batch, d, 1),
        g::a2b_msb(p + 2 * batch),
        g::b2a(p + 2 * batch),
        ecost::hadamard(2 * p + batch),
        g::a2b_msb(2 * p),
        g::b2a(2 * p),
        ecost::hadamard(2 * p),
        ecost::matmul(d, batch, 1),
        ecost::matmul(d, p, 1),
        g::relu(p),
    ] {
        b.merge(&part);
    }
    b
}

/// Triples consumed by a whole [`protocol_train`] run.
pub fn train_budget(dims: Dims, batch_exp: u32, epochs: usize, block: usize) -> TripleBudget {
    let batch = 1usize << batch_exp;
    let iterations = (epochs * (dims.n / batch)) as u64;
    let mut b = ecost::blocked_mult_shift_avg(dims.p, dims.n, dims.d, block);
    b.merge(&train_iteration_budget(dims.d, dims.p, batch).scaled(iterations));
    b
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
}

/// Outcome of a certification, stored by both parties.
#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub run_id: RunId,
    pub fx: FxConfig,
    pub c: Vec<f64>,
    pub verdict: Verdict,
    /// `s(θ)`; present iff the verdict is pass.
    pub digest: Option<[u8; 32]>,
    /// Preprocessing of verification inputs.
    pub whitening: Whitening,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

#[derive(Debug, Error)]
pub enum CertificateError {
    #[error("certificate I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a certificate file")]
    BadMagic,
    #[error("unsupported certificate version {0}")]
    UnsupportedVersion(u16),
    #[error("certificate is truncated")]
    Truncated,
    #[error("certificate integrity check failed")]
    Integrity,
    #[error("malformed certificate: {0}")]
    Malformed(String),
}

pub const CERT_MAGIC: &[u8; 4] = b"BFCT";
pub const CERT_VERSION: u16 = 1;

impl Certificate {
    pub fn d(&self) -> usize {
        self.whitening.dim()
    }

    pub fn p(&self) -> usize {
        self.c.len()
    }

    /// Fixed binary layout followed by a SHA-256 trailer over all
    /// preceding bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CERT_MAGIC);
        out.extend_from_slice(&CERT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.run_id.0);
        out.extend_from_slice(&(self.d() as u32).to_le_bytes());
        out.extend_from_slice(&(self.p() as u32).to_le_bytes());
        for v in [self.fx.total_bits, self.fx.frac_bits, self.fx.int_bits] {
            out.extend_from_slice(&(v as u16).to_le_bytes());
        }
        out.push(match self.verdict {
            Verdict::Pass => 1,
            Verdict::Fail => 0,
        });
        out.extend_from_slice(&self.digest.unwrap_or([0u8; 32]));
        out.extend_from_slice(&f64_bytes(&self.whitening.mean));
        out.extend_from_slice(&f64_bytes(&self.whitening.scale));
        out.extend_from_slice(&f64_bytes(&self.c));
        out.extend_from_slice(&self.timestamp.to_le_bytes());
        let trailer = Sha256::digest(&out);
        out.extend_from_slice(&trailer);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CertificateError> {
        const HEADER: usize = 4 + 2 + 16 + 4 + 4 + 6 + 1 + 32;
        if bytes.len() < 4 {
            return Err(CertificateError::Truncated);
        }
        if &bytes[..4] != CERT_MAGIC {
            return Err(CertificateError::BadMagic);
        }
        if bytes.len() < HEADER {
            return Err(CertificateError::Truncated);
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CERT_VERSION {
            return Err(CertificateError::UnsupportedVersion(version));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().unwrap()) as u32;
        let d = u32_at(22);
        let p = u32_at(26);
        let body = HEADER
            .checked_add(d.checked_mul(16).ok_or(CertificateError::Truncated)?)
            .and_then(|v| v.checked_add(p.checked_mul(8)?))
            .and_then(|v| v.checked_add(8))
            .ok_or(CertificateError::Truncated)?;
        if bytes.len() != body + 32 {
            return Err(CertificateError::Truncated);
        }
        if Sha256::digest(&bytes[..body]).as_slice() != &bytes[body..] {
            return Err(CertificateError::Integrity);
        }
        let fx = FxConfig {
            total_bits: u16_at(30),
            frac_bits: u16_at(32),
            int_bits: u16_at(34),
        };
        fx.validate().map_err(|e| CertificateError::Malformed(e.to_string()))?;
        let verdict = match bytes[36] {
            1 => Verdict::Pass,
            0 => Verdict::Fail,
            v => return Err(CertificateError::Malformed(format!("verdict byte {v}"))),
        };
        let digest: [u8; 32] = bytes[37..69].try_into().unwrap();
        let floats = |start: usize, count: usize| -> Vec<f64> {
            (0..count)
                .map(|i| f64::from_le_bytes(bytes[start + 8 * i..start + 8 * i + 8].try_into().unwrap()))
                .collect()
        };
        let mean = floats(HEADER, d);
        let scale = floats(HEADER + 8 * d, d);
        let c = floats(HEADER + 16 * d, p);
        let timestamp = u64::from_le_bytes(bytes[body - 8..body].try_into().unwrap());
        Ok(Certificate {
            run_id: RunId(bytes[6..22].try_into().unwrap()),
            fx,
            c,
            verdict,
            digest: (verdict == Verdict::Pass).then_some(digest),
            whitening: Whitening { mean, scale },
            timestamp,
        })
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), CertificateError> {
        Ok(w.write_all(&self.to_bytes())?)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, CertificateError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<(), CertificateError> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self, CertificateError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Inputs of one party to [`protocol_certify`].
pub struct CertifyInputs<'a> {
    pub dims: Dims,
    /// The Modeler's model (d×1).
    pub theta: Option<&'a RingMatrix>,
    /// The Regulator's whitened features (n×d).
    pub x: Option<&'a RingMatrix>,
    /// This party's share of the sensitive attributes (n×p).
    pub z: &'a SharedMatrix,
    pub c: &'a [f64],
    pub block: usize,
    /// Recorded in this party's certificate.
    pub whitening: Whitening,
    pub timestamp: u64,
}

/// Checks `|Aθ| ≤ c` on shares, reveals the single pass/fail bit to both
/// parties and, on pass, has the Modeler sign `θ`. The transcript does not
/// depend on the verdict: a failed run still sends an all-zero digest.
pub fn protocol_certify(ctx: &mut PartyContext, inputs: CertifyInputs) -> Result<Certificate, FairError> {
    let fx = ctx.fx();
    let Dims { n, d, p } = inputs.dims;
    if inputs.c.len() != p {
        return Err(FairError::InvalidConfig(format!("{} bounds for {p} attributes", inputs.c.len())));
    }
    if inputs.whitening.dim() != d {
        return Err(EngineError::DimensionMismatch(format!("whitening for {} columns, model has {d}", inputs.whitening.dim())).into());
    }
    agree(ctx, b"blindfair/certify", &[&dims_bytes(inputs.dims), &f64_bytes(inputs.c), &(inputs.block as u64).to_le_bytes()])?;
    let role = ctx.role();
    let theta = ctx.input_share(Role::Modeler, inputs.theta, d, 1)?;
    let x = ctx.input_share(Role::Regulator, inputs.x, n, d)?;
    if (inputs.z.rows(), inputs.z.cols()) != (n, p) {
        return Err(EngineError::DimensionMismatch("sensitive share shape".into()).into());
    }
    let a = shared_constraint_matrix(ctx, inputs.z, &x, inputs.block)?;
    let u = ctx.matmul(&a, &theta)?;
    let c = SharedMatrix::from_public(role, &encode_bounds(inputs.c, &fx)?);
    // |u| ≤ c  ⇔  c - u ≥ 0 and c + u ≥ 0
    let signs = a2b_msb(ctx, &SharedMatrix::concat(role, &[&c.sub(&u), &c.add(&u)]))?;
    let ok = and_all(ctx, &signs.not())?;
    let verdict = if ctx.open_words(&ok.words)?[0] & 1 == 1 {
        Verdict::Pass
    } else {
        Verdict::Fail
    };

    let opened = ctx.reconstruct_to(Role::Modeler, &theta)?;
    let digest = match role {
        Role::Modeler => {
            let theta = opened.expect("modeler reconstructs");
            let digest = match verdict {
                Verdict::Pass => model_digest(&theta),
                Verdict::Fail => [0u8; 32],
            };
            ctx.channel().send(Frame::new(Tag::Certificate, digest.to_vec()))?;
            digest
        }
        Role::Regulator => {
            let payload = ctx.channel().recv_expect(Tag::Certificate)?;
            payload.try_into().map_err(|_| EngineError::Malformed)?
        }
    };
    Ok(Certificate {
        run_id: ctx.run_id(),
        fx,
        c: inputs.c.to_vec(),
        verdict,
        digest: (verdict == Verdict::Pass).then_some(digest),
        whitening: inputs.whitening,
        timestamp: inputs.timestamp,
    })
}

pub fn certify_budget(dims: Dims, block: usize) -> TripleBudget {
    use crate::boolgadget::cost as g;
    let mut b = ecost::blocked_mult_shift_avg(dims.p, dims.n, dims.d, block);
    b.merge(&ecost::matmul(dims.p, dims.d, 1));
    b.merge(&g::a2b_msb(2 * dims.p));
    b.merge(&g::and_all(2 * dims.p));
    b
}

/// Cleartext decision of [`protocol_certify`] on encoded inputs.
pub fn certify_clear(z: &RingMatrix, x: &RingMatrix, theta: &RingMatrix, c: &[f64], block: usize, fx: &FxConfig) -> Verdict {
    let a = crate::clearref::constraint_matrix_fixed(z, x, block, fx);
    let u = a.matmul(theta).map(|v| crate::fxp::round_shift(v, fx.frac_bits));
    let ok = u.data.iter().zip(c).all(|(&u, &c)| {
        let c = encode(c, fx).expect("bound in range");
        !(c - u).msb() && !(c + u).msb()
    });
    if ok {
        Verdict::Pass
    } else {
        Verdict::Fail
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerificationResult {
    pub signature_match: bool,
    /// `[xᵀθ′ ≥ 0]`; present iff the signature matched.
    pub prediction: Option<bool>,
}

/// Inputs of one party to [`protocol_verify`].
pub enum VerifyInputs<'a> {
    Modeler {
        theta: &'a RingMatrix,
    },
    Regulator {
        certificate: &'a Certificate,
        /// Whitened and encoded user input (1×d).
        x: &'a RingMatrix,
    },
}

/// Compares `s(θ′)` with the certified signature and, on a match, reveals
/// `[xᵀθ′ ≥ 0]` to the Regulator. The prediction is computed whether or
/// not the signatures match so the transcript does not depend on the
/// outcome. Returns the result at the Regulator; the Modeler learns only
/// the match bit.
pub fn protocol_verify(ctx: &mut PartyContext, d: usize, inputs: VerifyInputs) -> Result<VerificationResult, FairError> {
    let role = ctx.role();
    if let VerifyInputs::Regulator { certificate, x } = &inputs {
        let problem = match (certificate.verdict, certificate.digest) {
            (Verdict::Pass, Some(_)) if certificate.d() != d || (x.rows, x.cols) != (1, d) => {
                Some(format!("certificate covers d = {}, input has {} values", certificate.d(), x.cols))
            }
            (Verdict::Pass, Some(_)) => None,
            _ => Some("certificate carries no signature".into()),
        };
        if let Some(msg) = problem {
            ctx.abort(&msg);
            return Err(FairError::NoCertificate(msg));
        }
    }
    agree(ctx, b"blindfair/verify", &[&(d as u64).to_le_bytes()])?;

    let signature_match = match &inputs {
        VerifyInputs::Modeler { theta } => {
            if (theta.rows, theta.cols) != (d, 1) {
                return Err(EngineError::DimensionMismatch(format!("θ is {}x{}", theta.rows, theta.cols)).into());
            }
            ctx.channel().send(Frame::new(Tag::Certificate, model_digest(theta).to_vec()))?;
            let reply = ctx.channel().recv_expect(Tag::Certificate)?;
            reply.first() == Some(&1)
        }
        VerifyInputs::Regulator { certificate, .. } => {
            let claimed = ctx.channel().recv_expect(Tag::Certificate)?;
            let matched = certificate.digest.map(|s| s.as_slice() == claimed.as_slice()).unwrap_or(false);
            ctx.channel().send(Frame::new(Tag::Certificate, vec![matched as u8]))?;
            matched
        }
    };

    let (theta, x) = match &inputs {
        VerifyInputs::Modeler { theta } => (Some(*theta), None),
        VerifyInputs::Regulator { x, .. } => (None, Some(*x)),
    };
    let theta = ctx.input_share(Role::Modeler, theta, d, 1)?;
    let x = ctx.input_share(Role::Regulator, x, 1, d)?;
    let score = ctx.matmul_raw(&x, &theta)?;
    let positive: SharedBits = a2b_msb(ctx, &score)?.not();
    // reveal to the Regulator only
    let prediction = match role {
        Role::Modeler => {
            ctx.channel().send(Frame::new(Tag::BitBatch, positive.words[0].to_le_bytes().to_vec()))?;
            None
        }
        Role::Regulator => {
            let payload = ctx.channel().recv_expect(Tag::BitBatch)?;
            let theirs = u64::from_le_bytes(payload.as_slice().try_into().map_err(|_| EngineError::Malformed)?);
            Some((positive.words[0] ^ theirs) & 1 == 1)
        }
    };
    Ok(VerificationResult {
        signature_match,
        prediction: if signature_match { prediction } else { None },
    })
}

pub fn verify_budget(d: usize) -> TripleBudget {
    let mut b = ecost::matmul(1, d, 1);
    b.merge(&crate::boolgadget::cost::a2b_msb(1));
    b
}

/// Cleartext decision `[xᵀθ ≥ 0]` on encoded values.
pub fn predict_clear(x: &RingMatrix, theta: &RingMatrix) -> bool {
    !x.matmul(theta).data[0].msb()
}
