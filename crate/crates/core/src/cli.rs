//! Command-line front end: offline dealer, the three protocols in
//! two-process or loopback deployments, and the optimizer benchmark.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use rand::RngCore;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clearref::{
    self, log_space_desc, sweep, write_sweep_csv, Arithmetic, ClearError, Optimizer, SigmoidKind, TrainingConfig,
};
use crate::dataio::{self, DataError, Prepared, SyntheticSpec};
use crate::engine::{run_loopback, EngineError, LoopbackParties, PartyContext, RunRegistry, SessionConfig, TruncMode};
use crate::fairmpc::{
    certify_budget, protocol_certify, protocol_train, protocol_verify, share_sensitive, train_budget,
    verify_budget, Certificate, CertificateError, CertifyInputs, Dims, FairError, TrainInputs, VerificationResult,
    Verdict, VerifyInputs,
};
use crate::fxp::{encode, FxConfig, RingElement, RingMatrix};
use crate::shares::{dealer_generate_budget, DealerFeed, MatShape, Role, TripleBudget, TripleError, TripleFileError, TripleSource, TripleStore};
use crate::transport::{connect_tcp_retry, Channel, ChannelStats, PartyListener, TransportError};

/// Environment variable overriding every seed taken from a config file.
pub const SEED_ENV: &str = "BLINDFAIR_SEED";

/// Stable process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const IO: i32 = 3;
    pub const DATA: i32 = 4;
    pub const CONFIG: i32 = 5;
    pub const TRIPLES_EXHAUSTED: i32 = 6;
    pub const TRANSPORT: i32 = 7;
    pub const NO_CERTIFICATE: i32 = 8;
    pub const INTEGRITY: i32 = 9;
    pub const CERTIFICATION_FAILED: i32 = 10;
    pub const SIGNATURE_MISMATCH: i32 = 11;
    pub const ABORTED: i32 = 12;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("triple file {path}: {source}")]
    Triples {
        path: PathBuf,
        #[source]
        source: TripleFileError,
    },
    #[error(transparent)]
    Protocol(#[from] FairError),
    #[error("certificate {path}: {source}")]
    Certificate {
        path: PathBuf,
        #[source]
        source: CertificateError,
    },
    #[error("certification failed: the model violates the fairness bound")]
    CertificationFailed,
    #[error("model signature does not match the certificate")]
    SignatureMismatch,
    #[error(transparent)]
    Numeric(#[from] ClearError),
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        CliError::Protocol(e.into())
    }
}

impl From<TransportError> for CliError {
    fn from(e: TransportError) -> Self {
        CliError::Protocol(e.into())
    }
}

fn transport_code(e: &TransportError) -> i32 {
    match e {
        TransportError::Aborted(_) => exit::ABORTED,
        TransportError::VersionMismatch { .. } | TransportError::BadHandshake | TransportError::RoleConflict(_) => {
            exit::CONFIG
        }
        _ => exit::TRANSPORT,
    }
}

fn engine_code(e: &EngineError) -> i32 {
    match e {
        EngineError::Transport(t) => transport_code(t),
        EngineError::Triple(TripleError::Exhausted { .. }) => exit::TRIPLES_EXHAUSTED,
        EngineError::VersionMismatch { .. }
        | EngineError::ConfigMismatch(_)
        | EngineError::StaleRun(_)
        | EngineError::PeerRejected(_)
        | EngineError::BlockSizeError(_) => exit::CONFIG,
        EngineError::DimensionMismatch(_) => exit::DATA,
        EngineError::Malformed => exit::ABORTED,
        EngineError::Registry(_) => exit::IO,
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Io { .. } => exit::IO,
            CliError::Config(_) => exit::CONFIG,
            CliError::Data(DataError::Io { .. }) => exit::IO,
            CliError::Data(DataError::InvalidSpec(_)) => exit::CONFIG,
            CliError::Data(_) => exit::DATA,
            CliError::Triples { source: TripleFileError::Io(_), .. } => exit::IO,
            CliError::Triples { .. } => exit::CONFIG,
            CliError::Protocol(FairError::Engine(e)) => engine_code(e),
            CliError::Protocol(FairError::NoCertificate(_)) => exit::NO_CERTIFICATE,
            CliError::Protocol(FairError::InvalidConfig(_) | FairError::ParameterMismatch) => exit::CONFIG,
            CliError::Certificate { source: CertificateError::Io(_), .. } => exit::IO,
            CliError::Certificate { .. } => exit::INTEGRITY,
            CliError::CertificationFailed => exit::CERTIFICATION_FAILED,
            CliError::SignatureMismatch => exit::SIGNATURE_MISMATCH,
            CliError::Numeric(_) => exit::ABORTED,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(name = "blindfair", version, about = "Two-party fair model training, certification and verification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the correlated randomness of both parties.
    Dealer(DealerArgs),
    /// Train a fair logistic regression model on shares.
    Train(TrainArgs),
    /// Check a model against the fairness bound and sign it.
    Certify(CertifyArgs),
    /// Check a model against a certificate and predict one input.
    Verify(VerifyArgs),
    /// Cleartext constraint sweeps across optimizers.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum BudgetFor {
    Train,
    Certify,
    Verify,
}

#[derive(Debug, Args)]
pub struct DealerArgs {
    /// Output prefix; writes `<prefix>.modeler` and `<prefix>.regulator`.
    #[arg(long)]
    pub triples_out: PathBuf,
    #[arg(long, default_value = "0")]
    pub seed: String,
    #[arg(long, default_value_t = 0)]
    pub scalar: u64,
    #[arg(long = "and", default_value_t = 0)]
    pub and_words: u64,
    /// Matrix triples as `NxKxM:COUNT`; repeatable.
    #[arg(long = "shape")]
    pub shapes: Vec<String>,
    /// Add the exact budget of a protocol run.
    #[arg(long = "for", value_enum)]
    pub budget_for: Option<BudgetFor>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub p: usize,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 6)]
    pub batch_exp: u32,
    #[arg(long)]
    pub block: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PartyArgs {
    #[arg(long)]
    pub role: Option<Role>,
    /// Accept the peer's connection on this address.
    #[arg(long, conflicts_with_all = ["connect", "loopback"])]
    pub listen: Option<String>,
    /// Connect to the peer at this address.
    #[arg(long, conflicts_with = "loopback")]
    pub connect: Option<String>,
    /// Run both parties in this process.
    #[arg(long)]
    pub loopback: bool,
    /// How long `--connect` keeps retrying.
    #[arg(long, default_value_t = 10_000)]
    pub connect_wait_ms: u64,
    /// Triple file prefix from `dealer`; loopback runs may omit it.
    #[arg(long)]
    pub triples: Option<PathBuf>,
    /// `key=value` training/session parameters.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "prob")]
    pub mode: TruncMode,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub party: PartyArgs,
    /// CSV path (roles from `<csv>.roles` or `--roles`) or
    /// `synthetic:n=1024,phi=0.39,seed=1,noise=1,test=256`.
    #[arg(long)]
    pub data: String,
    #[arg(long)]
    pub roles: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CertifyArgs {
    #[command(flatten)]
    pub party: PartyArgs,
    /// Evaluation data (the Regulator's features and sensitive attributes).
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub roles: Option<PathBuf>,
    /// Model file written by `train` (Modeler).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Public dimensions `N,P` for a Modeler without data.
    #[arg(long)]
    pub dims: Option<String>,
    /// Certificate path (the Regulator's copy in loopback runs).
    #[arg(long)]
    pub cert_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub party: PartyArgs,
    /// Model file (Modeler).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Certificate (Regulator).
    #[arg(long)]
    pub cert_in: Option<PathBuf>,
    /// Raw feature values, comma-separated (Regulator).
    #[arg(long, allow_hyphen_values = true)]
    pub input: Option<String>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "lagrange,projected,iplb")]
    pub optimizer: Vec<Optimizer>,
    #[arg(long, value_delimiter = ',', default_value = "float")]
    pub arithmetic: Vec<Arithmetic>,
    #[arg(long, value_delimiter = ',', default_value = "exact")]
    pub sigmoid: Vec<SigmoidKind>,
    /// `LO HI STEPS`
    #[arg(long, num_args = 3, value_names = ["LO", "HI", "STEPS"], default_values = ["1e-4", "1", "10"])]
    pub sweep_c: Vec<String>,
    #[arg(long = "dataset", alias = "data", default_value = "synthetic:n=1024,phi=0.3927,seed=1")]
    pub dataset: String,
    #[arg(long)]
    pub roles: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parameters from a `--config` file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub c: Vec<f64>,
    pub eta_theta: f64,
    pub eta_lambda: f64,
    pub batch_exp: u32,
    pub epochs: Option<usize>,
    pub block: Option<usize>,
    pub seed: String,
    pub fx: FxConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            c: vec![1e-3],
            eta_theta: 1e-4,
            eta_lambda: 0.05,
            batch_exp: 6,
            epochs: None,
            block: None,
            seed: "0".into(),
            fx: FxConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses `key=value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        let (mut frac, mut int) = (cfg.fx.frac_bits, cfg.fx.int_bits);
        let bad = |k: &str, v: &str| CliError::Config(format!("bad value '{v}' for '{k}'"));
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| CliError::Config(format!("expected key=value, got '{line}'")))?;
            match k {
                "c" => {
                    cfg.c = v
                        .split(',')
                        .map(|s| s.trim().parse::<f64>())
                        .collect::<Result<_, _>>()
                        .map_err(|_| bad(k, v))?
                }
                "eta_theta" => cfg.eta_theta = v.parse().map_err(|_| bad(k, v))?,
                "eta_lambda" => cfg.eta_lambda = v.parse().map_err(|_| bad(k, v))?,
                "batch_exp" => cfg.batch_exp = v.parse().map_err(|_| bad(k, v))?,
                "epochs" => cfg.epochs = if v == "auto" { None } else { Some(v.parse().map_err(|_| bad(k, v))?) },
                "block" => cfg.block = Some(v.parse().map_err(|_| bad(k, v))?),
                "seed" => cfg.seed = v.to_string(),
                "frac_bits" => frac = v.parse().map_err(|_| bad(k, v))?,
                "int_bits" => int = v.parse().map_err(|_| bad(k, v))?,
                other => return Err(CliError::Config(format!("unknown key '{other}'"))),
            }
        }
        cfg.fx = FxConfig::new(frac, int).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Reads `path` (or defaults) and applies the seed override.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => Self::parse(&std::fs::read_to_string(p).map_err(io_err(p))?)?,
            None => RunConfig::default(),
        };
        if let Ok(seed) = std::env::var(SEED_ENV) {
            cfg.seed = seed;
        }
        Ok(cfg)
    }

    pub fn public_seed(&self) -> [u8; 32] {
        Sha256::new()
            .chain_update(b"blindfair/public-seed")
            .chain_update(self.seed.as_bytes())
            .finalize()
            .into()
    }

    pub fn training(&self, n: usize, p: usize) -> TrainingConfig {
        let mut t = TrainingConfig::new(n, self.c.clone());
        if self.c.len() == 1 && p > 1 {
            t.c = vec![self.c[0]; p];
        }
        t.eta_theta = self.eta_theta;
        t.eta_lambda = self.eta_lambda;
        t.batch_exp = self.batch_exp;
        t.epochs = self.epochs.unwrap_or_else(|| clearref::default_epochs(n, self.batch_exp));
        t.block = self.block.unwrap_or(64.min(n.max(1)));
        t.sigmoid = SigmoidKind::SecureMl;
        t.arithmetic = Arithmetic::Fixed;
        t.public_seed = self.public_seed();
        t.fx = self.fx;
        t
    }
}

/// Resolves `--data`: a CSV path or a `synthetic:` specification.
pub fn load_data(source: &str, roles: Option<&Path>) -> Result<Prepared, CliError> {
    if let Some(rest) = source.strip_prefix("synthetic") {
        let mut spec = SyntheticSpec::new(1024, std::f64::consts::FRAC_PI_8, 1);
        let mut test = None;
        for kv in rest.trim_start_matches(':').split(',').filter(|s| !s.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("bad synthetic option '{kv}'")))?;
            let bad = || CliError::Config(format!("bad synthetic option '{kv}'"));
            match k.trim() {
                "n" => spec.n = v.parse().map_err(|_| bad())?,
                "phi" => spec.phi = v.parse().map_err(|_| bad())?,
                "seed" => spec.seed = v.parse().map_err(|_| bad())?,
                "noise" => spec.noise_dims = v.parse().map_err(|_| bad())?,
                "test" => test = Some(v.parse().map_err(|_| bad())?),
                _ => return Err(bad()),
            }
        }
        spec.n_test = test.unwrap_or(spec.n / 4);
        Ok(dataio::synthetic_prepared(&spec)?)
    } else {
        Ok(dataio::load_with_sidecar(Path::new(source), roles)?)
    }
}

fn file_digest(path: &Path) -> Result<String, CliError> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path).map_err(io_err(path))?)))
}

/// Everything needed to reproduce a run: resolved flags, seeds, input
/// digests, outputs, traffic and timing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunManifest {
    pub entries: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(subcommand: &str) -> Self {
        let mut m = Self::default();
        m.set("subcommand", subcommand);
        m.set("version", env!("CARGO_PKG_VERSION"));
        m
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn digest_input(&mut self, key: &str, path: &Path) -> Result<(), CliError> {
        self.set(&format!("input.{key}"), path.display());
        self.set(&format!("input.{key}.sha256"), file_digest(path)?);
        Ok(())
    }

    pub fn stats(&mut self, prefix: &str, s: &ChannelStats) {
        self.set(&format!("{prefix}.rounds"), s.rounds);
        self.set(&format!("{prefix}.bytes_sent"), s.bytes_sent);
        self.set(&format!("{prefix}.bytes_received"), s.bytes_received);
        self.set(&format!("{prefix}.frames_sent"), s.frames_sent);
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    pub fn parse(text: &str) -> Self {
        let entries = text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        Self { entries }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join("manifest.txt");
        std::fs::write(&path, self.to_text()).map_err(io_err(&path))?;
        Ok(path)
    }
}

/// Writes `θ` as CSV: index, name, signed ring value, decoded value.
pub fn write_model(path: &Path, theta: &RingMatrix, names: &[String], fx: &FxConfig) -> Result<(), CliError> {
    let mut text = String::from("index,name,raw,value\n");
    for (i, v) in theta.data.iter().enumerate() {
        let name = names.get(i).map(String::as_str).unwrap_or("");
        let _ = writeln!(text, "{i},{name},{},{}", v.signed(), crate::fxp::decode(*v, fx));
    }
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn read_model(path: &Path) -> Result<RingMatrix, CliError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut data = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Data(DataError::Parse { row: row + 2, col: 0, msg: e.to_string() }))?;
        let raw: i64 = rec.get(2).and_then(|v| v.parse().ok()).ok_or(CliError::Data(DataError::Parse {
            row: row + 2,
            col: 3,
            msg: "bad raw value".into(),
        }))?;
        data.push(RingElement::from_signed(raw));
    }
    if data.is_empty() {
        return Err(DataError::EmptyDataset.into());
    }
    Ok(RingMatrix::column(data))
}

fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn os_seed() -> [u8; 32] {
    let mut s = [0u8; 32];
    rand::rngs::OsRng.fill_bytes(&mut s);
    s
}

fn triple_path(prefix: &Path, role: Role) -> PathBuf {
    let mut p = prefix.as_os_str().to_owned();
    p.push(format!(".{role}"));
    PathBuf::from(p)
}

fn load_triples(prefix: &Path, role: Role) -> Result<(TripleStore, RunRegistry), CliError> {
    let path = triple_path(prefix, role);
    let store = TripleStore::load(&path).map_err(|source| CliError::Triples { path: path.clone(), source })?;
    let mut spent = path.into_os_string();
    spent.push(".spent");
    let spent = PathBuf::from(spent);
    let registry = RunRegistry::open(&spent).map_err(io_err(&spent))?;
    Ok((store, registry))
}

fn mkdir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(io_err(path))
}

/// A protocol body run by one party; returns what to record.
type PartyFn<'a, T> = dyn Fn(&mut PartyContext) -> Result<T, CliError> + Send + Sync + 'a;

struct PartyRun<T> {
    role: Role,
    result: Result<T, CliError>,
    stats: ChannelStats,
    consumed: TripleBudget,
    elapsed: Duration,
}

/// Runs `body` for the selected deployment: both parties (loopback) or one
/// party over TCP.
fn deploy<T: Send>(args: &PartyArgs, session: SessionConfig, body: &PartyFn<T>) -> Result<Vec<PartyRun<T>>, CliError> {
    let timed = |ctx: &mut PartyContext| {
        let start = Instant::now();
        let result = body(ctx);
        if let Err(e) = &result {
            if !matches!(e, CliError::Protocol(FairError::Engine(EngineError::Transport(_)))) {
                ctx.abort(&e.to_string());
            }
        }
        PartyRun {
            role: ctx.role(),
            result,
            stats: ctx.stats(),
            consumed: ctx.consumed(),
            elapsed: start.elapsed(),
        }
    };
    if args.loopback {
        let parties = match &args.triples {
            Some(prefix) => {
                let (sm, rm) = load_triples(prefix, Role::Modeler)?;
                let (sr, rr) = load_triples(prefix, Role::Regulator)?;
                LoopbackParties {
                    triples: (Box::new(sm), Box::new(sr)),
                    private_seeds: (os_seed(), os_seed()),
                    registries: (Some(rm), Some(rr)),
                }
            }
            None => {
                let mut seed = b"blindfair/loopback-dealer/".to_vec();
                seed.extend_from_slice(&session.public_seed);
                let (tm, tr) = DealerFeed::pair(&seed);
                LoopbackParties {
                    triples: (Box::new(tm), Box::new(tr)),
                    private_seeds: (os_seed(), os_seed()),
                    registries: (None, None),
                }
            }
        };
        let (m, r) = run_loopback(session, parties, timed, timed)?;
        return Ok(vec![m, r]);
    }

    let role = args
        .role
        .ok_or_else(|| CliError::Usage("--role is required without --loopback".into()))?;
    let prefix = args
        .triples
        .as_ref()
        .ok_or_else(|| CliError::Usage("--triples is required for two-process runs".into()))?;
    let (store, mut registry) = load_triples(prefix, role)?;
    let channel: Box<dyn Channel> = match (&args.listen, &args.connect) {
        (Some(addr), None) => Box::new(PartyListener::bind(addr)?.accept(role)?),
        (None, Some(addr)) => Box::new(connect_tcp_retry(addr, role, Duration::from_millis(args.connect_wait_ms))?),
        _ => return Err(CliError::Usage("exactly one of --listen, --connect or --loopback is required".into())),
    };
    let triples: Box<dyn TripleSource> = Box::new(store);
    let mut ctx = PartyContext::new(role, channel, triples, session, os_seed())?;
    ctx.handshake(Some(&mut registry))?;
    Ok(vec![timed(&mut ctx)])
}

fn party_dir(args: &PartyArgs, role: Role) -> PathBuf {
    if args.loopback {
        args.out.join(role.to_string())
    } else {
        args.out.clone()
    }
}

fn base_manifest(name: &str, args: &PartyArgs, cfg: &RunConfig, role: Role) -> Result<RunManifest, CliError> {
    let mut m = RunManifest::new(name);
    m.set("role", role);
    m.set("mode", format!("{:?}", args.mode).to_lowercase());
    m.set(
        "deployment",
        if args.loopback {
            "loopback".to_string()
        } else if let Some(a) = &args.listen {
            format!("listen {a}")
        } else {
            format!("connect {}", args.connect.as_deref().unwrap_or(""))
        },
    );
    m.set("seed", &cfg.seed);
    m.set("public_seed", hex::encode(cfg.public_seed()));
    m.set("fx.frac_bits", cfg.fx.frac_bits);
    m.set("fx.int_bits", cfg.fx.int_bits);
    m.set("out", args.out.display());
    if let Some(c) = &args.config {
        m.digest_input("config", c)?;
    }
    if let Some(t) = &args.triples {
        m.digest_input("triples", &triple_path(t, role))?;
    }
    Ok(m)
}

fn record_run<T>(m: &mut RunManifest, run: &PartyRun<T>) {
    m.stats("traffic", &run.stats);
    m.set("triples.consumed", &run.consumed);
    m.set("wall_ms", run.elapsed.as_millis());
}

/// The first error by severity: a party's own failure beats the peer abort
/// it caused.
fn first_error<T>(runs: Vec<PartyRun<T>>) -> Result<Vec<(Role, T)>, CliError> {
    let mut ok = Vec::new();
    let mut errors = Vec::new();
    for run in runs {
        match run.result {
            Ok(v) => ok.push((run.role, v)),
            Err(e) => errors.push(e),
        }
    }
    errors.sort_by_key(|e| matches!(e, CliError::Protocol(FairError::Engine(EngineError::Transport(_)))));
    match errors.into_iter().next() {
        Some(e) => Err(e),
        None => Ok(ok),
    }
}

fn cmd_dealer(a: &DealerArgs) -> Result<(), CliError> {
    let seed = std::env::var(SEED_ENV).unwrap_or_else(|_| a.seed.clone());
    let mut budget = TripleBudget {
        scalar: a.scalar,
        and_words: a.and_words,
        ..Default::default()
    };
    for s in &a.shapes {
        let bad = || CliError::Usage(format!("bad --shape '{s}' (expected NxKxM:COUNT)"));
        let (dims, count) = s.split_once(':').ok_or_else(bad)?;
        let v: Vec<usize> = dims.split('x').map(|x| x.parse()).collect::<Result<_, _>>().map_err(|_| bad())?;
        if v.len() != 3 {
            return Err(bad());
        }
        budget.add_matrix(MatShape::new(v[0], v[1], v[2]), count.parse().map_err(|_| bad())?);
    }
    if let Some(kind) = a.budget_for {
        let need = |v: Option<usize>, name: &str| v.ok_or_else(|| CliError::Usage(format!("--for needs --{name}")));
        let d = need(a.d, "d")?;
        let extra = match kind {
            BudgetFor::Verify => verify_budget(d),
            BudgetFor::Train | BudgetFor::Certify => {
                let n = need(a.n, "n")?;
                let dims = Dims { n, d, p: a.p };
                let block = a.block.unwrap_or(64.min(n));
                if kind == BudgetFor::Train {
                    let epochs = a.epochs.unwrap_or_else(|| clearref::default_epochs(n, a.batch_exp));
                    train_budget(dims, a.batch_exp, epochs, block)
                } else {
                    certify_budget(dims, block)
                }
            }
        };
        budget.merge(&extra);
    }
    let (m, r) = dealer_generate_budget(&budget, seed.as_bytes());
    for (store, role) in [(m, Role::Modeler), (r, Role::Regulator)] {
        let path = triple_path(&a.triples_out, role);
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            mkdir(parent)?;
        }
        store.save(&path).map_err(|source| CliError::Triples { path: path.clone(), source })?;
        println!("wrote {}", path.display());
    }
    println!("budget: {budget}");
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(a.party.config.as_deref())?;
    let data = load_data(&a.data, a.roles.as_deref())?;
    let dims = Dims {
        n: data.train.n(),
        d: data.train.d(),
        p: data.train.p(),
    };
    let tcfg = cfg.training(dims.n, dims.p);
    tcfg.validate(dims.n, dims.p).map_err(CliError::Numeric)?;
    let q = dataio::fx_quantize(&data.train, &cfg.fx)?;
    let session = SessionConfig::new(cfg.fx, cfg.public_seed(), a.party.mode);
    let body = |ctx: &mut PartyContext| -> Result<Option<RingMatrix>, CliError> {
        let is_reg = ctx.role() == Role::Regulator;
        let z = share_sensitive(ctx, is_reg.then_some(&q.z), dims.n, dims.p)?;
        let xy = (!is_reg).then_some((&q.x, &q.y));
        Ok(protocol_train(ctx, &tcfg, TrainInputs { dims, xy, z: &z })?)
    };
    let runs = deploy(&a.party, session, &body)?;
    for run in &runs {
        let dir = party_dir(&a.party, run.role);
        mkdir(&dir)?;
        let mut m = base_manifest("train", &a.party, &cfg, run.role)?;
        m.set("data", &a.data);
        if !a.data.starts_with("synthetic") {
            m.digest_input("data", Path::new(&a.data))?;
        }
        m.set("n", dims.n);
        m.set("d", dims.d);
        m.set("p", dims.p);
        m.set("c", tcfg.c.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","));
        m.set("epochs", tcfg.epochs);
        m.set("batch_exp", tcfg.batch_exp);
        m.set("eta_theta", tcfg.eta_theta);
        m.set("eta_lambda", tcfg.eta_lambda);
        m.set("block", tcfg.block);
        record_run(&mut m, run);
        m.set("timing.training_min", format!("{:.3}", run.elapsed.as_secs_f64() / 60.0));
        match &run.result {
            Ok(Some(theta)) => {
                let path = dir.join("model.csv");
                write_model(&path, theta, &data.feature_names, &cfg.fx)?;
                m.set("output.model", path.display());
                m.set("output.model.sha256", file_digest(&path)?);
                let acc = clearref::evaluate(&data.test, &theta.decode(&cfg.fx)).accuracy;
                m.set("test_accuracy", format!("{acc:.6}"));
                println!("{}: model written to {} (test accuracy {acc:.4})", run.role, path.display());
            }
            Ok(None) => println!("{}: training finished", run.role),
            Err(_) => m.set("status", "failed"),
        }
        m.write(&dir)?;
        println!("{}: {} ({} ms)", run.role, run.stats, run.elapsed.as_millis());
    }
    first_error(runs).map(|_| ())
}

fn parse_dims(s: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Usage(format!("bad --dims '{s}' (expected N,P)"));
    let (n, p) = s.split_once(',').ok_or_else(bad)?;
    Ok((n.trim().parse().map_err(|_| bad())?, p.trim().parse().map_err(|_| bad())?))
}

fn cmd_certify(a: &CertifyArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(a.party.config.as_deref())?;
    let data = a.data.as_deref().map(|d| load_data(d, a.roles.as_deref())).transpose()?;
    let model = a.model.as_deref().map(read_model).transpose()?;
    let loopback = a.party.loopback;
    let role = a.party.role;
    let needs_data = loopback || role == Some(Role::Regulator);
    let needs_model = loopback || role == Some(Role::Modeler);
    if needs_data && data.is_none() {
        return Err(CliError::Usage("the Regulator needs --data".into()));
    }
    if needs_model && model.is_none() {
        return Err(CliError::Usage("the Modeler needs --model".into()));
    }
    let (n, p) = match (&data, &a.dims) {
        (Some(d), _) => (d.train.n(), d.train.p()),
        (None, Some(s)) => parse_dims(s)?,
        (None, None) => return Err(CliError::Usage("--dims N,P is required without --data".into())),
    };
    let d = match (&model, &data) {
        (Some(m), _) => m.rows,
        (None, Some(data)) => data.train.d(),
        _ => unreachable!(),
    };
    let dims = Dims { n, d, p };
    let c = cfg.training(n, p).c;
    let block = cfg.block.unwrap_or(64.min(n));
    let q = data.as_ref().map(|d| dataio::fx_quantize(&d.train, &cfg.fx)).transpose()?;
    let whitening = data.as_ref().map(|d| d.whitening.clone()).unwrap_or(dataio::Whitening {
        mean: vec![0.0; d],
        scale: vec![1.0; d],
    });
    let timestamp = now_secs();
    let session = SessionConfig::new(cfg.fx, cfg.public_seed(), a.party.mode);
    let body = |ctx: &mut PartyContext| -> Result<Certificate, CliError> {
        let is_reg = ctx.role() == Role::Regulator;
        let z = share_sensitive(ctx, if is_reg { q.as_ref().map(|q| &q.z) } else { None }, n, p)?;
        Ok(protocol_certify(
            ctx,
            CertifyInputs {
                dims,
                theta: if is_reg { None } else { model.as_ref() },
                x: if is_reg { q.as_ref().map(|q| &q.x) } else { None },
                z: &z,
                c: &c,
                block,
                whitening: whitening.clone(),
                timestamp,
            },
        )?)
    };
    let runs = deploy(&a.party, session, &body)?;
    let mut verdict = None;
    for run in &runs {
        let dir = party_dir(&a.party, run.role);
        mkdir(&dir)?;
        let mut m = base_manifest("certify", &a.party, &cfg, run.role)?;
        if let Some(path) = &a.model {
            m.digest_input("model", path)?;
        }
        m.set("n", n);
        m.set("d", d);
        m.set("p", p);
        m.set("c", c.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","));
        m.set("block", block);
        record_run(&mut m, run);
        m.set("timing.certification_ms", run.elapsed.as_millis());
        if let Ok(cert) = &run.result {
            let path = match (&a.cert_out, run.role, loopback) {
                (Some(p), Role::Regulator, true) | (Some(p), _, false) => p.clone(),
                _ => dir.join("certificate.bfct"),
            };
            cert.save(&path).map_err(|source| CliError::Certificate { path: path.clone(), source })?;
            m.set("output.certificate", path.display());
            m.set("verdict", if cert.verdict == Verdict::Pass { "pass" } else { "fail" });
            if let Some(dg) = cert.digest {
                m.set("signature", hex::encode(dg));
            }
            println!(
                "{}: verdict {} written to {} ({} ms)",
                run.role,
                m.get("verdict").unwrap_or(""),
                path.display(),
                run.elapsed.as_millis()
            );
            verdict = Some(cert.verdict);
        }
        m.write(&dir)?;
    }
    first_error(runs)?;
    match verdict {
        Some(Verdict::Fail) => Err(CliError::CertificationFailed),
        _ => Ok(()),
    }
}

fn cmd_verify(a: &VerifyArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(a.party.config.as_deref())?;
    let loopback = a.party.loopback;
    let role = a.party.role;
    let model = a.model.as_deref().map(read_model).transpose()?;
    let cert = a
        .cert_in
        .as_deref()
        .map(|p| Certificate::load(p).map_err(|source| CliError::Certificate { path: p.to_path_buf(), source }))
        .transpose()?;
    if (loopback || role == Some(Role::Modeler)) && model.is_none() {
        return Err(CliError::Usage("the Modeler needs --model".into()));
    }
    let regulator_input = if loopback || role == Some(Role::Regulator) {
        let cert = cert.as_ref().ok_or_else(|| CliError::Usage("the Regulator needs --cert-in".into()))?;
        let raw: Vec<f64> = a
            .input
            .as_deref()
            .ok_or_else(|| CliError::Usage("the Regulator needs --input".into()))?
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| CliError::Usage("--input must be comma-separated numbers".into()))?;
        let white = cert.whitening.apply_row(&raw)?;
        let enc = white
            .iter()
            .map(|&v| encode(v, &cert.fx))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Data(DataError::InvalidSpec(e.to_string())))?;
        Some(RingMatrix::from_vec(1, enc.len(), enc))
    } else {
        None
    };
    let d = match (&model, &cert) {
        (Some(m), _) => m.rows,
        (None, Some(c)) => c.d(),
        _ => return Err(CliError::Usage("need --model or --cert-in".into())),
    };
    let fx = cert.as_ref().map(|c| c.fx).unwrap_or(cfg.fx);
    let session = SessionConfig::new(fx, cfg.public_seed(), a.party.mode);
    let body = |ctx: &mut PartyContext| -> Result<VerificationResult, CliError> {
        let inputs = match ctx.role() {
            Role::Modeler => VerifyInputs::Modeler {
                theta: model.as_ref().expect("checked"),
            },
            Role::Regulator => VerifyInputs::Regulator {
                certificate: cert.as_ref().expect("checked"),
                x: regulator_input.as_ref().expect("checked"),
            },
        };
        Ok(protocol_verify(ctx, d, inputs)?)
    };
    let runs = deploy(&a.party, session, &body)?;
    let mut matched = true;
    for run in &runs {
        let dir = party_dir(&a.party, run.role);
        mkdir(&dir)?;
        let mut m = base_manifest("verify", &a.party, &cfg, run.role)?;
        if let Some(p) = &a.model {
            m.digest_input("model", p)?;
        }
        if let Some(p) = &a.cert_in {
            m.digest_input("certificate", p)?;
        }
        record_run(&mut m, run);
        if let Ok(res) = &run.result {
            m.set("signature_match", res.signature_match);
            matched &= res.signature_match;
            if let Some(pred) = res.prediction {
                m.set("prediction", pred as u8);
            }
            if run.role == Role::Regulator {
                let path = dir.join("verdict.txt");
                let mut text = format!("signature_match={}\n", res.signature_match);
                if let Some(pred) = res.prediction {
                    let _ = writeln!(text, "prediction={}", pred as u8);
                }
                std::fs::write(&path, &text).map_err(io_err(&path))?;
                m.set("output.verdict", path.display());
                print!("{text}");
            }
        }
        m.write(&dir)?;
    }
    first_error(runs)?;
    if matched {
        Ok(())
    } else {
        Err(CliError::SignatureMismatch)
    }
}

fn cmd_bench(a: &BenchArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let num = |s: &str| s.parse::<f64>().map_err(|_| CliError::Usage(format!("bad --sweep-c value '{s}'")));
    let (lo, hi) = (num(&a.sweep_c[0])?, num(&a.sweep_c[1])?);
    let steps: usize = a.sweep_c[2]
        .parse()
        .map_err(|_| CliError::Usage("--sweep-c STEPS must be an integer".into()))?;
    if !(lo > 0.0 && hi >= lo) {
        return Err(CliError::Usage("--sweep-c needs 0 < LO ≤ HI".into()));
    }
    let cs = log_space_desc(lo, hi, steps);
    let data = load_data(&a.dataset, a.roles.as_deref())?;
    mkdir(&a.out)?;
    let traces = a.out.join("traces");
    mkdir(&traces)?;
    let mut rows = Vec::new();
    for &opt in &a.optimizer {
        for &ar in &a.arithmetic {
            for &sg in &a.sigmoid {
                if ar == Arithmetic::Fixed && (opt != Optimizer::Lagrange || sg != SigmoidKind::SecureMl) {
                    eprintln!("skipping {opt}/{ar}/{sg}: fixed point runs lagrange with the secureml sigmoid only");
                    continue;
                }
                let mut base = cfg.training(data.train.n(), data.train.p());
                if let Some(e) = a.epochs {
                    base.epochs = e;
                }
                base.optimizer = opt;
                base.arithmetic = ar;
                base.sigmoid = sg;
                let start = Instant::now();
                let batch = sweep(&data.train, &data.test, &base, &cs);
                for (i, row) in batch.iter().enumerate() {
                    if !row.trace.records.is_empty() {
                        let path = traces.join(format!("{opt}_{ar}_{sg}_{i:02}.csv"));
                        let file = std::fs::File::create(&path).map_err(io_err(&path))?;
                        row.trace
                            .write_csv(file)
                            .map_err(|e| CliError::Io { path: path.clone(), source: e.into() })?;
                    }
                }
                let failed = batch.iter().filter(|r| r.failure.is_some()).count();
                println!(
                    "{opt}/{ar}/{sg}: {} runs, {failed} failed ({:.1} s)",
                    batch.len(),
                    start.elapsed().as_secs_f64()
                );
                rows.extend(batch);
            }
        }
    }
    let path = a.out.join("sweep.csv");
    let file = std::fs::File::create(&path).map_err(io_err(&path))?;
    write_sweep_csv(&rows, file).map_err(|e| CliError::Io { path: path.clone(), source: e.into() })?;
    let mut m = RunManifest::new("bench");
    m.set("dataset", &a.dataset);
    m.set("sweep_c", a.sweep_c.join(" "));
    m.set("seed", &cfg.seed);
    m.set("output.sweep", path.display());
    m.write(&a.out)?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Dealer(a) => cmd_dealer(a),
        Command::Train(a) => cmd_train(a),
        Command::Certify(a) => cmd_certify(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::USAGE } else { exit::OK };
        }
    };
    match run(&cli) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parsing() {
        let cfg = RunConfig::parse("c = 0.01, 0.02\nepochs=5\nseed=abc # comment\nblock=32\n").unwrap();
        assert_eq!(cfg.c, vec![0.01, 0.02]);
        assert_eq!(cfg.epochs, Some(5));
        assert_eq!(cfg.block, Some(32));
        assert_eq!(cfg.seed, "abc");
        assert!(RunConfig::parse("bogus=1").is_err());
        assert!(RunConfig::parse("c=x").is_err());
        let t = RunConfig::parse("c=0.5").unwrap().training(1024, 2);
        assert_eq!(t.c, vec![0.5, 0.5]);
        assert_eq!(t.epochs, 938);
    }

    #[test]
    fn synthetic_source_parsing() {
        let p = load_data("synthetic:n=256,phi=0.5,seed=3,test=64", None).unwrap();
        assert_eq!(p.train.n(), 256);
        assert_eq!(p.test.n(), 64);
        assert!(load_data("synthetic:n=100", None).is_err());
        assert!(load_data("synthetic:bogus=1", None).is_err());
    }

    #[test]
    fn manifest_roundtrip() {
        let mut m = RunManifest::new("train");
        m.set("seed", "7");
        let back = RunManifest::parse(&m.to_text());
        assert_eq!(back, m);
        assert_eq!(back.get("subcommand"), Some("train"));
    }

    #[test]
    fn model_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let fx = FxConfig::default();
        let theta = RingMatrix::encode(3, 1, &[0.5, -1.25, 0.0], &fx).unwrap();
        let path = dir.path().join("model.csv");
        write_model(&path, &theta, &["a".into(), "b".into(), "intercept".into()], &fx).unwrap();
        assert_eq!(read_model(&path).unwrap(), theta);
    }

    #[test]
    fn exit_codes_are_distinct_per_class() {
        let codes = [
            CliError::Usage(String::new()).exit_code(),
            CliError::Config(String::new()).exit_code(),
            CliError::Data(DataError::EmptyDataset).exit_code(),
            CliError::Protocol(FairError::NoCertificate(String::new())).exit_code(),
            CliError::CertificationFailed.exit_code(),
            CliError::SignatureMismatch.exit_code(),
            CliError::from(EngineError::Triple(TripleError::Exhausted {
                kind: "scalar".into(),
                requested: 1,
                available: 0,
            }))
            .exit_code(),
            CliError::from(TransportError::ChannelClosed).exit_code(),
            CliError::from(TransportError::Aborted("x".into())).exit_code(),
        ];
        let mut sorted = codes.to_vec();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), codes.len());
    }
}
