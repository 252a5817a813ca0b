//! Subcommands of the `dynaseal` operator binary.

use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use axum::Router;
use clap::{Args, Parser, Subcommand};
use dynaseal::backend::{self, Backend, BackendConfig};
use dynaseal::baselines::Method;
use dynaseal::bench::{self, BenchOptions, Check, TrafficReport, Workload};
use dynaseal::config::{load_json, ConfigError};
use dynaseal::gateway::{self, Gateway, GatewayConfig, IssuerConfig};
use dynaseal::net::{spawn_service, HttpClient, ServiceHandle};
use dynaseal::scenarios::{self, ScenarioOptions};
use dynaseal::stack::random_credential;
use dynaseal_token::{
    parse_unverified, verify_token, Clock, Credential, ManualClock, SystemClock, UnixMillis, VerificationPolicy,
    VerifyError,
};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Parser)]
#[command(name = "dynaseal", version, about = "Token issuer, provider gateway and experiment runners")]
pub struct Cli {
    /// JSON configuration file for the chosen subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Log filter level: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    pub log_level: tracing::Level,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a provider credential and write the two config fragments.
    Keygen(KeygenArgs),
    /// Decode a token, and check its signature when a key is given.
    Inspect(InspectArgs),
    /// Run the token-issuing backend (requires --config).
    RunBackend(ServeArgs),
    /// Run the provider gateway (requires --config).
    RunGateway(ServeArgs),
    /// Derive the feature matrix from live scenario runs.
    RunScenarios(ScenarioArgs),
    /// Measure per-party traffic for each invocation method.
    BenchTraffic(BenchArgs),
}

#[derive(Debug, Args)]
pub struct KeygenArgs {
    /// Directory receiving provider-registry.json and backend-credential.json.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    /// Replace existing fragment files.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Compact token, or `-` to read it from stdin.
    pub token: String,
    /// Base64 secret key of the issuer named in the token.
    #[arg(long)]
    pub key: Option<String>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Overrides the configured listen address.
    #[arg(long)]
    pub listen: Option<String>,
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    /// Where the matrix and its evidence are written.
    #[arg(long, default_value = "feature-matrix.json")]
    pub out: PathBuf,
    #[arg(long, default_value_t = ScenarioOptions::default().mutations)]
    pub mutations: usize,
    #[arg(long, default_value_t = ScenarioOptions::default().seed)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Methods to run; all three when omitted.
    #[arg(long = "method", value_parser = parse_method)]
    pub methods: Vec<Method>,
    /// Where the JSON report is written.
    #[arg(long, default_value = "traffic-report.json")]
    pub out: PathBuf,
    /// Fixed delay added to every hop, in milliseconds.
    #[arg(long, default_value_t = 0)]
    pub hop_delay_ms: u64,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|_| format!("unknown method {s:?}; use embedded, relay or dynaseal"))
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    ConfigInvalid(#[from] ConfigError),
    #[error("cannot listen on {addr}: address in use")]
    PortBusy { addr: String },
    #[error("io failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed token: {0}")]
    Malformed(String),
    /// A check the command exists to perform did not hold.
    #[error("{0}")]
    Assertion(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Assertion(_) | CliError::Runtime(_) => ExitCode::from(1),
            _ => ExitCode::from(2),
        }
    }
}

pub fn init_logging(level: tracing::Level) {
    let _ = tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(io::stderr)
        .try_init();
}

pub async fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Keygen(args) => keygen(&args).map(|_| ()),
        Command::Inspect(args) => inspect(&args),
        Command::RunBackend(args) => run_backend(require_config(&cli.config)?, &args).await,
        Command::RunGateway(args) => run_gateway(require_config(&cli.config)?, &args).await,
        Command::RunScenarios(args) => run_scenarios(&args).await,
        Command::BenchTraffic(args) => bench_traffic(cli.config.as_deref(), &args).await,
    }
}

fn require_config(path: &Option<PathBuf>) -> Result<&Path, CliError> {
    path.as_deref()
        .ok_or_else(|| CliError::Usage("this subcommand needs --config <file>".into()))
}

/// Gateway-side fragment: the registry entry for a new credential.
#[derive(Debug, Serialize)]
struct RegistryFragment {
    registry: Vec<IssuerConfig>,
}

/// Backend-side fragment: the credential the backend signs with.
#[derive(Debug, Serialize)]
struct CredentialFragment<'a> {
    credential: &'a Credential,
}

pub const REGISTRY_FRAGMENT: &str = "provider-registry.json";
pub const CREDENTIAL_FRAGMENT: &str = "backend-credential.json";

/// Writes both fragments via temp files in the target directory, renaming
/// only once both are fully written.
pub fn keygen(args: &KeygenArgs) -> Result<Credential, CliError> {
    let credential = random_credential();
    let registry = RegistryFragment {
        registry: vec![IssuerConfig {
            user_id: credential.user_id().to_owned(),
            secret_key: credential.secret_base64(),
            models: None,
        }],
    };
    let files = [
        (REGISTRY_FRAGMENT, to_json(&registry)),
        (CREDENTIAL_FRAGMENT, to_json(&CredentialFragment { credential: &credential })),
    ];
    let io_err = |path: &Path| {
        let path = path.to_owned();
        move |source| CliError::IoFailure { path, source }
    };
    if !args.force {
        for (name, _) in &files {
            let path = args.out_dir.join(name);
            if path.exists() {
                return Err(CliError::IoFailure {
                    path,
                    source: io::Error::new(io::ErrorKind::AlreadyExists, "exists; pass --force to replace"),
                });
            }
        }
    }
    let mut staged = Vec::new();
    for (name, body) in &files {
        let mut tmp = tempfile::NamedTempFile::new_in(&args.out_dir).map_err(io_err(&args.out_dir))?;
        io::Write::write_all(&mut tmp, body.as_bytes()).map_err(io_err(tmp.path()))?;
        staged.push((tmp, args.out_dir.join(name)));
    }
    for (tmp, path) in staged {
        tmp.persist(&path).map_err(|e| CliError::IoFailure {
            path: path.clone(),
            source: e.error,
        })?;
        println!("wrote {}", path.display());
    }
    println!("user_id: {}", credential.user_id());
    Ok(credential)
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("fragments serialize");
    s.push('\n');
    s
}

pub fn inspect(args: &InspectArgs) -> Result<(), CliError> {
    let token = if args.token == "-" {
        io::read_to_string(io::stdin()).map_err(|source| CliError::IoFailure {
            path: "<stdin>".into(),
            source,
        })?
    } else {
        args.token.clone()
    };
    let token = token.trim();
    let (header, claims) = parse_unverified(token).map_err(|e| CliError::Malformed(e.to_string()))?;
    println!("header: {}", serde_json::to_string(&header).expect("header serializes"));
    println!(
        "claims: {}",
        serde_json::to_string_pretty(&claims).expect("claims serialize")
    );
    let now = SystemClock.now();
    let exp_ms = claims.exp.saturating_mul(1000);
    if now.0 >= exp_ms {
        println!("expiry: expired {} ms ago", now.0 - exp_ms);
    } else {
        println!("expiry: valid for another {} ms", exp_ms - now.0);
    }

    let Some(key) = &args.key else {
        println!("signature: not checked (no --key)");
        return Ok(());
    };
    let credential = Credential::from_base64(&claims.api_key, key)
        .map_err(|e| CliError::Usage(format!("--key: {e}")))?;
    // Pin the clock inside the validity window so only the signature decides.
    let policy = VerificationPolicy::with_clock(ManualClock::new(UnixMillis::from_secs(claims.iat)));
    match verify_token(token, &credential, &policy) {
        Ok(_) => {
            println!("signature: VALID");
            Ok(())
        }
        Err(VerifyError::BadSignature) => {
            println!("signature: INVALID");
            Err(CliError::Assertion("signature does not match the given key".into()))
        }
        Err(e) => Err(CliError::Malformed(e.to_string())),
    }
}

async fn bind(listen: &str, router: Router) -> Result<ServiceHandle, CliError> {
    spawn_service(listen, router, None).await.map_err(|e| match e.kind() {
        io::ErrorKind::AddrInUse => CliError::PortBusy { addr: listen.to_owned() },
        _ => CliError::Runtime(format!("cannot listen on {listen}: {e}")),
    })
}

async fn until_shutdown(service: ServiceHandle) -> Result<(), CliError> {
    tokio::signal::ctrl_c()
        .await
        .map_err(|e| CliError::Runtime(format!("signal handler: {e}")))?;
    tracing::info!("shutting down");
    service
        .shutdown()
        .await
        .map_err(|e| CliError::Runtime(e.to_string()))
}

pub fn load_gateway_config(path: &Path, listen: Option<&str>) -> Result<GatewayConfig, CliError> {
    let mut config: GatewayConfig = load_json(path)?;
    if let Some(listen) = listen {
        config.listen = listen.to_owned();
    }
    config.validate()?;
    Ok(config)
}

pub fn load_backend_config(path: &Path, listen: Option<&str>) -> Result<BackendConfig, CliError> {
    let mut config: BackendConfig = load_json(path)?;
    if let Some(listen) = listen {
        config.listen = listen.to_owned();
    }
    config.validate()?;
    Ok(config)
}

async fn run_gateway(path: &Path, args: &ServeArgs) -> Result<(), CliError> {
    let config = load_gateway_config(path, args.listen.as_deref())?;
    let listen = config.listen.clone();
    let gw = Arc::new(Gateway::new(config, Arc::new(SystemClock), HttpClient::default())?);
    let service = bind(&listen, gateway::router(gw)).await?;
    println!("gateway listening on {}", service.url());
    until_shutdown(service).await
}

async fn run_backend(path: &Path, args: &ServeArgs) -> Result<(), CliError> {
    let config = load_backend_config(path, args.listen.as_deref())?;
    let listen = config.listen.clone();
    let sweep_every = Duration::from_millis(config.policy.token_ttl_ms.max(1000));
    let be = Arc::new(Backend::new(config, Arc::new(SystemClock), HttpClient::default())?);
    let service = bind(&listen, backend::router(be.clone())).await?;
    be.set_default_public_url(&service.url());
    println!("backend listening on {}", service.url());
    let sweeper = {
        let be = be.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(sweep_every);
            loop {
                tick.tick().await;
                match be.sweep_expired() {
                    Ok(0) => {}
                    Ok(n) => tracing::info!(expired = n, "swept unreported tokens"),
                    Err(e) => tracing::warn!(error = %e, "sweep failed"),
                }
            }
        })
    };
    let result = until_shutdown(service).await;
    sweeper.abort();
    result
}

fn write_artifact<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let io_err = |source| CliError::IoFailure {
        path: path.to_owned(),
        source,
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    io::Write::write_all(&mut tmp, to_json(value).as_bytes()).map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}

async fn run_scenarios(args: &ScenarioArgs) -> Result<(), CliError> {
    let options = ScenarioOptions {
        mutations: args.mutations,
        seed: args.seed,
    };
    let run = scenarios::run_scenarios(options)
        .await
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    print!("{}", run.matrix.render());
    write_artifact(&args.out, &run)?;
    println!("wrote {}", args.out.display());
    let mismatches = run.matrix.mismatches();
    if mismatches.is_empty() {
        println!("PASS feature matrix matches the expected rows");
        Ok(())
    } else {
        Err(CliError::Assertion(format!("rows differ from expected: {mismatches:?}")))
    }
}

#[derive(Debug, Serialize)]
pub struct BenchOutput {
    pub reports: Vec<TrafficReport>,
    /// Only present when all three methods ran.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub checks: Vec<CheckRecord>,
}

#[derive(Debug, Serialize)]
pub struct CheckRecord {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl From<&Check> for CheckRecord {
    fn from(c: &Check) -> Self {
        CheckRecord {
            name: c.name.clone(),
            passed: c.passed,
            detail: c.detail.clone(),
        }
    }
}

/// `--config` may name a workload file; its method is replaced by each
/// requested method in turn.
async fn bench_traffic(config: Option<&Path>, args: &BenchArgs) -> Result<(), CliError> {
    let base: Option<Workload> = config.map(load_json).transpose()?;
    let methods = if args.methods.is_empty() {
        Method::ALL.to_vec()
    } else {
        args.methods.clone()
    };
    let options = BenchOptions {
        hop_delay: Duration::from_millis(args.hop_delay_ms),
    };
    let mut reports = Vec::new();
    for method in methods {
        let workload = match &base {
            Some(w) => Workload { method, ..w.clone() },
            None => Workload::standard(method),
        };
        workload
            .validate()
            .map_err(|e| CliError::ConfigInvalid(ConfigError::Invalid(e.to_string())))?;
        let report = bench::run_mode(&workload, &options)
            .await
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        reports.push(report);
    }
    print!("{}", bench::render_table(&reports));
    let all_methods = Method::ALL
        .iter()
        .all(|m| reports.iter().any(|r| r.method == *m));
    let checks = if all_methods { bench::traffic_checks(&reports) } else { Vec::new() };
    for check in &checks {
        println!("{check}");
    }
    let output = BenchOutput {
        checks: checks.iter().map(CheckRecord::from).collect(),
        reports,
    };
    write_artifact(&args.out, &output)?;
    println!("wrote {}", args.out.display());
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Assertion(format!("failed checks: {}", failed.join(", "))))
    }
}
