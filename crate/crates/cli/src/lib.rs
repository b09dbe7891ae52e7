//! The `meshwatch` command line.
//!
//! Successful commands print their result as JSON on stdout. Failures print
//! an `{"error": {code, message, details}}` report on stderr and exit 1.
//! Usage errors exit 2.

use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use meshwatch_core::firmware::{read_specs, DeviceDatabase};
use meshwatch_core::registry::CONFIG_POINT;
use meshwatch_core::{stock, ConfigDocument, ConfigIssue};
use meshwatch_server::{App, Clock, ServiceConfig, SimNodeProfile};
use serde::Serialize;
use serde_json::{json, Value as Json};

#[derive(Debug, Parser)]
#[command(name = "meshwatch", version, about = "Community mesh network management service")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    /// Service configuration file (JSON).
    #[arg(long, global = true, env = "MESH_CONFIG")]
    pub config: Option<PathBuf>,
    /// Address to listen on; overrides the configuration file.
    #[arg(long, global = true, env = "MESH_LISTEN")]
    pub listen: Option<SocketAddr>,
    /// State directory; overrides the configuration file.
    #[arg(long, global = true, env = "MESH_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    /// Device descriptor directory; overrides the configuration file.
    #[arg(long, global = true, env = "MESH_DEVICE_DIR")]
    pub device_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP service and the monitoring scheduler until interrupted.
    Serve,
    /// Run a simulated fleet on a virtual clock and print a summary.
    Simulate {
        /// Fleet size; defaults to the configured fleet, or 400.
        #[arg(long)]
        nodes: Option<usize>,
        /// Simulated seconds.
        #[arg(long, default_value_t = 900)]
        horizon_s: i64,
        /// Virtual start time in Unix seconds.
        #[arg(long, default_value_t = 1_700_000_000)]
        start: i64,
        #[arg(long)]
        seed: Option<u64>,
        /// Include the per-minute ground truth and reboot log.
        #[arg(long)]
        with_truth: bool,
    },
    /// Check a node configuration against a device and platform without storing it.
    Validate {
        /// Node configuration document (JSON).
        #[arg(value_name = "CONFIG.json")]
        node_config: PathBuf,
        device: String,
        platform: String,
    },
    /// Write every stored stream and datapoint as JSON lines.
    ExportStreams {
        /// Output file; stdout if absent.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Check device descriptor files and copy them into the device directory.
    ImportDevices {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

/// Machine-readable failure report.
#[derive(Debug, Serialize)]
pub struct Failure {
    pub code: &'static str,
    pub message: String,
    pub details: Vec<Json>,
}

impl Failure {
    pub fn new(code: &'static str, message: impl ToString) -> Self {
        Self { code, message: message.to_string(), details: Vec::new() }
    }

    pub fn report(&self) -> Json {
        json!({ "error": self })
    }
}

impl From<meshwatch_server::AppError> for Failure {
    fn from(e: meshwatch_server::AppError) -> Self {
        match e {
            meshwatch_server::AppError::Invalid { code, message, details } => issues_failure(code, message, &details),
            other => Self::new("service-error", other),
        }
    }
}

fn service_config(cli: &Cli) -> Result<ServiceConfig, Failure> {
    let mut config = match &cli.config {
        Some(path) => ServiceConfig::load(path).map_err(|e| Failure::new("config-invalid", e))?,
        None => ServiceConfig::default(),
    };
    if let Some(listen) = cli.listen {
        config.listen = listen;
    }
    if let Some(dir) = &cli.data_dir {
        config.data_dir = Some(dir.clone());
    }
    if let Some(dir) = &cli.device_dir {
        config.device_dir = dir.clone();
    }
    config.validate().map_err(|e| Failure::new("config-invalid", e))?;
    Ok(config)
}

/// Runs a parsed command, writing its result to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), Failure> {
    let config = service_config(&cli)?;
    let io = |e: std::io::Error| Failure::new("io-error", e);
    match cli.command {
        Command::Serve => serve(config),
        Command::Simulate { nodes, horizon_s, start, seed, with_truth } => {
            let mut config = config;
            let mut profile = config.fleet.clone().unwrap_or(SimNodeProfile { count: 400, ..Default::default() });
            if let Some(n) = nodes {
                profile.count = n;
            }
            if let Some(s) = seed {
                profile.seed = s;
            }
            config.fleet = Some(profile);
            config.validate().map_err(|e| Failure::new("config-invalid", e))?;
            let (summary, _) = meshwatch_server::simulate(config, start, horizon_s)?;
            let mut value = serde_json::to_value(&summary).expect("summary serializes");
            if !with_truth {
                value.as_object_mut().expect("summary is an object").remove("truth");
            }
            writeln!(out, "{}", serde_json::to_string_pretty(&value).expect("json")).map_err(io)
        }
        Command::Validate { node_config: path, device, platform } => {
            let text = std::fs::read_to_string(&path).map_err(|e| Failure::new("io-error", format!("{}: {e}", path.display())))?;
            let doc: ConfigDocument = serde_json::from_str(&text)
                .map_err(|e| Failure::new("invalid-json", format!("{}: {e}", path.display())))?;
            validate(&config.device_dir, &doc, &device, &platform)?;
            writeln!(out, "{}", json!({ "valid": true, "device": device, "platform": platform })).map_err(io)
        }
        Command::ExportStreams { output } => {
            if config.data_dir.is_none() {
                return Err(Failure::new("usage-error", "export-streams needs --data-dir or a data_dir in the config"));
            }
            let app = App::new(config, Clock::System)?;
            match output {
                Some(path) => {
                    let file = std::fs::File::create(&path).map_err(io)?;
                    let mut w = std::io::BufWriter::new(file);
                    app.streams.export_jsonl(&mut w).map_err(io)?;
                    w.flush().map_err(io)?;
                    writeln!(out, "{}", json!({ "streams": app.streams.len(), "output": path })).map_err(io)
                }
                None => app.streams.export_jsonl(out).map_err(io),
            }
        }
        Command::ImportDevices { files } => {
            let imported = import_devices(&config.device_dir, &files)?;
            writeln!(out, "{}", json!({ "imported": imported, "device_dir": config.device_dir })).map_err(io)
        }
    }
}

fn issues_failure(code: &'static str, message: String, issues: &[ConfigIssue]) -> Failure {
    Failure {
        code,
        message,
        details: issues.iter().map(|i| serde_json::to_value(i).expect("issues serialize")).collect(),
    }
}

/// Schema check followed by a transformation dry run, as the service does
/// before storing a configuration.
pub fn validate(device_dir: &Path, doc: &ConfigDocument, device: &str, platform: &str) -> Result<(), Failure> {
    let devices = DeviceDatabase::new();
    if device_dir.is_dir() {
        devices.load_dir(device_dir).map_err(|e| Failure::new("device-error", e))?;
    }
    let descriptor = devices.get(device).map_err(|e| Failure::new("unknown-device", e))?;
    let models: Vec<String> = devices.all().into_iter().map(|d| d.model_id).collect();
    let registry = stock::registry(models.iter().map(String::as_str)).map_err(|e| Failure::new("registry-error", e))?;
    let issues = doc.validate(&registry, CONFIG_POINT);
    if !issues.is_empty() {
        return Err(issues_failure("schema-violation", "configuration does not match the schema".into(), &issues));
    }
    let issues = stock::transformer()
        .validate(doc, &descriptor, platform)
        .map_err(|e| Failure::new("unknown-platform", e))?;
    if !issues.is_empty() {
        let modules: std::collections::BTreeSet<&str> = issues.iter().map(|i| i.module.as_str()).collect();
        let names: Vec<&str> = modules.into_iter().collect();
        return Err(issues_failure(
            "validation-failed",
            format!("transformation failed in: {}", names.join(", ")),
            &issues,
        ));
    }
    Ok(())
}

/// Registers `files` on top of the descriptors already in `device_dir`, and
/// copies them there only if every one resolves.
pub fn import_devices(device_dir: &Path, files: &[PathBuf]) -> Result<Vec<String>, Failure> {
    let devices = DeviceDatabase::new();
    if device_dir.is_dir() {
        devices.load_dir(device_dir).map_err(|e| Failure::new("device-error", e))?;
    }
    let mut specs = Vec::new();
    for f in files {
        specs.extend(read_specs(f).map_err(|e| Failure::new("device-error", e))?);
    }
    let imported = devices.register_all(specs).map_err(|e| Failure::new("device-error", e))?;
    std::fs::create_dir_all(device_dir).map_err(|e| Failure::new("io-error", e))?;
    for f in files {
        let name = f.file_name().ok_or_else(|| Failure::new("io-error", format!("{} has no file name", f.display())))?;
        let target = device_dir.join(name);
        if target.exists() {
            return Err(Failure::new("io-error", format!("{} already exists", target.display())));
        }
        std::fs::copy(f, &target).map_err(|e| Failure::new("io-error", format!("{}: {e}", target.display())))?;
    }
    Ok(imported)
}

fn serve(config: ServiceConfig) -> Result<(), Failure> {
    let level = std::env::var("MESH_LOG").ok().and_then(|l| l.parse().ok()).unwrap_or(tracing::Level::INFO);
    let _ = tracing_subscriber::fmt().with_max_level(level).with_writer(std::io::stderr).try_init();
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Failure::new("runtime-error", e))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(config.listen)
            .await
            .map_err(|e| Failure::new("bind-failure", format!("{}: {e}", config.listen)))?;
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
            tracing::info!("shutting down");
        };
        meshwatch_server::serve(config, listener, shutdown).await.map_err(Failure::from)
    })
}
