//! `ringaudit`: batch detection, synthetic data, evaluation and the HTTP
//! server.
//!
//! Exit codes: 0 success, 1 other failure, 2 missing input file,
//! 3 invalid arguments, parameters or input contents.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ringaudit_core::community::GroupsExport;
use ringaudit_core::covisit::CoVisitParams;
use ringaudit_core::ingest::{load_dataset_from_paths, Dataset, FilterSpec, IngestError, LoadConfig};
use ringaudit_core::pipeline::{self, DetectParams};
use ringaudit_core::synthgen::{self, GroundTruth, SynthConfig, SynthError};
use ringaudit_service::{AppState, SessionRequest};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    MissingFile(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::MissingFile(_) => 2,
            CliError::Validation(_) => 3,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn io_error(path: &Path, e: io::Error) -> CliError {
    if e.kind() == io::ErrorKind::NotFound {
        CliError::MissingFile(format!("{}: file not found", path.display()))
    } else {
        CliError::Other(format!("{}: {e}", path.display()))
    }
}

fn read_file(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| io_error(path, e))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
}

#[derive(Debug, Parser)]
#[command(name = "ringaudit", version, about = "Collusive fraud-ring audits over insurance claim data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the co-visit network, mine suspicious groups and write artifacts.
    Detect(DetectArgs),
    /// Generate a synthetic dataset with planted rings and confounders.
    Synth(SynthArgs),
    /// Score a groups.json against a ground_truth.json.
    Eval(EvalArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Args)]
struct DataArgs {
    /// Directory holding patients.csv, visits.csv and drugs.csv.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    patients: Option<PathBuf>,
    #[arg(long)]
    visits: Option<PathBuf>,
    #[arg(long)]
    drugs: Option<PathBuf>,
}

impl DataArgs {
    fn any(&self) -> bool {
        self.data.is_some() || self.patients.is_some() || self.visits.is_some() || self.drugs.is_some()
    }

    fn paths(&self) -> CliResult<[PathBuf; 3]> {
        let pick = |explicit: &Option<PathBuf>, name: &str| match (explicit, &self.data) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(d)) => Ok(d.join(name)),
            (None, None) => Err(CliError::Validation(format!(
                "--{} or --data is required",
                name.trim_end_matches(".csv")
            ))),
        };
        Ok([
            pick(&self.patients, "patients.csv")?,
            pick(&self.visits, "visits.csv")?,
            pick(&self.drugs, "drugs.csv")?,
        ])
    }

    fn load(&self) -> CliResult<Dataset> {
        let [p, v, d] = self.paths()?;
        for path in [&p, &v, &d] {
            if !path.is_file() {
                return Err(CliError::MissingFile(format!("{}: file not found", path.display())));
            }
        }
        load_dataset_from_paths(&p, &v, &d, &LoadConfig::default()).map_err(|e| match e {
            IngestError::Io { ref source, .. } if source.kind() == io::ErrorKind::NotFound => {
                CliError::MissingFile(e.to_string())
            }
            IngestError::Io { .. } => CliError::Other(e.to_string()),
            other => CliError::Validation(other.to_string()),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    Markdown,
    Json,
}

#[derive(Debug, Args)]
struct DetectArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Maximum co-visit gap, minutes.
    #[arg(long, default_value_t = 60.0)]
    theta1: f64,
    /// Minimum number of co-visits for an edge.
    #[arg(long, default_value_t = 4)]
    min_covisits: usize,
    #[arg(long, default_value_t = pipeline::DEFAULT_MIN_COMPONENT_SIZE)]
    min_component_size: usize,
    #[arg(long, default_value_t = pipeline::DEFAULT_SEED)]
    seed: u64,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Gap (minutes) under which the report itemises co-visits; defaults to theta1.
    #[arg(long)]
    gap_filter: Option<f64>,
    #[arg(long, value_enum, default_value_t = ReportFormat::Markdown)]
    format: ReportFormat,
    /// JSON file with a record filter applied before detection.
    #[arg(long)]
    filter: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of patients.
    #[arg(long)]
    patient_count: Option<usize>,
    #[arg(long)]
    rings: Option<usize>,
    #[arg(long)]
    confounders: Option<usize>,
    /// JSON file with generator settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// groups.json written by `detect` or the HTTP API.
    #[arg(long)]
    groups: PathBuf,
    /// ground_truth.json written by `synth`.
    #[arg(long)]
    truth: PathBuf,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
    /// Dataset to load at startup.
    #[command(flatten)]
    data: DataArgs,
}

fn cmd_detect(args: DetectArgs) -> CliResult<()> {
    let filter: FilterSpec = match &args.filter {
        Some(path) => serde_json::from_str(&read_file(path)?)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?,
        None => FilterSpec::default(),
    };
    let params = DetectParams {
        filter,
        covisit: CoVisitParams::with_thresholds(args.theta1, args.min_covisits),
        min_component_size: args.min_component_size,
        seed: args.seed,
    };
    params.validate().map_err(|e| CliError::Validation(e.to_string()))?;
    let gap = args.gap_filter.unwrap_or(args.theta1);
    if !(gap.is_finite() && gap >= 0.0) {
        return Err(CliError::Validation("--gap-filter must be a non-negative number of minutes".into()));
    }
    let dataset = args.data.load()?;
    let result = pipeline::run(&dataset.patients, &dataset.visits, &params)
        .map_err(|e| CliError::Validation(e.to_string()))?;

    fs::create_dir_all(&args.out).map_err(|e| CliError::Other(format!("{}: {e}", args.out.display())))?;
    write_file(&args.out.join("network.json"), &pipeline::network_json(&result))?;
    write_file(&args.out.join("groups.json"), &pipeline::groups_json(&result))?;
    write_file(&args.out.join("metrics.csv"), &pipeline::metrics_csv(&result))?;
    write_file(&args.out.join("projection.csv"), &pipeline::projection_csv(&result))?;
    match args.format {
        ReportFormat::Markdown => write_file(&args.out.join("report.md"), &pipeline::report_md(&result, gap))?,
        ReportFormat::Json => write_file(&args.out.join("report.json"), &pipeline::report_json(&result, gap))?,
    }
    println!(
        "{} visits, {} patients, {} edges, {} suspicious groups (modularity {:.4}); artifacts in {}",
        result.visits.n(),
        result.network.node_count(),
        result.network.edge_count(),
        result.groups.groups.len(),
        result.partition.modularity,
        args.out.display()
    );
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> CliResult<()> {
    let mut cfg: SynthConfig = match &args.config {
        Some(path) => serde_json::from_str(&read_file(path)?)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?,
        None => SynthConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(m) = args.patient_count {
        cfg.m_patients = m;
    }
    if let Some(r) = args.rings {
        cfg.n_fraud_rings = r;
    }
    if let Some(c) = args.confounders {
        cfg.n_confounder_groups = c;
    }
    let ds = synthgen::generate(&cfg).map_err(|e| match e {
        SynthError::Io { .. } => CliError::Other(e.to_string()),
        other => CliError::Validation(other.to_string()),
    })?;
    synthgen::write_dataset(&args.out, &ds).map_err(|e| CliError::Other(e.to_string()))?;
    println!(
        "{} patients, {} visits, {} drug rows, {} rings, {} confounder groups written to {}",
        ds.patients.m(),
        ds.visits.n(),
        ds.drugs.n(),
        ds.truth.rings.len(),
        ds.truth.confounders.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> CliResult<()> {
    let groups: GroupsExport = serde_json::from_str(&read_file(&args.groups)?)
        .map_err(|e| CliError::Validation(format!("{}: {e}", args.groups.display())))?;
    let truth: GroundTruth = serde_json::from_str(&read_file(&args.truth)?)
        .map_err(|e| CliError::Validation(format!("{}: {e}", args.truth.display())))?;
    let detected: Vec<Vec<String>> = groups.groups.into_iter().map(|g| g.members).collect();
    let report = synthgen::evaluate_members(&detected, &truth);
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

fn cmd_serve(args: ServeArgs) -> CliResult<()> {
    let state = AppState::new();
    if args.data.any() {
        let [patients, visits, drugs] = args.data.paths()?;
        let info = state
            .load_session(SessionRequest {
                dir: args.data.data.clone(),
                patients: Some(patients),
                visits: Some(visits),
                drugs: Some(drugs),
                ..Default::default()
            })
            .map_err(|e| match e.code {
                ringaudit_service::error::ErrorCode::IoError => CliError::MissingFile(e.message),
                _ => CliError::Validation(e.message),
            })?;
        println!(
            "loaded {} patients, {} visits ({})",
            info.patients, info.visits, info.session_id
        );
    }
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Other(e.to_string()))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&args.addr)
            .await
            .map_err(|e| CliError::Other(format!("cannot bind {}: {e}", args.addr)))?;
        let local = listener.local_addr().map_err(|e| CliError::Other(e.to_string()))?;
        println!("listening on http://{local}");
        ringaudit_service::serve(listener, state)
            .await
            .map_err(|e| CliError::Other(e.to_string()))
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(3) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match cli.command {
        Command::Detect(a) => cmd_detect(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Serve(a) => cmd_serve(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
