//! Command-line surface of the qkdsim library: scenario configs in,
//! CSV/JSON artifacts out.
//!
//! Exit codes: 0 success, 2 configuration error, 3 no extractable key or
//! protocol abort, 4 synchronization failure.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::ScenarioConfig;
use qkdsim::key::{full_pipeline, report_from_stats, PipelineOptions, QberEstimation};
use qkdsim::link::{sweep, SweepVariable};
use qkdsim::model::{BasisStats, PhaseErrorMode, ProtocolParams};
use qkdsim::optim::{optimize_pair_rate, optimum_vs_loss, write_optima_csv, OptimumAtLoss};
use qkdsim::satpass::{pass_skr, write_pass_csv, MuPolicy, PassProfile};
use qkdsim::sim::{apply_pass_profile, synthesize};
use qkdsim::sync::{coarse_offset_search, correlation_histogram, find_coincidences, track_drift,
    ClockModel, SyncError, DEFAULT_COARSE_BIN, DEFAULT_SEARCH_WINDOW, DEFAULT_SEGMENT};
use qkdsim::tags::TagStream;

#[derive(Parser)]
#[command(
    name = "qkdsim",
    version,
    about = "Entanglement-based (BBM92) free-space QKD link simulator and analytics",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Secure-key report from externally measured basis statistics
    Analyze(AnalyzeArgs),
    /// Sweep the analytic model over loss or pair rate, CSV out
    Model(ModelArgs),
    /// Find the SKR-optimal pair rate (optionally per loss grid point)
    Optimize(OptimizeArgs),
    /// Synthesize two-party timestamp streams with ground truth
    Simulate(SimulateArgs),
    /// Recover clock offset/drift and pair coincidences between tag files
    Sync(SyncArgs),
    /// Full key extraction pipeline over two tag files
    Keygen(KeygenArgs),
    /// Evaluate a satellite-pass profile bin by bin
    Pass(PassArgs),
    /// Check a scenario config without running anything
    Validate(ValidateArgs),
}

#[derive(Args)]
struct ConfigSource {
    /// Scenario config JSON (see `validate --help` for the schema)
    #[arg(long, value_name = "FILE", conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in parameter set: terrestrial, micius or snspd
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    /// Phase error equals the same-basis QBER, no finite-size penalty
    Asymptotic,
    /// Same-basis QBER plus the normal-quantile deviation
    SameDeviation,
    /// Cross-basis QBER plus the normal-quantile deviation
    CrossDeviation,
}

impl From<ModeArg> for PhaseErrorMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Asymptotic => PhaseErrorMode::SameBasisAsymptotic,
            ModeArg::SameDeviation => PhaseErrorMode::SameBasisWithDeviation,
            ModeArg::CrossDeviation => PhaseErrorMode::CrossBasisWithDeviation,
        }
    }
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Basis statistics JSON: n_sift_z, n_sift_x, qber_z, qber_x, duration
    #[arg(long, value_name = "FILE")]
    stats: PathBuf,
    /// Phase-error assignment; measured data defaults to the finite-size mode
    #[arg(long, value_enum, default_value = "same-deviation")]
    mode: ModeArg,
    /// Error-correction inefficiency f
    #[arg(long, default_value_t = 1.2)]
    ec_efficiency: f64,
    /// Failure probability of the phase-error estimate
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Report destination (stdout when omitted)
    #[arg(short, long, value_name = "FILE")]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SweepArg {
    /// Total link loss in dB
    Loss,
    /// Pair rate per coincidence window
    Mu,
}

#[derive(Args)]
struct ModelArgs {
    #[command(flatten)]
    config: ConfigSource,
    #[arg(long, value_enum)]
    sweep: SweepArg,
    #[arg(long)]
    from: f64,
    #[arg(long)]
    to: f64,
    #[arg(long, default_value_t = 101)]
    points: usize,
    /// Space the grid geometrically instead of linearly
    #[arg(long)]
    log: bool,
    #[arg(short, long, value_name = "FILE")]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct OptimizeArgs {
    #[command(flatten)]
    config: ConfigSource,
    /// Comma-separated total losses in dB; omitted: optimize at the configured loss
    #[arg(long, value_name = "DB,DB,...")]
    loss_list: Option<String>,
    #[arg(long, default_value_t = 1e-5)]
    mu_lo: f64,
    #[arg(long, default_value_t = 1.0)]
    mu_hi: f64,
    #[arg(short, long, value_name = "FILE")]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Binary,
    Csv,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    config: ConfigSource,
    /// Simulated wall time in seconds
    #[arg(long)]
    duration: f64,
    /// Overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_name = "FILE")]
    out_a: PathBuf,
    #[arg(long, value_name = "FILE")]
    out_b: PathBuf,
    #[arg(long, value_enum, default_value = "binary")]
    format: FormatArg,
    /// Ground-truth counters JSON
    #[arg(long, value_name = "FILE")]
    truth: Option<PathBuf>,
    /// Pass profile CSV (t_s,loss_db,background_cps) modulating the remote arm
    #[arg(long, value_name = "FILE")]
    profile: Option<PathBuf>,
}

#[derive(Args)]
struct SyncArgs {
    #[arg(long, value_name = "FILE")]
    a: PathBuf,
    #[arg(long, value_name = "FILE")]
    b: PathBuf,
    /// Coincidence window (full width, seconds)
    #[arg(long, default_value_t = 1e-9)]
    window: f64,
    /// Half-width of the offset search, seconds
    #[arg(long, default_value_t = DEFAULT_SEARCH_WINDOW)]
    search_window: f64,
    #[arg(long, default_value_t = DEFAULT_COARSE_BIN)]
    coarse_bin: f64,
    /// Drift-tracking segment length, seconds
    #[arg(long, default_value_t = DEFAULT_SEGMENT)]
    segment: f64,
    /// Recovered clock model JSON (stdout when omitted)
    #[arg(long, value_name = "FILE")]
    clock: Option<PathBuf>,
    /// Matched-pair CSV
    #[arg(long, value_name = "FILE")]
    pairs: Option<PathBuf>,
    /// Correlation histogram CSV
    #[arg(long, value_name = "FILE")]
    histogram: Option<PathBuf>,
    #[arg(long, default_value_t = 16e-9)]
    hist_span: f64,
    #[arg(long, default_value_t = 156e-12)]
    hist_bin: f64,
}

#[derive(Args)]
struct KeygenArgs {
    #[command(flatten)]
    config: ConfigSource,
    #[arg(long, value_name = "FILE")]
    a: PathBuf,
    #[arg(long, value_name = "FILE")]
    b: PathBuf,
    /// Estimate the QBER from a disclosed sample of this fraction instead of
    /// the full-string oracle
    #[arg(long)]
    sample: Option<f64>,
    #[arg(long, default_value_t = 1)]
    sample_seed: u64,
    /// Seed of the privacy-amplification extractor
    #[arg(long, default_value_t = 1)]
    pa_seed: u64,
    /// Include the final key as hex in the report
    #[arg(long)]
    include_key: bool,
    #[arg(short, long, value_name = "FILE")]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct PassArgs {
    #[command(flatten)]
    config: ConfigSource,
    /// Pass profile CSV (t_s,loss_db,background_cps)
    #[arg(long, value_name = "FILE", conflicts_with = "template")]
    profile: Option<PathBuf>,
    /// Synthetic profile: triangular:LO_DB:HI_DB:DURATION_S:BIN_S:BG_CPS or
    /// sine:LO_DB:HI_DB:EL_MIN_DEG:EL_MAX_DEG:DURATION_S:BIN_S:BG_CPS
    #[arg(long, value_name = "SPEC")]
    template: Option<String>,
    /// Pair-rate policy: `track` or `fixed:<mu>`
    #[arg(long, default_value = "track")]
    policy: String,
    /// Per-bin CSV (stdout when omitted)
    #[arg(short, long, value_name = "FILE")]
    output: Option<PathBuf>,
    /// Totals report JSON
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
}

enum CliError {
    Config(String),
    NoKey(String),
    Sync(String),
    Other(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::NoKey(_) => 3,
            CliError::Sync(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::NoKey(m) | CliError::Sync(m) | CliError::Other(m) => m,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Analyze(args) => cmd_analyze(args),
        Command::Model(args) => cmd_model(args),
        Command::Optimize(args) => cmd_optimize(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Sync(args) => cmd_sync(args),
        Command::Keygen(args) => cmd_keygen(args),
        Command::Pass(args) => cmd_pass(args),
        Command::Validate(args) => cmd_validate(args),
    }
}

fn load_config(source: &ConfigSource) -> Result<ScenarioConfig, CliError> {
    let cfg = match (&source.config, &source.preset) {
        (Some(path), None) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        (None, Some(name)) => ScenarioConfig::from_preset(name).ok_or_else(|| {
            CliError::Config(format!(
                "unknown preset `{name}` (expected terrestrial, micius or snspd)"
            ))
        })?,
        (None, None) => ScenarioConfig::default(),
        (Some(_), Some(_)) => unreachable!("clap enforces exclusivity"),
    };
    let diags = cfg.diagnostics();
    if !diags.is_empty() {
        return Err(CliError::Config(diags.join("\n")));
    }
    Ok(cfg)
}

/// Writes through a sibling temp file so artifacts appear atomically.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let io = |e: std::io::Error| CliError::Other(format!("{}: {e}", path.display()));
    fs::write(&tmp, bytes).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)?;
    Ok(())
}

fn emit(output: &Option<PathBuf>, bytes: &[u8]) -> Result<(), CliError> {
    match output {
        Some(path) => write_atomic(path, bytes),
        None => std::io::stdout()
            .write_all(bytes)
            .map_err(|e| CliError::Other(e.to_string())),
    }
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&args.stats)
        .map_err(|e| CliError::Config(format!("{}: {e}", args.stats.display())))?;
    let stats: BasisStats = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", args.stats.display())))?;
    let protocol = ProtocolParams {
        ec_efficiency: args.ec_efficiency,
        phase_error_failure_prob: args.eps,
        phase_error_mode: args.mode.into(),
        ..ProtocolParams::default()
    };
    let report = report_from_stats(&stats, &protocol)
        .map_err(|e| CliError::Config(format!("stats: {e}")))?;
    let aborted = report.aborted;
    let json = serde_json::to_vec_pretty(&report).expect("report serializes");
    emit(&args.output, &json)?;
    if aborted {
        return Err(CliError::NoKey("key extraction aborted (QBER too high)".into()));
    }
    Ok(())
}

fn cmd_model(args: ModelArgs) -> Result<(), CliError> {
    let link = load_config(&args.config)?.to_link_model();
    if args.points < 2 || args.from >= args.to || (args.log && args.from <= 0.0) {
        return Err(CliError::Config(
            "need from < to and points >= 2 (and from > 0 for --log)".into(),
        ));
    }
    let grid: Vec<f64> = (0..args.points)
        .map(|i| {
            let t = i as f64 / (args.points - 1) as f64;
            if args.log {
                args.from * (args.to / args.from).powf(t)
            } else {
                args.from + (args.to - args.from) * t
            }
        })
        .collect();
    let variable = match args.sweep {
        SweepArg::Loss => SweepVariable::LossDbTotal,
        SweepArg::Mu => SweepVariable::PairRate,
    };
    let series = sweep(&link, variable, &grid)
        .map_err(|e| CliError::Config(format!("sweep: {e}")))?;
    let mut buf = Vec::new();
    qkdsim::link::write_sweep_csv(&mut buf, &series)
        .map_err(|e| CliError::Other(e.to_string()))?;
    emit(&args.output, &buf)
}

fn cmd_optimize(args: OptimizeArgs) -> Result<(), CliError> {
    let link = load_config(&args.config)?.to_link_model();
    let bounds = (args.mu_lo, args.mu_hi);
    match &args.loss_list {
        Some(list) => {
            let grid: Vec<f64> = list
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| CliError::Config(format!("--loss-list: {e}")))?;
            let series = optimum_vs_loss(&link, &grid, bounds)
                .map_err(|e| CliError::Config(format!("optimize: {e}")))?;
            let mut buf = Vec::new();
            write_optima_csv(&mut buf, &series).map_err(|e| CliError::Other(e.to_string()))?;
            emit(&args.output, &buf)?;
            if series.iter().all(|r: &OptimumAtLoss| r.optimum.is_none()) {
                return Err(CliError::NoKey("no loss grid point yields a key".into()));
            }
            Ok(())
        }
        None => {
            let opt = optimize_pair_rate(&link, bounds).map_err(|e| match e {
                qkdsim::optim::OptimError::NoKey { .. } => CliError::NoKey(e.to_string()),
                other => CliError::Config(other.to_string()),
            })?;
            let json = serde_json::to_vec_pretty(&opt).expect("optimum serializes");
            emit(&args.output, &json)
        }
    }
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config)?;
    let link = cfg.to_link_model();
    let seed = args.seed.unwrap_or(cfg.seed);
    let clocks = cfg.clock_truth();
    let (a, b, truth) = match &args.profile {
        Some(path) => {
            let file = fs::File::open(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let profile = PassProfile::read_csv(file, path.display().to_string())
                .map_err(|e| CliError::Config(e.to_string()))?;
            let bins = profile.to_sim_bins(&link);
            apply_pass_profile(&link, &bins, clocks, args.duration, seed)
        }
        None => synthesize(&link, clocks, args.duration, seed),
    }
    .map_err(|e| CliError::Config(format!("simulate: {e}")))?;

    let write_stream = |stream: &TagStream, path: &Path| -> Result<(), CliError> {
        match args.format {
            FormatArg::Binary => {
                // write to a temp sibling then rename, same as text artifacts
                let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
                tmp_name.push(".tmp");
                let tmp = path.with_file_name(tmp_name);
                stream
                    .write_binary(&tmp)
                    .map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?;
                fs::rename(&tmp, path)
                    .map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
            }
            FormatArg::Csv => {
                let mut buf = Vec::new();
                stream
                    .write_csv(&mut buf)
                    .map_err(|e| CliError::Other(e.to_string()))?;
                write_atomic(path, &buf)
            }
        }
    };
    write_stream(&a, &args.out_a)?;
    write_stream(&b, &args.out_b)?;
    if let Some(path) = &args.truth {
        let json = serde_json::to_vec_pretty(&truth).expect("truth serializes");
        write_atomic(path, &json)?;
    }
    eprintln!(
        "simulated {:.3} s: {} + {} tags, {} pairs emitted",
        args.duration,
        a.tags.len(),
        b.tags.len(),
        truth.emitted_pairs
    );
    Ok(())
}

fn read_stream(path: &Path, label: &str) -> Result<TagStream, CliError> {
    TagStream::read_auto(path, label)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn map_sync_err(e: SyncError) -> CliError {
    match e {
        SyncError::BadParams(m) => CliError::Config(m),
        other => CliError::Sync(other.to_string()),
    }
}

fn cmd_sync(args: SyncArgs) -> Result<(), CliError> {
    let a = read_stream(&args.a, "a")?;
    let b = read_stream(&args.b, "b")?;
    let coarse =
        coarse_offset_search(&a, &b, args.search_window, args.coarse_bin).map_err(map_sync_err)?;
    let clock = match track_drift(&a, &b, coarse.offset_ps, args.segment) {
        Ok(m) => m,
        Err(SyncError::NoSignificantPeak { .. }) => ClockModel::linear(coarse.offset_ps, 0.0),
        Err(e) => return Err(map_sync_err(e)),
    };

    #[derive(serde::Serialize)]
    struct SyncReport<'a> {
        offset_ps: f64,
        significance: f64,
        clock: &'a ClockModel,
    }
    let json = serde_json::to_vec_pretty(&SyncReport {
        offset_ps: coarse.offset_ps,
        significance: coarse.significance,
        clock: &clock,
    })
    .expect("serializes");
    emit(&args.clock, &json)?;

    if let Some(path) = &args.pairs {
        let pairs = find_coincidences(&a, &b, &clock, args.window);
        let mut buf = Vec::new();
        qkdsim::sync::write_pairs_csv(&mut buf, &pairs)
            .map_err(|e| CliError::Other(e.to_string()))?;
        write_atomic(path, &buf)?;
    }
    if let Some(path) = &args.histogram {
        let hist = correlation_histogram(&a, &b, &clock, args.hist_span, args.hist_bin)
            .map_err(map_sync_err)?;
        let mut buf = Vec::new();
        hist.write_csv(&mut buf).map_err(|e| CliError::Other(e.to_string()))?;
        write_atomic(path, &buf)?;
    }
    Ok(())
}

fn cmd_keygen(args: KeygenArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config)?;
    let link = cfg.to_link_model();
    let a = read_stream(&args.a, "a")?;
    let b = read_stream(&args.b, "b")?;
    let qber_mode = match args.sample {
        Some(fraction) => QberEstimation::DisclosedSample {
            fraction,
            seed: args.sample_seed,
        },
        None => QberEstimation::OracleFull,
    };
    let options = PipelineOptions {
        protocol: link.protocol,
        qber_mode,
        pa_seed: args.pa_seed,
        include_key: args.include_key,
        ..PipelineOptions::default()
    };
    let report = full_pipeline(&a, &b, &options).map_err(|e| {
        let msg = format!("{e}");
        match e.stage {
            "coarse-offset" | "track-drift" => CliError::Sync(msg),
            "reconcile" => CliError::NoKey(msg),
            _ => CliError::Config(msg),
        }
    })?;
    let aborted = report.aborted;
    let json = serde_json::to_vec_pretty(&report).expect("report serializes");
    emit(&args.output, &json)?;
    if aborted {
        return Err(CliError::NoKey("key extraction aborted (QBER too high)".into()));
    }
    Ok(())
}

fn parse_template(spec: &str) -> Result<PassProfile, CliError> {
    let parts: Vec<&str> = spec.split(':').collect();
    let num = |s: &str| -> Result<f64, CliError> {
        s.parse()
            .map_err(|e| CliError::Config(format!("--template: bad number `{s}`: {e}")))
    };
    match parts.as_slice() {
        ["triangular", lo, hi, duration, bin, bg] => Ok(PassProfile::triangular(
            num(lo)?,
            num(hi)?,
            num(duration)?,
            num(bin)?,
            num(bg)?,
        )),
        ["sine", lo, hi, el_min, el_max, duration, bin, bg] => Ok(PassProfile::elevation_sine(
            num(lo)?,
            num(hi)?,
            num(el_min)?,
            num(el_max)?,
            num(duration)?,
            num(bin)?,
            num(bg)?,
        )),
        _ => Err(CliError::Config(
            "--template: expected triangular:LO:HI:DURATION:BIN:BG or \
             sine:LO:HI:EL_MIN:EL_MAX:DURATION:BIN:BG"
                .into(),
        )),
    }
}

fn cmd_pass(args: PassArgs) -> Result<(), CliError> {
    let link = load_config(&args.config)?.to_link_model();
    let profile = match (&args.profile, &args.template) {
        (Some(path), None) => {
            let file = fs::File::open(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            PassProfile::read_csv(file, path.display().to_string())
                .map_err(|e| CliError::Config(e.to_string()))?
        }
        (None, Some(spec)) => parse_template(spec)?,
        _ => {
            return Err(CliError::Config(
                "exactly one of --profile or --template is required".into(),
            ))
        }
    };
    let policy = if args.policy == "track" {
        MuPolicy::TrackOptimum
    } else if let Some(mu) = args.policy.strip_prefix("fixed:") {
        MuPolicy::Fixed(
            mu.parse()
                .map_err(|e| CliError::Config(format!("--policy fixed: {e}")))?,
        )
    } else {
        return Err(CliError::Config(
            "--policy must be `track` or `fixed:<mu>`".into(),
        ));
    };
    let result =
        pass_skr(&profile, &link, policy).map_err(|e| CliError::Config(e.to_string()))?;
    let mut buf = Vec::new();
    write_pass_csv(&mut buf, &result).map_err(|e| CliError::Other(e.to_string()))?;
    emit(&args.output, &buf)?;
    if let Some(path) = &args.report {
        #[derive(serde::Serialize)]
        struct PassReport {
            total_bits: f64,
            bins: usize,
            duration_s: f64,
            policy: String,
        }
        let json = serde_json::to_vec_pretty(&PassReport {
            total_bits: result.total_bits,
            bins: result.bins.len(),
            duration_s: profile.duration(),
            policy: args.policy.clone(),
        })
        .expect("serializes");
        write_atomic(path, &json)?;
    }
    if result.total_bits <= 0.0 {
        return Err(CliError::NoKey("pass yields no key at any bin".into()));
    }
    Ok(())
}

fn cmd_validate(args: ValidateArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| CliError::Config(format!("{}: {e}", args.config.display())))?;
    let cfg: ScenarioConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", args.config.display())))?;
    let diags = cfg.diagnostics();
    if diags.is_empty() {
        println!("ok");
        Ok(())
    } else {
        Err(CliError::Config(diags.join("\n")))
    }
}
