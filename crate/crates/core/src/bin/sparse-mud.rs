use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};

use sparse_mud::airsim::Scenario;
use sparse_mud::error::Error;
use sparse_mud::harness::{self, ExperimentConfig, Preset, Scheme};
use sparse_mud::ssl;

#[derive(Parser)]
#[command(name = "sparse-mud", version, about = "Blind multiuser detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` configuration applied over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file; `-` writes to standard output.
    #[arg(long, default_value = "-")]
    out: String,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Parameter preset: `desk` or `paper`.
    #[arg(long, default_value = "desk")]
    scale: String,
    /// Report measured wall time instead of 0 in the CSV.
    #[arg(long)]
    wall_clock: bool,
}

#[derive(Subcommand)]
enum Command {
    /// PER against SNR for the slotted receiver.
    RslSweep {
        #[command(flatten)]
        common: Common,
    },
    /// PER against SNR for the sliding-window receiver or a baseline.
    SslSweep {
        #[command(flatten)]
        common: Common,
        /// ssl, oracle-lmmse or csi-gamp.
        #[arg(long, default_value = "ssl")]
        scheme: String,
        /// Rows added to the oracle active count per window.
        #[arg(long)]
        extra_rows: Option<usize>,
        /// Per-window JSON-lines log.
        #[arg(long)]
        window_log: Option<PathBuf>,
    },
    /// Largest number of users meeting the PER target at each sparsity level.
    PhaseTransition {
        #[command(flatten)]
        common: Common,
    },
    /// Information throughput against sparsity.
    ThroughputCurve {
        #[command(flatten)]
        common: Common,
    },
    /// Runs a scheme on a stored scenario.
    Replay {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value = "rsl")]
        scheme: String,
    },
    /// Writes the first scenario of a sweep to a file.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "rsl")]
        scheme: String,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Domain(_) => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn load(common: &Common, scheme: Scheme) -> Result<ExperimentConfig, Failure> {
    let preset: Preset = common.scale.parse()?;
    let mut cfg = ExperimentConfig::preset(preset, scheme);
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
        // The subcommand decides the scheme family.
        if cfg.scheme.is_stream() != scheme.is_stream() {
            cfg.scheme = scheme;
        }
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if common.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(common.threads)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    Ok(cfg)
}

fn output(path: &str) -> Result<Box<dyn Write>, Failure> {
    if path == "-" {
        Ok(Box::new(BufWriter::new(io::stdout())))
    } else {
        Ok(Box::new(BufWriter::new(File::create(path)?)))
    }
}

fn report_health(h: &harness::Health) {
    eprintln!("max normalization error {:e}, non-finite values seen: {}", h.max_normalization_error, h.saw_nonfinite);
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::RslSweep { common } => {
            let cfg = load(&common, Scheme::Rsl)?;
            let res = harness::per_sweep(&cfg, common.wall_clock)?;
            report_health(&res.health);
            let mut out = output(&common.out)?;
            harness::write_csv(&res.rows, &mut out)?;
            out.flush()?;
        }
        Command::SslSweep { common, scheme, extra_rows, window_log } => {
            let scheme: Scheme = scheme.parse()?;
            if !scheme.is_stream() {
                return Err(Failure::Config("ssl-sweep needs ssl, oracle-lmmse or csi-gamp".into()));
            }
            let mut cfg = load(&common, scheme)?;
            cfg.scheme = scheme;
            if let Some(e) = extra_rows {
                cfg.extra_rows = e;
            }
            let res = harness::per_sweep(&cfg, common.wall_clock)?;
            report_health(&res.health);
            if let Some(path) = window_log {
                let mut f = BufWriter::new(File::create(path)?);
                for (_, _, logs) in &res.window_logs {
                    ssl::write_window_log(logs, &mut f)?;
                }
                f.flush()?;
            }
            let mut out = output(&common.out)?;
            harness::write_csv(&res.rows, &mut out)?;
            out.flush()?;
        }
        Command::PhaseTransition { common } => {
            let cfg = load(&common, Scheme::Rsl)?;
            let points = harness::phase_transition(&cfg)?;
            let mut out = output(&common.out)?;
            harness::write_phase_csv(&points, &mut out)?;
            out.flush()?;
        }
        Command::ThroughputCurve { common } => {
            let cfg = load(&common, Scheme::Rsl)?;
            let rows = harness::throughput_curve(&cfg)?;
            let mut out = output(&common.out)?;
            harness::write_throughput_csv(&rows, &mut out)?;
            out.flush()?;
        }
        Command::Replay { common, scenario, scheme } => {
            let scheme: Scheme = scheme.parse()?;
            let mut cfg = load(&common, scheme)?;
            cfg.scheme = scheme;
            let file = File::open(&scenario).map_err(|e| Failure::Config(format!("{}: {e}", scenario.display())))?;
            let sc = Scenario::read_from(&mut BufReader::new(file))?;
            let row = harness::replay(&cfg, &sc)?;
            let mut out = output(&common.out)?;
            harness::write_csv(&[row], &mut out)?;
            out.flush()?;
        }
        Command::Synth { common, scheme } => {
            let scheme: Scheme = scheme.parse()?;
            let mut cfg = load(&common, scheme)?;
            cfg.scheme = scheme;
            let sc = harness::synth(&cfg)?;
            let mut out = output(&common.out)?;
            sc.write_to(&mut out)?;
            out.flush()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}\n");
            let _ = Cli::command().print_help();
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
