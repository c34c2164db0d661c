use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use maxent_steer_cli::{
    cmd_bridge_check, cmd_ellipse, cmd_solve, cmd_steer, cmd_validate, load_spec, parse_cov,
    CliError, Sink, SteerOptions,
};

/// Maximum-entropy density steering for discrete-time linear systems.
///
/// Exit status: 0 success, 1 infeasible problem or failed verification,
/// 2 input error.
#[derive(Parser)]
#[command(name = "maxent-steer", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SpecArgs {
    /// Problem specification (TOML).
    #[arg(long)]
    spec: PathBuf,
    /// Replace the spec's epsilon.
    #[arg(long)]
    epsilon_override: Option<f64>,
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    /// Number of sampled paths (default: spec `samples`, else 1000).
    #[arg(long)]
    samples: Option<usize>,
    /// Random seed (default: spec `seed`, else 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Policy file from `solve`, or `auto` to synthesize one from the spec.
    #[arg(long, default_value = "auto")]
    policy: String,
}

#[derive(Subcommand)]
enum Command {
    /// Check the solver hypotheses; JSON report on the output, summary on stderr.
    Validate(SpecArgs),
    /// Compute the optimal policy and write it as a policy file.
    Solve(SpecArgs),
    /// Sample closed-loop paths and write them as CSV.
    Steer {
        #[command(flatten)]
        spec: SpecArgs,
        #[command(flatten)]
        sampling: SampleArgs,
    },
    /// `steer` for point-to-point specs.
    Pin {
        #[command(flatten)]
        spec: SpecArgs,
        #[command(flatten)]
        sampling: SampleArgs,
    },
    /// Verify the Schrödinger-bridge characterization of the optimal policy.
    BridgeCheck(SpecArgs),
    /// Points on the covariance ellipse {x : x' cov^-1 x = level^2} as CSV.
    Ellipse {
        /// 2x2 covariance, e.g. "[[4, 0], [0, 1]]".
        #[arg(long)]
        cov: String,
        #[arg(long, default_value_t = 3.0)]
        level: f64,
        #[arg(long, default_value_t = 360)]
        points: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(command: Command, stdout: &mut dyn Write, log: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Validate(a) => {
            let spec = load_spec(&a.spec, a.epsilon_override)?;
            cmd_validate(&spec, &mut sink(a.out, stdout), log)
        }
        Command::Solve(a) => {
            let spec = load_spec(&a.spec, a.epsilon_override)?;
            cmd_solve(&spec, &mut sink(a.out, stdout), log)
        }
        Command::Steer { spec: a, sampling } => steer(a, sampling, false, stdout, log),
        Command::Pin { spec: a, sampling } => steer(a, sampling, true, stdout, log),
        Command::BridgeCheck(a) => {
            let spec = load_spec(&a.spec, a.epsilon_override)?;
            cmd_bridge_check(&spec, &mut sink(a.out, stdout), log)
        }
        Command::Ellipse {
            cov,
            level,
            points,
            out,
        } => cmd_ellipse(&parse_cov(&cov)?, level, points, &mut sink(out, stdout)),
    }
}

fn steer(
    a: SpecArgs,
    sampling: SampleArgs,
    point_only: bool,
    stdout: &mut dyn Write,
    log: &mut dyn Write,
) -> Result<(), CliError> {
    let spec = load_spec(&a.spec, a.epsilon_override)?;
    let opts = SteerOptions {
        policy: (sampling.policy != "auto").then(|| PathBuf::from(&sampling.policy)),
        samples: sampling.samples,
        seed: sampling.seed,
        point_only,
    };
    cmd_steer(&spec, &opts, &mut sink(a.out, stdout), log)
}

fn sink(out: Option<PathBuf>, stdout: &mut dyn Write) -> Sink<'_> {
    match out {
        Some(p) => Sink::File(p),
        None => Sink::Stream(stdout),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let stdout = std::io::stdout();
    let mut stdout = stdout.lock();
    let stderr = std::io::stderr();
    let mut log = stderr.lock();
    match run(cli.command, &mut stdout, &mut log) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(log, "error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
