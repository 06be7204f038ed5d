use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dkf_core::report::{self, Bundle, RunOptions};
use dkf_core::scenario::{GammaSpec, Scenario, PRESET_NAMES};
use dkf_core::Error;

#[derive(Parser)]
#[command(name = "dkf", version, about = "Distributed Kalman filtering under modeling errors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the standing assumptions of a scenario.
    Validate(Common),
    /// Steady-state indices and bounds along the gamma grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Add the Monte Carlo steady MSE column.
        #[arg(long)]
        simulate: bool,
    },
    /// Divergence certificates for a wrong process-noise model.
    Divergence {
        #[command(flatten)]
        common: Common,
        /// Also run the Monte Carlo MSE.
        #[arg(long)]
        simulate: bool,
    },
    /// Ordering of the nominal and actual error covariances.
    Relations(Common),
    /// Monte Carlo MSE against the analytic curve.
    Simulate(Common),
}

#[derive(Args)]
struct Common {
    /// Scenario file, or one of the built-in presets (baseline, case1, case2, case3).
    #[arg(long)]
    scenario: String,
    /// Output directory for CSV tables and metadata.json.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    /// Gamma override: `10`, `10,20,40` or `log:FROM:TO:POINTS`, with an
    /// optional `rel:` prefix for multiples of the threshold.
    #[arg(long)]
    gamma: Option<String>,
}

fn load_scenario(arg: &str) -> Result<Scenario, Error> {
    let path = Path::new(arg);
    if path.exists() || !PRESET_NAMES.contains(&arg) {
        Scenario::load(path)
    } else {
        let mut scn = Scenario::preset(arg)?;
        if scn.name.is_empty() {
            scn.name = arg.to_string();
        }
        Ok(scn)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Parse(_) | Error::InvalidConfig(_) | Error::DimensionMismatch(_) => 1,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<(Bundle, PathBuf), Error> {
    let (common, simulate) = match &cli.command {
        Command::Validate(c) | Command::Relations(c) | Command::Simulate(c) => (c, false),
        Command::Sweep { common, simulate } | Command::Divergence { common, simulate } => (common, *simulate),
    };
    let scn = load_scenario(&common.scenario)?;
    let opts = RunOptions {
        gamma: common.gamma.as_deref().map(GammaSpec::parse_cli).transpose()?,
        seed: common.seed,
        trials: common.trials,
        simulate,
    };
    let bundle = match cli.command {
        Command::Validate(_) => report::validate(&opts.apply(&scn)?)?,
        Command::Sweep { .. } => report::sweep(&scn, &opts)?,
        Command::Divergence { .. } => report::divergence(&scn, &opts)?,
        Command::Relations(_) => report::relations(&scn, &opts)?,
        Command::Simulate(_) => report::simulate(&scn, &opts)?,
    };
    Ok((bundle, common.out.clone()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (bundle, out) = match run(cli) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    if bundle.command == "validate" {
        for row in &bundle.tables[0].rows {
            let mut line = String::new();
            for cell in row {
                if let report::Cell::Text(s) = cell {
                    line.push_str(&format!("{s:<14}"));
                }
            }
            println!("{}", line.trim_end());
        }
    }
    for w in &bundle.warnings {
        eprintln!("warning: {w}");
    }
    match bundle.write(&out) {
        Ok(paths) => {
            for p in paths {
                println!("wrote {}", p.display());
            }
        }
        Err(e) => {
            eprintln!("error: cannot write to {}: {e}", out.display());
            return ExitCode::from(1);
        }
    }
    println!("{}", serde_json::to_string_pretty(&bundle.summary).unwrap_or_default());
    if bundle.violations.is_empty() {
        ExitCode::SUCCESS
    } else {
        for v in &bundle.violations {
            eprintln!("failed: {v}");
        }
        ExitCode::from(2)
    }
}
