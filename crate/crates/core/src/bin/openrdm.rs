use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use openrdm::cli::{
    compare_trajectories, parse_box, parse_number, run, ContinueConfig, Mode, RgCheckConfig,
    RunConfig, RunOptions, TargetConfig, WalkConfig,
};
use openrdm::continuation::FitMethod;
use openrdm::{Error, Result};

#[derive(Parser)]
#[command(
    name = "openrdm",
    version,
    about = "Open-system density-matrix transport and verification runs"
)]
struct Cli {
    /// Treat every warning as an invariant breach (exit code 3).
    #[arg(long, global = true)]
    strict: bool,
    /// Worker threads for sweeps and refinement ladders.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a TOML configuration.
    Run { config: PathBuf },
    /// Continue sampled values from one box to another.
    Continue {
        #[arg(long)]
        input: PathBuf,
        /// Restrict the input to lo:hi[,lo:hi...].
        #[arg(long)]
        from_box: Option<String>,
        /// Target box lo:hi[,lo:hi...].
        #[arg(long)]
        to_box: String,
        /// Target nodes per axis (comma separated).
        #[arg(long, default_value = "101")]
        to_counts: String,
        #[arg(long, default_value_t = 10)]
        order: usize,
        #[arg(long, default_value_t = 0.5)]
        step_fraction: f64,
        #[arg(long)]
        finite_difference: bool,
        /// Known values on the target grid.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        output_dir: PathBuf,
    },
    /// Check the density-potential identity on the harmonic benchmark.
    RgCheck {
        /// HALF_WIDTH:DX, for example 8:1/64.
        #[arg(long, default_value = "8:1/64")]
        grid: String,
        #[arg(long, default_value = "5e-4")]
        dt: String,
        /// quadratic:EPSILON
        #[arg(long, default_value = "quadratic:0.1")]
        perturbation: String,
        /// LO,HI
        #[arg(long, default_value = "0.5,1.5")]
        subinterval: String,
        /// Differentiating order (0 or 1).
        #[arg(long, default_value_t = 0)]
        k: usize,
        /// Skip the refinement ladder.
        #[arg(long)]
        no_ladder: bool,
        #[arg(long, default_value = "out")]
        output_dir: PathBuf,
    },
    /// Compare two CSV outputs column by column.
    Compare {
        file_a: PathBuf,
        file_b: PathBuf,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
    },
}

fn config_error(msg: String) -> Error {
    Error::Config(msg)
}

fn continue_config(
    input: PathBuf,
    from_box: Option<String>,
    to_box: String,
    to_counts: String,
    walk: WalkConfig,
    reference: Option<PathBuf>,
) -> Result<ContinueConfig> {
    let (lower, upper) = parse_box(&to_box).map_err(|e| config_error(format!("--to-box: {e}")))?;
    let counts = to_counts
        .split(',')
        .map(|c| c.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| config_error(format!("--to-counts: {e}")))?;
    let counts = if counts.len() == 1 {
        vec![counts[0]; lower.len()]
    } else {
        counts
    };
    let (from_lower, from_upper) = match from_box {
        Some(b) => {
            let (lo, hi) = parse_box(&b).map_err(|e| config_error(format!("--from-box: {e}")))?;
            (Some(lo), Some(hi))
        }
        None => (None, None),
    };
    Ok(ContinueConfig {
        input,
        from_lower,
        from_upper,
        target: TargetConfig {
            lower,
            upper,
            counts,
        },
        walk,
        reference,
    })
}

fn rg_config(
    grid: &str,
    dt: &str,
    perturbation: &str,
    subinterval: &str,
    k: usize,
    no_ladder: bool,
) -> Result<RgCheckConfig> {
    let (hw, dx) = grid
        .split_once(':')
        .ok_or_else(|| config_error(format!("--grid: expected HALF_WIDTH:DX, got '{grid}'")))?;
    let epsilon = match perturbation.split_once(':') {
        Some(("quadratic", eps)) => {
            parse_number(eps).map_err(|e| config_error(format!("--perturbation: {e}")))?
        }
        _ => {
            return Err(config_error(format!(
                "--perturbation: expected quadratic:EPSILON, got '{perturbation}'"
            )))
        }
    };
    let (lo, hi) = subinterval.split_once(',').ok_or_else(|| {
        config_error(format!(
            "--subinterval: expected LO,HI, got '{subinterval}'"
        ))
    })?;
    let num =
        |flag: &str, s: &str| parse_number(s).map_err(|e| config_error(format!("{flag}: {e}")));
    let mut cfg = RgCheckConfig {
        half_width: num("--grid", hw)?,
        epsilon,
        k,
        dx: num("--grid", dx)?,
        dt: num("--dt", dt)?,
        subinterval: Some([num("--subinterval", lo)?, num("--subinterval", hi)?]),
        ..RgCheckConfig::default()
    };
    if no_ladder {
        cfg.ladder.clear();
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<()> {
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("--jobs: {e}")))?;
    }
    let opts = RunOptions { strict: cli.strict };
    let config = match cli.command {
        Command::Run { config } => RunConfig::from_file(&config)?,
        Command::Continue {
            input,
            from_box,
            to_box,
            to_counts,
            order,
            step_fraction,
            finite_difference,
            reference,
            output_dir,
        } => {
            let walk = WalkConfig {
                order,
                step_fraction,
                method: if finite_difference {
                    FitMethod::FiniteDifference
                } else {
                    FitMethod::LeastSquares
                },
                ..WalkConfig::default()
            };
            let mut cfg = RunConfig::for_mode(Mode::Continue);
            cfg.output_dir = output_dir;
            cfg.continuation = Some(continue_config(
                input, from_box, to_box, to_counts, walk, reference,
            )?);
            cfg
        }
        Command::RgCheck {
            grid,
            dt,
            perturbation,
            subinterval,
            k,
            no_ladder,
            output_dir,
        } => {
            let mut cfg = RunConfig::for_mode(Mode::RgCheck);
            cfg.output_dir = output_dir;
            cfg.rg_check = Some(rg_config(
                &grid,
                &dt,
                &perturbation,
                &subinterval,
                k,
                no_ladder,
            )?);
            cfg
        }
        Command::Compare {
            file_a,
            file_b,
            tol,
        } => {
            let report = compare_trajectories(&file_a, &file_b, tol)?;
            let width = report
                .columns
                .iter()
                .map(|(n, _)| n.len())
                .max()
                .unwrap_or(0);
            for (name, dev) in &report.columns {
                println!("{name:width$}  {dev:.6e}");
            }
            println!("rows compared: {}", report.rows);
            println!(
                "{} (max deviation {:.6e}, tolerance {:.1e})",
                if report.pass { "PASS" } else { "FAIL" },
                report.max_deviation,
                tol
            );
            if !report.pass {
                return Err(Error::InvariantBreach(format!(
                    "max deviation {:.3e} exceeds {tol:.1e}",
                    report.max_deviation
                )));
            }
            return Ok(());
        }
    };
    config.validate()?;
    let outcome = run(&config, &opts)?;
    print!("{}", outcome.summary_table());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
