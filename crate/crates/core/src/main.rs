use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use glucose_mpc::dataset::ScenarioId;
use glucose_mpc::harness::{self, ClosedLoopScenario, ControllerKind, RunConfig};

#[derive(Parser, Debug)]
#[command(
    name = "glucose-mpc",
    version,
    about = "Multi-step glucose prediction and MPC on a virtual cohort"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; unspecified keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root (overrides `out` in the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed_cohort: Option<u64>,
    #[arg(long, global = true)]
    seed_meals: Option<u64>,
    #[arg(long, global = true)]
    seed_noise: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the cohort and the Scenario I/II/III open-loop datasets.
    GenData {
        /// I, II or III (default: all three).
        #[arg(long)]
        scenario: Option<String>,
    },
    /// Train the free-response networks, fit the forced-response gains and
    /// identify the ARX baseline.
    Train,
    /// Scenario III prediction errors of both predictors.
    Validate,
    /// 48-h closed-loop runs.
    ClosedLoop {
        /// A, B or C (default: all three).
        #[arg(long)]
        scenario: Option<String>,
        /// multistep or arx (default: both).
        #[arg(long)]
        controller: Option<String>,
    },
    /// Regenerate the report tables from saved results.
    Report,
}

enum Failure {
    Usage(String),
    Runtime(glucose_mpc::Error),
}

impl From<glucose_mpc::Error> for Failure {
    fn from(e: glucose_mpc::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn parse<T: std::str::FromStr<Err = glucose_mpc::Error>>(
    v: Option<String>,
) -> Result<Option<T>, Failure> {
    v.map(|s| s.parse::<T>().map_err(|e| Failure::Usage(e.to_string())))
        .transpose()
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = match &cli.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = cli.common.out {
        cfg.out = o;
    }
    if let Some(s) = cli.common.seed_cohort {
        cfg.seeds.cohort = s;
    }
    if let Some(s) = cli.common.seed_meals {
        cfg.seeds.meals = s;
    }
    if let Some(s) = cli.common.seed_noise {
        cfg.seeds.noise = s;
    }
    match cli.command {
        Command::GenData { scenario } => {
            let only = parse::<ScenarioId>(scenario)?;
            harness::cmd_gen_data(&cfg, only)?;
        }
        Command::Train => {
            let s = harness::cmd_train(&cfg)?;
            for (j, b, e, v) in &s.networks {
                println!("f_{j}: batch {b}, best epoch {e}, validation MAE {v:.3} mg/dL");
            }
            println!(
                "G_T: {} windows, residual MSE {:.3}, positive gains {:.2}%",
                s.gt_samples,
                s.gt_residual_mse,
                100.0 * s.gt_positive_fraction
            );
            println!(
                "ARX: residual variance {:.4}, largest root modulus {:.4}",
                s.arx_residual_variance, s.arx_max_root
            );
        }
        Command::Validate => {
            let (ms, ax) = harness::cmd_validate(&cfg)?;
            for (j, (a, b)) in ms.mean_mae().iter().zip(ax.mean_mae()).enumerate() {
                println!(
                    "{:>3} min: multistep MAE {a:.3}, ARX MAE {b:.3}",
                    (j + 1) * 15
                );
            }
        }
        Command::ClosedLoop {
            scenario,
            controller,
        } => {
            let scenarios = parse::<ClosedLoopScenario>(scenario)?
                .map_or(ClosedLoopScenario::ALL.to_vec(), |s| vec![s]);
            let controllers = parse::<ControllerKind>(controller)?
                .map_or(ControllerKind::ALL.to_vec(), |c| vec![c]);
            let runs = harness::cmd_closed_loop(&cfg, &scenarios, &controllers)?;
            let ticks = cfg.closed_loop_ticks();
            let issues: Vec<String> = runs
                .iter()
                .flat_map(|r| harness::audit_run(r, ticks))
                .collect();
            for i in &issues {
                eprintln!("safety: {i}");
            }
            println!(
                "{} runs written under {}",
                runs.len(),
                cfg.logs_dir().display()
            );
        }
        Command::Report => {
            let r = harness::cmd_report(&cfg)?;
            println!(
                "prediction table: {}, outcome blocks: {}",
                if r.prediction.is_some() {
                    "written"
                } else {
                    "no data"
                },
                r.outcomes.len()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
