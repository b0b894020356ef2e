use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use auxweight::checks::{run_gradcheck, run_oracle_check};
use auxweight::compare::{grid_configs, run_compare, worker_slots, write_csv};
use auxweight::config::RunConfig;
use auxweight::plot::{emit_csv, emit_svg};
use auxweight::quad::{pinned_instances, run_quadratic_bench};
use auxweight::runlog::read_log;
use auxweight::samples::dump_samples;
use auxweight::trainer::run_train;

/// Adaptive auxiliary-loss reweighting: training harness and checks.
#[derive(Parser)]
#[command(name = "auxweight", version, about)]
struct Cli {
    /// Print the complete default config as TOML and exit.
    #[arg(long)]
    print_default_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlotFormat {
    Csv,
    Svg,
}

#[derive(Subcommand)]
enum Command {
    /// Run one training configuration and write its JSONL log.
    Train {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Run several configurations and write a comparison CSV.
    Compare {
        /// Config files, one per run.
        #[arg(short, long, num_args = 1.., required = true)]
        configs: Vec<PathBuf>,
        /// Also run the coarse 3x3 fixed-weight grid derived from the
        /// first config.
        #[arg(long)]
        grid: bool,
        #[arg(short, long, default_value = "compare.csv")]
        out: PathBuf,
    },
    /// Check every op and loss gradient against central differences.
    Gradcheck,
    /// Check the surrogate gradient against both hypergradient oracles.
    OracleCheck,
    /// Run the adaptation loop on the pinned quadratic instances against
    /// the grid-search ground truth.
    QuadBench {
        #[arg(long, default_value_t = 20_000)]
        cycles: u64,
    },
    /// Emit the weight trajectory of a run log as CSV or SVG.
    Plot {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long, value_enum, default_value = "csv")]
        format: PlotFormat,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Write (ground truth, mask, masked) PPM triplets for inspection.
    DumpSamples {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "0.1-0.2")]
        group: String,
        #[arg(short = 'n', long, default_value_t = 8)]
        count: usize,
        #[arg(short, long, default_value = "samples")]
        out: PathBuf,
    },
}

const EXIT_OK: u8 = 0;
const EXIT_ASSERTION: u8 = 1;
const EXIT_CONFIG: u8 = 2;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.print_default_config {
        print!("{}", RunConfig::default().to_toml());
        return ExitCode::from(EXIT_OK);
    }
    let Some(command) = cli.command else {
        eprintln!("no command given; try --help");
        return ExitCode::from(EXIT_CONFIG);
    };
    match dispatch(command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code)
        }
    }
}

struct CliError {
    message: String,
    exit_code: u8,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.message)
    }
}

fn config_err(message: impl Into<String>) -> CliError {
    CliError {
        message: message.into(),
        exit_code: EXIT_CONFIG,
    }
}

fn run_err(message: impl Into<String>) -> CliError {
    CliError {
        message: message.into(),
        exit_code: EXIT_ASSERTION,
    }
}

fn dispatch(command: Command) -> Result<u8, CliError> {
    match command {
        Command::Train { config } => {
            let cfg = RunConfig::load(&config).map_err(|e| config_err(e.to_string()))?;
            let art = run_train(&cfg).map_err(|e| run_err(e.to_string()))?;
            if let Some(abort) = &art.abort {
                eprintln!(
                    "run aborted at iteration {}: non-finite {} (state in {:?})",
                    abort.iter, abort.context, abort.state_file
                );
                return Ok(EXIT_ASSERTION);
            }
            let s = art.summary.expect("finished run has a summary");
            println!(
                "{} iterations -> {} | psnr {:.3} ssim {:.4} mae {:.5} pdist {:.5}",
                s.iters,
                cfg.out.display(),
                s.psnr,
                s.ssim,
                s.mae,
                s.pdist
            );
            Ok(EXIT_OK)
        }
        Command::Compare { configs, grid, out } => {
            let mut cfgs = Vec::new();
            for path in &configs {
                cfgs.push(RunConfig::load(path).map_err(|e| config_err(e.to_string()))?);
            }
            if grid {
                let base = cfgs.first().ok_or_else(|| config_err("no configs"))?.clone();
                cfgs.extend(grid_configs(&base));
            }
            let slots = worker_slots();
            let (rows, artifacts) =
                run_compare(&cfgs, slots).map_err(|e| run_err(e.to_string()))?;
            write_csv(&rows, &out).map_err(|e| run_err(e.to_string()))?;
            println!("{} runs -> {}", rows.len(), out.display());
            for r in &rows {
                println!(
                    "{:<10} {:<9} psnr {:>7.3} ssim {:>6.4} mae {:>8.5} pdist {:>8.5} rank {}",
                    r.reweighter, r.mask_group, r.psnr, r.ssim, r.mae, r.pdist, r.rank
                );
            }
            if artifacts.iter().any(|a| a.aborted()) {
                eprintln!("at least one run aborted on non-finite values");
                return Ok(EXIT_ASSERTION);
            }
            Ok(EXIT_OK)
        }
        Command::Gradcheck => {
            let report = run_gradcheck().map_err(|e| run_err(e.to_string()))?;
            print!("{}", report.render());
            Ok(if report.passed() {
                EXIT_OK
            } else {
                EXIT_ASSERTION
            })
        }
        Command::OracleCheck => {
            let report = run_oracle_check().map_err(|e| run_err(e.to_string()))?;
            print!("{}", report.render());
            Ok(if report.passed() {
                EXIT_OK
            } else {
                EXIT_ASSERTION
            })
        }
        Command::QuadBench { cycles } => {
            let mut all_ok = true;
            for (name, problem) in pinned_instances() {
                let r = run_quadratic_bench(&name, &problem, cycles, 1e-3, 1);
                match r.converged_at {
                    Some(c) => println!(
                        "{:<12} converged in {:>6} cycles: omega {:?} vs target {:?}",
                        r.name, c, r.omega_final, r.omega_star
                    ),
                    None => {
                        all_ok = false;
                        println!(
                            "{:<12} DID NOT CONVERGE in {} cycles: omega {:?} vs target {:?}",
                            r.name, r.cycles_run, r.omega_final, r.omega_star
                        );
                        for (cycle, w) in &r.trajectory {
                            println!("  cycle {:>6}: {:?}", cycle, w);
                        }
                    }
                }
            }
            Ok(if all_ok { EXIT_OK } else { EXIT_ASSERTION })
        }
        Command::Plot { input, format, out } => {
            let log = read_log(&input).map_err(|e| run_err(e.to_string()))?;
            let target = out.unwrap_or_else(|| match format {
                PlotFormat::Csv => input.with_extension("csv"),
                PlotFormat::Svg => input.with_extension("svg"),
            });
            match format {
                PlotFormat::Csv => emit_csv(&log, &target),
                PlotFormat::Svg => emit_svg(&log, &target),
            }
            .map_err(|e| run_err(e.to_string()))?;
            println!("{} records -> {}", log.records.len(), target.display());
            Ok(EXIT_OK)
        }
        Command::DumpSamples {
            seed,
            group,
            count,
            out,
        } => {
            let group = group
                .parse::<auxweight_core::data::MaskGroup>()
                .map_err(|e| config_err(e.to_string()))?;
            let paths =
                dump_samples(seed, group, count, &out).map_err(|e| run_err(e.to_string()))?;
            println!("wrote {} files to {}", paths.len(), out.display());
            Ok(EXIT_OK)
        }
    }
}
