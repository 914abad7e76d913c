use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use spectra_core::cache::OperatorCache;
use spectra_filter::config::{Mode, DEFAULTS_HELP};
use spectra_filter::{parse_config, run_pipeline, ResultRecord, RunConfig, RunError};

#[derive(Parser)]
#[command(name = "spectra-filter", version, about = "Energy-filtered observables of the tilted-field Ising chain")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the mode named in the config file.
    #[command(after_help = DEFAULTS_HELP)]
    Run {
        config: PathBuf,
        /// Output directory for `<mode>.csv` and `result.json`.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Overrides `rng_seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (default: all cores).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run the exact-diagonalization equivalence suite for the config's model.
    #[command(after_help = DEFAULTS_HELP)]
    EdCheck {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inspect or clear an operator cache directory.
    Cache {
        #[command(subcommand)]
        action: CacheAction,
    },
}

#[derive(Subcommand)]
enum CacheAction {
    /// List cached operator families.
    Ls { dir: PathBuf },
    /// Remove all cached operator families.
    Rm { dir: PathBuf },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.display().to_string(), source }
}

fn load(path: &Path) -> Result<RunConfig, RunError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(parse_config(&text)?)
}

fn execute(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<i32, RunError> {
    let start = Instant::now();
    log::info!("mode {} N = {} config {}", cfg.mode, cfg.model.n, &cfg.hash()[..16]);
    let out = run_pipeline(cfg)?;
    let record = ResultRecord::new(cfg, &out, start.elapsed().as_secs_f64());
    let csv = out.csv();
    match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let csv_path = dir.join(format!("{}.csv", cfg.mode));
            fs::write(&csv_path, &csv).map_err(io_err(&csv_path))?;
            let json_path = dir.join("result.json");
            let json = serde_json::to_string_pretty(&record).expect("record serializes");
            fs::write(&json_path, json + "\n").map_err(io_err(&json_path))?;
            log::info!("wrote {} and {}", csv_path.display(), json_path.display());
        }
        None => print!("{csv}"),
    }
    Ok(match out.passed {
        Some(false) => 3,
        _ => 0,
    })
}

fn dispatch(cli: Cli) -> Result<i32, RunError> {
    match cli.command {
        Command::Run { config, out, seed, workers } => {
            if let Some(k) = workers {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(k).build_global() {
                    log::warn!("worker pool already initialized: {e}");
                }
            }
            let mut cfg = load(&config)?;
            if let Some(s) = seed {
                cfg.rng_seed = s;
            }
            execute(&cfg, Some(&out))
        }
        Command::EdCheck { config, out } => {
            let mut cfg = load(&config)?;
            cfg.mode = Mode::EdCheck;
            execute(&cfg, out.as_deref())
        }
        Command::Cache { action } => {
            let dir = match &action {
                CacheAction::Ls { dir } | CacheAction::Rm { dir } => dir,
            };
            let cache = OperatorCache::open(dir).map_err(RunError::Cache)?;
            match action {
                CacheAction::Ls { .. } => {
                    for e in cache.list().map_err(RunError::Cache)? {
                        let desc = e.manifest.as_ref().map(|m| format!("{} | {}", m.spec, m.grid)).unwrap_or_else(|| "no manifest".into());
                        println!("{}\t{} files\t{} bytes\t{desc}", e.dir.display(), e.files, e.bytes);
                    }
                }
                CacheAction::Rm { .. } => {
                    let n = cache.clear().map_err(RunError::Cache)?;
                    println!("removed {n} cache entries");
                }
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let code = match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            log::error!("{e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
