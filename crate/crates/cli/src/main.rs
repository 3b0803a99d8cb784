mod config;
mod tasks;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "svlq", version, about = "LQ control of stochastic Volterra equations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the task described by a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output root; results go to `<out>/<task>/<timestamp>/`.
        #[arg(long, env = "OUT_DIR", default_value = "out")]
        out: PathBuf,
        /// Overrides `simulation.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
    },
}

const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_OTHER: u8 = 1;

fn exit_code(err: &anyhow::Error) -> (u8, &'static str) {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<svlq::Error>() {
            if matches!(e, svlq::Error::Io(_)) {
                return (EXIT_OTHER, e.invariant_name());
            }
            let code = if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_VALIDATION };
            return (code, e.invariant_name());
        }
    }
    (EXIT_OTHER, "io")
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    #[cfg(feature = "parallel")]
    if let Some(k) = threads {
        if k == 0 {
            return Err(svlq::Error::InvalidParameter {
                name: "threads",
                reason: "need at least one thread".into(),
            }
            .into());
        }
        let pool = rayon::ThreadPoolBuilder::new().num_threads(k).build()?;
        return Ok(pool.install(f));
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
    Ok(f())
}

/// Writes every file into a hidden staging directory, then renames it into
/// place so a run directory is either complete or absent.
fn publish(root: &Path, task: &str, files: &[(&str, Vec<u8>)]) -> Result<PathBuf> {
    let parent = root.join(task);
    std::fs::create_dir_all(&parent).with_context(|| format!("creating {}", parent.display()))?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ").to_string();
    let mut target = parent.join(&stamp);
    let mut suffix = 1;
    while target.exists() {
        target = parent.join(format!("{stamp}-{suffix}"));
        suffix += 1;
    }
    let staging = parent.join(format!(".{}.partial", target.file_name().unwrap().to_string_lossy()));
    std::fs::create_dir_all(&staging)?;
    for (name, bytes) in files {
        std::fs::write(staging.join(name), bytes)?;
    }
    std::fs::rename(&staging, &target)?;
    Ok(target)
}

fn run(config: &Path, out: &Path, seed: Option<u64>, threads: Option<usize>) -> Result<PathBuf> {
    let mut cfg = config::load(config)?;
    if let Some(s) = seed {
        cfg.simulation.seed = s;
    }
    let artifacts = with_threads(threads, || tasks::run(&cfg))??;
    let mut files = artifacts.files;
    let mut resolved = serde_json::to_vec_pretty(&cfg)?;
    resolved.push(b'\n');
    files.push(("config.json", resolved));
    publish(out, cfg.task.name(), &files)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, out, seed, threads } => match run(&config, &out, seed, threads) {
            Ok(dir) => {
                println!("{}", dir.display());
                ExitCode::SUCCESS
            }
            Err(e) => {
                let (code, name) = exit_code(&e);
                eprintln!("error [{name}]: {e:#}");
                ExitCode::from(code)
            }
        },
    }
}
