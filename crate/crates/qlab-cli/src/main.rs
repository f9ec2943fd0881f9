use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use qlab_cli::presets::{find, PRESETS};
use qlab_cli::{run, CliError, ExperimentConfig, RunOptions};

#[derive(Parser)]
#[command(name = "qlab", version, about = "Run quenched transfer-operator experiments from TOML configs")]
struct Cli {
    /// Worker threads; 0 lets rayon decide.
    #[arg(long, global = true, env = "QLAB_THREADS", default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a config file or a named preset.
    Run {
        config: Option<PathBuf>,
        #[arg(long, conflicts_with = "config")]
        preset: Option<String>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// List built-in presets.
    ListPresets,
    /// Print a preset's TOML.
    ShowPreset { name: String },
}

fn load(config: Option<PathBuf>, preset: Option<String>) -> Result<ExperimentConfig, CliError> {
    match (config, preset) {
        (Some(path), None) => {
            let text = std::fs::read_to_string(&path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            ExperimentConfig::parse(&text).map_err(|e| match e {
                CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
                other => other,
            })
        }
        (None, Some(name)) => find(&name)
            .map(|p| p.config())
            .ok_or_else(|| CliError::Config(format!("unknown preset {name:?}"))),
        _ => Err(CliError::Config("give a config path or --preset".into())),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    #[cfg(feature = "parallel")]
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("thread pool: {e}");
        }
    }
    #[cfg(not(feature = "parallel"))]
    let _ = cli.threads;
    match cli.cmd {
        Cmd::ListPresets => {
            for p in PRESETS {
                println!("{:<18} {}", p.name, p.description);
            }
            ExitCode::SUCCESS
        }
        Cmd::ShowPreset { name } => match find(&name) {
            Some(p) => {
                print!("{}", p.toml.trim_start());
                ExitCode::SUCCESS
            }
            None => {
                eprintln!("unknown preset {name:?}");
                ExitCode::from(2)
            }
        },
        Cmd::Run { config, preset, out_dir, seed_override } => {
            let result = load(config, preset).and_then(|cfg| run(&cfg, &RunOptions { out_dir, seed_override }));
            match result {
                Ok(report) => {
                    for name in report.results.keys() {
                        println!("ran  {name}");
                    }
                    for a in &report.assertions {
                        let tag = if a.pass { "ok  " } else { "FAIL" };
                        println!("{tag} {}: {} = {:e} (bound {:e})", a.analysis, a.name, a.measured, a.bound);
                    }
                    for e in &report.errors {
                        eprintln!("error: {e}");
                    }
                    if report.pass {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(1)
                    }
                }
                Err(e) => {
                    eprintln!("{e}");
                    ExitCode::from(e.exit_code() as u8)
                }
            }
        }
    }
}
