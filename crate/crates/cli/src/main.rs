//! `dgrec`: runs one pipeline stage per invocation against a run directory.

mod config;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, ValueEnum};
use dgrec::pipeline::{self, RunConfig};
use serde_json::{json, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Command {
    SynthData,
    TrainTokenizer,
    Tokenize,
    Train,
    Evaluate,
    Decode,
    Ablate,
}

#[derive(Debug, Parser)]
#[command(name = "dgrec", version = env!("DGREC_GIT_VERSION"), about = "Discrete-diffusion generative recommendation")]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// JSON run configuration; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    workdir: Option<PathBuf>,
    /// Seed copied into every component.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for parallel evaluation (default: logical cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Config overrides such as `decode.T=2`.
    overrides: Vec<String>,
}

enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn classify(e: anyhow::Error) -> Self {
        match e.downcast_ref::<dgrec::Error>() {
            Some(inner) if !inner.is_validation() => Failure::Runtime(e),
            _ => Failure::Validation(e),
        }
    }
}

fn prepare(cli: &Cli) -> Result<RunConfig> {
    config::check_overrides(&cli.overrides)?;
    let mut cfg = config::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(w) = &cli.workdir {
        cfg.paths.workdir = w.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let cfg = cfg.resolved();
    cfg.validate()?;
    if let Some(t) = cli.threads {
        anyhow::ensure!(t > 0, "--threads must be positive");
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(cfg)
}

fn run_stage(command: Command, cfg: &RunConfig) -> Result<Value> {
    Ok(match command {
        Command::SynthData => {
            pipeline::synth_data(cfg)?;
            json!({
                "interactions": cfg.paths.interactions,
                "embeddings": cfg.paths.embeddings,
                "labels": cfg.paths.labels,
            })
        }
        Command::TrainTokenizer => {
            let r = pipeline::train_tokenizer_stage(cfg)?;
            json!({
                "recon_mse": r.recon_mse,
                "data_variance": r.data_variance,
                "codes_used": r.codes_used,
                "collision_rate": r.collision_rate,
            })
        }
        Command::Tokenize => {
            let c = pipeline::tokenize_stage(cfg)?;
            json!({ "items": c.len(), "collision_rate": c.collision_rate() })
        }
        Command::Train => {
            let o = pipeline::train_stage(cfg)?;
            json!({ "epochs": o.log.len(), "steps": o.steps, "best_epoch": o.best_epoch, "best_val_recall@10": o.best_val })
        }
        Command::Evaluate => serde_json::to_value(pipeline::evaluate_stage(cfg)?)?,
        Command::Decode => json!({ "generations": pipeline::decode_stage(cfg)?.len() }),
        Command::Ablate => json!({ "rows": pipeline::ablate_stage(cfg)?.len() }),
    })
}

fn write_json(path: PathBuf, value: &Value) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value)?;
    dgrec::io::atomic_write(&path, &bytes)?;
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let started = Instant::now();
    let cfg = prepare(cli).map_err(Failure::Validation)?;
    let name = cli.command.to_possible_value().expect("named").get_name().to_string();
    log::info!("{name}: workdir {}", cfg.paths.workdir.display());
    let summary = run_stage(cli.command, &cfg).map_err(Failure::classify)?;
    let finish = || -> Result<()> {
        write_json(cfg.artifact("config.json"), &serde_json::to_value(&cfg)?)?;
        let manifest = json!({
            "command": name,
            "version": env!("DGREC_GIT_VERSION"),
            "config_sha256": config::config_hash(&cfg)?,
            "seed": cfg.seed,
            "threads": rayon::current_num_threads(),
            "wall_time_s": started.elapsed().as_secs_f64(),
            "summary": summary,
        });
        write_json(cfg.artifact("manifest.json"), &manifest)?;
        println!("{}", serde_json::to_string(&summary)?);
        Ok(())
    };
    finish().map_err(Failure::Runtime)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.to_string();
            let first = message.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("{}", json!({ "error": "validation", "message": first }));
            return ExitCode::from(1);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("{}", json!({ "error": "validation", "message": format!("{e:#}") }));
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("{}", json!({ "error": "runtime", "message": format!("{e:#}") }));
            ExitCode::from(2)
        }
    }
}
