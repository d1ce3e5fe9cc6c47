use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use genunc::pipeline::{cmd_gen_dataset, cmd_run_to, ExperimentConfig, RunManifest, Target, MANIFEST_FILE};
use genunc::{Error, Result};

/// Train toy diffusion and flow-matching models, score every generation by
/// its posterior-predictive entropy and filter the uncertain ones out.
#[derive(Parser, Debug)]
#[command(name = "genunc", version)]
struct Cli {
    /// Experiment configuration (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Worker threads for sampling, scoring and metrics.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample the toy mode mixture.
    GenDataset {
        /// Write the training set here instead of into the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `dataset.num_samples` when writing with `--out`.
        #[arg(long)]
        num_samples: Option<usize>,
    },
    /// Train the base model and, for ensembles, every member.
    Train,
    /// Fit the last-layer Laplace posterior on the base model.
    FitLaplace,
    /// Generate samples and score them.
    Score,
    /// Rank samples and select kept and random subsets.
    Filter,
    /// Write metric reports for every subset.
    Eval,
    /// Write figures and their CSV twins.
    Plot,
    /// Every stage.
    Run,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::parse(&format!("schema_version = {}\n", genunc::pipeline::SCHEMA_VERSION))?,
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.output_dir {
        cfg.output_dir = Some(d.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn summarize(manifest: &RunManifest, out: &std::path::Path) {
    for s in &manifest.stages {
        let state = if s.cache_hit { "cached" } else { "ran" };
        println!(
            "{:<16} {:<7} {:>8.2}s  {}",
            s.name,
            state,
            s.seconds,
            out.join(&s.dir).display()
        );
    }
    if let Some(nfe) = manifest.nfe {
        println!(
            "nfe per seed: generation {} scoring {}; total {}",
            nfe.generation_per_seed, nfe.scoring_per_seed, nfe.total
        );
    }
    println!("manifest: {}", out.join(MANIFEST_FILE).display());
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot start {n} threads: {e}")))?;
    }
    let cfg = load_config(&cli)?;
    let target = match &cli.command {
        Command::GenDataset {
            out: Some(path),
            num_samples,
        } => {
            let data = cmd_gen_dataset(&cfg, num_samples.unwrap_or(cfg.dataset.num_samples))?;
            let f = File::create(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            data.write_csv(BufWriter::new(f))?;
            println!("wrote {} samples to {}", data.len(), path.display());
            return Ok(());
        }
        Command::GenDataset { .. } => Target::Dataset,
        Command::Train => Target::Train,
        Command::FitLaplace => Target::Laplace,
        Command::Score => Target::Score,
        Command::Filter => Target::Filter,
        Command::Eval => Target::Eval,
        Command::Plot | Command::Run => Target::Plot,
    };
    let out = cfg
        .output_dir
        .clone()
        .ok_or_else(|| Error::Config("no output directory: pass --output-dir or set output_dir".into()))?;
    match cmd_run_to(&cfg, &out, target) {
        Ok(manifest) => {
            summarize(&manifest, &out);
            Ok(())
        }
        Err(e) => {
            if let Ok(m) = RunManifest::load(&out.join(MANIFEST_FILE)) {
                summarize(&m, &out);
            }
            Err(e)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
