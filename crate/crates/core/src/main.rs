use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cl_dialeval::harness::{
    self, ablate_training_size, aggregate, gap_experiment, report_from_dir, RunConfig, RunOptions,
    SequenceReport,
};
use cl_dialeval::strategies::StrategyKind;
use cl_dialeval::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "cl-dialeval",
    version,
    about = "Continual evaluation of dialogue systems"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated strategy names.
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<String>>,
    /// Comma-separated system ids in sequence order.
    #[arg(long, value_delimiter = ',')]
    order: Option<Vec<String>>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic corpora as JSONL files.
    Generate(Common),
    /// Pretrain the encoder and save the shared initialization.
    Pretrain(Common),
    /// Run the sequential evaluation protocol.
    Run {
        #[command(flatten)]
        common: Common,
        /// Continue from persisted checkpoints and records.
        #[arg(long)]
        resume: bool,
        /// Stop after this step.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Training-size ablation.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "1.0,0.5,0.1")]
        fractions: Vec<f64>,
    },
    /// In-scope versus out-of-scope gap of a pooled evaluator.
    Gap {
        #[command(flatten)]
        common: Common,
        /// Number of in-scope systems; every valid k when omitted.
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
    },
    /// Rebuild reports from the records of a finished or partial run.
    Report {
        /// Output directory of an earlier `run`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seeds = vec![seed];
    }
    if let Some(out) = &common.out {
        config.out_dir = out.clone();
    }
    if let Some(names) = &common.strategies {
        config.strategies = names
            .iter()
            .map(|n| n.parse())
            .collect::<Result<Vec<StrategyKind>>>()?;
    }
    if let Some(order) = &common.order {
        config.order = order.clone();
    }
    config.validate()?;
    Ok(config)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Generate(common) => {
            let config = load_config(&common)?;
            for &seed in &config.seeds {
                for path in harness::write_corpora(&config, seed, &seed_dir(&config.out_dir, seed))?
                {
                    println!("{}", path.display());
                }
            }
        }
        Command::Pretrain(common) => {
            let config = load_config(&common)?;
            for &seed in &config.seeds {
                let path = seed_dir(&config.out_dir, seed).join("init.json");
                let prepared = harness::write_pretrained(&config, seed, &path)?;
                match prepared.pretrain_accuracy {
                    Some(a) => println!("{}: matching accuracy {a:.4}", path.display()),
                    None => println!("{}: pretraining disabled", path.display()),
                }
            }
        }
        Command::Run {
            common,
            resume,
            stop_after,
        } => {
            let config = load_config(&common)?;
            let opts = |seed| RunOptions {
                work_dir: Some(seed_dir(&config.out_dir, seed)),
                resume,
                stop_after,
            };
            let mut reports = Vec::new();
            for &seed in &config.seeds {
                let report = harness::run_sequence(&config, seed, &opts(seed))?;
                report.write(&seed_dir(&config.out_dir, seed))?;
                for s in &report.strategies {
                    if let Some(e) = &s.error {
                        eprintln!("seed {seed}, {}: {e}", s.strategy);
                    }
                }
                reports.push(report);
            }
            let summary = aggregate(&reports)?;
            summary.write(&config.out_dir)?;
            write(
                &config.out_dir.join("timings.csv"),
                &SequenceReport::timings_csv(&reports),
            )?;
            print!("{}", summary.to_markdown());
            if summary.strategies.iter().any(|s| s.error.is_some()) {
                return Err(Error::Invalid("at least one strategy failed".into()));
            }
        }
        Command::Ablate { common, fractions } => {
            let config = load_config(&common)?;
            let report = ablate_training_size(&config, &fractions)?;
            write(&config.out_dir.join("ablation.csv"), &report.to_csv())?;
            print!("{}", report.to_csv());
        }
        Command::Gap { common, k } => {
            let config = load_config(&common)?;
            let ks = match k {
                Some(ks) => ks,
                None => {
                    let n = config.load_systems(config.seeds[0])?.len();
                    (1..n).collect()
                }
            };
            let report = gap_experiment(&config, &ks)?;
            write(&config.out_dir.join("gap.csv"), &report.to_csv())?;
            print!("{}", report.to_csv());
        }
        Command::Report { input, out } => {
            let out = out.unwrap_or_else(|| input.clone());
            let mut seeds: Vec<(u64, PathBuf)> = fs::read_dir(&input)
                .map_err(|e| Error::io(&input, e))?
                .filter_map(|entry| {
                    let path = entry.ok()?.path();
                    let seed = path
                        .file_name()?
                        .to_str()?
                        .strip_prefix("seed-")?
                        .parse()
                        .ok()?;
                    path.is_dir().then_some((seed, path))
                })
                .collect();
            seeds.sort();
            if seeds.is_empty() {
                return Err(Error::Invalid(format!(
                    "{} holds no seed-* run directories",
                    input.display()
                )));
            }
            let reports = seeds
                .iter()
                .map(|(seed, dir)| report_from_dir(dir, *seed))
                .collect::<Result<Vec<_>>>()?;
            let summary = aggregate(&reports)?;
            summary.write(&out)?;
            print!("{}", summary.to_markdown());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Ingestion(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
