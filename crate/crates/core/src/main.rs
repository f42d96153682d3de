use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use causerl::harness::{
    cmd_ablate, cmd_evaluate, cmd_gen_corpus, cmd_gradcheck, cmd_train_eci, cmd_train_selfrl, Dataset, Manifest,
    RunConfig,
};

#[derive(Parser)]
#[command(name = "causerl", version, about = "Causal representation learning for event causality identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML config, or a manifest.json from an earlier run.
    #[arg(long)]
    config: PathBuf,
    /// Run with this single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic corpora and fold plan.
    GenCorpus(Common),
    /// Train the self-supervised teacher.
    TrainSelfrl(Common),
    /// Train one identifier with one fold held out.
    TrainEci(Common),
    /// Cross-validate the configured variant.
    Evaluate(Common),
    /// Finite-difference check of every loss surface.
    Gradcheck(Common),
    /// Run the ablation matrix.
    Ablate(Common),
}

fn load(common: &Common) -> causerl::Result<(RunConfig, Option<Manifest>)> {
    let mut cfg = RunConfig::load(&common.config)?;
    let manifest = if common.config.extension().is_some_and(|e| e == "json") {
        Some(Manifest::load(&common.config)?)
    } else {
        None
    };
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    Ok((cfg, manifest))
}

fn dataset(cfg: &RunConfig, manifest: &Option<Manifest>) -> causerl::Result<Dataset> {
    let data = Dataset::from_config(cfg)?;
    if let Some(m) = manifest {
        m.verify_corpus(&data)?;
    }
    Ok(data)
}

fn run(cli: Cli) -> causerl::Result<bool> {
    let start = Instant::now();
    let ok = match cli.command {
        Command::GenCorpus(c) => {
            let (cfg, _) = load(&c)?;
            let data = cmd_gen_corpus(&cfg)?;
            println!(
                "wrote {} external statements and {} examples to {}",
                data.external.len(),
                data.records.len(),
                cfg.out_dir.display()
            );
            true
        }
        Command::TrainSelfrl(c) => {
            let (cfg, m) = load(&c)?;
            let data = dataset(&cfg, &m)?;
            cmd_train_selfrl(&cfg, &data)?;
            println!("teacher written to {}", cfg.out_dir.join("teacher.json").display());
            true
        }
        Command::TrainEci(c) => {
            let (cfg, m) = load(&c)?;
            let data = dataset(&cfg, &m)?;
            let row = cmd_train_eci(&cfg, &data)?;
            println!(
                "{} fold {}: P={:.4} R={:.4} F1={:.4}",
                row.variant, row.fold, row.precision, row.recall, row.f1
            );
            true
        }
        Command::Evaluate(c) => {
            let (cfg, m) = load(&c)?;
            let data = dataset(&cfg, &m)?;
            let report = cmd_evaluate(&cfg, &data)?;
            print!("{}", report.summary());
            true
        }
        Command::Gradcheck(c) => {
            let (cfg, _) = load(&c)?;
            let s = cmd_gradcheck(&cfg)?;
            for r in &s.surfaces {
                println!(
                    "{:<16} {} max_rel_error={:.3e} checked={}",
                    r.surface,
                    if r.passed { "PASS" } else { "FAIL" },
                    r.max_rel_error,
                    r.checked
                );
            }
            s.passed
        }
        Command::Ablate(c) => {
            let (cfg, m) = load(&c)?;
            let data = dataset(&cfg, &m)?;
            let report = cmd_ablate(&cfg, &data, &mut |r| {
                eprintln!(
                    "seed {} fold {} {:<20} F1={:.4} (epoch {})",
                    r.seed, r.fold, r.variant, r.f1, r.best_epoch
                )
            })?;
            print!("{}", report.summary());
            true
        }
    };
    eprintln!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(ok)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
