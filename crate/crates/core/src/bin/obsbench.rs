use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info, warn};

use obsbench::pipeline::report::audit_manifest;
use obsbench::pipeline::{emit_report, threads_from_env, with_workers, CellFilter, Study, StudyConfig};
use obsbench::Result;

#[derive(Parser)]
#[command(name = "obsbench", version, about = "Task-based image quality study runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Full study: simulate, reconstruct, evaluate, report.
    Run(Common),
    /// Phantoms and noiseless projections.
    Simulate(Common),
    /// Dose scaling, noise and OSEM reconstruction of simulated cases.
    Reconstruct(Common),
    /// Denoising, fidelity metrics and observer analysis on cached volumes.
    Evaluate(Common),
    /// Collect evaluated cells into CSV tables and a manifest.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// TOML study configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `master_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Restrict to matching cells, e.g. `defect=1,dose=0.1,denoiser=none`. Repeatable.
    #[arg(long = "cell")]
    cells: Vec<CellFilter>,
    /// 400 test pairs, 128x128x114 grid and the clinical detector.
    #[arg(long)]
    paper_scale: bool,
}

impl Common {
    fn config(&self) -> Result<StudyConfig> {
        let mut cfg = match &self.config {
            Some(p) => StudyConfig::load(p)?,
            None => StudyConfig::default(),
        };
        if self.paper_scale {
            cfg = cfg.into_paper_scale();
        }
        if let Some(s) = self.seed {
            cfg.master_seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        Ok(cfg)
    }
}

enum Verb {
    Run,
    Simulate,
    Reconstruct,
    Evaluate,
    Report,
}

fn execute(verb: Verb, args: &Common) -> Result<bool> {
    let study = Study::new(args.config()?)?;
    let cells = study.plan(&args.cells);
    if cells.is_empty() {
        warn!("no cells match the given filters");
    }
    std::fs::write(study.output_dir().join("config.toml"), study.config().to_toml_string()?)
        .map_err(|e| obsbench::Error::Io {
            path: study.output_dir().join("config.toml"),
            source: e,
        })?;
    let log_failures = |stage: &str, failures: &[String]| {
        for f in failures {
            error!("{stage}: {f}");
        }
        failures.is_empty()
    };
    let mut ok = true;
    if matches!(verb, Verb::Run | Verb::Simulate) {
        ok &= log_failures("simulate", &study.simulate(&cells).failures);
    }
    if matches!(verb, Verb::Run | Verb::Reconstruct) {
        ok &= log_failures("reconstruct", &study.reconstruct(&cells).failures);
    }
    if matches!(verb, Verb::Run | Verb::Evaluate) {
        ok &= log_failures("evaluate", &study.evaluate(&cells)?.failures);
    }
    if matches!(verb, Verb::Run | Verb::Report) {
        let report = study.collect(&cells)?;
        for e in &report.errors {
            error!("cell {}: {}", e.id.label(), e.message);
        }
        let files = emit_report(&report, study.output_dir())?;
        let bad = audit_manifest(study.output_dir())?;
        if !bad.is_empty() {
            error!("manifest audit failed for {bad:?}");
            ok = false;
        }
        info!(
            "{} of {} cells complete; {} files in {}",
            report.cells.len(),
            cells.len(),
            files.len(),
            study.output_dir().display()
        );
        ok &= report.is_complete();
    }
    Ok(ok)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (verb, args) = match &cli.command {
        Command::Run(a) => (Verb::Run, a),
        Command::Simulate(a) => (Verb::Simulate, a),
        Command::Reconstruct(a) => (Verb::Reconstruct, a),
        Command::Evaluate(a) => (Verb::Evaluate, a),
        Command::Report(a) => (Verb::Report, a),
    };
    let outcome = threads_from_env().and_then(|threads| with_workers(threads, || execute(verb, args)))
        .and_then(|r| r);
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            error!("{e}");
            ExitCode::from(2)
        }
    }
}
