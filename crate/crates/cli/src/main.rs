use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use underreport::deconv::{Loss, PenaltyKind};
use underreport::pipeline::{run_pipeline, PipelineConfig, Run};
use underreport::series::AgeGroup;

/// Reconstruct under-reported daily cases from hospital admissions.
#[derive(Parser, Debug)]
#[command(name = "underreport", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML configuration; flags below override its values
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Long-format series CSV (date,age_group,quantity,value)
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Population CSV (age_group,population)
    #[arg(long, global = true)]
    population: Option<PathBuf>,
    #[arg(short, long, global = true)]
    output_dir: Option<PathBuf>,
    /// Pre-window length L (-1 for none)
    #[arg(long, global = true, allow_negative_numbers = true)]
    pre_window: Option<i64>,
    #[arg(long, global = true, value_parser = parse_penalty)]
    penalty: Option<PenaltyKind>,
    #[arg(long, global = true, value_parser = parse_loss)]
    loss: Option<Loss>,
    /// Use this lambda instead of Cp selection
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Log more (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Args, Debug)]
struct BootArgs {
    /// Seed for every bootstrap stream
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    replicates_ident: Option<usize>,
    #[arg(long)]
    replicates_deconv: Option<usize>,
    /// Re-select lambda by Cp inside every reconstruction replicate
    #[arg(long)]
    reselect_lambda: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate the input and write the smoothed series
    Preprocess,
    /// Fit the kernel of every cohort on the second wave
    Identify,
    /// Estimate the noise variance and pick lambda by Cp
    SelectLambda,
    /// Reconstruct first-wave cases
    Deconvolve,
    /// Bootstrap bands for the kernels and the reconstructions
    Bootstrap(BootArgs),
    /// Write tables, bands and the summary from the stored stages
    Report,
    /// Every stage in order
    RunAll(BootArgs),
    /// Print the effective configuration as TOML
    Config,
}

fn parse_penalty(s: &str) -> Result<PenaltyKind, String> {
    match s {
        "ridge" => Ok(PenaltyKind::Ridge),
        "first_difference" => Ok(PenaltyKind::FirstDifference),
        "second_difference" => Ok(PenaltyKind::SecondDifference),
        _ => Err("expected ridge, first_difference or second_difference".into()),
    }
}

fn parse_loss(s: &str) -> Result<Loss, String> {
    match s {
        "quadratic" => Ok(Loss::Quadratic),
        "l1" => Ok(Loss::L1),
        _ => Err("expected quadratic or l1".into()),
    }
}

fn relative_to(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn load_config(c: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &c.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let mut cfg: PipelineConfig =
                toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            // paths inside the file are relative to the file
            let base = path.parent().unwrap_or(Path::new("."));
            relative_to(base, &mut cfg.data);
            relative_to(base, &mut cfg.output_dir);
            if let Some(p) = cfg.population.as_mut() {
                relative_to(base, p);
            }
            cfg
        }
        None => PipelineConfig::default(),
    };
    if let Some(p) = &c.data {
        cfg.data = p.clone();
    }
    if let Some(p) = &c.population {
        cfg.population = Some(p.clone());
    }
    if let Some(p) = &c.output_dir {
        cfg.output_dir = p.clone();
    }
    if let Some(l) = c.pre_window {
        cfg.pre_window = l;
    }
    if let Some(p) = c.penalty {
        cfg.penalty = p;
    }
    if let Some(l) = c.loss {
        cfg.loss = l;
    }
    if let Some(l) = c.lambda {
        cfg.lambda.fixed = Some(l);
    }
    Ok(cfg)
}

fn apply_boot(cfg: &mut PipelineConfig, b: &BootArgs) {
    cfg.bootstrap.seed = b.seed;
    if let Some(n) = b.replicates_ident {
        cfg.bootstrap.n_replicates_ident = n;
    }
    if let Some(n) = b.replicates_deconv {
        cfg.bootstrap.n_replicates_deconv = n;
    }
    if b.reselect_lambda {
        cfg.bootstrap.reselect_lambda = true;
    }
}

fn report_failures(failures: &[(AgeGroup, String)]) -> ExitCode {
    if failures.is_empty() {
        return ExitCode::SUCCESS;
    }
    for (g, e) in failures {
        warn!("cohort {g} failed: {e}");
    }
    eprintln!("{} cohort(s) failed; see the log", failures.len());
    ExitCode::from(2)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = load_config(&cli.common)?;
    if let Command::Bootstrap(b) | Command::RunAll(b) = &cli.cmd {
        apply_boot(&mut cfg, b);
    }
    cfg.validate()?;
    info!("output directory {}", cfg.output_dir.display());

    let failures = match cli.cmd {
        Command::Config => {
            print!("{}", toml::to_string(&cfg)?);
            return Ok(ExitCode::SUCCESS);
        }
        Command::RunAll(_) => run_pipeline(&cfg)?.1,
        Command::Preprocess => {
            let run = Run::new(cfg)?;
            run.write_smoothed()?;
            run.failures()
        }
        Command::Identify => {
            let mut run = Run::new(cfg)?;
            run.identify()?;
            run.write_identification()?;
            run.failures()
        }
        Command::SelectLambda => {
            let mut run = Run::new(cfg)?;
            run.read_identification()?;
            run.select()?;
            run.write_selection()?;
            run.failures()
        }
        Command::Deconvolve => {
            let mut run = Run::new(cfg)?;
            run.read_identification()?;
            run.read_selection()?;
            run.deconvolve()?;
            run.write_reconstruction()?;
            run.failures()
        }
        Command::Bootstrap(_) => {
            let mut run = Run::new(cfg)?;
            run.read_identification()?;
            run.read_selection()?;
            run.bootstrap()?;
            run.write_bootstrap()?;
            run.failures()
        }
        Command::Report => {
            let mut run = Run::new(cfg)?;
            run.read_identification()?;
            run.read_selection()?;
            run.deconvolve()?;
            run.read_bootstrap()?;
            run.write_report()?;
            run.failures()
        }
    };
    if failures.len() == AgeGroup::COUNT {
        bail!("every cohort failed");
    }
    Ok(report_failures(&failures))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // usage errors are fatal (1); 2 is reserved for partial failures
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
