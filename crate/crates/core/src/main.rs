use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use permubench::aggregate::Regime;
use permubench::attacks::{AttackKind, AttackSpec, PGD_STEPS};
use permubench::corruptions::{self, CorruptionKind, CorruptionSpec};
use permubench::data::{DatasetName, ImageBatch};
use permubench::metrics::EVAL_CHUNK;
use permubench::models::{Architecture, Network};
use permubench::orchestrator::{self, ReportScope, RunConfig, RunKey};

#[derive(Parser)]
#[command(name = "permubench", version, about = "Few-shot robustness benchmark for compact vision transformers and MIL baselines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every run of the (sliced) matrix
    Run(Common),
    /// Render tables, ranks, retention and severity curves from a store
    Report(Common),
    /// Write corrupted test images as NPY files
    Corrupt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: DatasetName,
        #[arg(long)]
        kind: CorruptionKind,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        severity: u8,
        /// Seed of the corruption randomness
        #[arg(long, default_value_t = 3)]
        seed: u64,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Write adversarial test images for a trained run as NPY files
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: DatasetName,
        #[arg(long)]
        model: Architecture,
        /// Training seed of the stored run
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        attack: AttackKind,
        /// Budget in units of 1/255
        #[arg(long)]
        epsilon: u32,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Run the built-in invariant checks
    Selftest,
    /// Load external per-cell means for aggregation-only reporting
    Inject {
        /// CSV with dataset, model, regime, mean and optional std columns
        means: PathBuf,
        #[arg(long, default_value = "results")]
        out_dir: PathBuf,
    },
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON run configuration; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<Architecture>>,
    #[arg(long, value_delimiter = ',')]
    datasets: Option<Vec<DatasetName>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    regimes: Option<Vec<Regime>>,
    /// Worker threads; 0 uses every core
    #[arg(long)]
    jobs: Option<usize>,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.data_dir {
            cfg.data_dir = Some(v.clone());
        }
        if let Some(v) = &self.out_dir {
            cfg.out_dir = v.clone();
        }
        if let Some(v) = &self.models {
            cfg.models = v.clone();
        }
        if let Some(v) = &self.datasets {
            cfg.datasets = v.clone();
        }
        if let Some(v) = &self.seeds {
            cfg.seeds = v.clone();
        }
        if let Some(v) = &self.regimes {
            cfg.regimes = v.clone();
        }
        if let Some(v) = self.jobs {
            cfg.jobs = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn scope(&self) -> ReportScope {
        ReportScope {
            datasets: self.datasets.clone(),
            models: self.models.clone(),
            seeds: self.seeds.clone(),
            regimes: self.regimes.clone(),
        }
    }
}

fn limited(batch: &ImageBatch, limit: Option<usize>) -> ImageBatch {
    match limit {
        Some(n) if n < batch.len() => batch.select(&(0..n).collect::<Vec<_>>()),
        _ => batch.clone(),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(common) => {
            let cfg = common.config()?;
            let n_runs = orchestrator::plan(&cfg).len();
            log::info!("{n_runs} run(s), {} records each", cfg.records_per_run());
            let summary = orchestrator::run_matrix(&cfg)?;
            println!(
                "trained {}, skipped {}, failed {}; {} records in {}",
                summary.trained.len(),
                summary.skipped.len(),
                summary.failed.len(),
                summary.records,
                cfg.out_dir.display()
            );
            if !summary.ok() {
                let failed: Vec<String> = summary.failed.iter().map(|(k, e)| format!("{k}: {e}")).collect();
                bail!(orchestrator::OrchestratorError::RunsFailed(failed));
            }
        }
        Command::Report(common) => {
            let cfg = common.config()?;
            let report = orchestrator::report(&cfg.out_dir, &common.scope(), &cfg.setting_grid())?;
            for (regime, ranks) in &report.ranks {
                let row: Vec<String> = ranks.iter().map(|(m, r)| format!("{} {r:.2}", m.display_name())).collect();
                println!("mean rank ({regime}): {}", row.join(", "));
            }
            println!("wrote {} file(s) to {}", report.files.len(), cfg.out_dir.display());
        }
        Command::Corrupt { common, dataset, kind, severity, seed, limit, output } => {
            let cfg = common.config()?;
            let ds = orchestrator::load_dataset(&cfg, dataset)?;
            let spec = CorruptionSpec::new(kind, severity, seed)?;
            let out = corruptions::apply_with(&cfg.corruptions, &spec, &limited(&ds.test, limit))?;
            orchestrator::dump_batch(&out, &output)?;
            println!("wrote {} image(s) ({}) to {}", out.len(), spec.setting(), output.display());
        }
        Command::Attack { common, dataset, model, seed, attack, epsilon, limit, output } => {
            let cfg = common.config()?;
            let key = RunKey { dataset, model, seed };
            let (spec, params) = orchestrator::load_params(&cfg, &key).with_context(|| format!("loading trained run {key}"))?;
            let ds = orchestrator::load_dataset(&cfg, dataset)?;
            let a = AttackSpec::new(attack, epsilon);
            let out = a.run_chunked(&Network::new(&spec, &params), &limited(&ds.test, limit), EVAL_CHUNK)?;
            orchestrator::dump_batch(&out, &output)?;
            let steps = if attack == AttackKind::Pgd { PGD_STEPS } else { 1 };
            println!("wrote {} image(s) ({}, {steps} step(s)) to {}", out.len(), a.setting(), output.display());
        }
        Command::Selftest => {
            let results = orchestrator::selftest();
            for r in &results {
                println!("{} {}: {}", if r.passed { "ok  " } else { "FAIL" }, r.name, r.detail);
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                bail!("{failed} self-test check(s) failed");
            }
        }
        Command::Inject { means, out_dir } => {
            let table = orchestrator::inject(&means, &out_dir)?;
            println!("injected {} cell(s) into {}", table.len(), out_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
