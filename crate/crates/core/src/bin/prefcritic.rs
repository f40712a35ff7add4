use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};
use prefcritic::critic::HumanQueue;
use prefcritic::pipeline::{run_stage, PipelineConfig, PipelineError, RunOptions, Stage};
use prefcritic::service::{self, AppState};

/// Preference-labeling and reward-learning pipeline.
#[derive(Parser)]
#[command(version)]
struct Cli {
    /// TOML config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replaces the global seed and the policy seed list.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
    /// Rerun stages even when up to date.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Record mixed-quality trajectories.
    Collect,
    /// Label segment pairs and write preference and instruction datasets.
    GenDataset,
    /// Fit the reward-model ensembles.
    TrainRm,
    /// Train policies and log success curves.
    TrainPolicy,
    /// Write accuracy, curve and return reports.
    Eval,
    /// Serve the labeling API (and UI bundle) over the human queue.
    Serve,
    /// Run one stage by name, or every stage in order.
    Run {
        /// collect, label, train_rm, train_policy, evaluate or all.
        #[arg(long, default_value = "all")]
        stage: String,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(s) = cli.seed_override {
        cfg.override_seed(s);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stages(verb: &Verb) -> Result<Vec<Stage>, PipelineError> {
    Ok(match verb {
        Verb::Collect => vec![Stage::Collect],
        Verb::GenDataset => vec![Stage::Label],
        Verb::TrainRm => vec![Stage::TrainRm],
        Verb::TrainPolicy => vec![Stage::TrainPolicy],
        Verb::Eval => vec![Stage::Evaluate],
        Verb::Run { stage } if stage == "all" => Stage::ALL.to_vec(),
        Verb::Run { stage } => vec![stage.parse().map_err(PipelineError::Config)?],
        Verb::Serve => Vec::new(),
    })
}

fn serve(cfg: &PipelineConfig) -> Result<(), PipelineError> {
    let queue = HumanQueue::open(&cfg.queue_dir())
        .map_err(|e| PipelineError::Config(format!("opening query store: {e}")))?
        .with_lease(Duration::from_secs(cfg.service.lease_s));
    let state = AppState {
        queue: Arc::new(queue),
        token: cfg.service.token.clone(),
    };
    service::serve_until_interrupt(&cfg.service.addr(), state, cfg.service.ui_dir.clone()).map_err(|e| {
        PipelineError::StageFailed {
            stage: Stage::Label,
            message: format!("label service: {e}"),
        }
    })
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let cfg = load_config(cli)?;
    if let Verb::Serve = cli.verb {
        return serve(&cfg);
    }
    let opts = RunOptions { force: cli.force };
    for stage in stages(&cli.verb)? {
        let out = run_stage(stage, &cfg, &opts)?;
        let status = if out.skipped() { "skipped" } else { "done" };
        println!(
            "{stage}: {status} in {:.1}s{}",
            out.entry.duration_ms / 1e3,
            out.entry.note.as_deref().map(|n| format!(" ({n})")).unwrap_or_default()
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
