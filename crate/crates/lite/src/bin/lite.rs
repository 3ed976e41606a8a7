use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lite::config::ExperimentConfig;
use lite::error::Result;
use lite::flops::model_flops;
use lite::model::ModelConfig;
use lite::pipeline::{self, Workspace};

#[derive(Parser)]
#[command(
    name = "lite",
    version,
    about = "Token-selection experiments on a small video transformer"
)]
struct Cli {
    /// Experiment config (JSON); defaults to the built-in desk config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for training stages.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Workspace directory for all artifacts.
    #[arg(long, global = true, default_value = "runs/desk")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic video dataset.
    GenData,
    /// Train the backbone classifier on the train split.
    TrainBackbone,
    /// Dump per-token oracle scores for every clip.
    ComputeOracle,
    /// Train the token selector against the oracle dumps.
    TrainSelector,
    /// Train the confidence proxy on downsampled clips.
    TrainProxy,
    /// Print the analytical FLOPs report for one retention ratio.
    Flops {
        #[arg(long, default_value_t = 1.0)]
        p_ratio: f64,
        /// Use the published large-model geometry instead of the config's.
        #[arg(long)]
        paper_scale: bool,
        /// Add the selector's cost to the report.
        #[arg(long)]
        include_selector: bool,
        /// Add the confidence proxy's cost to the report.
        #[arg(long)]
        include_proxy: bool,
    },
    /// Evaluate every (policy, p_ratio, seed) cell on the test split.
    Sweep,
    /// Emit the histogram, decay, and adaptive-budget reports.
    Report,
}

fn load_config(path: &Option<PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => {
            let cfg = ExperimentConfig::default();
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(&cli.config)?;
    let ws = Workspace::new(&cli.out);
    match &cli.cmd {
        Cmd::GenData => {
            pipeline::cmd_gen_data(&cfg, &ws)?;
            eprintln!("dataset written to {}", ws.dataset_dir().display());
        }
        Cmd::TrainBackbone => {
            pipeline::cmd_train_backbone(&cfg, &ws, cli.seed)?;
            eprintln!("backbone checkpoint at {}", ws.backbone_stem().display());
        }
        Cmd::ComputeOracle => {
            pipeline::cmd_compute_oracle(&cfg, &ws)?;
            eprintln!("oracle dumps under {}", ws.oracle_dir().display());
        }
        Cmd::TrainSelector => {
            pipeline::cmd_train_selector(&cfg, &ws, cli.seed)?;
            eprintln!("selector checkpoint at {}", ws.selector_stem().display());
        }
        Cmd::TrainProxy => {
            pipeline::cmd_train_proxy(&cfg, &ws, cli.seed)?;
            eprintln!("proxy checkpoint at {}", ws.proxy_stem().display());
        }
        Cmd::Flops {
            p_ratio,
            paper_scale,
            include_selector,
            include_proxy,
        } => {
            let model = if *paper_scale {
                ModelConfig::paper_scale()
            } else {
                cfg.model.clone()
            };
            let proxy = include_proxy.then_some(&cfg.proxy.model);
            let report = model_flops(&model, *p_ratio, *include_selector, proxy)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Cmd::Sweep => {
            let outcome = pipeline::cmd_sweep(&cfg, &ws)?;
            eprintln!(
                "sweep: {} cells recomputed, {} reused; results at {}",
                outcome.recomputed,
                outcome.reused,
                ws.sweep_csv().display()
            );
        }
        Cmd::Report => {
            pipeline::cmd_report(&cfg, &ws)?;
            eprintln!("reports under {}", ws.report_dir().display());
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
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
