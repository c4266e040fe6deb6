use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use latshield_cli::pipeline::CriticVariant;
use latshield_cli::{exit_code, Pipeline, PipelineConfig, Stage, Suite};
use latshield_core::artifacts::{load_bundle, RunLayout};
use latshield_core::filter::FilterMode;
use latshield_core::{Error, Result};
use latshield_service::{spawn_server, AppState};
use log::{error, info};

#[derive(Parser)]
#[command(name = "latshield", version, about = "Latent safety filter pipeline")]
struct Cli {
    /// JSON config; omitted fields keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Leaf override, e.g. `--set grid.nx=41`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE", global = true)]
    overrides: Vec<String>,
    /// Re-run stages even when their stamps are current.
    #[arg(long, global = true)]
    force: bool,
    /// Single worker thread everywhere.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum CriticArg {
    Latent,
    Priv,
    Risk,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Table1,
    Rollouts,
    Ablation,
    Cmdp,
    Teleop,
    Models,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum ModeArg {
    LatentHj,
    PrivHj,
    Cmdp,
    Off,
}

#[derive(Subcommand)]
enum Cmd {
    GenData,
    SolveGrid,
    TrainWm,
    TrainClassifier,
    TrainCritic {
        #[arg(long, value_enum)]
        variant: CriticArg,
    },
    Eval {
        #[arg(long, value_enum, default_value = "all")]
        suite: SuiteArg,
    },
    /// Serve teleoperation sessions over a websocket at `/ws`.
    Serve {
        /// Run directory holding the trained models (defaults to the config's output_dir).
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
        #[arg(long)]
        bind: Option<String>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Every stage in order, then every eval suite.
    All,
}

fn stages(cmd: &Cmd) -> Vec<Stage> {
    match cmd {
        Cmd::GenData => vec![Stage::GenData],
        Cmd::SolveGrid => vec![Stage::SolveGrid],
        Cmd::TrainWm => vec![Stage::TrainWm],
        Cmd::TrainClassifier => vec![Stage::TrainClassifier],
        Cmd::TrainCritic { variant } => vec![Stage::TrainCritic(match variant {
            CriticArg::Latent => CriticVariant::Latent,
            CriticArg::Priv => CriticVariant::Priv,
            CriticArg::Risk => CriticVariant::Risk,
        })],
        Cmd::Eval { suite } => {
            let one = |s| vec![Stage::Eval(s)];
            match suite {
                SuiteArg::Table1 => one(Suite::Table1),
                SuiteArg::Rollouts => one(Suite::Rollouts),
                SuiteArg::Ablation => one(Suite::Ablation),
                SuiteArg::Cmdp => one(Suite::Cmdp),
                SuiteArg::Teleop => one(Suite::Teleop),
                SuiteArg::Models => one(Suite::Models),
                SuiteArg::All => Suite::ALL.iter().map(|&s| Stage::Eval(s)).collect(),
            }
        }
        Cmd::All => Stage::all(),
        Cmd::Serve { .. } => vec![],
    }
}

fn serve(mut cfg: PipelineConfig, dir: Option<PathBuf>, bind: Option<String>, mode: Option<ModeArg>, epsilon: Option<f64>) -> Result<()> {
    let dir = dir.unwrap_or_else(|| cfg.output_dir.clone());
    if let Some(b) = bind {
        cfg.serve.bind = b;
    }
    if let Some(m) = mode {
        cfg.serve.service.filter.mode = match m {
            ModeArg::LatentHj => FilterMode::LatentHj,
            ModeArg::PrivHj => FilterMode::PrivHj,
            ModeArg::Cmdp => FilterMode::Cmdp,
            ModeArg::Off => FilterMode::Off,
        };
    }
    if let Some(e) = epsilon {
        cfg.serve.service.filter.epsilon = e;
    }
    let addr = cfg
        .serve
        .bind
        .parse()
        .map_err(|e| Error::Config(format!("bind address `{}`: {e}", cfg.serve.bind)))?;
    let bundle = Arc::new(load_bundle(&RunLayout::new(dir))?);
    let state = AppState::new(bundle, cfg.serve.service)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let (local, handle) = spawn_server(addr, state).await?;
        info!("serving ws://{local}/ws ({})", cfg.serve.service.filter.mode.as_str());
        let _ = handle.await;
        Ok(())
    })
}

fn run(cli: Cli) -> Result<()> {
    if cli.deterministic {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build_global()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    let cfg = PipelineConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Cmd::Serve {
        checkpoint_dir,
        bind,
        mode,
        epsilon,
    } = cli.command
    {
        return serve(cfg, checkpoint_dir, bind, mode, epsilon);
    }
    let p = Pipeline::new(cfg, cli.force);
    info!("config hash {}", p.config_hash());
    for stage in stages(&cli.command) {
        p.run(stage)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
