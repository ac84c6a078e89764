use std::path::PathBuf;
use std::process::ExitCode;

use chrono::NaiveDateTime;
use clap::{Args, Parser, Subcommand};
use log::error;

use stationflow::config::Variant;
use stationflow::ingest::parse_timestamp;
use stationflow::pipeline;
use stationflow::synth::SynthConfig;
use stationflow::{Error, PipelineConfig, Result};

#[derive(Parser)]
#[command(name = "stationflow", version, about = "Station-level bike flow forecasting")]
struct Cli {
    /// Pipeline config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Override the output directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Monte Carlo dropout iterations.
    #[arg(long, global = true)]
    iterations: Option<usize>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true, value_enum)]
    variant: Option<VariantArg>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum VariantArg {
    MultiGraph,
    DistanceOnly,
    InteractionOnly,
    CorrelationOnly,
    NoGraph,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::MultiGraph => Variant::MultiGraph,
            VariantArg::DistanceOnly => Variant::DistanceOnly,
            VariantArg::InteractionOnly => Variant::InteractionOnly,
            VariantArg::CorrelationOnly => Variant::CorrelationOnly,
            VariantArg::NoGraph => Variant::NoGraph,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Parse ride records into hourly flows and a station registry.
    Ingest,
    /// Build the station graphs from the training range.
    Graphs,
    /// Train the network.
    Train,
    /// Write forecasts with intervals for an hour range.
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// First forecast hour (default: start of the test range).
        #[arg(long, value_parser = parse_hour)]
        from: Option<NaiveDateTime>,
        /// End of the forecast range, exclusive.
        #[arg(long, value_parser = parse_hour)]
        to: Option<NaiveDateTime>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score the checkpoint and the baseline on the test range.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Generate a synthetic dataset with a matching config.
    Synth {
        /// Directory for the CSVs and config.toml.
        #[arg(long)]
        dir: PathBuf,
        /// Generator settings (TOML); defaults when omitted.
        #[arg(long)]
        synth_config: Option<PathBuf>,
        #[arg(long)]
        synth_seed: Option<u64>,
        /// Trips return to their origin instead of crossing stations.
        #[arg(long)]
        uncoupled: bool,
    },
}

fn parse_hour(s: &str) -> std::result::Result<NaiveDateTime, String> {
    parse_timestamp(s).ok_or_else(|| format!("unrecognized timestamp `{s}`"))
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    let mut cfg = PipelineConfig::load(path)?;
    let o = &cli.overrides;
    if let Some(d) = &o.output_dir {
        cfg.paths.output_dir = d.clone();
    }
    if let Some(s) = o.seed {
        cfg.train.seed = s;
    }
    if let Some(b) = o.iterations {
        cfg.uncertainty.iterations = b;
    }
    if let Some(a) = o.alpha {
        cfg.uncertainty.alpha = a;
    }
    if let Some(v) = o.variant {
        cfg.model.variant = v.into();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth {
            dir,
            synth_config,
            synth_seed,
            uncoupled,
        } => {
            let mut synth = match synth_config {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
                }
                None => SynthConfig::default(),
            };
            if let Some(s) = synth_seed {
                synth.seed = *s;
            }
            if *uncoupled {
                synth.coupled = false;
            }
            pipeline::cmd_synth(&synth, dir)?;
            println!("wrote {}", dir.join("config.toml").display());
        }
        Command::Ingest => println!("{}", pipeline::cmd_ingest(&load_config(cli)?)?),
        Command::Graphs => {
            for s in pipeline::cmd_graphs(&load_config(cli)?)? {
                println!("{s}");
            }
        }
        Command::Train => {
            let out = pipeline::cmd_train(&load_config(cli)?)?;
            for phase in [1u8, 2, 3] {
                let best = out
                    .log
                    .records
                    .iter()
                    .filter(|r| r.phase == phase)
                    .map(|r| r.val_rmse)
                    .fold(f64::INFINITY, f64::min);
                if best.is_finite() {
                    println!("phase {phase}: best validation RMSE {best:.4}");
                }
            }
        }
        Command::Predict {
            checkpoint,
            from,
            to,
            output,
        } => {
            let cfg = load_config(cli)?;
            let rows = pipeline::cmd_predict(&cfg, checkpoint.as_deref(), *from, *to, output.as_deref())?;
            println!("{rows} forecast rows written");
        }
        Command::Evaluate { checkpoint } => {
            let report = pipeline::cmd_evaluate(&load_config(cli)?, checkpoint.as_deref())?;
            print!("{}", report.table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
