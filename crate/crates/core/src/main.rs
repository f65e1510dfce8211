use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nightflow::commands::{self, EvalSource, GRADCHECK_TOL};
use nightflow::config::TrainConfig;
use nightflow::synthdata::{self, SampleConfig};
use nightflow::trainer::FlowModel;
use nightflow::{Error, Result};

#[derive(Parser)]
#[command(name = "nightflow", version, about = "Day-to-night optical flow adaptation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML training configuration; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Extra `key=value` configuration overrides, applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic day/night/event dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        samples: usize,
        /// Frame height and width in pixels.
        #[arg(long, default_value_t = 48)]
        size: usize,
        #[arg(long, default_value_t = 4.0)]
        max_displacement: f64,
    },
    /// Train stage 1, 2, 3 or an inclusive range such as 1..3.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        stage: String,
        #[arg(long)]
        data: PathBuf,
        /// Dataset scored after training; the training data is used if absent.
        #[arg(long)]
        holdout: Option<PathBuf>,
        /// Previous stage checkpoint; defaults to `<out>/stage{s-1}.ckpt`.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Score a checkpoint or a directory of .flo predictions.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        /// Directory of `<sample id>.flo` files.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// day, day_on_night, night or event.
        #[arg(long, default_value = "night")]
        model: String,
    },
    /// Write flow colorings, correlation maps and the correlation histogram.
    Viz {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "night")]
        model: String,
        /// Visualize only the first N samples.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Run the finite-difference gradient checks of every loss.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>, set: &[String]) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    for kv in set {
        cfg.set(kv)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate_hyper()?;
    Ok(cfg)
}

fn common_config(c: &Common) -> Result<TrainConfig> {
    load_config(c.config.as_deref(), c.seed, &c.set)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            common,
            samples,
            size,
            max_displacement,
        } => {
            let cfg = common_config(&common)?;
            let mut sc = SampleConfig {
                height: size,
                width: size,
                max_displacement,
                ..SampleConfig::default()
            };
            sc.events.contrast = cfg.contrast;
            commands::synth(&common.out, samples, cfg.seed, &sc)?;
            println!("wrote {samples} samples to {}", common.out.display());
        }
        Command::Train {
            common,
            stage,
            data,
            holdout,
            from,
        } => {
            let cfg = common_config(&common)?;
            let stages = commands::parse_stages(&stage)?;
            let train = synthdata::read_dataset(&data)?;
            let hold = match holdout {
                Some(h) => synthdata::read_dataset(&h)?,
                None => Vec::new(),
            };
            let run = commands::train(&train, &hold, &stages, from.as_deref(), &common.out, &cfg)?;
            for (s, log) in run.stages.iter().zip(&run.logs) {
                println!("stage {s}: {} epochs", log.rows.len());
            }
            println!(
                "{} EPE {:.4} Fl-all {:.2}%",
                run.report.model, run.report.mean_epe, run.report.mean_fl_all
            );
        }
        Command::Eval {
            common,
            data,
            checkpoint,
            predictions,
            model,
        } => {
            let cfg = common_config(&common)?;
            let source = match (checkpoint, predictions) {
                (Some(path), None) => EvalSource::Checkpoint {
                    path,
                    model: FlowModel::parse(&model)?,
                },
                (None, Some(dir)) => EvalSource::Predictions(dir),
                _ => return Err(Error::arg("give exactly one of --checkpoint and --predictions")),
            };
            let r = commands::eval(&data, &source, &common.out, &cfg)?;
            let band = r.boundary_epe.map(|b| format!("{b:.4}")).unwrap_or_else(|| "n/a".into());
            println!(
                "{} samples: EPE {:.4} Fl-all {:.2}% boundary EPE {band}",
                r.sample_count, r.mean_epe, r.mean_fl_all
            );
        }
        Command::Viz {
            common,
            data,
            checkpoint,
            model,
            limit,
        } => {
            let cfg = common_config(&common)?;
            let s = commands::viz(&data, &checkpoint, FlowModel::parse(&model)?, limit, &common.out, &cfg)?;
            println!("visualized {} samples in {}", s.samples, common.out.display());
        }
        Command::Gradcheck { config, seed, out } => {
            let cfg = load_config(config.as_deref(), seed, &[])?;
            let results = commands::gradcheck(cfg.seed, out.as_deref())?;
            let mut failed = Vec::new();
            for r in &results {
                let ok = r.passed(GRADCHECK_TOL);
                println!(
                    "{:<16} max rel error {:.3e} ({} probes, {} skipped) {}",
                    r.name,
                    r.max_rel_error,
                    r.probes,
                    r.skipped,
                    if ok { "ok" } else { "FAIL" }
                );
                if !ok {
                    failed.push(r.name.clone());
                }
            }
            if !failed.is_empty() {
                return Err(Error::Numeric {
                    term: format!("gradient check of {}", failed.join(", ")),
                });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
