use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dosegraph::bundle::load_dir;
use dosegraph::encoders::PromptEncoder;
use dosegraph::graph::DEFAULT_THRESHOLD;
use dosegraph_cli::config::{load_toml, RunConfig, ServeConfig};
use dosegraph_cli::pipeline::{self, write_json};
use dosegraph_cli::service::{serve, AppState};

#[derive(Parser)]
#[command(name = "dosegraph", version, about = "Image-dose graph DVH prediction pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded cohort of synthetic phantom bundles.
    GenPhantoms {
        #[arg(long, default_value_t = 40)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Share of cases whose prescription carries the boost instruction.
        #[arg(long, default_value_t = 0.5)]
        boost_fraction: f64,
        #[arg(long, default_value_t = 0.5)]
        noise_sd: f64,
    },
    /// Segment a case and extract the per-pixel feature tensor.
    Convert {
        #[arg(long)]
        case: PathBuf,
        /// Optional feature dump.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the image-dose graph of a case and report its size.
    BuildGraph {
        #[arg(long)]
        case: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a registered model and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the model named in the config.
        #[arg(long)]
        model: Option<String>,
    },
    /// Predict the dose of one case.
    Predict {
        #[arg(long)]
        case: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "")]
        prompt_text: String,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        /// Prediction JSON; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on a directory of cases.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        report_dir: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// k-fold cross-validation with reports.
    Cv {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long)]
        report_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: Option<String>,
    },
    /// Serve the instruct-and-re-predict HTTP endpoints.
    Serve {
        #[arg(long)]
        addr: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        journal: Option<PathBuf>,
    },
}

fn run_config(path: Option<&PathBuf>, model: Option<String>) -> anyhow::Result<RunConfig> {
    let mut cfg: RunConfig = match path {
        Some(p) => load_toml(p)?,
        None => RunConfig::default(),
    };
    if let Some(m) = model {
        cfg.model = m;
    }
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenPhantoms {
            n,
            seed,
            out,
            boost_fraction,
            noise_sd,
        } => {
            let paths = pipeline::gen_phantoms(&out, n, seed, boost_fraction, noise_sd)?;
            println!("wrote {} bundles to {}", paths.len(), out.display());
        }
        Command::Convert { case, out } => print_json(&pipeline::convert(&case, out.as_deref())?)?,
        Command::BuildGraph { case, threshold, out } => {
            print_json(&pipeline::build_graph_cmd(&case, threshold, out.as_deref())?)?
        }
        Command::Train {
            data,
            config,
            out,
            model,
        } => {
            let cfg = run_config(config.as_ref(), model)?;
            let log = pipeline::train_cmd(&data, &cfg, &out)?;
            println!("wrote {} and {}", out.display(), log.display());
        }
        Command::Predict {
            case,
            checkpoint,
            prompt_text,
            threshold,
            out,
        } => {
            let pred = pipeline::predict_cmd(&case, &checkpoint, &prompt_text, threshold, None)?;
            for w in &pred.warnings {
                log::warn!("{w}");
            }
            match out {
                Some(path) => write_json(&path, &pred)?,
                None => print_json(&pred)?,
            }
        }
        Command::Evaluate {
            data,
            checkpoint,
            report_dir,
            threshold,
        } => {
            let outcome = pipeline::evaluate_cmd(&data, &checkpoint, threshold, &report_dir)?;
            print_json(&outcome.summary)?;
        }
        Command::Cv {
            data,
            k,
            report_dir,
            config,
            model,
        } => {
            let cfg = run_config(config.as_ref(), model)?;
            let outcome = pipeline::cv_cmd(&data, k, &cfg, &report_dir)?;
            print_json(&outcome.summary)?;
        }
        Command::Serve {
            addr,
            checkpoint,
            data,
            config,
            journal,
        } => {
            let mut cfg: ServeConfig = match &config {
                Some(p) => load_toml(p)?,
                None => ServeConfig::default(),
            };
            cfg.addr = addr.unwrap_or(cfg.addr);
            cfg.checkpoint = checkpoint.or(cfg.checkpoint);
            cfg.data = data.or(cfg.data);
            cfg.journal = journal.or(cfg.journal);
            let checkpoint = cfg.checkpoint.ok_or_else(|| anyhow::anyhow!("serve needs --checkpoint or `checkpoint` in the config"))?;
            let data = cfg.data.ok_or_else(|| anyhow::anyhow!("serve needs --data or `data` in the config"))?;
            let model = pipeline::load_model(&checkpoint)?;
            let width = model.config().prompt_width;
            if let Some(w) = cfg.prompt_width.filter(|&w| w != width) {
                anyhow::bail!("configured prompt width {w} differs from the checkpoint's {width}");
            }
            let encoder = PromptEncoder {
                timeout_ms: cfg.embed_timeout_ms,
                ..PromptEncoder::with_endpoint(width, cfg.embed_url)
            };
            let cases = load_dir(&data)?;
            let state = AppState::new(model, &cases, cfg.threshold, encoder, cfg.journal)?;
            tokio::runtime::Runtime::new()?.block_on(serve(&cfg.addr, state))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
