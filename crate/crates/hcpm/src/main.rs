use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use hcpm::bench::{self, BenchReport};
use hcpm::config::{self, RunConfig};
use hcpm::log::JsonLog;
use hcpm::{checkpoint, eval, gendata, matches, pgm, train};
use hcpm_core::pipeline::{predict, Model, PipelineConfig};

/// Exit status of `match` when it ran but found nothing.
const EXIT_NO_MATCHES: u8 = 2;

#[derive(Parser)]
#[command(name = "hcpm", version, about = "Hierarchical candidate pruning matcher")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config with flat pipeline keys and an optional `scene` object.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for initialization, DICS sampling and the data stream.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file or directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override a config key, e.g. `--set alpha=0.7 --set scene.height=32`.
    #[arg(long = "set", value_parser = config::parse_override)]
    overrides: Vec<(String, String)>,
}

impl Common {
    fn load(&self) -> anyhow::Result<RunConfig> {
        Ok(config::load(self.config.as_deref(), &self.overrides, self.seed)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train on synthetic pairs; writes checkpoint, config and metric log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluate a checkpoint on held-out synthetic pairs.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pairs: Option<usize>,
        /// Use identity-pose pairs.
        #[arg(long)]
        identity: bool,
    },
    /// Match two PGM images and write CSV.
    Match {
        #[command(flatten)]
        common: Common,
        image_a: PathBuf,
        image_b: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// FLOP counts and per-stage wall-clock.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Uses freshly initialized parameters when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 1024)]
        tokens: usize,
        #[arg(long, default_value_t = 50)]
        repeats: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        /// `tokens=256,1024` or `alpha=0.3,0.5,1.0`.
        #[arg(long)]
        sweep: Option<String>,
        /// CSV file for the sweep.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Export synthetic pairs as PGM plus sidecar text.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10)]
        n: usize,
    },
}

fn model_for(cfg: &PipelineConfig, ckpt: Option<&Path>) -> anyhow::Result<(Model, hcpm_core::nn::ParamStore)> {
    Ok(match ckpt {
        Some(p) => checkpoint::load(p, cfg).with_context(|| format!("loading {}", p.display()))?,
        None => Model::init(cfg)?,
    })
}

fn log_to(out: Option<&Path>) -> anyhow::Result<JsonLog> {
    Ok(match out {
        Some(p) => JsonLog::create(p)?,
        None => JsonLog::stdout(),
    })
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Train { common, steps } => {
            let mut cfg = common.load()?;
            if let Some(s) = steps {
                cfg.pipeline.steps = s;
            }
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("runs/train"));
            let o = train::train(&cfg, &out, |_| {})?;
            eprintln!("wrote {} and {}", o.checkpoint.display(), o.metrics.display());
        }
        Command::Eval {
            common,
            checkpoint,
            pairs,
            identity,
        } => {
            let cfg = common.load()?;
            let (model, params) = model_for(&cfg.pipeline, Some(&checkpoint))?;
            let scene = if identity { eval::identity_scene(cfg.eval_scene()) } else { cfg.eval_scene() };
            let (per_pair, summary) = eval::evaluate(&model, &params, &cfg.pipeline, scene, pairs.unwrap_or(cfg.eval_pairs))?;
            let mut log = log_to(common.out.as_deref())?;
            for m in &per_pair {
                log.write(m)?;
            }
            log.write(&summary)?;
            log.flush()?;
        }
        Command::Match {
            common,
            image_a,
            image_b,
            checkpoint,
        } => {
            let cfg = common.load()?;
            let a = pgm::read(&image_a)?;
            let b = pgm::read(&image_b)?;
            for (p, t) in [(&image_a, &a), (&image_b, &b)] {
                if t.shape[0] % 8 != 0 || t.shape[1] % 8 != 0 {
                    bail!("{}: {}×{} is not divisible by 8", p.display(), t.shape[0], t.shape[1]);
                }
            }
            let (model, params) = model_for(&cfg.pipeline, Some(&checkpoint))?;
            let (ms, _) = predict(&model, &params, &cfg.pipeline, &a, &b)?;
            let rows: Vec<_> = ms.fine.iter().map(matches::MatchRow::from).collect();
            let text = matches::format(&rows);
            match &common.out {
                Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{text}"),
            }
            if rows.is_empty() {
                return Ok(ExitCode::from(EXIT_NO_MATCHES));
            }
        }
        Command::Bench {
            common,
            checkpoint,
            tokens,
            repeats,
            warmup,
            sweep,
            csv,
        } => {
            let cfg = common.load()?;
            let (model, params) = model_for(&cfg.pipeline, checkpoint.as_deref())?;
            let points: Vec<(usize, PipelineConfig)> = match sweep.as_deref() {
                None => vec![(tokens, cfg.pipeline)],
                Some(s) => {
                    let (key, values) = s.split_once('=').context("sweep must look like key=v1,v2")?;
                    let values: Vec<&str> = values.split(',').map(str::trim).collect();
                    match key {
                        "tokens" => values
                            .iter()
                            .map(|v| Ok((v.parse()?, cfg.pipeline)))
                            .collect::<anyhow::Result<_>>()?,
                        "alpha" => values
                            .iter()
                            .map(|v| {
                                let c = PipelineConfig { alpha: v.parse()?, ..cfg.pipeline };
                                c.validate()?;
                                Ok((tokens, c))
                            })
                            .collect::<anyhow::Result<_>>()?,
                        other => bail!("unknown sweep key {other:?}"),
                    }
                }
            };
            let mut log = log_to(common.out.as_deref())?;
            let mut reports: Vec<BenchReport> = Vec::new();
            for (n, c) in points {
                let (a, b) = bench::bench_pair(n, cfg.scene.seed)?;
                let r = bench::run("config", &model, &params, &c, &a, &b, repeats, warmup)?;
                log.write(&r)?;
                reports.push(r);
            }
            log.flush()?;
            if let Some(p) = csv {
                std::fs::write(&p, bench::sweep_csv(&reports)).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::GenData { common, n } => {
            let cfg = common.load()?;
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("data"));
            gendata::export(cfg.scene, n, &out)?;
            eprintln!("wrote {n} pairs to {}", out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
