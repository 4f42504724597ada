use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pkef::config::RunConfig;
use pkef::data::write_dataset;
use pkef::run::{self, Analysis, Variant};
use pkef::synthetic::{generate, SyntheticSpec};
use pkef::{PkefError, Result};

#[derive(Parser)]
#[command(name = "pkef", version, about = "Multi-behavior recommendation trainer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its artifacts to --out.
    Train(Common),
    /// Evaluate a saved checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train several variants under one seed and budget.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated: full, base, no-pkf, no-pme, fusion:NAME, head:NAME.
        #[arg(long, default_value = "full,base,no-pkf,no-pme")]
        variants: String,
    },
    /// Run an analysis: decoupling, case-study or gates.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        analysis: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write a planted-preference dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        users: usize,
        #[arg(long, default_value_t = 100)]
        items: usize,
        #[arg(long, default_value = "0.3,0.1,0.03")]
        densities: String,
        #[arg(long, default_value_t = 0.8)]
        overlap: f64,
        #[arg(long, default_value_t = 0.3)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated behavior names in cascade order.
    #[arg(long)]
    behaviors: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// projection, vanilla, summation, linear or none.
    #[arg(long)]
    fusion: Option<String>,
    /// pme, sb, bilinear, mmoe or ple.
    #[arg(long)]
    head: Option<String>,
    #[arg(long)]
    tower: Option<String>,
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    dim: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    mu: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    patience: Option<String>,
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    eval_every: Option<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::parse("")?,
        };
        if let Some(b) = &self.behaviors {
            cfg.set("behaviors", b)?;
        }
        if let Some(d) = &self.data {
            cfg.data = Some(d.clone());
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        let overrides = [
            ("fusion", &self.fusion),
            ("head", &self.head),
            ("tower", &self.tower),
            ("layers", &self.layers),
            ("lambda", &self.lambda),
            ("dim", &self.dim),
            ("gamma", &self.gamma),
            ("mu", &self.mu),
            ("lr", &self.lr),
            ("epochs", &self.epochs),
            ("batch", &self.batch),
            ("patience", &self.patience),
            ("k", &self.k),
            ("eval_every", &self.eval_every),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => {
            let cfg = common.resolve()?;
            let art = run::cmd_train(&cfg)?;
            println!(
                "best epoch {}: HR@{k} {:.4}  NDCG@{k} {:.4}  ({})",
                art.report.best_epoch,
                art.report.best.hr,
                art.report.best.ndcg,
                art.dir.display(),
                k = art.report.best.k
            );
        }
        Command::Evaluate { common, checkpoint } => {
            let cfg = common.resolve()?;
            print_json(&run::cmd_evaluate(&cfg, &checkpoint)?)?;
        }
        Command::Ablate { common, variants } => {
            let cfg = common.resolve()?;
            let variants: Vec<Variant> = variants.split(',').map(str::parse).collect::<Result<_>>()?;
            let rows = run::cmd_ablate(&cfg, &variants)?;
            print!("{}", run::ablation_table(&rows, cfg.train.k));
        }
        Command::Analyze {
            common,
            analysis,
            checkpoint,
        } => {
            let cfg = common.resolve()?;
            let analysis: Analysis = analysis.parse()?;
            print_json(&run::cmd_analyze(&cfg, checkpoint.as_deref(), analysis)?)?;
        }
        Command::Synth {
            out,
            users,
            items,
            densities,
            overlap,
            noise,
            seed,
        } => {
            let densities = densities
                .split(',')
                .map(|d| {
                    d.trim()
                        .parse()
                        .map_err(|_| PkefError::Config(format!("bad density '{d}'")))
                })
                .collect::<Result<Vec<f64>>>()?;
            let spec = SyntheticSpec {
                users,
                items,
                densities,
                overlap,
                noise,
                seed,
                ..SyntheticSpec::small(seed)
            };
            let data = generate(&spec)?;
            write_dataset(&data.dataset, &out)?;
            println!("behaviors: {}", spec.behavior_names().join(","));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
