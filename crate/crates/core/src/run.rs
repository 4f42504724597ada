//! Command implementations behind the `pkef` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::analysis::{decoupling_probe, DecouplingReport};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{load_dataset, BehaviorDataset};
use crate::error::{PkefError, Result};
use crate::eval::{export_gate_weights, pearson_case_study, rank_test_pairs, CaseStudy, MetricReport};
use crate::experts::HeadVariant;
use crate::model::Model;
use crate::propagation::FusionScheme;
use crate::train::{adjacencies, evaluate, metrics_csv, train, EpochRecord, TrainOutcome};

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train.log";

#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub best_epoch: usize,
    pub best: MetricReport,
    pub epochs_run: usize,
    /// Test users with no target-behavior training history. They are
    /// evaluated like everyone else.
    pub cold_users: usize,
    pub history: Vec<EpochRecord>,
}

/// Paths written by a training run.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub report: TrainReport,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| PkefError::io(path, e))
}

fn dataset(cfg: &RunConfig) -> Result<BehaviorDataset> {
    let dir = cfg
        .data
        .as_ref()
        .ok_or_else(|| PkefError::Config("no dataset directory given".into()))?;
    load_dataset(dir, &cfg.behaviors)
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    cfg.out
        .as_deref()
        .ok_or_else(|| PkefError::Config("no output directory given".into()))
}

pub fn train_on(ds: &BehaviorDataset, cfg: &RunConfig, out: &Path) -> Result<RunArtifacts> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| PkefError::io(out, e))?;
    write(&out.join(CONFIG_FILE), cfg.to_text())?;
    let mut log = String::new();
    let outcome: TrainOutcome = train(ds, &cfg.train, |r| {
        let _ = writeln!(
            log,
            "epoch {:>4}  loss {:.6}  hr {}  ndcg {}",
            r.epoch,
            r.losses.total(),
            r.hr.map_or("-".into(), |x| format!("{x:.4}")),
            r.ndcg.map_or("-".into(), |x| format!("{x:.4}")),
        );
    })?;
    let _ = writeln!(log, "best epoch {}: {:?}", outcome.best_epoch, outcome.best);
    let _ = writeln!(log, "cold test users: {}", ds.cold_test_users());
    write(&out.join(LOG_FILE), log)?;
    write(&out.join(METRICS_FILE), metrics_csv(&outcome.history))?;
    checkpoint::save(&outcome.model.params, &out.join(CHECKPOINT_FILE))?;
    let report = TrainReport {
        best_epoch: outcome.best_epoch,
        best: outcome.best,
        epochs_run: outcome.history.len(),
        cold_users: ds.cold_test_users(),
        history: outcome.history,
    };
    write(&out.join(REPORT_FILE), serde_json::to_string_pretty(&report)?)?;
    Ok(RunArtifacts {
        dir: out.to_path_buf(),
        report,
    })
}

pub fn cmd_train(cfg: &RunConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let ds = dataset(cfg)?;
    train_on(&ds, cfg, out_dir(cfg)?)
}

/// Rebuilds the configured model and loads its parameters from `ckpt`.
pub fn load_model(cfg: &RunConfig, ds: &BehaviorDataset, ckpt: &Path) -> Result<Model> {
    cfg.validate()?;
    let mut model = Model::init(cfg.train.model_config(), ds.user_count(), ds.item_count(), cfg.train.seed)?;
    let loaded = checkpoint::load(ckpt)?;
    checkpoint::restore_into(&mut model.params, &loaded)?;
    Ok(model)
}

pub fn evaluate_checkpoint(cfg: &RunConfig, ds: &BehaviorDataset, ckpt: &Path) -> Result<MetricReport> {
    let model = load_model(cfg, ds, ckpt)?;
    evaluate(&model, &adjacencies(ds), ds, cfg.train.k)
}

pub fn cmd_evaluate(cfg: &RunConfig, ckpt: &Path) -> Result<MetricReport> {
    let ds = dataset(cfg)?;
    let report = evaluate_checkpoint(cfg, &ds, ckpt)?;
    if let Some(out) = &cfg.out {
        fs::create_dir_all(out).map_err(|e| PkefError::io(out, e))?;
        write(&out.join("evaluation.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report)
}

/// A training variant compared by `ablate`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// The configuration as given.
    Full,
    /// Cascade stream only, bilinear head.
    Base,
    NoPkf,
    NoPme,
    Fusion(FusionScheme),
    Head(HeadVariant),
}

impl FromStr for Variant {
    type Err = PkefError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "full" => Ok(Variant::Full),
            "base" => Ok(Variant::Base),
            "no-pkf" => Ok(Variant::NoPkf),
            "no-pme" => Ok(Variant::NoPme),
            _ => match s.split_once(':') {
                Some(("fusion", f)) => Ok(Variant::Fusion(f.parse()?)),
                Some(("head", h)) => Ok(Variant::Head(h.parse()?)),
                _ => Err(PkefError::Config(format!(
                    "unknown variant '{s}' (expected full, base, no-pkf, no-pme, fusion:NAME or head:NAME)"
                ))),
            },
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::Full => write!(f, "full"),
            Variant::Base => write!(f, "base"),
            Variant::NoPkf => write!(f, "no-pkf"),
            Variant::NoPme => write!(f, "no-pme"),
            Variant::Fusion(s) => write!(f, "fusion:{s}"),
            Variant::Head(h) => write!(f, "head:{h}"),
        }
    }
}

impl Variant {
    pub fn apply(self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        let t = &mut c.train;
        match self {
            Variant::Full => {}
            Variant::Base => {
                t.fusion = None;
                t.head = HeadVariant::Bilinear;
            }
            Variant::NoPkf => t.fusion = None,
            Variant::NoPme => t.head = HeadVariant::Bilinear,
            Variant::Fusion(s) => t.fusion = Some(s),
            Variant::Head(h) => t.head = h,
        }
        c
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub best_epoch: usize,
    pub hr: f64,
    pub ndcg: f64,
}

pub fn ablation_table(rows: &[AblationRow], k: usize) -> String {
    let mut s = format!("variant,best_epoch,hr@{k},ndcg@{k}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.variant, r.best_epoch, r.hr, r.ndcg);
    }
    s
}

/// Trains every variant with the same seed and budget. Each variant's
/// artifacts go to a subdirectory of `out`.
pub fn ablate_on(ds: &BehaviorDataset, cfg: &RunConfig, variants: &[Variant], out: &Path) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(variants.len());
    for &v in variants {
        let vc = v.apply(cfg);
        let dir = out.join(v.to_string().replace(':', "-"));
        let art = train_on(ds, &vc, &dir)?;
        rows.push(AblationRow {
            variant: v.to_string(),
            best_epoch: art.report.best_epoch,
            hr: art.report.best.hr,
            ndcg: art.report.best.ndcg,
        });
    }
    write(&out.join("ablation.csv"), ablation_table(&rows, cfg.train.k))?;
    Ok(rows)
}

pub fn cmd_ablate(cfg: &RunConfig, variants: &[Variant]) -> Result<Vec<AblationRow>> {
    if variants.is_empty() {
        return Err(PkefError::Config("no variants requested".into()));
    }
    let ds = dataset(cfg)?;
    ablate_on(&ds, cfg, variants, out_dir(cfg)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Analysis {
    Decoupling,
    CaseStudy,
    Gates,
}

impl FromStr for Analysis {
    type Err = PkefError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "decoupling" => Ok(Analysis::Decoupling),
            "case-study" => Ok(Analysis::CaseStudy),
            "gates" => Ok(Analysis::Gates),
            other => Err(PkefError::Config(format!(
                "unknown analysis '{other}' (expected decoupling, case-study or gates)"
            ))),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
#[serde(untagged)]
pub enum AnalysisOutput {
    Decoupling(DecouplingReport),
    CaseStudy(CaseStudy),
    Gates { head: HeadVariant, mean_gate: Vec<f64> },
}

pub fn analyze_on(
    ds: &BehaviorDataset,
    cfg: &RunConfig,
    ckpt: Option<&Path>,
    analysis: Analysis,
) -> Result<AnalysisOutput> {
    let model = match ckpt {
        Some(p) => load_model(cfg, ds, p)?,
        None => Model::init(cfg.train.model_config(), ds.user_count(), ds.item_count(), cfg.train.seed)?,
    };
    let outputs = model.outputs(&adjacencies(ds))?;
    let head = model.config.head_config();
    let scorer = model.scorer(&head, &outputs)?;
    match analysis {
        Analysis::Decoupling => Ok(AnalysisOutput::Decoupling(decoupling_probe(cfg.train.seed, 20)?)),
        Analysis::CaseStudy => {
            let ranks = rank_test_pairs(&scorer, ds)?;
            Ok(AnalysisOutput::CaseStudy(pearson_case_study(ds, &ranks, 5, cfg.train.k)?))
        }
        Analysis::Gates => Ok(AnalysisOutput::Gates {
            head: head.variant,
            mean_gate: export_gate_weights(&scorer, ds)?,
        }),
    }
}

pub fn cmd_analyze(cfg: &RunConfig, ckpt: Option<&Path>, analysis: Analysis) -> Result<AnalysisOutput> {
    let out = if analysis == Analysis::Decoupling {
        AnalysisOutput::Decoupling(decoupling_probe(cfg.train.seed, 20)?)
    } else {
        let ds = dataset(cfg)?;
        analyze_on(&ds, cfg, ckpt, analysis)?
    };
    if let Some(dir) = &cfg.out {
        fs::create_dir_all(dir).map_err(|e| PkefError::io(dir, e))?;
        let name = match analysis {
            Analysis::Decoupling => "decoupling.json",
            Analysis::CaseStudy => "case_study.json",
            Analysis::Gates => "gates.json",
        };
        write(&dir.join(name), serde_json::to_string_pretty(&out)?)?;
    }
    Ok(out)
}
