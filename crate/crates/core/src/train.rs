//! Mini-batch training with per-epoch negative resampling and early
//! stopping on the ranking metric.

use std::fmt::Write as _;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{build_normalized_adjacency, build_unique_triples, sample_bpr_triples, BehaviorDataset, NormalizedAdjacency, Triple};
use crate::error::{PkefError, Result};
use crate::eval::{evaluate_model, MetricReport};
use crate::experts::{HeadVariant, Tower};
use crate::model::{Batch, Model, ModelConfig};
use crate::objective::{AdamConfig, LossParts, LossWeights, OptimizerState};
use crate::propagation::FusionScheme;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dim: usize,
    pub layers: Vec<usize>,
    pub lambda: Vec<f64>,
    pub fusion: Option<FusionScheme>,
    pub head: HeadVariant,
    pub tower: Tower,
    pub gamma: f64,
    pub mu: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Ranking cutoff for evaluation and early stopping.
    pub k: usize,
    pub eval_every: usize,
}

impl TrainConfig {
    /// Defaults for `behaviors` behaviors: `d = 64`, four layers on the
    /// first behavior and one on the rest, target-heavy loss weights.
    pub fn defaults(behaviors: usize) -> Self {
        let mut layers = vec![1; behaviors];
        if let Some(first) = layers.first_mut() {
            *first = 4;
        }
        TrainConfig {
            dim: 64,
            layers,
            lambda: LossWeights::default_for(behaviors).as_slice().to_vec(),
            fusion: Some(FusionScheme::Projection),
            head: HeadVariant::Pme,
            tower: Tower::Sum,
            gamma: 0.1,
            mu: 1e-4,
            lr: 1e-3,
            batch_size: 1024,
            epochs: 200,
            patience: 10,
            seed: 2024,
            k: 10,
            eval_every: 1,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            layers: self.layers.clone(),
            fusion: self.fusion,
            head: self.head,
            gamma: self.gamma,
            tower: self.tower,
        }
    }

    pub fn weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.lambda.clone())
    }

    pub fn validate(&self, behaviors: usize) -> Result<()> {
        if self.layers.len() != behaviors {
            return Err(PkefError::Config(format!(
                "{} layer counts for {behaviors} behaviors",
                self.layers.len()
            )));
        }
        if self.lambda.len() != behaviors {
            return Err(PkefError::Config(format!(
                "{} loss weights for {behaviors} behaviors",
                self.lambda.len()
            )));
        }
        self.weights()?;
        self.model_config().validate()?;
        let positive = |v: f64, what: &str| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(PkefError::Config(format!("{what} must be positive, got {v}")))
            }
        };
        positive(self.lr, "learning rate")?;
        if !(self.mu.is_finite() && self.mu >= 0.0) {
            return Err(PkefError::Config(format!("mu must be non-negative, got {}", self.mu)));
        }
        if self.batch_size == 0 || self.k == 0 || self.eval_every == 0 {
            return Err(PkefError::Config("batch size, k and eval-every must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub hr: Option<f64>,
    pub ndcg: Option<f64>,
    pub losses: LossParts,
}

pub fn metrics_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,hr,ndcg,loss_par,loss_cas,loss_uni,loss_total\n");
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for r in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.epoch,
            opt(r.hr),
            opt(r.ndcg),
            r.losses.parallel,
            r.losses.cascade,
            r.losses.unique,
            r.losses.total()
        );
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best evaluated epoch.
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best: MetricReport,
}

/// Mixes `parts` into `seed` so every (epoch, behavior) stream is
/// independent of which other streams are drawn.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p)))
}

fn shuffled(mut triples: Vec<Triple>, seed: u64) -> Vec<Triple> {
    triples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    triples
}

/// Training triples of one epoch.
pub fn epoch_triples(ds: &BehaviorDataset, cfg: &ModelConfig, weights: &LossWeights, seed: u64, epoch: usize) -> Result<Batch> {
    let kk = ds.behavior_count();
    let e = epoch as u64;
    let mut ranking = vec![Vec::new(); kk];
    for (k, slot) in ranking.iter_mut().enumerate() {
        if weights.get(k) > 0.0 {
            let t = sample_bpr_triples(ds, k, derive_seed(seed, &[e, 0, k as u64])).triples;
            *slot = shuffled(t, derive_seed(seed, &[e, 1, k as u64]));
        }
    }
    let mut unique = Vec::new();
    if cfg.has_unique_loss() {
        for guide in 0..kk {
            if weights.get(guide) == 0.0 {
                continue;
            }
            for source in (0..kk).filter(|&s| s != guide) {
                let parts = [e, 2, source as u64, guide as u64];
                let t = build_unique_triples(ds, source, guide, derive_seed(seed, &parts))?.triples;
                let parts = [e, 3, source as u64, guide as u64];
                unique.push((source, guide, shuffled(t, derive_seed(seed, &parts))));
            }
        }
    }
    Ok(Batch { ranking, unique })
}

fn chunk(list: &[Triple], j: usize, n: usize) -> Vec<Triple> {
    list[j * list.len() / n..(j + 1) * list.len() / n].to_vec()
}

/// Splits every triple list into the same number of mini-batches, enough
/// that the longest list yields chunks of at most `batch_size`.
pub fn split_batches(all: &Batch, batch_size: usize) -> Vec<Batch> {
    let longest = all
        .ranking
        .iter()
        .map(Vec::len)
        .chain(all.unique.iter().map(|u| u.2.len()))
        .max()
        .unwrap_or(0);
    let n = longest.div_ceil(batch_size);
    (0..n)
        .map(|j| Batch {
            ranking: all.ranking.iter().map(|l| chunk(l, j, n)).collect(),
            unique: all.unique.iter().map(|(s, g, l)| (*s, *g, chunk(l, j, n))).collect(),
        })
        .collect()
}

pub fn evaluate(model: &Model, adjs: &[NormalizedAdjacency], ds: &BehaviorDataset, k: usize) -> Result<MetricReport> {
    let outputs = model.outputs(adjs)?;
    let head = model.config.head_config();
    let scorer = model.scorer(&head, &outputs)?;
    evaluate_model(&scorer, ds, k)
}

pub fn adjacencies(ds: &BehaviorDataset) -> Vec<NormalizedAdjacency> {
    (0..ds.behavior_count()).map(|k| build_normalized_adjacency(ds, k)).collect()
}

/// Trains from scratch. `on_epoch` sees every record as it is produced.
pub fn train(ds: &BehaviorDataset, cfg: &TrainConfig, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    cfg.validate(ds.behavior_count())?;
    if ds.test_pairs().is_empty() {
        return Err(PkefError::Config("dataset has no test pairs to evaluate on".into()));
    }
    let weights = cfg.weights()?;
    let adjs = adjacencies(ds);
    let mut model = Model::init(cfg.model_config(), ds.user_count(), ds.item_count(), cfg.seed)?;
    let mut opt = OptimizerState::new(&model.params);
    let adam = AdamConfig::with_lr(cfg.lr);

    let mut history = Vec::new();
    let mut best: Option<(usize, MetricReport, Model)> = None;
    let mut stale = 0;
    for epoch in 1..=cfg.epochs {
        let triples = epoch_triples(ds, &model.config, &weights, cfg.seed, epoch)?;
        let batches = split_batches(&triples, cfg.batch_size);
        let mut sum = LossParts::default();
        for (b, batch) in batches.iter().enumerate() {
            let (parts, grads) = model.loss_and_gradients(&adjs, batch, &weights, cfg.mu)?;
            if !parts.total().is_finite() {
                return Err(PkefError::Numerical(format!(
                    "non-finite loss {parts:?} at epoch {epoch}, batch {b}"
                )));
            }
            opt.adam_step(&mut model.params, &grads, &adam)?;
            sum.parallel += parts.parallel;
            sum.cascade += parts.cascade;
            sum.unique += parts.unique;
            sum.regularization += parts.regularization;
        }
        let n = batches.len().max(1) as f64;
        let losses = LossParts {
            parallel: sum.parallel / n,
            cascade: sum.cascade / n,
            unique: sum.unique / n,
            regularization: sum.regularization / n,
        };

        let last = epoch == cfg.epochs;
        let report = if epoch % cfg.eval_every == 0 || last {
            Some(evaluate(&model, &adjs, ds, cfg.k)?)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            hr: report.as_ref().map(|r| r.hr),
            ndcg: report.as_ref().map(|r| r.ndcg),
            losses,
        };
        debug!("epoch {epoch}: {record:?}");
        on_epoch(&record);
        history.push(record);

        if let Some(report) = report {
            let improved = best.as_ref().is_none_or(|(_, b, _)| report.hr > b.hr);
            if improved {
                info!("epoch {epoch}: HR@{} {:.4} NDCG@{} {:.4}", cfg.k, report.hr, cfg.k, report.ndcg);
                best = Some((epoch, report, model.clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    info!("early stop at epoch {epoch}");
                    break;
                }
            }
        }
    }
    let (best_epoch, best, model) = match best {
        Some(b) => b,
        None => {
            let r = evaluate(&model, &adjs, ds, cfg.k)?;
            (0, r, model)
        }
    };
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best,
    })
}
