//! Full model: embeddings, graph streams, prediction head and the batch
//! loss graph.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{NormalizedAdjacency, Triple};
use crate::error::{PkefError, Result};
use crate::experts::{self, init_head_params, HeadConfig, HeadScorer, HeadVariant, PairReps, Tower};
use crate::math::{DenseMatrix, Tape, Var};
use crate::objective::{bpr_mean, LossParts, LossWeights};
use crate::params::{Bound, ParamStore};
use crate::propagation::{forward_pkf, init_fusion_params, BehaviorOutputs, EmbeddingTable, FusionScheme, PkfConfig, StreamGraph};

/// Architecture choices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: Vec<usize>,
    /// `None` disables the parallel stream (cascade only).
    pub fusion: Option<FusionScheme>,
    pub head: HeadVariant,
    pub gamma: f64,
    pub tower: Tower,
}

impl ModelConfig {
    pub fn behaviors(&self) -> usize {
        self.layers.len()
    }

    pub fn pkf(&self) -> PkfConfig {
        PkfConfig {
            layers: self.layers.clone(),
            fusion: self.fusion,
        }
    }

    pub fn head_config(&self) -> HeadConfig {
        HeadConfig {
            variant: self.head,
            behaviors: self.behaviors(),
            dim: self.dim,
            gamma: self.gamma,
            tower: self.tower,
        }
    }

    pub fn has_parallel_stream(&self) -> bool {
        self.fusion.is_some()
    }

    /// The unique-part loss needs the projection head and a second behavior.
    pub fn has_unique_loss(&self) -> bool {
        self.head == HeadVariant::Pme && self.behaviors() >= 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(PkefError::Config("embedding size must be positive".into()));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(PkefError::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        self.pkf().validate()
    }
}

/// Trainable model state.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub user_count: usize,
    pub item_count: usize,
}

/// One mini-batch: ranking triples per behavior (shared by the parallel and
/// cascade losses) and unique-part triples per `(source, guide)` pair.
#[derive(Clone, Debug, Default)]
pub struct Batch {
    pub ranking: Vec<Vec<Triple>>,
    pub unique: Vec<(usize, usize, Vec<Triple>)>,
}

/// Loss graph of one batch.
pub struct LossGraph<'a> {
    pub total: Var,
    pub parallel: Option<Var>,
    pub cascade: Option<Var>,
    pub unique: Option<Var>,
    pub regularization: Option<Var>,
    pub bound: Bound<'a>,
    pub streams: StreamGraph,
}

impl LossGraph<'_> {
    pub fn parts(&self, tape: &Tape) -> LossParts {
        let read = |v: Option<Var>| v.map_or(0.0, |v| tape.scalar(v));
        LossParts {
            parallel: read(self.parallel),
            cascade: read(self.cascade),
            unique: read(self.unique),
            regularization: read(self.regularization),
        }
    }
}

fn weighted_sum(tape: &mut Tape, terms: &[(f64, Var)]) -> Result<Option<Var>> {
    let scaled: Vec<Var> = terms.iter().map(|&(w, v)| tape.scale(v, w)).collect();
    if scaled.is_empty() {
        Ok(None)
    } else {
        Ok(Some(tape.add_all(&scaled)?))
    }
}

impl Model {
    pub fn init(config: ModelConfig, user_count: usize, item_count: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        EmbeddingTable::xavier(user_count, item_count, config.dim, &mut rng).insert_into(&mut params);
        if let Some(scheme) = config.fusion {
            init_fusion_params(&mut params, scheme, &config.layers, config.dim, &mut rng);
        }
        init_head_params(&mut params, &config.head_config(), &mut rng);
        Ok(Model {
            config,
            params,
            user_count,
            item_count,
        })
    }

    pub fn node_count(&self) -> usize {
        self.user_count + self.item_count
    }

    /// Forward pass of both streams, returning the layer-summed outputs.
    pub fn outputs(&self, adjs: &[NormalizedAdjacency]) -> Result<BehaviorOutputs> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let graph = forward_pkf(&mut tape, &bound, adjs, &self.config.pkf())?;
        Ok(BehaviorOutputs::from_graph(&tape, &graph))
    }

    pub fn scorer<'a>(&'a self, head: &'a HeadConfig, outputs: &'a BehaviorOutputs) -> Result<HeadScorer<'a>> {
        HeadScorer::new(head, &self.params, outputs, self.user_count)
    }

    /// Builds the regularized total loss of `batch` on `tape`.
    pub fn loss_graph<'a>(
        &'a self,
        tape: &mut Tape,
        adjs: &[NormalizedAdjacency],
        batch: &Batch,
        weights: &LossWeights,
        mu: f64,
    ) -> Result<LossGraph<'a>> {
        let bound = self.params.bind(tape);
        self.loss_graph_bound(tape, bound, adjs, batch, weights, mu)
    }

    /// As [`Model::loss_graph`], with the parameters already on the tape.
    pub fn loss_graph_bound<'a>(
        &'a self,
        tape: &mut Tape,
        bound: Bound<'a>,
        adjs: &[NormalizedAdjacency],
        batch: &Batch,
        weights: &LossWeights,
        mu: f64,
    ) -> Result<LossGraph<'a>> {
        let kk = self.config.behaviors();
        if weights.len() != kk {
            return Err(PkefError::Config(format!("{} loss weights for {kk} behaviors", weights.len())));
        }
        let streams = forward_pkf(tape, &bound, adjs, &self.config.pkf())?;
        let head = self.config.head_config();
        let nu = self.user_count;

        let mut par_terms = Vec::new();
        let mut cas_terms = Vec::new();
        for (k, triples) in batch.ranking.iter().enumerate() {
            let w = weights.get(k);
            if triples.is_empty() || w == 0.0 {
                continue;
            }
            let users = Arc::new(triples.iter().map(|t| t.user).collect::<Vec<_>>());
            let pos = Arc::new(triples.iter().map(|t| nu + t.pos).collect::<Vec<_>>());
            let neg = Arc::new(triples.iter().map(|t| nu + t.neg).collect::<Vec<_>>());

            if let Some(p) = streams.parallel[k] {
                let pu = tape.gather_rows(p, Arc::clone(&users))?;
                let ps = tape.gather_rows(p, Arc::clone(&pos))?;
                let pt = tape.gather_rows(p, Arc::clone(&neg))?;
                let s_pos = experts::parallel_scores(tape, pu, ps)?;
                let s_neg = experts::parallel_scores(tape, pu, pt)?;
                par_terms.push((w, bpr_mean(tape, s_pos, s_neg)?));
            }

            let reps_u = gather_all(tape, &streams.cascade, &users)?;
            let reps_pos = PairReps {
                users: reps_u.clone(),
                items: gather_all(tape, &streams.cascade, &pos)?,
            };
            let reps_neg = PairReps {
                users: reps_u,
                items: gather_all(tape, &streams.cascade, &neg)?,
            };
            let s_pos = experts::cascade_scores(tape, &bound, &head, &reps_pos, k)?.score;
            let s_neg = experts::cascade_scores(tape, &bound, &head, &reps_neg, k)?.score;
            cas_terms.push((w, bpr_mean(tape, s_pos, s_neg)?));
        }

        let mut uni_terms = Vec::new();
        if self.config.has_unique_loss() {
            for (source, guide, triples) in &batch.unique {
                let w = weights.get(*guide);
                if triples.is_empty() || w == 0.0 {
                    continue;
                }
                let users = Arc::new(triples.iter().map(|t| t.user).collect::<Vec<_>>());
                let pos = Arc::new(triples.iter().map(|t| nu + t.pos).collect::<Vec<_>>());
                let neg = Arc::new(triples.iter().map(|t| nu + t.neg).collect::<Vec<_>>());
                let pick = [*source, *guide];
                let sel: Vec<Var> = pick.iter().map(|&k| streams.cascade[k]).collect();
                let reps_u = gather_all(tape, &sel, &users)?;
                let reps_pos = PairReps {
                    users: reps_u.clone(),
                    items: gather_all(tape, &sel, &pos)?,
                };
                let reps_neg = PairReps {
                    users: reps_u,
                    items: gather_all(tape, &sel, &neg)?,
                };
                let s_pos = experts::unique_scores(tape, &reps_pos, 0, 1)?;
                let s_neg = experts::unique_scores(tape, &reps_neg, 0, 1)?;
                uni_terms.push((w, bpr_mean(tape, s_pos, s_neg)?));
            }
        }

        let parallel = weighted_sum(tape, &par_terms)?;
        let cascade = weighted_sum(tape, &cas_terms)?;
        let unique = weighted_sum(tape, &uni_terms)?;
        let regularization = if mu > 0.0 {
            let sq: Vec<Var> = bound.vars().iter().map(|&v| tape.sum_squares(v)).collect();
            let s = tape.add_all(&sq)?;
            Some(tape.scale(s, mu))
        } else {
            None
        };
        let parts: Vec<Var> = [parallel, cascade, unique, regularization].into_iter().flatten().collect();
        let total = if parts.is_empty() {
            tape.leaf(DenseMatrix::zeros(1, 1))
        } else {
            tape.add_all(&parts)?
        };
        Ok(LossGraph {
            total,
            parallel,
            cascade,
            unique,
            regularization,
            bound,
            streams,
        })
    }

    /// Loss value and per-parameter gradients for one batch.
    pub fn loss_and_gradients(
        &self,
        adjs: &[NormalizedAdjacency],
        batch: &Batch,
        weights: &LossWeights,
        mu: f64,
    ) -> Result<(LossParts, Vec<DenseMatrix>)> {
        let mut tape = Tape::new();
        let graph = self.loss_graph(&mut tape, adjs, batch, weights, mu)?;
        let parts = graph.parts(&tape);
        let mut grads = tape.backward(graph.total)?;
        let out = graph.bound.vars().iter().map(|&v| grads.take(v)).collect();
        Ok((parts, out))
    }
}

fn gather_all(tape: &mut Tape, sources: &[Var], idx: &Arc<Vec<usize>>) -> Result<Vec<Var>> {
    sources
        .iter()
        .map(|&s| tape.gather_rows(s, Arc::clone(idx)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_normalized_adjacency, BehaviorDataset};

    fn tiny() -> (BehaviorDataset, Vec<NormalizedAdjacency>) {
        let ds = BehaviorDataset::from_pairs(
            3,
            4,
            vec!["view".into(), "buy".into()],
            vec![vec![(0, 0), (0, 1), (1, 2), (2, 3), (2, 0)], vec![(0, 1), (2, 3)]],
            vec![(1, 3)],
        )
        .unwrap();
        let adjs = (0..2).map(|k| build_normalized_adjacency(&ds, k)).collect();
        (ds, adjs)
    }

    fn config(head: HeadVariant, fusion: Option<FusionScheme>) -> ModelConfig {
        ModelConfig {
            dim: 3,
            layers: vec![2, 1],
            fusion,
            head,
            gamma: 0.1,
            tower: Tower::Sum,
        }
    }

    #[test]
    fn plain_scorer_matches_tape_head() {
        let (_, adjs) = tiny();
        for head in HeadVariant::ALL {
            let model = Model::init(config(head, Some(FusionScheme::Projection)), 3, 4, 11).unwrap();
            let outputs = model.outputs(&adjs).unwrap();
            let hc = model.config.head_config();
            let scorer = model.scorer(&hc, &outputs).unwrap();

            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let users: Vec<usize> = vec![0, 1, 2, 0];
            let items: Vec<usize> = vec![0, 3, 1, 2];
            let leaf = |tape: &mut Tape, m: &DenseMatrix, idx: &[usize]| tape.leaf(m.gather_rows(idx));
            let item_nodes: Vec<usize> = items.iter().map(|v| 3 + v).collect();
            let reps = PairReps {
                users: outputs.cascade.iter().map(|m| leaf(&mut tape, m, &users)).collect(),
                items: outputs.cascade.iter().map(|m| leaf(&mut tape, m, &item_nodes)).collect(),
            };
            for k in 0..2 {
                let g = experts::cascade_scores(&mut tape, &bound, &hc, &reps, k).unwrap();
                for (i, (&u, &v)) in users.iter().zip(&items).enumerate() {
                    let plain = scorer.score(u, v, k).unwrap();
                    let taped = tape.value(g.score).get(i, 0);
                    assert!(
                        (plain - taped).abs() <= 1e-10 * (1.0 + plain.abs()),
                        "{head}: {plain} vs {taped}"
                    );
                }
            }
        }
    }

    #[test]
    fn loss_components_follow_variant() {
        let (ds, adjs) = tiny();
        let batch = Batch {
            ranking: vec![
                crate::data::sample_bpr_triples(&ds, 0, 1).triples,
                crate::data::sample_bpr_triples(&ds, 1, 2).triples,
            ],
            unique: vec![(0, 1, crate::data::build_unique_triples(&ds, 0, 1, 3).unwrap().triples)],
        };
        let w = LossWeights::new(vec![0.5, 0.5]).unwrap();

        let full = Model::init(config(HeadVariant::Pme, Some(FusionScheme::Projection)), 3, 4, 5).unwrap();
        let (p, g) = full.loss_and_gradients(&adjs, &batch, &w, 1e-4).unwrap();
        assert!(p.parallel > 0.0 && p.cascade > 0.0 && p.unique > 0.0 && p.regularization > 0.0);
        assert_eq!(g.len(), full.params.len());

        let base = Model::init(config(HeadVariant::Bilinear, None), 3, 4, 5).unwrap();
        let (p, _) = base.loss_and_gradients(&adjs, &batch, &w, 0.0).unwrap();
        assert_eq!((p.parallel, p.unique, p.regularization), (0.0, 0.0, 0.0));
        assert!(p.cascade > 0.0);
    }
}
