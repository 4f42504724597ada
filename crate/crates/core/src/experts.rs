//! Multi-task prediction heads.
//!
//! The projection-disentangling head keeps each behavior's pair vector
//! `q^k = z_u^k ∘ z_v^k` separate. For behavior `k` every other expert is
//! projected onto `q^k`; only the collinear (shared) parts are mixed by the
//! behavior-`k` gate, so the score is a function of `q^k` alone once the
//! projection scalars are held constant. The orthogonal remainders feed the
//! unique-part loss.
//!
//! The baseline heads (shared-bottom, bilinear, MMOE, PLE) exist for
//! ablations. All but bilinear consume one coupled input built as a
//! learnable weighted sum of the behavior representations.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PkefError, Result};
use crate::math::dense::dot;
use crate::math::vector::{project, softmax};
use crate::math::{DenseMatrix, Tape, Var};
use crate::params::{xavier_uniform, Bound, ParamStore};
use crate::propagation::BehaviorOutputs;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadVariant {
    Pme,
    SharedBottom,
    Bilinear,
    Mmoe,
    Ple,
}

impl HeadVariant {
    pub const ALL: [HeadVariant; 5] = [
        HeadVariant::Pme,
        HeadVariant::SharedBottom,
        HeadVariant::Bilinear,
        HeadVariant::Mmoe,
        HeadVariant::Ple,
    ];

    pub fn is_gated(self) -> bool {
        matches!(self, HeadVariant::Pme | HeadVariant::Mmoe | HeadVariant::Ple)
    }

    pub fn uses_coupled_input(self) -> bool {
        matches!(self, HeadVariant::SharedBottom | HeadVariant::Mmoe | HeadVariant::Ple)
    }
}

impl fmt::Display for HeadVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            HeadVariant::Pme => "pme",
            HeadVariant::SharedBottom => "sb",
            HeadVariant::Bilinear => "bilinear",
            HeadVariant::Mmoe => "mmoe",
            HeadVariant::Ple => "ple",
        };
        f.write_str(s)
    }
}

impl FromStr for HeadVariant {
    type Err = PkefError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pme" => Ok(HeadVariant::Pme),
            "sb" | "shared-bottom" | "sharedbottom" => Ok(HeadVariant::SharedBottom),
            "bilinear" => Ok(HeadVariant::Bilinear),
            "mmoe" => Ok(HeadVariant::Mmoe),
            "ple" => Ok(HeadVariant::Ple),
            other => Err(PkefError::Config(format!("unknown head variant '{other}'"))),
        }
    }
}

/// Map from the aggregated expert vector to a score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tower {
    /// Sum of components.
    Sum,
    /// Learned weights, initialized to ones.
    Linear,
}

impl FromStr for Tower {
    type Err = PkefError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sum" => Ok(Tower::Sum),
            "linear" => Ok(Tower::Linear),
            other => Err(PkefError::Config(format!("unknown tower '{other}'"))),
        }
    }
}

impl fmt::Display for Tower {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tower::Sum => "sum",
            Tower::Linear => "linear",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub variant: HeadVariant,
    pub behaviors: usize,
    pub dim: usize,
    /// Scale applied to cross-behavior shared parts.
    pub gamma: f64,
    pub tower: Tower,
}

pub mod names {
    pub fn pme_gate_w(k: usize) -> String {
        format!("head.pme.gate_w.{k}")
    }
    pub fn pme_gate_b(k: usize) -> String {
        format!("head.pme.gate_b.{k}")
    }
    pub fn tower(k: usize) -> String {
        format!("head.tower.{k}")
    }
    pub const COUPLE: &str = "head.couple";
    pub const SB_SHARED: &str = "head.sb.shared";
    pub fn sb_tower(k: usize) -> String {
        format!("head.sb.tower.{k}")
    }
    pub fn bilinear(k: usize) -> String {
        format!("head.bilinear.{k}")
    }
    pub fn mmoe_expert(j: usize) -> String {
        format!("head.mmoe.expert.{j}")
    }
    pub fn mmoe_gate_w(k: usize) -> String {
        format!("head.mmoe.gate_w.{k}")
    }
    pub fn mmoe_gate_b(k: usize) -> String {
        format!("head.mmoe.gate_b.{k}")
    }
    pub fn ple_expert(k: usize) -> String {
        format!("head.ple.expert.{k}")
    }
    pub const PLE_SHARED: &str = "head.ple.shared";
    pub fn ple_gate_w(k: usize) -> String {
        format!("head.ple.gate_w.{k}")
    }
    pub fn ple_gate_b(k: usize) -> String {
        format!("head.ple.gate_b.{k}")
    }
}

fn near_identity(dim: usize, rng: &mut impl Rng) -> DenseMatrix {
    let noise = xavier_uniform(dim, dim, rng).scale(0.1);
    DenseMatrix::identity(dim).add(&noise)
}

/// Adds the parameters of the configured head. Gates start at zero so an
/// untrained gate is uniform.
pub fn init_head_params(store: &mut ParamStore, cfg: &HeadConfig, rng: &mut impl Rng) {
    let (kk, d) = (cfg.behaviors, cfg.dim);
    match cfg.variant {
        HeadVariant::Pme => {
            for k in 0..kk {
                store.insert(names::pme_gate_w(k), DenseMatrix::zeros(kk, 2 * d));
                store.insert(names::pme_gate_b(k), DenseMatrix::zeros(1, kk));
                if cfg.tower == Tower::Linear {
                    store.insert(names::tower(k), DenseMatrix::filled(1, d, 1.0));
                }
            }
        }
        HeadVariant::Bilinear => {
            for k in 0..kk {
                store.insert(names::bilinear(k), DenseMatrix::identity(d));
            }
        }
        HeadVariant::SharedBottom => {
            store.insert(names::COUPLE, DenseMatrix::filled(1, kk, 1.0 / kk as f64));
            store.insert(names::SB_SHARED, DenseMatrix::identity(d));
            for k in 0..kk {
                store.insert(names::sb_tower(k), DenseMatrix::filled(1, d, 1.0));
            }
        }
        HeadVariant::Mmoe => {
            store.insert(names::COUPLE, DenseMatrix::filled(1, kk, 1.0 / kk as f64));
            for j in 0..kk {
                store.insert(names::mmoe_expert(j), near_identity(d, rng));
            }
            for k in 0..kk {
                store.insert(names::mmoe_gate_w(k), DenseMatrix::zeros(kk, 2 * d));
                store.insert(names::mmoe_gate_b(k), DenseMatrix::zeros(1, kk));
            }
        }
        HeadVariant::Ple => {
            store.insert(names::COUPLE, DenseMatrix::filled(1, kk, 1.0 / kk as f64));
            store.insert(names::PLE_SHARED, near_identity(d, rng));
            for k in 0..kk {
                store.insert(names::ple_expert(k), near_identity(d, rng));
                store.insert(names::ple_gate_w(k), DenseMatrix::zeros(2, 2 * d));
                store.insert(names::ple_gate_b(k), DenseMatrix::zeros(1, 2));
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Vector-level operations

/// Behavior-specific expert `z_u ∘ z_v`.
pub fn make_experts(z_user: &[f64], z_item: &[f64]) -> Vec<f64> {
    assert_eq!(z_user.len(), z_item.len());
    z_user.iter().zip(z_item).map(|(a, b)| a * b).collect()
}

/// Shared/unique split of `q_other` guided by `q_guide`.
#[derive(Clone, Debug, PartialEq)]
pub struct Disentangled {
    pub shared: Vec<f64>,
    pub unique: Vec<f64>,
}

/// Splits `q_other` into `scale · proj(q_other, q_guide)` and the unscaled
/// orthogonal remainder. Pass `scale = 1` for the self case.
pub fn disentangle(q_other: &[f64], q_guide: &[f64], scale: f64) -> Disentangled {
    let col = project(q_other, q_guide);
    Disentangled {
        shared: col.iter().map(|v| scale * v).collect(),
        unique: q_other.iter().zip(&col).map(|(a, c)| a - c).collect(),
    }
}

/// Orthogonal remainder of `source` with respect to `guide`.
pub fn unique_part(source: &[f64], guide: &[f64]) -> Vec<f64> {
    disentangle(source, guide, 1.0).unique
}

/// `softmax(W (z_u || z_v) + b)` with `W: K×2d`.
pub fn gate_weights(z_user: &[f64], z_item: &[f64], w: &DenseMatrix, b: &[f64]) -> Vec<f64> {
    let d = z_user.len();
    let logits: Vec<f64> = (0..w.rows())
        .map(|j| {
            let row = w.row(j);
            dot(&row[..d], z_user) + dot(&row[d..], z_item) + b[j]
        })
        .collect();
    softmax(&logits)
}

/// Gate-weighted sum of shared parts followed by the tower.
pub fn aggregate_predict(shared: &[Vec<f64>], gate: &[f64], tower: Option<&[f64]>) -> f64 {
    let d = shared.first().map_or(0, Vec::len);
    let mut agg = vec![0.0; d];
    for (part, g) in shared.iter().zip(gate) {
        for (a, v) in agg.iter_mut().zip(part) {
            *a += g * v;
        }
    }
    match tower {
        Some(w) => dot(&agg, w),
        None => agg.iter().sum(),
    }
}

pub fn predict_parallel(p_user: &[f64], p_item: &[f64]) -> f64 {
    dot(p_user, p_item)
}

pub fn predict_unique(qu_user: &[f64], qu_item: &[f64]) -> f64 {
    dot(qu_user, qu_item)
}

/// PME cascade score of one pair for behavior `k`, from the per-behavior
/// user and item representations.
pub fn pme_pair_score(
    zu: &[&[f64]],
    zv: &[&[f64]],
    k: usize,
    gamma: f64,
    gate_w: &DenseMatrix,
    gate_b: &[f64],
    tower: Option<&[f64]>,
) -> f64 {
    let experts: Vec<Vec<f64>> = zu.iter().zip(zv).map(|(u, v)| make_experts(u, v)).collect();
    let shared: Vec<Vec<f64>> = experts
        .iter()
        .enumerate()
        .map(|(j, q)| {
            if j == k {
                q.clone()
            } else {
                disentangle(q, &experts[k], gamma).shared
            }
        })
        .collect();
    let gate = gate_weights(zu[k], zv[k], gate_w, gate_b);
    aggregate_predict(&shared, &gate, tower)
}

// ---------------------------------------------------------------------------
// Tape-level heads

/// Gathered per-behavior representations for a batch of pairs. Row `i` of
/// `users[k]` and `items[k]` belong to the same pair.
#[derive(Clone, Debug)]
pub struct PairReps {
    pub users: Vec<Var>,
    pub items: Vec<Var>,
}

/// Cascade scores (`B×1`) plus, for PME, the expert nodes `q^j`.
#[derive(Clone, Debug)]
pub struct CascadeGraph {
    pub score: Var,
    pub experts: Vec<Var>,
    pub gate: Option<Var>,
}

fn coupled(tape: &mut Tape, params: &Bound<'_>, reps: &[Var]) -> Result<Var> {
    let c = params.var(names::COUPLE)?;
    let mut terms = Vec::with_capacity(reps.len());
    for (k, &r) in reps.iter().enumerate() {
        let ck = tape.col(c, k)?;
        terms.push(tape.mul_scalar(r, ck)?);
    }
    tape.add_all(&terms)
}

fn gate_on_tape(tape: &mut Tape, zu: Var, zv: Var, w: Var, b: Var) -> Result<Var> {
    let input = tape.concat_cols(zu, zv)?;
    let logits = tape.matmul_t(input, w)?;
    let logits = tape.add_row(logits, b)?;
    Ok(tape.softmax_rows(logits))
}

fn mix(tape: &mut Tape, parts: &[Var], gate: Var) -> Result<Var> {
    let mut terms = Vec::with_capacity(parts.len());
    for (j, &p) in parts.iter().enumerate() {
        let gj = tape.col(gate, j)?;
        terms.push(tape.mul_col(p, gj)?);
    }
    tape.add_all(&terms)
}

/// Cascade-head scores of behavior `k` for a batch.
pub fn cascade_scores(tape: &mut Tape, params: &Bound<'_>, cfg: &HeadConfig, reps: &PairReps, k: usize) -> Result<CascadeGraph> {
    let kk = cfg.behaviors;
    if reps.users.len() != kk || reps.items.len() != kk {
        return Err(PkefError::Config(format!(
            "head expects {kk} behaviors, got {}",
            reps.users.len()
        )));
    }
    match cfg.variant {
        HeadVariant::Pme => {
            let mut experts = Vec::with_capacity(kk);
            for j in 0..kk {
                experts.push(tape.mul(reps.users[j], reps.items[j])?);
            }
            let mut shared = Vec::with_capacity(kk);
            for j in 0..kk {
                if j == k {
                    shared.push(experts[k]);
                } else {
                    let p = tape.project_rows(experts[j], experts[k], true)?;
                    shared.push(tape.scale(p, cfg.gamma));
                }
            }
            let w = params.var(&names::pme_gate_w(k))?;
            let b = params.var(&names::pme_gate_b(k))?;
            let gate = gate_on_tape(tape, reps.users[k], reps.items[k], w, b)?;
            let agg = mix(tape, &shared, gate)?;
            let score = match cfg.tower {
                Tower::Sum => tape.sum_cols(agg),
                Tower::Linear => {
                    let t = params.var(&names::tower(k))?;
                    tape.matmul_t(agg, t)?
                }
            };
            Ok(CascadeGraph {
                score,
                experts,
                gate: Some(gate),
            })
        }
        HeadVariant::Bilinear => {
            let w = params.var(&names::bilinear(k))?;
            let wv = tape.matmul_t(reps.items[k], w)?;
            let score = tape.dot_rows(reps.users[k], wv)?;
            Ok(CascadeGraph {
                score,
                experts: Vec::new(),
                gate: None,
            })
        }
        HeadVariant::SharedBottom => {
            let eu = coupled(tape, params, &reps.users)?;
            let ev = coupled(tape, params, &reps.items)?;
            let s = params.var(names::SB_SHARED)?;
            let hu = tape.matmul_t(eu, s)?;
            let hv = tape.matmul_t(ev, s)?;
            let pair = tape.mul(hu, hv)?;
            let t = params.var(&names::sb_tower(k))?;
            let score = tape.matmul_t(pair, t)?;
            Ok(CascadeGraph {
                score,
                experts: vec![pair],
                gate: None,
            })
        }
        HeadVariant::Mmoe => {
            let eu = coupled(tape, params, &reps.users)?;
            let ev = coupled(tape, params, &reps.items)?;
            let x = tape.mul(eu, ev)?;
            let mut outs = Vec::with_capacity(kk);
            for j in 0..kk {
                let e = params.var(&names::mmoe_expert(j))?;
                outs.push(tape.matmul_t(x, e)?);
            }
            let w = params.var(&names::mmoe_gate_w(k))?;
            let b = params.var(&names::mmoe_gate_b(k))?;
            let gate = gate_on_tape(tape, eu, ev, w, b)?;
            let agg = mix(tape, &outs, gate)?;
            Ok(CascadeGraph {
                score: tape.sum_cols(agg),
                experts: vec![x],
                gate: Some(gate),
            })
        }
        HeadVariant::Ple => {
            let eu = coupled(tape, params, &reps.users)?;
            let ev = coupled(tape, params, &reps.items)?;
            let x = tape.mul(eu, ev)?;
            let own = params.var(&names::ple_expert(k))?;
            let sh = params.var(names::PLE_SHARED)?;
            let outs = [tape.matmul_t(x, own)?, tape.matmul_t(x, sh)?];
            let w = params.var(&names::ple_gate_w(k))?;
            let b = params.var(&names::ple_gate_b(k))?;
            let gate = gate_on_tape(tape, eu, ev, w, b)?;
            let agg = mix(tape, &outs, gate)?;
            Ok(CascadeGraph {
                score: tape.sum_cols(agg),
                experts: vec![x],
                gate: Some(gate),
            })
        }
    }
}

/// Parallel-stream scores `p_u · p_v`.
pub fn parallel_scores(tape: &mut Tape, p_users: Var, p_items: Var) -> Result<Var> {
    tape.dot_rows(p_users, p_items)
}

/// Unique-part scores of source `source` guided by `guide`. The
/// decomposition is taken on each side separately with the projection
/// scalar held constant.
pub fn unique_scores(tape: &mut Tape, reps: &PairReps, source: usize, guide: usize) -> Result<Var> {
    let side = |tape: &mut Tape, src: Var, gd: Var| -> Result<Var> {
        let p = tape.project_rows(src, gd, true)?;
        tape.sub(src, p)
    };
    let u = side(tape, reps.users[source], reps.users[guide])?;
    let v = side(tape, reps.items[source], reps.items[guide])?;
    tape.dot_rows(u, v)
}

// ---------------------------------------------------------------------------
// Plain scoring for evaluation

/// Scores pairs from frozen outputs without building a tape.
pub struct HeadScorer<'a> {
    cfg: &'a HeadConfig,
    params: &'a ParamStore,
    outputs: &'a BehaviorOutputs,
    user_count: usize,
    /// Coupled representation per node, for coupled-input heads.
    coupled: Option<DenseMatrix>,
}

impl<'a> HeadScorer<'a> {
    pub fn new(cfg: &'a HeadConfig, params: &'a ParamStore, outputs: &'a BehaviorOutputs, user_count: usize) -> Result<Self> {
        let coupled = if cfg.variant.uses_coupled_input() {
            let c = params.get(names::COUPLE)?;
            let mut acc = DenseMatrix::zeros(outputs.cascade[0].rows(), cfg.dim);
            for (k, z) in outputs.cascade.iter().enumerate() {
                acc.axpy(c.get(0, k), z);
            }
            Some(acc)
        } else {
            None
        };
        Ok(HeadScorer {
            cfg,
            params,
            outputs,
            user_count,
            coupled,
        })
    }

    fn user_row(&self, k: usize, user: usize) -> &[f64] {
        self.outputs.cascade[k].row(user)
    }

    fn item_row(&self, k: usize, item: usize) -> &[f64] {
        self.outputs.cascade[k].row(self.user_count + item)
    }

    /// Gate weights of behavior `k` for one pair, for gated heads.
    pub fn gate(&self, user: usize, item: usize, k: usize) -> Result<Vec<f64>> {
        match self.cfg.variant {
            HeadVariant::Pme => {
                let w = self.params.get(&names::pme_gate_w(k))?;
                let b = self.params.get(&names::pme_gate_b(k))?;
                Ok(gate_weights(self.user_row(k, user), self.item_row(k, item), w, b.values()))
            }
            HeadVariant::Mmoe | HeadVariant::Ple => {
                let c = self.coupled.as_ref().expect("coupled heads precompute input");
                let (w, b) = if self.cfg.variant == HeadVariant::Mmoe {
                    (self.params.get(&names::mmoe_gate_w(k))?, self.params.get(&names::mmoe_gate_b(k))?)
                } else {
                    (self.params.get(&names::ple_gate_w(k))?, self.params.get(&names::ple_gate_b(k))?)
                };
                Ok(gate_weights(c.row(user), c.row(self.user_count + item), w, b.values()))
            }
            other => Err(PkefError::UnsupportedVariant {
                what: "gate export",
                variant: other.to_string(),
            }),
        }
    }

    /// Cascade score of behavior `k` for one pair.
    pub fn score(&self, user: usize, item: usize, k: usize) -> Result<f64> {
        let kk = self.cfg.behaviors;
        let d = self.cfg.dim;
        match self.cfg.variant {
            HeadVariant::Pme => {
                let zu: Vec<&[f64]> = (0..kk).map(|j| self.user_row(j, user)).collect();
                let zv: Vec<&[f64]> = (0..kk).map(|j| self.item_row(j, item)).collect();
                let w = self.params.get(&names::pme_gate_w(k))?;
                let b = self.params.get(&names::pme_gate_b(k))?;
                let tower = match self.cfg.tower {
                    Tower::Sum => None,
                    Tower::Linear => Some(self.params.get(&names::tower(k))?.values()),
                };
                Ok(pme_pair_score(&zu, &zv, k, self.cfg.gamma, w, b.values(), tower))
            }
            HeadVariant::Bilinear => {
                let w = self.params.get(&names::bilinear(k))?;
                let zu = self.user_row(k, user);
                let zv = self.item_row(k, item);
                Ok((0..d).map(|i| zu[i] * dot(w.row(i), zv)).sum())
            }
            HeadVariant::SharedBottom => {
                let c = self.coupled.as_ref().expect("precomputed");
                let s = self.params.get(names::SB_SHARED)?;
                let t = self.params.get(&names::sb_tower(k))?;
                let (eu, ev) = (c.row(user), c.row(self.user_count + item));
                Ok((0..d).map(|i| t.get(0, i) * dot(s.row(i), eu) * dot(s.row(i), ev)).sum())
            }
            HeadVariant::Mmoe | HeadVariant::Ple => {
                let c = self.coupled.as_ref().expect("precomputed");
                let (eu, ev) = (c.row(user), c.row(self.user_count + item));
                let x = make_experts(eu, ev);
                let gate = self.gate(user, item, k)?;
                let experts: Vec<&DenseMatrix> = if self.cfg.variant == HeadVariant::Mmoe {
                    (0..kk)
                        .map(|j| self.params.get(&names::mmoe_expert(j)))
                        .collect::<Result<_>>()?
                } else {
                    vec![self.params.get(&names::ple_expert(k))?, self.params.get(names::PLE_SHARED)?]
                };
                Ok(experts
                    .iter()
                    .zip(&gate)
                    .map(|(e, g)| g * (0..d).map(|i| dot(e.row(i), &x)).sum::<f64>())
                    .sum())
            }
        }
    }

    /// Target-behavior scores of every item for `user`.
    pub fn score_items(&self, user: usize) -> Result<Vec<f64>> {
        let k = self.cfg.behaviors - 1;
        let n_items = self.outputs.cascade[0].rows() - self.user_count;
        (0..n_items).map(|v| self.score(user, v, k)).collect()
    }
}
