//! Ranking losses, regularization and the Adam update.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{PkefError, Result};
use crate::math::vector::log_sigmoid;
use crate::math::{DenseMatrix, Tape, Var};
use crate::params::ParamStore;

/// Per-behavior loss coefficients, summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights(Vec<f64>);

impl LossWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(PkefError::Config("loss weights are empty".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(PkefError::Config(format!("loss weights must be non-negative: {weights:?}")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(PkefError::Config(format!("loss weights sum to {total}, expected 1")));
        }
        Ok(LossWeights(weights))
    }

    /// Equal weight on every behavior.
    pub fn uniform(k: usize) -> Self {
        LossWeights(vec![1.0 / k as f64; k])
    }

    /// `(0, 4/6, 2/6)` for three behaviors, the target alone for one,
    /// otherwise a 2:1 split between the last two behaviors.
    pub fn default_for(k: usize) -> Self {
        match k {
            0 => LossWeights(Vec::new()),
            1 => LossWeights(vec![1.0]),
            _ => {
                let mut w = vec![0.0; k];
                w[k - 2] = 4.0 / 6.0;
                w[k - 1] = 2.0 / 6.0;
                LossWeights(w)
            }
        }
    }

    pub fn get(&self, k: usize) -> f64 {
        self.0[k]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// `−ln σ(pos − neg)`.
pub fn bpr_term(pos_score: f64, neg_score: f64) -> f64 {
    -log_sigmoid(pos_score - neg_score)
}

fn weighted_batch_mean<'a>(groups: impl Iterator<Item = (f64, &'a [(f64, f64)])>) -> f64 {
    let mut total = 0.0;
    for (w, pairs) in groups {
        if pairs.is_empty() || w == 0.0 {
            continue;
        }
        let mean = pairs.iter().map(|&(p, n)| bpr_term(p, n)).sum::<f64>() / pairs.len() as f64;
        total += w * mean;
    }
    total
}

/// Weighted BPR over per-behavior `(pos, neg)` score pairs, each behavior
/// averaged over its batch.
pub fn parallel_loss(scores: &[Vec<(f64, f64)>], weights: &LossWeights) -> f64 {
    if scores.iter().all(Vec::is_empty) {
        warn!("parallel loss on an empty batch");
        return 0.0;
    }
    weighted_batch_mean(scores.iter().enumerate().map(|(k, s)| (weights.get(k), s.as_slice())))
}

/// Same contract as [`parallel_loss`], over cascade-head scores.
pub fn cascade_loss(scores: &[Vec<(f64, f64)>], weights: &LossWeights) -> f64 {
    if scores.iter().all(Vec::is_empty) {
        warn!("cascade loss on an empty batch");
        return 0.0;
    }
    weighted_batch_mean(scores.iter().enumerate().map(|(k, s)| (weights.get(k), s.as_slice())))
}

/// Unique-part loss. Each entry is `(source, guide, pairs)`; the guide's
/// weight applies.
pub fn unique_loss(scores: &[(usize, usize, Vec<(f64, f64)>)], weights: &LossWeights) -> f64 {
    weighted_batch_mean(scores.iter().map(|(_, guide, s)| (weights.get(*guide), s.as_slice())))
}

/// Loss components of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub parallel: f64,
    pub cascade: f64,
    pub unique: f64,
    pub regularization: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.parallel + self.cascade + self.unique + self.regularization
    }
}

/// `L_par + L_cas + L_uni + μ‖Θ‖²`.
pub fn total_loss(parallel: f64, cascade: f64, unique: f64, params: &ParamStore, mu: f64) -> f64 {
    parallel + cascade + unique + mu * params.sum_squares()
}

/// Mean BPR loss of a batch of `(pos, neg)` score columns on the tape.
pub fn bpr_mean(tape: &mut Tape, pos: Var, neg: Var) -> Result<Var> {
    let diff = tape.sub(pos, neg)?;
    let ls = tape.log_sigmoid(diff);
    let m = tape.mean(ls)?;
    Ok(tape.scale(m, -1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    m: Vec<DenseMatrix>,
    v: Vec<DenseMatrix>,
    step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<DenseMatrix> = params
            .values()
            .iter()
            .map(|p| DenseMatrix::zeros(p.rows(), p.cols()))
            .collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Bias-corrected adaptive-moment update of `params` in place.
    pub fn adam_step(&mut self, params: &mut ParamStore, grads: &[DenseMatrix], cfg: &AdamConfig) -> Result<()> {
        if grads.len() != params.len() || grads.len() != self.m.len() {
            return Err(PkefError::shape(
                "adam_step",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (((p, g), m), v) in params
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            if !p.same_shape(g) {
                return Err(PkefError::shape(
                    "adam_step",
                    format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
                ));
            }
            let (pv, gv, mv, vv) = (p.values_mut(), g.values(), m.values_mut(), v.values_mut());
            for i in 0..pv.len() {
                mv[i] = cfg.beta1 * mv[i] + (1.0 - cfg.beta1) * gv[i];
                vv[i] = cfg.beta2 * vv[i] + (1.0 - cfg.beta2) * gv[i] * gv[i];
                let m_hat = mv[i] / bc1;
                let v_hat = vv[i] / bc2;
                pv[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}
