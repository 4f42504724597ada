//! Gradient-flow probes contrasting separated-input experts with a
//! coupled-input head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::experts::{cascade_scores, init_head_params, HeadConfig, HeadVariant, PairReps, Tower};
use crate::math::gradcheck::check_gradients;
use crate::math::{DenseMatrix, Tape, Var};
use crate::objective::bpr_mean;
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecouplingReport {
    pub instances: usize,
    /// Largest `|∂L_k/∂q^t|`, `t ≠ k`, over all PME instances.
    pub pme_max_cross_gradient: f64,
    pub coupled_variant: HeadVariant,
    /// Largest `|∂L_k/∂z^t|`, `t ≠ k`, for the coupled head on the conflict
    /// instance.
    pub coupled_max_cross_gradient: f64,
    /// Finite-difference agreement of that gradient (relative error).
    pub coupled_fd_error: f64,
    /// Cosine between the two tasks' gradients on the shared user
    /// representation; negative means the tasks pull it apart.
    pub conflict_cosine: f64,
}

fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> DenseMatrix {
    let v = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    DenseMatrix::from_vec(rows, cols, v).expect("length matches")
}

/// Head parameters with every gate and tower perturbed away from its
/// initial value, so the probe does not rely on a symmetric start.
fn perturbed_head(cfg: &HeadConfig, rng: &mut impl Rng) -> ParamStore {
    let mut p = ParamStore::new();
    init_head_params(&mut p, cfg, rng);
    for m in p.values_mut() {
        let noise = random_matrix(m.rows(), m.cols(), rng).scale(0.3);
        *m = m.add(&noise);
    }
    p
}

struct Instance {
    /// Per behavior: user, positive item, negative item representations.
    users: Vec<DenseMatrix>,
    pos: Vec<DenseMatrix>,
    neg: Vec<DenseMatrix>,
}

fn bpr_for(tape: &mut Tape, params: &ParamStore, cfg: &HeadConfig, inst: &[Var], k: usize) -> Result<(Var, Vec<Var>, Vec<Var>)> {
    let kk = cfg.behaviors;
    let bound = params.bind(tape);
    let users = inst[..kk].to_vec();
    let pos = PairReps {
        users: users.clone(),
        items: inst[kk..2 * kk].to_vec(),
    };
    let neg = PairReps {
        users,
        items: inst[2 * kk..].to_vec(),
    };
    let gp = cascade_scores(tape, &bound, cfg, &pos, k)?;
    let gn = cascade_scores(tape, &bound, cfg, &neg, k)?;
    let loss = bpr_mean(tape, gp.score, gn.score)?;
    Ok((loss, gp.experts, gn.experts))
}

fn leaves(tape: &mut Tape, inst: &Instance) -> Vec<Var> {
    inst.users
        .iter()
        .chain(&inst.pos)
        .chain(&inst.neg)
        .map(|m| tape.leaf(m.clone()))
        .collect()
}

fn max_abs(m: &DenseMatrix) -> f64 {
    m.values().iter().fold(0.0, |a, x| a.max(x.abs()))
}

/// Runs `instances` random PME probes plus the coupled-head contrast.
pub fn decoupling_probe(seed: u64, instances: usize) -> Result<DecouplingReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 3;
    let mut pme_worst = 0.0f64;
    for i in 0..instances {
        let kk = 2 + i % 2;
        let batch = 1 + rng.random_range(0..3);
        let cfg = HeadConfig {
            variant: HeadVariant::Pme,
            behaviors: kk,
            dim: d,
            gamma: 0.1,
            tower: if i % 3 == 0 { Tower::Linear } else { Tower::Sum },
        };
        let params = perturbed_head(&cfg, &mut rng);
        let mut draw = || (0..kk).map(|_| random_matrix(batch, d, &mut rng)).collect::<Vec<_>>();
        let inst = Instance {
            users: draw(),
            pos: draw(),
            neg: draw(),
        };
        for k in 0..kk {
            let mut tape = Tape::new();
            let vars = leaves(&mut tape, &inst);
            let (loss, qp, qn) = bpr_for(&mut tape, &params, &cfg, &vars, k)?;
            let grads = tape.backward(loss)?;
            for t in (0..kk).filter(|&t| t != k) {
                pme_worst = pme_worst.max(max_abs(&grads.get(qp[t]))).max(max_abs(&grads.get(qn[t])));
            }
        }
    }

    // Two behaviors that order the same two items oppositely for one user.
    let kk = 2;
    let cfg = HeadConfig {
        variant: HeadVariant::Mmoe,
        behaviors: kk,
        dim: d,
        gamma: 0.1,
        tower: Tower::Sum,
    };
    let params = perturbed_head(&cfg, &mut rng);
    let user: Vec<DenseMatrix> = (0..kk).map(|_| random_matrix(1, d, &mut rng)).collect();
    let a: Vec<DenseMatrix> = (0..kk).map(|_| random_matrix(1, d, &mut rng)).collect();
    let b: Vec<DenseMatrix> = (0..kk).map(|_| random_matrix(1, d, &mut rng)).collect();
    let prefers_a = Instance {
        users: user.clone(),
        pos: a.clone(),
        neg: b.clone(),
    };
    let prefers_b = Instance {
        users: user,
        pos: b,
        neg: a,
    };

    let user_grad = |inst: &Instance, k: usize, t: usize| -> Result<DenseMatrix> {
        let mut tape = Tape::new();
        let vars = leaves(&mut tape, inst);
        let (loss, _, _) = bpr_for(&mut tape, &params, &cfg, &vars, k)?;
        Ok(tape.backward(loss)?.get(vars[t]))
    };
    // behavior 1's loss seen from behavior 0's user representation
    let cross = user_grad(&prefers_b, 1, 0)?;
    let own = user_grad(&prefers_a, 0, 0)?;
    let cos = {
        let (x, y) = (own.values(), cross.values());
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        dot / (own.sum_squares().sqrt() * cross.sum_squares().sqrt()).max(1e-300)
    };

    let inputs: Vec<DenseMatrix> = prefers_b
        .users
        .iter()
        .chain(&prefers_b.pos)
        .chain(&prefers_b.neg)
        .cloned()
        .collect();
    let fd = check_gradients(&inputs, 1e-3, |tape, vars| Ok(bpr_for(tape, &params, &cfg, vars, 1)?.0))?;

    Ok(DecouplingReport {
        instances,
        pme_max_cross_gradient: pme_worst,
        coupled_variant: cfg.variant,
        coupled_max_cross_gradient: max_abs(&cross),
        coupled_fd_error: fd,
        conflict_cosine: cos,
    })
}
