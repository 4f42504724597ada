#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pkef::data::{BehaviorDataset, NormalizedAdjacency};
use pkef::math::gradcheck::check_gradients;
use pkef::math::DenseMatrix;
use pkef::model::{Batch, Model};
use pkef::objective::LossWeights;
use pkef::params::ParamStore;
use pkef::propagation::{linear_t, vanilla_b, vanilla_w, FusionScheme, EMB_ITEM, EMB_USER};
use pkef::train::{adjacencies, epoch_triples};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random dataset with every behavior non-empty and one test pair.
pub fn tiny_dataset(rng: &mut impl Rng, users: usize, items: usize, behaviors: usize) -> BehaviorDataset {
    let mut raw = Vec::new();
    for _ in 0..behaviors {
        let mut pairs = Vec::new();
        for u in 0..users {
            for v in 0..items {
                if rng.random_bool(0.45) {
                    pairs.push((u, v));
                }
            }
        }
        if pairs.is_empty() {
            pairs.push((0, 0));
        }
        raw.push(pairs);
    }
    let target = &raw[behaviors - 1];
    let test: Vec<(usize, usize)> = (0..users)
        .flat_map(|u| (0..items).map(move |v| (u, v)))
        .filter(|p| !target.contains(p))
        .take(1)
        .collect();
    let names = (0..behaviors).map(|k| format!("b{k}")).collect();
    BehaviorDataset::from_pairs(users, items, names, raw, test).unwrap()
}

/// Adds uniform noise to every parameter so no gate or tower sits at a
/// symmetric starting point.
pub fn perturb(params: &mut ParamStore, rng: &mut impl Rng, scale: f64) {
    for m in params.values_mut() {
        for x in m.values_mut() {
            *x += rng.random_range(-scale..scale);
        }
    }
}

/// Analytic-vs-numeric gradient error of the full regularized loss over
/// every model parameter.
pub fn end_to_end_gradient_error(model: &Model, ds: &BehaviorDataset, weights: &LossWeights, mu: f64, seed: u64) -> f64 {
    let adjs = adjacencies(ds);
    let batch = epoch_triples(ds, &model.config, weights, seed, 1).unwrap();
    gradient_error_for(model, &adjs, &batch, weights, mu)
}

pub fn gradient_error_for(model: &Model, adjs: &[NormalizedAdjacency], batch: &Batch, weights: &LossWeights, mu: f64) -> f64 {
    check_gradients(model.params.values(), 1e-3, |tape, vars| {
        let bound = model.params.bind_vars(vars.to_vec())?;
        Ok(model.loss_graph_bound(tape, bound, adjs, batch, weights, mu)?.total)
    })
    .unwrap()
}

/// `D⁻¹(A + I)` as a dense matrix, users first then items.
pub fn dense_normalized(users: usize, items: usize, pairs: &[(usize, usize)]) -> Vec<Vec<f64>> {
    let n = users + items;
    let mut a = vec![vec![0.0; n]; n];
    for &(u, v) in pairs {
        a[u][users + v] = 1.0;
        a[users + v][u] = 1.0;
    }
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += 1.0;
        let deg: f64 = row.iter().sum();
        for x in row.iter_mut() {
            *x /= deg;
        }
    }
    a
}

type Rows = Vec<Vec<f64>>;

fn matvec(a: &Rows, x: &Rows) -> Rows {
    let d = x[0].len();
    a.iter()
        .map(|row| (0..d).map(|c| row.iter().zip(x).map(|(w, xr)| w * xr[c]).sum()).collect())
        .collect()
}

fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

fn dotv(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn to_rows(m: &DenseMatrix) -> Rows {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

/// Layer sums of both streams for every behavior, written out directly
/// from the update rules with plain loops.
pub fn oracle_forward(
    adj: &[Rows],
    params: &ParamStore,
    layers: &[usize],
    fusion: Option<FusionScheme>,
) -> (Vec<Rows>, Vec<Option<Rows>>) {
    let mut e0 = to_rows(params.get(EMB_USER).unwrap());
    e0.extend(to_rows(params.get(EMB_ITEM).unwrap()));
    let n = e0.len();
    let d = e0[0].len();

    let mut cascade_out = Vec::new();
    let mut parallel_out = Vec::new();
    let mut z0 = e0.clone();
    for (k, &lk) in layers.iter().enumerate() {
        let mut z = z0.clone();
        let mut p = e0.clone();
        let mut z_sum = z.clone();
        let mut p_sum = p.clone();
        for l in 0..lk {
            let e_cas = matvec(&adj[k], &z);
            let e_par = matvec(&adj[k], &p);
            let mut next = add(&e_cas, &z);
            if let Some(scheme) = fusion {
                for i in 0..n {
                    let (c, q) = (&e_cas[i], &e_par[i]);
                    let enh: Vec<f64> = match scheme {
                        FusionScheme::Projection => {
                            let cc = dotv(c, c);
                            let coef = if cc.sqrt() < 1e-12 { 0.0 } else { dotv(q, c) / cc };
                            c.iter().map(|x| coef * x).collect()
                        }
                        FusionScheme::Summation => q.clone(),
                        FusionScheme::Linear => {
                            let t = params.get(&linear_t(k, l)).unwrap();
                            (0..d).map(|r| dotv(t.row(r), q)).collect()
                        }
                        FusionScheme::Vanilla => {
                            let w = params.get(&vanilla_w(k, l)).unwrap();
                            let b = params.get(&vanilla_b(k, l)).unwrap();
                            let logits: Vec<f64> = (0..4).map(|j| dotv(w.row(j), c) + b.get(0, j)).collect();
                            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let ex: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
                            let s: f64 = ex.iter().sum();
                            (0..d)
                                .map(|j| {
                                    (ex[0] * c[j] + ex[1] * q[j] + ex[2] * (c[j] - q[j]) + ex[3] * c[j] * q[j]) / s
                                })
                                .collect()
                        }
                    };
                    for j in 0..d {
                        next[i][j] += enh[j];
                    }
                }
                p = add(&e_par, &p);
                p_sum = add(&p_sum, &p);
            }
            z = next;
            z_sum = add(&z_sum, &z);
        }
        cascade_out.push(z_sum);
        parallel_out.push(fusion.map(|_| p_sum.clone()));
        z0 = add(&z, &z0);
    }
    (cascade_out, parallel_out)
}

pub fn max_diff(a: &DenseMatrix, b: &Rows) -> f64 {
    let mut worst = 0.0f64;
    for (r, row) in b.iter().enumerate() {
        for (c, x) in row.iter().enumerate() {
            worst = worst.max((a.get(r, c) - x).abs());
        }
    }
    worst
}
