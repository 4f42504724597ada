//! Planted-preference multi-behavior data.
//!
//! Users and items get Gaussian latent factors. Each behavior scores every
//! pair by the latent inner product plus behavior-specific noise, and every
//! user interacts with their `round(density·|V|)` best-scoring items. A
//! fraction `overlap` of each downstream behavior's items is taken from the
//! user's upstream items, the rest from outside them. One target item per
//! user is held out for testing.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::BehaviorDataset;
use crate::error::{PkefError, Result};
use crate::math::dense::dot;
use crate::math::DenseMatrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub users: usize,
    pub items: usize,
    pub latent_dim: usize,
    /// Per-behavior interaction density, non-increasing along the cascade.
    pub densities: Vec<f64>,
    /// Share of each downstream behavior drawn from the upstream behavior.
    pub overlap: f64,
    /// Noise std relative to the latent affinity std, per behavior.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// 200 users, 100 items, three behaviors at densities 0.3/0.1/0.03.
    pub fn small(seed: u64) -> Self {
        SyntheticSpec {
            users: 200,
            items: 100,
            latent_dim: 8,
            densities: vec![0.3, 0.1, 0.03],
            overlap: 0.8,
            noise: 0.3,
            seed,
        }
    }

    pub fn behavior_names(&self) -> Vec<String> {
        (1..=self.densities.len()).map(|k| format!("b{k}")).collect()
    }

    /// Items per user for every behavior.
    pub fn per_user_counts(&self) -> Vec<usize> {
        self.densities
            .iter()
            .map(|d| (d * self.items as f64).round() as usize)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PkefError::Config(m));
        if self.users == 0 || self.items == 0 || self.latent_dim == 0 {
            return bad("users, items and latent dimension must be positive".into());
        }
        if self.densities.is_empty() {
            return bad("need at least one behavior".into());
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return bad(format!("overlap rate {} outside [0, 1]", self.overlap));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return bad(format!("noise {} must be non-negative", self.noise));
        }
        for (k, &d) in self.densities.iter().enumerate() {
            if !(d > 0.0 && d <= 1.0) {
                return bad(format!("density {d} of behavior {k} outside (0, 1]"));
            }
            if k > 0 && d > self.densities[k - 1] {
                return bad(format!("density of behavior {k} exceeds its upstream behavior"));
            }
        }
        let counts = self.per_user_counts();
        if counts.contains(&0) {
            return bad(format!(
                "densities {:?} give users no interactions with {} items",
                self.densities, self.items
            ));
        }
        for k in 1..counts.len() {
            let inside = (self.overlap * counts[k] as f64).round() as usize;
            let outside = counts[k] - inside;
            if outside > self.items - counts[k - 1] {
                return bad(format!(
                    "behavior {k} needs {outside} items outside the {} upstream items of each user, only {} exist",
                    counts[k - 1],
                    self.items - counts[k - 1]
                ));
            }
        }
        Ok(())
    }
}

/// Generated dataset plus the latent factors that produced it.
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub dataset: BehaviorDataset,
    pub user_factors: DenseMatrix,
    pub item_factors: DenseMatrix,
}

impl SyntheticData {
    /// Noise-free latent affinity.
    pub fn affinity(&self, user: usize, item: usize) -> f64 {
        dot(self.user_factors.row(user), self.item_factors.row(item))
    }
}

fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> DenseMatrix {
    let v = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
        .collect();
    DenseMatrix::from_vec(rows, cols, v).expect("length matches")
}

/// Indices of the `n` largest scores in `pool`, ties by index.
fn top_n(scores: &[f64], pool: impl Iterator<Item = usize>, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = pool.collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scale = 1.0 / (spec.latent_dim as f64).sqrt();
    let user_factors = gaussian(spec.users, spec.latent_dim, scale, &mut rng);
    let item_factors = gaussian(spec.items, spec.latent_dim, scale, &mut rng);
    // inner products of unit-variance factors scaled this way have std ~ 1/sqrt(dim)
    let noise_std = spec.noise * scale;

    let counts = spec.per_user_counts();
    let kk = counts.len();
    let mut raw: Vec<Vec<(usize, usize)>> = vec![Vec::new(); kk];
    let mut test = Vec::with_capacity(spec.users);
    let mut scores = vec![0.0; spec.items];
    for u in 0..spec.users {
        let mut upstream: Vec<usize> = Vec::new();
        for (k, &n) in counts.iter().enumerate() {
            for (v, s) in scores.iter_mut().enumerate() {
                let eps: f64 = rng.sample(StandardNormal);
                *s = dot(user_factors.row(u), item_factors.row(v)) + noise_std * eps;
            }
            let chosen = if k == 0 {
                top_n(&scores, 0..spec.items, n)
            } else {
                let inside = (spec.overlap * n as f64).round() as usize;
                let mut mark = vec![false; spec.items];
                for &v in &upstream {
                    mark[v] = true;
                }
                let mut c = top_n(&scores, upstream.iter().copied(), inside);
                c.extend(top_n(&scores, (0..spec.items).filter(|&v| !mark[v]), n - inside));
                c
            };
            let mut sorted = chosen.clone();
            sorted.sort_unstable();
            if k + 1 == kk {
                let held = *sorted.choose(&mut rng).expect("counts are positive");
                test.push((u, held));
                raw[k].extend(sorted.iter().filter(|&&v| v != held).map(|&v| (u, v)));
            } else {
                raw[k].extend(sorted.iter().map(|&v| (u, v)));
            }
            upstream = sorted;
        }
    }
    let dataset = BehaviorDataset::from_pairs(spec.users, spec.items, spec.behavior_names(), raw, test)?;
    Ok(SyntheticData {
        dataset,
        user_factors,
        item_factors,
    })
}
