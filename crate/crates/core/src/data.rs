//! Interaction datasets, normalized adjacencies and training triples.
//!
//! On disk a dataset is a directory with one `<behavior>.txt` per behavior,
//! a `test.txt` holding the held-out target-behavior pairs and an optional
//! `size.txt` with `|U| |V|`. Every interaction line is `user item`, both
//! 0-indexed.
//!
//! Inside the stacked graph users come first (`0..|U|`), then items
//! (`|U|..|U|+|V|`).

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{PkefError, Result};
use crate::math::SparseMatrix;

/// Per-behavior positive interactions plus the held-out test pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct BehaviorDataset {
    user_count: usize,
    item_count: usize,
    behaviors: Vec<String>,
    /// Deduplicated pairs per behavior, first-occurrence order.
    pairs: Vec<Vec<(usize, usize)>>,
    /// Sorted positive items per behavior, per user.
    by_user: Vec<Vec<Vec<usize>>>,
    test: Vec<(usize, usize)>,
}

impl BehaviorDataset {
    /// Builds a dataset from raw pair lists. Duplicates inside a behavior are
    /// dropped keeping the first occurrence; test pairs that are also target
    /// training positives are dropped with a warning.
    pub fn from_pairs(
        user_count: usize,
        item_count: usize,
        behaviors: Vec<String>,
        raw: Vec<Vec<(usize, usize)>>,
        test: Vec<(usize, usize)>,
    ) -> Result<Self> {
        if behaviors.is_empty() {
            return Err(PkefError::Config("dataset needs at least one behavior".into()));
        }
        if raw.len() != behaviors.len() {
            return Err(PkefError::Config(format!(
                "{} behavior names but {} interaction lists",
                behaviors.len(),
                raw.len()
            )));
        }
        let check = |u: usize, v: usize, what: &str| -> Result<()> {
            if u >= user_count || v >= item_count {
                Err(PkefError::Config(format!(
                    "{what} pair ({u}, {v}) outside {user_count} users x {item_count} items"
                )))
            } else {
                Ok(())
            }
        };

        let mut pairs = Vec::with_capacity(raw.len());
        let mut by_user = Vec::with_capacity(raw.len());
        for (name, list) in behaviors.iter().zip(raw) {
            let mut seen = HashSet::with_capacity(list.len());
            let mut kept = Vec::with_capacity(list.len());
            let mut per_user = vec![Vec::new(); user_count];
            for (u, v) in list {
                check(u, v, name)?;
                if seen.insert((u, v)) {
                    kept.push((u, v));
                    per_user[u].push(v);
                }
            }
            if kept.is_empty() {
                warn!("behavior '{name}' has no interactions");
            }
            for items in &mut per_user {
                items.sort_unstable();
            }
            pairs.push(kept);
            by_user.push(per_user);
        }

        let target = behaviors.len() - 1;
        let mut clean_test = Vec::with_capacity(test.len());
        let mut overlap = 0usize;
        for (u, v) in test {
            check(u, v, "test")?;
            if by_user[target][u].binary_search(&v).is_ok() {
                overlap += 1;
            } else {
                clean_test.push((u, v));
            }
        }
        if overlap > 0 {
            warn!("dropped {overlap} test pairs that are also target training positives");
        }

        Ok(BehaviorDataset {
            user_count,
            item_count,
            behaviors,
            pairs,
            by_user,
            test: clean_test,
        })
    }

    pub fn user_count(&self) -> usize {
        self.user_count
    }

    pub fn item_count(&self) -> usize {
        self.item_count
    }

    pub fn node_count(&self) -> usize {
        self.user_count + self.item_count
    }

    pub fn behavior_count(&self) -> usize {
        self.behaviors.len()
    }

    pub fn behaviors(&self) -> &[String] {
        &self.behaviors
    }

    /// Index of the target (most downstream) behavior.
    pub fn target(&self) -> usize {
        self.behaviors.len() - 1
    }

    /// Deduplicated pairs of behavior `k`.
    pub fn pairs(&self, k: usize) -> &[(usize, usize)] {
        &self.pairs[k]
    }

    /// Sorted training positives of `user` under behavior `k`.
    pub fn positives(&self, k: usize, user: usize) -> &[usize] {
        &self.by_user[k][user]
    }

    pub fn is_positive(&self, k: usize, user: usize, item: usize) -> bool {
        self.by_user[k][user].binary_search(&item).is_ok()
    }

    pub fn test_pairs(&self) -> &[(usize, usize)] {
        &self.test
    }

    /// Test users without any target-behavior training positive.
    pub fn cold_test_users(&self) -> usize {
        let t = self.target();
        self.test
            .iter()
            .filter(|(u, _)| self.by_user[t][*u].is_empty())
            .count()
    }

    pub fn density(&self, k: usize) -> f64 {
        self.pairs[k].len() as f64 / (self.user_count * self.item_count) as f64
    }
}

fn read_pairs(path: &Path, bounds: Option<(usize, usize)>) -> Result<Vec<(usize, usize)>> {
    let text = fs::read_to_string(path).map_err(|e| PkefError::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fmt_err = |detail: String| PkefError::Format {
            path: path.to_path_buf(),
            line: lineno + 1,
            detail,
        };
        let mut parts = line.split_whitespace();
        let (Some(a), Some(b)) = (parts.next(), parts.next()) else {
            return Err(fmt_err(format!("expected 'user item', got '{line}'")));
        };
        let u: usize = a.parse().map_err(|_| fmt_err(format!("bad user id '{a}'")))?;
        let v: usize = b.parse().map_err(|_| fmt_err(format!("bad item id '{b}'")))?;
        if let Some((nu, nv)) = bounds {
            if u >= nu || v >= nv {
                return Err(fmt_err(format!(
                    "pair ({u}, {v}) outside declared size {nu} x {nv}"
                )));
            }
        }
        out.push((u, v));
    }
    Ok(out)
}

fn read_size(path: &Path) -> Result<Option<(usize, usize)>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| PkefError::io(path, e))?;
    let nums: Vec<usize> = text
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| PkefError::Format {
            path: path.to_path_buf(),
            line: 1,
            detail: "expected two integers '|U| |V|'".into(),
        })?;
    match nums.as_slice() {
        [u, v] => Ok(Some((*u, *v))),
        _ => Err(PkefError::Format {
            path: path.to_path_buf(),
            line: 1,
            detail: "expected two integers '|U| |V|'".into(),
        }),
    }
}

/// Loads a dataset directory. `behavior_names` are in cascade order, the
/// last one being the target.
pub fn load_dataset(dir: &Path, behavior_names: &[String]) -> Result<BehaviorDataset> {
    let bounds = read_size(&dir.join("size.txt"))?;
    let mut raw = Vec::with_capacity(behavior_names.len());
    for name in behavior_names {
        raw.push(read_pairs(&dir.join(format!("{name}.txt")), bounds)?);
    }
    let test = read_pairs(&dir.join("test.txt"), bounds)?;
    let (users, items) = match bounds {
        Some(b) => b,
        None => {
            let all = raw.iter().flatten().chain(test.iter());
            let (mu, mv) = all.fold((0, 0), |(mu, mv), &(u, v)| (mu.max(u + 1), mv.max(v + 1)));
            (mu, mv)
        }
    };
    BehaviorDataset::from_pairs(users, items, behavior_names.to_vec(), raw, test)
}

/// Writes `ds` in the directory layout read by [`load_dataset`], including
/// `size.txt`.
pub fn write_dataset(ds: &BehaviorDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| PkefError::io(dir, e))?;
    let write = |path: PathBuf, pairs: &[(usize, usize)]| -> Result<()> {
        let file = fs::File::create(&path).map_err(|e| PkefError::io(&path, e))?;
        let mut w = BufWriter::new(file);
        for (u, v) in pairs {
            writeln!(w, "{u} {v}").map_err(|e| PkefError::io(&path, e))?;
        }
        w.flush().map_err(|e| PkefError::io(&path, e))
    };
    for (k, name) in ds.behaviors.iter().enumerate() {
        write(dir.join(format!("{name}.txt")), &ds.pairs[k])?;
    }
    write(dir.join("test.txt"), &ds.test)?;
    let size = dir.join("size.txt");
    fs::write(&size, format!("{} {}\n", ds.user_count, ds.item_count)).map_err(|e| PkefError::io(&size, e))
}

/// `D⁻¹(A_k + I)` over the stacked user/item node set.
#[derive(Clone, Debug)]
pub struct NormalizedAdjacency {
    pub behavior: usize,
    pub matrix: Arc<SparseMatrix>,
}

/// Builds the left-normalized, self-looped adjacency of behavior `k`.
pub fn build_normalized_adjacency(ds: &BehaviorDataset, k: usize) -> NormalizedAdjacency {
    let nu = ds.user_count();
    let n = ds.node_count();
    let mut degree = vec![1usize; n];
    for &(u, v) in ds.pairs(k) {
        degree[u] += 1;
        degree[nu + v] += 1;
    }
    let mut triplets = Vec::with_capacity(n + 2 * ds.pairs(k).len());
    for (i, &d) in degree.iter().enumerate() {
        triplets.push((i, i, 1.0 / d as f64));
    }
    for &(u, v) in ds.pairs(k) {
        let item = nu + v;
        triplets.push((u, item, 1.0 / degree[u] as f64));
        triplets.push((item, u, 1.0 / degree[item] as f64));
    }
    let matrix = SparseMatrix::from_triplets(n, n, &triplets).expect("pairs are deduplicated and in range");
    NormalizedAdjacency {
        behavior: k,
        matrix: Arc::new(matrix),
    }
}

/// A `(user, positive, negative)` ranking triple.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Triple {
    pub user: usize,
    pub pos: usize,
    pub neg: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainTriples {
    pub behavior: usize,
    pub triples: Vec<Triple>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UniqueLossTriples {
    pub source: usize,
    pub guide: usize,
    pub triples: Vec<Triple>,
}

/// Draws a uniformly random item accepted by `accept`, given that exactly
/// `candidates` items are acceptable. Falls back to enumeration when the
/// acceptable set is a small fraction of the catalogue.
fn draw_item(
    rng: &mut impl Rng,
    item_count: usize,
    candidates: usize,
    accept: impl Fn(usize) -> bool,
) -> Option<usize> {
    if candidates == 0 {
        return None;
    }
    if candidates * 4 >= item_count {
        loop {
            let v = rng.random_range(0..item_count);
            if accept(v) {
                return Some(v);
            }
        }
    }
    let pick = rng.random_range(0..candidates);
    (0..item_count).filter(|&v| accept(v)).nth(pick)
}

/// One uniformly sampled negative per positive of behavior `k`.
pub fn sample_bpr_triples(ds: &BehaviorDataset, k: usize, seed: u64) -> TrainTriples {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_items = ds.item_count();
    let mut triples = Vec::with_capacity(ds.pairs(k).len());
    for user in 0..ds.user_count() {
        let pos = ds.positives(k, user);
        if pos.is_empty() {
            continue;
        }
        let free = n_items - pos.len();
        if free == 0 {
            warn!("user {user} interacted with every item under behavior {k}; skipped");
            continue;
        }
        for &s in pos {
            let t = draw_item(&mut rng, n_items, free, |v| pos.binary_search(&v).is_err())
                .expect("free > 0");
            triples.push(Triple { user, pos: s, neg: t });
        }
    }
    TrainTriples { behavior: k, triples }
}

/// Triples for the unique-part loss of source behavior `source` guided by
/// `guide`. Positives are source-only items; negatives are drawn from the
/// guide's non-positives together with the shared positives, never `s`.
pub fn build_unique_triples(ds: &BehaviorDataset, source: usize, guide: usize, seed: u64) -> Result<UniqueLossTriples> {
    if source == guide {
        return Err(PkefError::Usage(format!(
            "unique triples need distinct behaviors, got {source} twice"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_items = ds.item_count();
    let mut triples = Vec::new();
    for user in 0..ds.user_count() {
        let src = ds.positives(source, user);
        let gd = ds.positives(guide, user);
        let only: Vec<usize> = src.iter().copied().filter(|v| gd.binary_search(v).is_err()).collect();
        if only.is_empty() {
            continue;
        }
        let shared = src.len() - only.len();
        // guide negatives plus shared positives, minus s (which is a guide negative)
        let candidates = (n_items - gd.len()) + shared - 1;
        for &s in &only {
            let accept = |v: usize| v != s && (gd.binary_search(&v).is_err() || src.binary_search(&v).is_ok());
            if let Some(t) = draw_item(&mut rng, n_items, candidates, accept) {
                triples.push(Triple { user, pos: s, neg: t });
            }
        }
    }
    Ok(UniqueLossTriples {
        source,
        guide,
        triples,
    })
}
