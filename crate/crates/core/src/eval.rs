//! Full-ranking evaluation and the analysis instruments built on it.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::BehaviorDataset;
use crate::error::{PkefError, Result};
use crate::experts::HeadScorer;

/// Rank of one held-out item among its candidates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingResult {
    pub user: usize,
    pub item: usize,
    /// 1-indexed.
    pub rank: usize,
    pub candidates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub k: usize,
    pub hr: f64,
    pub ndcg: f64,
    pub users: usize,
}

impl MetricReport {
    pub fn csv_header() -> &'static str {
        "k,hr,ndcg,users"
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.k, self.hr, self.ndcg, self.users)
    }
}

/// Position of `target` among the items not in `exclude` (sorted). Items
/// scoring strictly higher rank ahead; equal scores are ordered by index.
pub fn rank_items(scores: &[f64], exclude: &[usize], target: usize) -> Result<RankingResult> {
    if target >= scores.len() {
        return Err(PkefError::Protocol(format!(
            "target item {target} outside {} scored items",
            scores.len()
        )));
    }
    if exclude.binary_search(&target).is_ok() {
        return Err(PkefError::Protocol(format!(
            "target item {target} is a training positive"
        )));
    }
    let st = scores[target];
    let mut ahead = 0;
    let mut excluded = exclude.iter().peekable();
    for (j, &s) in scores.iter().enumerate() {
        if excluded.peek() == Some(&&j) {
            excluded.next();
            continue;
        }
        if s > st || (s == st && j < target) {
            ahead += 1;
        }
    }
    let candidates = scores.len() - exclude.iter().filter(|&&j| j < scores.len()).count();
    Ok(RankingResult {
        user: 0,
        item: target,
        rank: ahead + 1,
        candidates,
    })
}

/// Hit ratio and NDCG at cutoff `k` for a single held-out item per list.
pub fn hr_ndcg(ranks: &[usize], k: usize) -> Result<(f64, f64)> {
    if ranks.is_empty() {
        return Err(PkefError::Protocol("no ranks to aggregate".into()));
    }
    let mut hits = 0usize;
    let mut gain = 0.0;
    for &r in ranks {
        if r == 0 {
            return Err(PkefError::Protocol("ranks are 1-indexed".into()));
        }
        if r <= k {
            hits += 1;
            gain += 1.0 / ((r + 1) as f64).log2();
        }
    }
    let n = ranks.len() as f64;
    Ok((hits as f64 / n, gain / n))
}

/// Ranks every test pair against all items outside the user's target
/// training positives. Users are scored in parallel; output order follows
/// the test pairs grouped by user id.
pub fn rank_test_pairs(scorer: &HeadScorer<'_>, ds: &BehaviorDataset) -> Result<Vec<RankingResult>> {
    let target = ds.target();
    let mut by_user: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(u, v) in ds.test_pairs() {
        by_user.entry(u).or_default().push(v);
    }
    let groups: Vec<(usize, Vec<usize>)> = by_user.into_iter().collect();
    let per_user: Vec<Result<Vec<RankingResult>>> = groups
        .par_iter()
        .map(|(u, items)| {
            let scores = scorer.score_items(*u)?;
            let exclude = ds.positives(target, *u);
            items
                .iter()
                .map(|&v| rank_items(&scores, exclude, v).map(|r| RankingResult { user: *u, ..r }))
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(ds.test_pairs().len());
    for r in per_user {
        out.extend(r?);
    }
    Ok(out)
}

pub fn report_from_ranks(ranks: &[RankingResult], k: usize) -> Result<MetricReport> {
    let r: Vec<usize> = ranks.iter().map(|x| x.rank).collect();
    let (hr, ndcg) = hr_ndcg(&r, k)?;
    Ok(MetricReport {
        k,
        hr,
        ndcg,
        users: ranks.len(),
    })
}

/// HR@k and NDCG@k of the target-behavior head over all test pairs.
pub fn evaluate_model(scorer: &HeadScorer<'_>, ds: &BehaviorDataset, k: usize) -> Result<MetricReport> {
    report_from_ranks(&rank_test_pairs(scorer, ds)?, k)
}

// Pearson case study

/// Pearson correlation of two binary indicator vectors over `n` items, given
/// the positive counts and their overlap. `None` when either is constant.
pub fn binary_pearson(n: usize, count_a: usize, count_b: usize, both: usize) -> Option<f64> {
    if count_a == 0 || count_a == n || count_b == 0 || count_b == n {
        return None;
    }
    let n = n as f64;
    let (pa, pb) = (count_a as f64 / n, count_b as f64 / n);
    let cov = both as f64 / n - pa * pb;
    let r = cov / (pa * (1.0 - pa) * pb * (1.0 - pb)).sqrt();
    Some(r.clamp(-1.0, 1.0))
}

fn overlap(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Mean pairwise correlation of a user's behavior indicators, skipping
/// undefined pairs. `None` when every pair is undefined.
pub fn user_mean_correlation(ds: &BehaviorDataset, user: usize) -> Option<f64> {
    let kk = ds.behavior_count();
    let n = ds.item_count();
    let mut acc = 0.0;
    let mut count = 0;
    for a in 0..kk {
        for b in a + 1..kk {
            let (pa, pb) = (ds.positives(a, user), ds.positives(b, user));
            if let Some(r) = binary_pearson(n, pa.len(), pb.len(), overlap(pa, pb)) {
                acc += r;
                count += 1;
            }
        }
    }
    (count > 0).then(|| acc / count as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationBucket {
    pub lower: f64,
    pub upper: f64,
    pub users: Vec<usize>,
    /// Mean training interactions over all behaviors, per bucket user.
    pub mean_interactions: f64,
    pub report: Option<MetricReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseStudy {
    pub buckets: Vec<CorrelationBucket>,
    /// Test users whose correlations were all undefined.
    pub excluded: Vec<usize>,
}

/// Assigns each correlation to one of `groups` equal-width buckets over
/// `[lo, hi]`; the top edge belongs to the last bucket.
pub fn bucket_index(r: f64, lo: f64, hi: f64, groups: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    let t = ((r - lo) / (hi - lo) * groups as f64).floor() as usize;
    t.min(groups - 1)
}

/// Groups test users by mean behavior correlation and evaluates each group.
pub fn pearson_case_study(
    ds: &BehaviorDataset,
    ranks: &[RankingResult],
    groups: usize,
    k: usize,
) -> Result<CaseStudy> {
    if ds.behavior_count() < 2 {
        return Err(PkefError::Config("case study needs at least two behaviors".into()));
    }
    if groups == 0 {
        return Err(PkefError::Config("group count must be positive".into()));
    }
    let mut users: Vec<usize> = ranks.iter().map(|r| r.user).collect();
    users.sort_unstable();
    users.dedup();

    let mut scored = Vec::new();
    let mut excluded = Vec::new();
    for &u in &users {
        match user_mean_correlation(ds, u) {
            Some(r) => scored.push((u, r)),
            None => excluded.push(u),
        }
    }
    let lo = scored.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
    let hi = scored.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
    let width = if scored.is_empty() { 0.0 } else { (hi - lo) / groups as f64 };

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); groups];
    for &(u, r) in &scored {
        members[bucket_index(r, lo, hi, groups)].push(u);
    }
    let buckets = members
        .into_iter()
        .enumerate()
        .map(|(g, users)| {
            let rs: Vec<RankingResult> = ranks
                .iter()
                .filter(|r| users.binary_search(&r.user).is_ok())
                .copied()
                .collect();
            let report = if rs.is_empty() { None } else { Some(report_from_ranks(&rs, k)?) };
            let total: usize = users
                .iter()
                .map(|&u| (0..ds.behavior_count()).map(|b| ds.positives(b, u).len()).sum::<usize>())
                .sum();
            let mean_interactions = if users.is_empty() { 0.0 } else { total as f64 / users.len() as f64 };
            Ok(CorrelationBucket {
                lower: lo + width * g as f64,
                upper: if g + 1 == groups { hi } else { lo + width * (g + 1) as f64 },
                users,
                mean_interactions,
                report,
            })
        })
        .collect::<Result<_>>()?;
    Ok(CaseStudy { buckets, excluded })
}

/// Mean target-behavior gate weights over the test pairs.
pub fn export_gate_weights(scorer: &HeadScorer<'_>, ds: &BehaviorDataset) -> Result<Vec<f64>> {
    let target = ds.target();
    let pairs = ds.test_pairs();
    if pairs.is_empty() {
        return Err(PkefError::Protocol("no test pairs to average gates over".into()));
    }
    let mut acc: Vec<f64> = Vec::new();
    for &(u, v) in pairs {
        let g = scorer.gate(u, v, target)?;
        if acc.is_empty() {
            acc = vec![0.0; g.len()];
        }
        for (a, x) in acc.iter_mut().zip(&g) {
            *a += x;
        }
    }
    let n = pairs.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}
