//! Ranking metrics, popularity baselines, per-split evaluation and the
//! popularity-bucket breakdown.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::datamodel::{DatasetBundle, Split};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::linalg::{dot, Matrix};
use crate::tower::TowerParams;

/// Fraction of `relevant` found in the first `n` entries of `ranked`.
/// `None` when there is nothing relevant (the user is skipped).
pub fn recall_at_n<T: Eq + Hash>(ranked: &[T], relevant: &HashSet<T>, n: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let hits = ranked.iter().take(n).filter(|x| relevant.contains(*x)).count();
    Some(hits as f64 / relevant.len() as f64)
}

/// Binary-gain NDCG with a `1/log2(rank + 1)` discount (1-based ranks).
pub fn ndcg_at_n<T: Eq + Hash>(ranked: &[T], relevant: &HashSet<T>, n: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let dcg: f64 = ranked
        .iter()
        .take(n)
        .enumerate()
        .filter(|(_, x)| relevant.contains(*x))
        .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
        .sum();
    let ideal: f64 = (0..relevant.len().min(n)).map(|i| 1.0 / ((i + 2) as f64).log2()).sum();
    Some(if ideal > 0.0 { dcg / ideal } else { 0.0 })
}

/// Reciprocal rank of the first relevant entry over the whole list; 0 when
/// none is present.
pub fn mrr<T: Eq + Hash>(ranked: &[T], relevant: &HashSet<T>) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    Some(
        ranked
            .iter()
            .position(|x| relevant.contains(x))
            .map_or(0.0, |p| 1.0 / (p + 1) as f64),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub recall_10: f64,
    pub ndcg_10: f64,
    pub recall_20: f64,
    pub ndcg_20: f64,
    pub mrr: f64,
}

impl Metrics {
    pub const COLUMNS: [&'static str; 5] = ["Recall@10", "NDCG@10", "Recall@20", "NDCG@20", "MRR"];

    pub fn values(&self) -> [f64; 5] {
        [self.recall_10, self.ndcg_10, self.recall_20, self.ndcg_20, self.mrr]
    }

    fn for_ranking(ranked: &[usize], relevant: &HashSet<usize>) -> Option<Metrics> {
        Some(Metrics {
            recall_10: recall_at_n(ranked, relevant, 10)?,
            ndcg_10: ndcg_at_n(ranked, relevant, 10)?,
            recall_20: recall_at_n(ranked, relevant, 20)?,
            ndcg_20: ndcg_at_n(ranked, relevant, 20)?,
            mrr: mrr(ranked, relevant)?,
        })
    }
}

/// Anything that can score the whole catalog for a user.
pub trait Ranker: Sync {
    fn name(&self) -> &str;

    /// One score per catalog episode; higher ranks first.
    fn scores(&self, bundle: &DatasetBundle, user: usize) -> Vec<f64>;
}

/// Two-tower scores with every user and episode embedding precomputed.
pub struct ModelRanker {
    name: String,
    users: Matrix,
    episodes: Matrix,
}

impl ModelRanker {
    pub fn new(
        name: impl Into<String>,
        params: &TowerParams,
        user_features: &Matrix,
        episode_features: &Matrix,
        exec: Exec,
    ) -> Result<Self> {
        Ok(ModelRanker {
            name: name.into(),
            users: params.embed_users(user_features, exec)?,
            episodes: params.embed_episodes(episode_features, exec)?,
        })
    }
}

impl Ranker for ModelRanker {
    fn name(&self) -> &str {
        &self.name
    }

    fn scores(&self, _bundle: &DatasetBundle, user: usize) -> Vec<f64> {
        let u = self.users.row(user);
        (0..self.episodes.rows())
            .map(|e| dot(u, self.episodes.row(e)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Popularity {
    #[serde(rename = "pop")]
    Global,
    #[serde(rename = "pop-country")]
    Country,
    #[serde(rename = "pop-age-country")]
    AgeCountry,
}

impl Popularity {
    pub const ALL: [Popularity; 3] = [Popularity::Global, Popularity::Country, Popularity::AgeCountry];

    /// Command-line name.
    pub fn name(self) -> &'static str {
        match self {
            Popularity::Global => "pop",
            Popularity::Country => "pop-country",
            Popularity::AgeCountry => "pop-age-country",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Popularity::Global => "Pop",
            Popularity::Country => "Pop-Country",
            Popularity::AgeCountry => "Pop-Age-Country",
        }
    }
}

impl std::str::FromStr for Popularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Popularity::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            Error::Argument(format!(
                "unknown baseline `{s}` (expected pop, pop-country or pop-age-country)"
            ))
        })
    }
}

/// Train-interaction counts, globally or within the user's cohort. A cohort
/// without any interaction falls back to the global counts.
pub struct PopularityRanker {
    kind: Popularity,
    global: Vec<f64>,
    cohorts: HashMap<(u32, u32), Vec<f64>>,
}

impl PopularityRanker {
    pub fn new(bundle: &DatasetBundle, kind: Popularity) -> Self {
        let n = bundle.episodes().len();
        let global = bundle.train_counts().iter().map(|&c| c as f64).collect();
        let mut cohorts: HashMap<(u32, u32), Vec<f64>> = HashMap::new();
        if kind != Popularity::Global {
            for (u, e) in bundle.pairs_in(Split::Train) {
                let key = Self::cohort(kind, bundle, u);
                cohorts.entry(key).or_insert_with(|| vec![0.0; n])[e] += 1.0;
            }
        }
        PopularityRanker { kind, global, cohorts }
    }

    fn cohort(kind: Popularity, bundle: &DatasetBundle, user: usize) -> (u32, u32) {
        let r = &bundle.users()[user];
        match kind {
            Popularity::Global => (0, 0),
            Popularity::Country => (u32::MAX, r.country),
            Popularity::AgeCountry => (r.age_bucket, r.country),
        }
    }
}

impl Ranker for PopularityRanker {
    fn name(&self) -> &str {
        self.kind.label()
    }

    fn scores(&self, bundle: &DatasetBundle, user: usize) -> Vec<f64> {
        if self.kind == Popularity::Global {
            return self.global.clone();
        }
        self.cohorts
            .get(&Self::cohort(self.kind, bundle, user))
            .unwrap_or(&self.global)
            .clone()
    }
}

/// Sorts episode indices by descending score, ties by ascending episode id.
pub fn order_by_score(bundle: &DatasetBundle, candidates: &mut [usize], scores: &[f64]) {
    candidates.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| bundle.episode_id_rank(a).cmp(&bundle.episode_id_rank(b)))
    });
}

/// Ranked candidate list for a user, or `None` when no candidate remains.
/// With `masking`, episodes from shows the user already knows are removed.
pub fn rank_for_user(ranker: &dyn Ranker, bundle: &DatasetBundle, user: usize, masking: bool) -> Option<Vec<usize>> {
    let mut cands = if masking {
        bundle.discovery_candidate_indices(user)
    } else {
        (0..bundle.episodes().len()).collect()
    };
    if cands.is_empty() {
        return None;
    }
    let scores = ranker.scores(bundle, user);
    order_by_score(bundle, &mut cands, &scores);
    Some(cands)
}

fn ids(bundle: &DatasetBundle, order: Vec<usize>) -> Vec<String> {
    order
        .into_iter()
        .map(|e| bundle.episodes()[e].episode_id.clone())
        .collect()
}

/// Whole catalog by global train popularity.
pub fn pop_rank(bundle: &DatasetBundle) -> Vec<String> {
    let r = PopularityRanker::new(bundle, Popularity::Global);
    let mut all: Vec<usize> = (0..bundle.episodes().len()).collect();
    order_by_score(bundle, &mut all, &r.global);
    ids(bundle, all)
}

fn cohort_rank(bundle: &DatasetBundle, user_id: &str, kind: Popularity) -> Result<Vec<String>> {
    let u = bundle.user_index(user_id)?;
    let r = PopularityRanker::new(bundle, kind);
    let mut all: Vec<usize> = (0..bundle.episodes().len()).collect();
    order_by_score(bundle, &mut all, &r.scores(bundle, u));
    Ok(ids(bundle, all))
}

pub fn pop_country_rank(bundle: &DatasetBundle, user_id: &str) -> Result<Vec<String>> {
    cohort_rank(bundle, user_id, Popularity::Country)
}

pub fn pop_age_country_rank(bundle: &DatasetBundle, user_id: &str) -> Result<Vec<String>> {
    cohort_rank(bundle, user_id, Popularity::AgeCountry)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Remove episodes of familiar shows from each user's candidates.
    pub masking: bool,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            masking: true,
            exec: Exec::Parallel,
        }
    }
}

/// Where one evaluated positive landed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InteractionHit {
    pub user: usize,
    pub episode: usize,
    /// 0-based position in the user's ranking; `None` if masked out.
    pub rank: Option<usize>,
}

impl InteractionHit {
    /// NDCG@20 with this episode as the only relevant item.
    pub fn ndcg_20(&self) -> f64 {
        match self.rank {
            Some(r) if r < 20 => 1.0 / ((r + 2) as f64).log2(),
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelEvaluation {
    pub model: String,
    pub split: Split,
    pub metrics: Metrics,
    pub users: usize,
    pub skipped: usize,
    pub per_user: Vec<(usize, Metrics)>,
    pub hits: Vec<InteractionHit>,
}

/// Mean ranking metrics over every user of `split` with at least one
/// positive.
pub fn evaluate_model(
    ranker: &dyn Ranker,
    bundle: &DatasetBundle,
    split: Split,
    opts: EvalOptions,
) -> Result<ModelEvaluation> {
    let users: Vec<usize> = bundle
        .users_in(split)
        .into_iter()
        .filter(|&u| !bundle.positives_of(u).is_empty())
        .collect();
    let per_user = opts.exec.map_slice(&users, |&u| {
        let ranked = rank_for_user(ranker, bundle, u, opts.masking)?;
        let relevant: HashSet<usize> = bundle.positives_of(u).iter().copied().collect();
        let metrics = Metrics::for_ranking(&ranked, &relevant)?;
        let pos: HashMap<usize, usize> = ranked.iter().enumerate().map(|(i, &e)| (e, i)).collect();
        let hits: Vec<InteractionHit> = bundle
            .positives_of(u)
            .iter()
            .map(|&e| InteractionHit {
                user: u,
                episode: e,
                rank: pos.get(&e).copied(),
            })
            .collect();
        Some((u, metrics, hits))
    });
    let mut sum = [0.0; 5];
    let mut kept = Vec::new();
    let mut hits = Vec::new();
    for (u, m, h) in per_user.into_iter().flatten() {
        for (s, v) in sum.iter_mut().zip(m.values()) {
            *s += v;
        }
        kept.push((u, m));
        hits.extend(h);
    }
    if kept.is_empty() {
        return Err(Error::Report(format!("no evaluable users in the {split} split")));
    }
    let n = kept.len() as f64;
    Ok(ModelEvaluation {
        model: ranker.name().to_string(),
        split,
        metrics: Metrics {
            recall_10: sum[0] / n,
            ndcg_10: sum[1] / n,
            recall_20: sum[2] / n,
            ndcg_20: sum[3] / n,
            mrr: sum[4] / n,
        },
        users: kept.len(),
        skipped: users.len() - kept.len(),
        per_user: kept,
        hits,
    })
}

/// Inclusive ranges of train-interaction counts; the last bucket may be
/// open-ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketEdges(pub Vec<(u32, Option<u32>)>);

impl Default for BucketEdges {
    fn default() -> Self {
        BucketEdges(vec![
            (0, Some(1)),
            (2, Some(3)),
            (4, Some(10)),
            (11, Some(50)),
            (51, None),
        ])
    }
}

impl BucketEdges {
    pub fn labels(&self) -> Vec<String> {
        self.0
            .iter()
            .map(|&(lo, hi)| match hi {
                Some(hi) => format!("{lo}-{hi}"),
                None => format!(">{}", lo.saturating_sub(1)),
            })
            .collect()
    }

    pub fn bucket_of(&self, count: u32) -> Option<usize> {
        self.0
            .iter()
            .position(|&(lo, hi)| count >= lo && hi.is_none_or(|h| count <= h))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub model: String,
    pub bucket: String,
    pub interactions: usize,
    pub ndcg_20: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BucketTable {
    pub buckets: Vec<String>,
    /// Non-empty buckets only.
    pub rows: Vec<BucketRow>,
}

impl BucketTable {
    pub fn get(&self, model: &str, bucket: &str) -> Option<&BucketRow> {
        self.rows.iter().find(|r| r.model == model && r.bucket == bucket)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,bucket,interactions,ndcg_20\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{:.6}", r.model, r.bucket, r.interactions, r.ndcg_20);
        }
        out
    }
}

/// Mean single-item NDCG@20 of each evaluated positive, grouped by the
/// episode's train popularity.
pub fn popularity_buckets(
    bundle: &DatasetBundle,
    evals: &[&ModelEvaluation],
    edges: &BucketEdges,
) -> Result<BucketTable> {
    if let Some(first) = evals.first() {
        if evals.iter().any(|e| e.split != first.split) {
            return Err(Error::Report(
                "bucketed models were evaluated on different splits".into(),
            ));
        }
    }
    let labels = edges.labels();
    let counts = bundle.train_counts();
    let mut rows = Vec::new();
    for ev in evals {
        let mut sums = vec![(0usize, 0.0f64); labels.len()];
        for h in &ev.hits {
            if let Some(b) = edges.bucket_of(counts[h.episode]) {
                sums[b].0 += 1;
                sums[b].1 += h.ndcg_20();
            }
        }
        for (b, &(n, s)) in sums.iter().enumerate() {
            if n > 0 {
                rows.push(BucketRow {
                    model: ev.model.clone(),
                    bucket: labels[b].clone(),
                    interactions: n,
                    ndcg_20: s / n as f64,
                });
            }
        }
    }
    Ok(BucketTable { buckets: labels, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub model: String,
    pub users: usize,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub split: Split,
    pub users: usize,
    pub config_hash: String,
    pub seed: u64,
    pub masking: bool,
    pub rows: Vec<ModelRow>,
    pub buckets: BucketTable,
    /// Seconds since the Unix epoch.
    pub generated_at: u64,
}

impl RankingReport {
    pub fn from_evaluations(
        bundle: &DatasetBundle,
        evals: &[ModelEvaluation],
        edges: &BucketEdges,
        config_hash: impl Into<String>,
        seed: u64,
        masking: bool,
    ) -> Result<Self> {
        let first = evals.first().ok_or_else(|| Error::Report("nothing to report".into()))?;
        let refs: Vec<&ModelEvaluation> = evals.iter().collect();
        let buckets = popularity_buckets(bundle, &refs, edges)?;
        let generated_at = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        Ok(RankingReport {
            split: first.split,
            users: first.users,
            config_hash: config_hash.into(),
            seed,
            masking,
            rows: evals
                .iter()
                .map(|e| ModelRow {
                    model: e.model.clone(),
                    users: e.users,
                    metrics: e.metrics,
                })
                .collect(),
            buckets,
            generated_at,
        })
    }

    pub fn row(&self, model: &str) -> Option<&ModelRow> {
        self.rows.iter().find(|r| r.model == model)
    }

    /// Aligned text table; `*` marks the best value per column and `_` the
    /// second best.
    #[allow(clippy::needless_range_loop)]
    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.model.len()).max().unwrap_or(5).max(5);
        let mut out = String::new();
        let _ = write!(out, "{:<width$}", "Model");
        for c in Metrics::COLUMNS {
            let _ = write!(out, "  {c:>10}");
        }
        out.push('\n');
        let mut ranks: Vec<Vec<u8>> = vec![vec![0; 5]; self.rows.len()];
        for col in 0..5 {
            let mut vals: Vec<f64> = self.rows.iter().map(|r| r.metrics.values()[col]).collect();
            vals.sort_by(|a, b| b.total_cmp(a));
            vals.dedup();
            for (i, r) in self.rows.iter().enumerate() {
                let v = r.metrics.values()[col];
                ranks[i][col] = if Some(&v) == vals.first() {
                    1
                } else if Some(&v) == vals.get(1) {
                    2
                } else {
                    0
                };
            }
        }
        for (i, r) in self.rows.iter().enumerate() {
            let _ = write!(out, "{:<width$}", r.model);
            for (col, v) in r.metrics.values().iter().enumerate() {
                let mark = match ranks[i][col] {
                    1 if self.rows.len() > 1 => '*',
                    2 => '_',
                    _ => ' ',
                };
                let _ = write!(out, "  {v:>9.5}{mark}");
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(xs: &[usize]) -> HashSet<usize> {
        xs.iter().copied().collect()
    }

    #[test]
    fn worked_metric_values() {
        let ranked: Vec<usize> = (1..=100).collect();
        assert_eq!(recall_at_n(&ranked, &set(&[3]), 10), Some(1.0));
        assert_eq!(recall_at_n(&ranked, &set(&[4, 50]), 10), Some(0.5));
        assert_eq!(ndcg_at_n(&ranked, &set(&[1]), 10), Some(1.0));
        let v = ndcg_at_n(&ranked, &set(&[2]), 10).unwrap();
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert!((v - 0.63093).abs() < 1e-5);
        assert_eq!(mrr(&ranked, &set(&[1])), Some(1.0));
        assert_eq!(mrr(&ranked, &set(&[4, 9])), Some(0.25));
        assert_eq!(mrr(&ranked, &set(&[1000])), Some(0.0));
    }

    #[test]
    fn empty_relevant_set_skips() {
        let ranked = vec![1, 2];
        assert_eq!(recall_at_n(&ranked, &set(&[]), 10), None);
        assert_eq!(ndcg_at_n(&ranked, &set(&[]), 10), None);
        assert_eq!(mrr(&ranked, &set(&[])), None);
    }

    #[test]
    fn ndcg_is_one_for_ideal_prefix() {
        let ranked = vec![7, 3, 9, 1, 2];
        assert_eq!(ndcg_at_n(&ranked, &set(&[3, 7]), 10), Some(1.0));
        assert!(ndcg_at_n(&ranked, &set(&[3, 9]), 10).unwrap() < 1.0);
    }

    #[test]
    fn bucket_edges() {
        let e = BucketEdges::default();
        assert_eq!(e.labels(), ["0-1", "2-3", "4-10", "11-50", ">50"]);
        assert_eq!(e.bucket_of(0), Some(0));
        assert_eq!(e.bucket_of(3), Some(1));
        assert_eq!(e.bucket_of(50), Some(3));
        assert_eq!(e.bucket_of(51), Some(4));
        assert_eq!(e.bucket_of(100_000), Some(4));
    }

    #[test]
    fn single_item_ndcg() {
        let h = |rank| InteractionHit {
            user: 0,
            episode: 0,
            rank,
        };
        assert_eq!(h(Some(0)).ndcg_20(), 1.0);
        assert_eq!(h(Some(19)).ndcg_20(), 1.0 / 21f64.log2());
        assert_eq!(h(Some(20)).ndcg_20(), 0.0);
        assert_eq!(h(None).ndcg_20(), 0.0);
    }
}
