//! Retrieval evaluation: recall@k under a geographic positive threshold,
//! and revisited-protocol mean average precision with Easy/Medium/Hard
//! treatments.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{planar_distance, PlanarPose};
use crate::knn::SearchResult;

/// Standard positive radius for place-recognition evaluation, meters.
pub const VPR_POSITIVE_THRESHOLD: f64 = 25.0;

/// Query and database poses plus the positive radius.
#[derive(Debug, Clone)]
pub struct VprGroundTruth {
    query_poses: Vec<PlanarPose>,
    database_poses: Vec<PlanarPose>,
    positive_threshold: f64,
}

impl VprGroundTruth {
    pub fn new(
        query_poses: Vec<PlanarPose>,
        database_poses: Vec<PlanarPose>,
        positive_threshold: f64,
    ) -> Result<Self> {
        if !(positive_threshold.is_finite() && positive_threshold > 0.0) {
            return Err(Error::InvalidInput(format!(
                "positive threshold must be positive, got {positive_threshold}"
            )));
        }
        Ok(Self {
            query_poses,
            database_poses,
            positive_threshold,
        })
    }

    pub fn query_count(&self) -> usize {
        self.query_poses.len()
    }

    pub fn positive_threshold(&self) -> f64 {
        self.positive_threshold
    }

    fn is_positive(&self, query: usize, db_id: u64) -> bool {
        planar_distance(&self.query_poses[query], &self.database_poses[db_id as usize])
            <= self.positive_threshold
    }
}

/// Recall values plus the count of queries that had no positive anywhere in
/// the database (excluded from the denominator, surfaced here).
#[derive(Debug, Clone, PartialEq)]
pub struct RecallReport {
    pub recalls: BTreeMap<usize, f64>,
    pub evaluated_queries: usize,
    pub excluded_queries: usize,
}

/// Fraction of queries whose top-k contains at least one database item
/// within the positive threshold, for each requested k.
pub fn recall_at_k(results: &SearchResult, gt: &VprGroundTruth, ks: &[usize]) -> Result<RecallReport> {
    if results.query_count() != gt.query_count() {
        return Err(Error::InvalidInput(format!(
            "results cover {} queries, ground truth has {}",
            results.query_count(),
            gt.query_count()
        )));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::InvalidInput("ks must be non-empty and positive".into()));
    }
    let max_k = *ks.iter().max().unwrap();
    for (q, neighbors) in results.per_query().iter().enumerate() {
        if neighbors.len() < max_k.min(gt.database_poses.len()) {
            return Err(Error::InvalidInput(format!(
                "query {q} retrieved {} neighbors, need at least {}",
                neighbors.len(),
                max_k.min(gt.database_poses.len())
            )));
        }
        for n in neighbors {
            if n.id as usize >= gt.database_poses.len() {
                return Err(Error::InvalidInput(format!(
                    "query {q} references database id {} out of {}",
                    n.id,
                    gt.database_poses.len()
                )));
            }
        }
    }

    let mut hits: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();
    let mut evaluated = 0usize;
    let mut excluded = 0usize;
    for (q, neighbors) in results.per_query().iter().enumerate() {
        let has_positive = (0..gt.database_poses.len() as u64).any(|id| gt.is_positive(q, id));
        if !has_positive {
            excluded += 1;
            continue;
        }
        evaluated += 1;
        for &k in ks {
            if neighbors
                .iter()
                .take(k)
                .any(|n| gt.is_positive(q, n.id))
            {
                *hits.get_mut(&k).unwrap() += 1;
            }
        }
    }

    let recalls = hits
        .into_iter()
        .map(|(k, h)| {
            let r = if evaluated == 0 {
                0.0
            } else {
                h as f64 / evaluated as f64
            };
            (k, r)
        })
        .collect();
    Ok(RecallReport {
        recalls,
        evaluated_queries: evaluated,
        excluded_queries: excluded,
    })
}

/// Per-query landmark annotation: easy and hard positives plus junk to be
/// ignored. The three sets must be pairwise disjoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkQueryGt {
    pub query_id: u64,
    pub easy: BTreeSet<u64>,
    pub hard: BTreeSet<u64>,
    pub junk: BTreeSet<u64>,
}

impl LandmarkQueryGt {
    fn validate(&self) -> Result<()> {
        let pairwise = [
            (&self.easy, &self.hard, "easy/hard"),
            (&self.easy, &self.junk, "easy/junk"),
            (&self.hard, &self.junk, "hard/junk"),
        ];
        for (a, b, name) in pairwise {
            if a.intersection(b).next().is_some() {
                return Err(Error::InvalidInput(format!(
                    "query {}: {name} sets overlap",
                    self.query_id
                )));
            }
        }
        Ok(())
    }
}

/// Landmark ground truth for a query set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkGroundTruth {
    queries: Vec<LandmarkQueryGt>,
}

impl LandmarkGroundTruth {
    pub fn new(queries: Vec<LandmarkQueryGt>) -> Result<Self> {
        for q in &queries {
            q.validate()?;
        }
        Ok(Self { queries })
    }

    pub fn queries(&self) -> &[LandmarkQueryGt] {
        &self.queries
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.queries)
            .map_err(|e| Error::InvalidInput(format!("serialize landmark gt: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let queries: Vec<LandmarkQueryGt> =
            serde_json::from_str(&text).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                reason: format!("landmark ground truth: {e}"),
            })?;
        Self::new(queries)
    }
}

/// Evaluation treatment of the easy/hard positive pools.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    /// Positives = easy; hard counts as junk.
    Easy,
    /// Positives = easy + hard.
    Medium,
    /// Positives = hard; easy counts as junk.
    Hard,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Easy, Split::Medium, Split::Hard];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Easy => "easy",
            Split::Medium => "medium",
            Split::Hard => "hard",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "e" | "easy" => Some(Split::Easy),
            "m" | "medium" => Some(Split::Medium),
            "h" | "hard" => Some(Split::Hard),
            _ => None,
        }
    }

    /// Assembles the (positives, junk) sets for one query under this split.
    fn assemble(&self, gt: &LandmarkQueryGt) -> (BTreeSet<u64>, BTreeSet<u64>) {
        match self {
            Split::Easy => (
                gt.easy.clone(),
                gt.junk.union(&gt.hard).copied().collect(),
            ),
            Split::Medium => (
                gt.easy.union(&gt.hard).copied().collect(),
                gt.junk.clone(),
            ),
            Split::Hard => (
                gt.hard.clone(),
                gt.junk.union(&gt.easy).copied().collect(),
            ),
        }
    }
}

/// Average precision with junk filtering: junk ids are removed from the
/// ranking, then AP is the mean of precision-at-rank over the positive
/// ranks present in the filtered ranking.
pub fn average_precision_revisited(
    ranking: &[u64],
    positives: &BTreeSet<u64>,
    junk: &BTreeSet<u64>,
) -> Result<f64> {
    let mut seen = HashSet::with_capacity(ranking.len());
    for id in ranking {
        if !seen.insert(*id) {
            return Err(Error::InvalidInput(format!(
                "ranking contains duplicate id {id}"
            )));
        }
    }

    let mut rank = 0usize;
    let mut found = 0usize;
    let mut precision_sum = 0.0f64;
    for id in ranking {
        if junk.contains(id) {
            continue;
        }
        rank += 1;
        if positives.contains(id) {
            found += 1;
            precision_sum += found as f64 / rank as f64;
        }
    }
    if found == 0 {
        return Ok(0.0);
    }
    Ok(precision_sum / found as f64)
}

/// Mean AP over queries with a nonempty positive pool under the split.
/// Queries whose positive pool is empty are skipped; if every query is
/// empty the metric is undefined.
pub fn map_evaluate(
    rankings: &[Vec<u64>],
    gt: &LandmarkGroundTruth,
    split: Split,
) -> Result<f64> {
    if rankings.len() != gt.queries.len() {
        return Err(Error::InvalidInput(format!(
            "{} rankings for {} queries",
            rankings.len(),
            gt.queries.len()
        )));
    }
    let mut sum = 0.0f64;
    let mut counted = 0usize;
    for (ranking, query) in rankings.iter().zip(&gt.queries) {
        let (positives, junk) = split.assemble(query);
        if positives.is_empty() {
            continue;
        }
        sum += average_precision_revisited(ranking, &positives, &junk)?;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::UndefinedMetric(format!(
            "no query has positives under the {} split",
            split.as_str()
        )));
    }
    Ok(sum / counted as f64)
}

/// One row of the results CSV: method, dataset, metric, k-or-split, value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub dataset: String,
    pub metric: String,
    pub key: String,
    pub value: f64,
}

pub fn write_results_csv(path: impl AsRef<Path>, rows: &[MetricRow]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    writer.write_record(["method", "dataset", "metric", "key", "value"])?;
    for row in rows {
        writer.write_record([
            row.method.clone(),
            row.dataset.clone(),
            row.metric.clone(),
            row.key.clone(),
            row.value.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::descriptor::Descriptor;
    use crate::knn::{search, DescriptorStore};
    use crate::rng::rng_for;

    fn pose(east: f64, north: f64) -> PlanarPose {
        PlanarPose::new(east, north, 0.0).unwrap()
    }

    fn set(ids: &[u64]) -> BTreeSet<u64> {
        ids.iter().copied().collect()
    }

    #[test]
    fn colocated_twins_give_perfect_recall() {
        // Each query's co-located twin is its nearest database row.
        let queries: Vec<Descriptor> = (0..4)
            .map(|i| {
                let mut v = vec![0.0f32; 4];
                v[i] = 1.0;
                Descriptor::from_raw(v).unwrap()
            })
            .collect();
        let store = DescriptorStore::from_descriptors(&queries).unwrap();
        let out = search(&store, &queries, 1, 1 << 20).unwrap();
        let poses: Vec<PlanarPose> = (0..4).map(|i| pose(i as f64 * 100.0, 0.0)).collect();
        let gt = VprGroundTruth::new(poses.clone(), poses, 25.0).unwrap();
        let report = recall_at_k(&out.result, &gt, &[1]).unwrap();
        assert_eq!(report.recalls[&1], 1.0);
        assert_eq!(report.excluded_queries, 0);
    }

    #[test]
    fn all_predictions_beyond_threshold_give_zero_recall() {
        // The query looks exactly like the far database item, so the
        // in-range positive is never retrieved at k = 1.
        let query = Descriptor::from_raw(vec![1.0, 0.0]).unwrap();
        let far = query.clone();
        let near = Descriptor::from_raw(vec![0.0, 1.0]).unwrap();
        let store = DescriptorStore::from_descriptors(&[far, near]).unwrap();
        let out = search(&store, &[query], 1, 1 << 20).unwrap();
        let gt = VprGroundTruth::new(
            vec![pose(0.0, 0.0)],
            vec![pose(1000.0, 0.0), pose(10.0, 0.0)],
            25.0,
        )
        .unwrap();
        let report = recall_at_k(&out.result, &gt, &[1]).unwrap();
        assert_eq!(report.recalls[&1], 0.0);
        assert_eq!(report.excluded_queries, 0);
        assert_eq!(report.evaluated_queries, 1);
    }

    #[test]
    fn queries_without_positives_are_excluded_and_counted() {
        let d = Descriptor::from_raw(vec![1.0, 0.0]).unwrap();
        let store = DescriptorStore::from_descriptors(&[d.clone()]).unwrap();
        let out = search(&store, &[d.clone(), d], 1, 1 << 20).unwrap();
        // First query has a positive, second has none anywhere.
        let gt = VprGroundTruth::new(
            vec![pose(0.0, 0.0), pose(5000.0, 0.0)],
            vec![pose(3.0, 0.0)],
            25.0,
        )
        .unwrap();
        let report = recall_at_k(&out.result, &gt, &[1]).unwrap();
        assert_eq!(report.evaluated_queries, 1);
        assert_eq!(report.excluded_queries, 1);
        assert_eq!(report.recalls[&1], 1.0);
    }

    #[test]
    fn recall_matches_full_distance_matrix_oracle() {
        let mut rng = rng_for(7, 0xEEE, 0);
        let dim = 8;
        let n_db = 120;
        let n_q = 40;
        let db: Vec<Descriptor> = (0..n_db)
            .map(|_| {
                Descriptor::from_raw((0..dim).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect())
                    .unwrap()
            })
            .collect();
        let queries: Vec<Descriptor> = (0..n_q)
            .map(|_| {
                Descriptor::from_raw((0..dim).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect())
                    .unwrap()
            })
            .collect();
        let db_poses: Vec<PlanarPose> = (0..n_db)
            .map(|_| pose(rng.random::<f64>() * 400.0, rng.random::<f64>() * 400.0))
            .collect();
        let q_poses: Vec<PlanarPose> = (0..n_q)
            .map(|_| pose(rng.random::<f64>() * 400.0, rng.random::<f64>() * 400.0))
            .collect();

        let store = DescriptorStore::from_descriptors(&db).unwrap();
        let ks = [1, 5, 10];
        let out = search(&store, &queries, 10, 1 << 20).unwrap();
        let gt = VprGroundTruth::new(q_poses.clone(), db_poses.clone(), 25.0).unwrap();
        let report = recall_at_k(&out.result, &gt, &ks).unwrap();

        // Oracle: rescan all distances per query.
        let mut excluded = 0usize;
        let mut hits = [0usize; 3];
        let mut evaluated = 0usize;
        for q in 0..n_q {
            let positives: Vec<usize> = (0..n_db)
                .filter(|&d| planar_distance(&q_poses[q], &db_poses[d]) <= 25.0)
                .collect();
            if positives.is_empty() {
                excluded += 1;
                continue;
            }
            evaluated += 1;
            for (ki, &k) in ks.iter().enumerate() {
                let hit = out.result.per_query()[q]
                    .iter()
                    .take(k)
                    .any(|n| positives.contains(&(n.id as usize)));
                if hit {
                    hits[ki] += 1;
                }
            }
        }
        assert_eq!(report.excluded_queries, excluded);
        assert_eq!(report.evaluated_queries, evaluated);
        for (ki, &k) in ks.iter().enumerate() {
            let want = hits[ki] as f64 / evaluated as f64;
            assert!((report.recalls[&k] - want).abs() <= 1e-12);
        }
        // Monotone in k.
        assert!(report.recalls[&1] <= report.recalls[&5]);
        assert!(report.recalls[&5] <= report.recalls[&10]);
    }

    #[test]
    fn ap_trivial_rankings() {
        let positives = set(&[10]);
        let junk = set(&[]);
        assert_eq!(
            average_precision_revisited(&[10, 11, 12], &positives, &junk).unwrap(),
            1.0
        );
        assert_eq!(
            average_precision_revisited(&[11, 10], &positives, &junk).unwrap(),
            0.5
        );
    }

    #[test]
    fn junk_is_removed_before_ap() {
        let positives = set(&[1, 3]);
        let junk = set(&[2]);
        // [pos, junk, pos, neg] collapses to [pos, pos, neg]: AP = 1.
        let ap = average_precision_revisited(&[1, 2, 3, 4], &positives, &junk).unwrap();
        assert_eq!(ap, 1.0);
        // Removing junk from the ranking never changes AP.
        let ap2 = average_precision_revisited(&[1, 3, 4], &positives, &junk).unwrap();
        assert_eq!(ap, ap2);
    }

    #[test]
    fn duplicate_ranking_rejected() {
        assert!(average_precision_revisited(&[1, 1], &set(&[1]), &set(&[])).is_err());
    }

    #[test]
    fn split_assembly_matches_protocol() {
        let gt = LandmarkGroundTruth::new(vec![LandmarkQueryGt {
            query_id: 0,
            easy: set(&[1]),
            hard: set(&[2]),
            junk: set(&[3]),
        }])
        .unwrap();
        // Hard positive ranked first.
        let rankings = vec![vec![2, 1, 4, 5]];
        assert_eq!(map_evaluate(&rankings, &gt, Split::Hard).unwrap(), 1.0);
        // Under Easy the hard id is junk: ranking collapses to [1, 4, 5].
        assert_eq!(map_evaluate(&rankings, &gt, Split::Easy).unwrap(), 1.0);
        // Under Medium both count: AP = (1/1 + 2/2) / 2 = 1.
        assert_eq!(map_evaluate(&rankings, &gt, Split::Medium).unwrap(), 1.0);

        let rankings = vec![vec![4, 2, 5, 1]];
        // Easy: junk 2 removed -> [4, 5, 1], positive at rank 3.
        let easy = map_evaluate(&rankings, &gt, Split::Easy).unwrap();
        assert!((easy - 1.0 / 3.0).abs() <= 1e-12);
    }

    #[test]
    fn disjointness_enforced() {
        assert!(LandmarkGroundTruth::new(vec![LandmarkQueryGt {
            query_id: 0,
            easy: set(&[1]),
            hard: set(&[1]),
            junk: set(&[]),
        }])
        .is_err());
    }

    #[test]
    fn map_splits_match_brute_force_reevaluation() {
        let mut rng = rng_for(13, 0xEEE, 1);
        for _case in 0..20 {
            let n_q = 8;
            let n_db = 30u64;
            let mut queries = Vec::new();
            let mut rankings = Vec::new();
            for q in 0..n_q {
                let mut ids: Vec<u64> = (0..n_db).collect();
                // Deterministic shuffle via the seeded rng.
                for i in (1..ids.len()).rev() {
                    let j = rng.random_range(0..=i);
                    ids.swap(i, j);
                }
                let easy: BTreeSet<u64> =
                    ids.iter().copied().filter(|_| rng.random::<f64>() < 0.15).collect();
                let hard: BTreeSet<u64> = ids
                    .iter()
                    .copied()
                    .filter(|id| !easy.contains(id) && rng.random::<f64>() < 0.15)
                    .collect();
                let junk: BTreeSet<u64> = ids
                    .iter()
                    .copied()
                    .filter(|id| !easy.contains(id) && !hard.contains(id) && rng.random::<f64>() < 0.1)
                    .collect();
                queries.push(LandmarkQueryGt {
                    query_id: q as u64,
                    easy,
                    hard,
                    junk,
                });
                rankings.push(ids);
            }
            let gt = LandmarkGroundTruth::new(queries.clone()).unwrap();

            for split in Split::ALL {
                let got = map_evaluate(&rankings, &gt, split);

                // Brute-force re-evaluation with explicit set rebuilding.
                let mut aps = Vec::new();
                for (ranking, q) in rankings.iter().zip(&queries) {
                    let (positives, junk): (BTreeSet<u64>, BTreeSet<u64>) = match split {
                        Split::Easy => (
                            q.easy.clone(),
                            q.junk.iter().chain(q.hard.iter()).copied().collect(),
                        ),
                        Split::Medium => (
                            q.easy.iter().chain(q.hard.iter()).copied().collect(),
                            q.junk.clone(),
                        ),
                        Split::Hard => (
                            q.hard.clone(),
                            q.junk.iter().chain(q.easy.iter()).copied().collect(),
                        ),
                    };
                    if positives.is_empty() {
                        continue;
                    }
                    let filtered: Vec<u64> = ranking
                        .iter()
                        .copied()
                        .filter(|id| !junk.contains(id))
                        .collect();
                    let mut found = 0usize;
                    let mut acc = 0.0;
                    for (idx, id) in filtered.iter().enumerate() {
                        if positives.contains(id) {
                            found += 1;
                            acc += found as f64 / (idx + 1) as f64;
                        }
                    }
                    aps.push(if found == 0 { 0.0 } else { acc / found as f64 });
                }
                match (got, aps.is_empty()) {
                    (Err(Error::UndefinedMetric(_)), true) => {}
                    (Ok(value), false) => {
                        let want = aps.iter().sum::<f64>() / aps.len() as f64;
                        assert!((value - want).abs() <= 1e-12);
                    }
                    (got, _) => panic!("mismatch: {got:?} vs oracle count {}", aps.len()),
                }
            }
        }
    }

    #[test]
    fn medium_map_at_least_hard_map_for_relevance_ordered_rankings() {
        // Retrieval rankings put easy positives (most similar) ahead of
        // hard ones; under that realistic structure the nested Medium split
        // scores at least the Hard split. (The full empirical check over
        // world-derived ground truth lives in the acceptance suite.)
        let mut rng = rng_for(29, 0xEEE, 2);
        for _case in 0..50 {
            let n_db = 24u64;
            let easy: BTreeSet<u64> = (0..n_db)
                .filter(|_| rng.random::<f64>() < 0.2)
                .collect();
            let hard: BTreeSet<u64> = (0..n_db)
                .filter(|id| !easy.contains(id) && rng.random::<f64>() < 0.2)
                .collect();
            if hard.is_empty() {
                continue;
            }
            // Rank by noisy relevance: easy ~3, hard ~2, rest ~0, with
            // noise small enough to keep the tiers ordered.
            let mut scored: Vec<(f64, u64)> = (0..n_db)
                .map(|id| {
                    let tier = if easy.contains(&id) {
                        3.0
                    } else if hard.contains(&id) {
                        2.0
                    } else {
                        0.0
                    };
                    (tier + rng.random::<f64>() * 0.5, id)
                })
                .collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0));
            let rankings = vec![scored.into_iter().map(|(_, id)| id).collect::<Vec<u64>>()];

            let gt = LandmarkGroundTruth::new(vec![LandmarkQueryGt {
                query_id: 0,
                easy,
                hard,
                junk: BTreeSet::new(),
            }])
            .unwrap();
            let medium = map_evaluate(&rankings, &gt, Split::Medium).unwrap();
            let hard = map_evaluate(&rankings, &gt, Split::Hard).unwrap();
            assert!(medium >= hard - 1e-12, "medium {medium} < hard {hard}");
        }
    }

    #[test]
    fn undefined_metric_when_every_query_is_empty() {
        let gt = LandmarkGroundTruth::new(vec![LandmarkQueryGt {
            query_id: 0,
            easy: BTreeSet::new(),
            hard: set(&[2]),
            junk: BTreeSet::new(),
        }])
        .unwrap();
        let rankings = vec![vec![1, 2, 3]];
        assert!(matches!(
            map_evaluate(&rankings, &gt, Split::Easy),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn landmark_gt_round_trips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.json");
        let gt = LandmarkGroundTruth::new(vec![LandmarkQueryGt {
            query_id: 3,
            easy: set(&[1, 2]),
            hard: set(&[4]),
            junk: set(&[5]),
        }])
        .unwrap();
        gt.save_json(&path).unwrap();
        assert_eq!(LandmarkGroundTruth::load_json(&path).unwrap(), gt);
    }
}
