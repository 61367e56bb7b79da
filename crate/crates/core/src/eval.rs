//! Retrieval and classification metrics: AP / mAP@K, kNN accuracy, zero-shot
//! accuracy, and a Monte Carlo estimate of chance-level mAP.
//!
//! Relevance is always "same species label". Rankings sort by descending
//! cosine with ties broken by ascending gallery index.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::embedding::{similarity_matrix, EmbeddingSet};
use crate::error::{Error, Result};
use crate::rng::{stream, StreamKind};

/// Gallery indices of one query, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query_index: usize,
    pub gallery_order: Vec<usize>,
    pub scores: Vec<f64>,
}

impl RankedList {
    /// Sorts `scores` (indexed by gallery position) descending, ties by index.
    pub fn from_scores(query_index: usize, scores: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let sorted = order.iter().map(|&i| scores[i]).collect();
        Self {
            query_index,
            gallery_order: order,
            scores: sorted,
        }
    }

    /// Relevance flags in rank order.
    pub fn relevance(&self, is_relevant: impl Fn(usize) -> bool) -> Vec<bool> {
        self.gallery_order.iter().map(|&g| is_relevant(g)).collect()
    }
}

/// One metric value plus optional per-query breakdown and run metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub metric_name: String,
    pub value: f64,
    pub per_query: Option<Vec<f64>>,
    pub k: Option<usize>,
    pub metadata: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn from_per_query(metric_name: impl Into<String>, per_query: Vec<f64>, k: Option<usize>) -> Self {
        let value = mean(&per_query);
        Self {
            metric_name: metric_name.into(),
            value,
            per_query: Some(per_query),
            k,
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.metadata.insert(key.into(), value.to_string());
        self
    }

    /// `key=value` lines: metric, value, k, n, then sorted metadata.
    pub fn to_record(&self) -> String {
        let mut s = String::new();
        writeln!(s, "metric={}", self.metric_name).unwrap();
        writeln!(s, "value={:.6}", self.value).unwrap();
        if let Some(k) = self.k {
            writeln!(s, "k={k}").unwrap();
        }
        if let Some(pq) = &self.per_query {
            writeln!(s, "n={}", pq.len()).unwrap();
        }
        for (k, v) in &self.metadata {
            writeln!(s, "{k}={v}").unwrap();
        }
        s
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Average precision of a full ranking.
pub fn average_precision(ranked_relevance: &[bool]) -> Result<f64> {
    average_precision_at(ranked_relevance, None).ok_or(Error::NoRelevantItems)
}

/// AP truncated to the top `k`, with denominator `min(total relevant, k)`.
/// `None` when the list has no relevant item at all.
pub fn average_precision_at(ranked_relevance: &[bool], k: Option<usize>) -> Option<f64> {
    let total = ranked_relevance.iter().filter(|&&r| r).count();
    if total == 0 {
        return None;
    }
    let cutoff = k.unwrap_or(ranked_relevance.len()).min(ranked_relevance.len());
    let denom = k.map_or(total, |k| total.min(k));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &rel) in ranked_relevance[..cutoff].iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / denom as f64)
}

/// Ranks the gallery for every query by cosine similarity.
pub fn rank_gallery(queries: &EmbeddingSet, gallery: &EmbeddingSet) -> Result<Vec<RankedList>> {
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let sims = similarity_matrix(queries, gallery)?;
    Ok((0..queries.len())
        .into_par_iter()
        .map(|i| RankedList::from_scores(i, sims.row(i)))
        .collect())
}

/// mAP over precomputed rankings. Queries with no relevant gallery item are
/// excluded and counted in `metadata["excluded_queries"]`.
pub fn map_from_rankings(
    rankings: &[RankedList],
    query_labels: &[u32],
    gallery_labels: &[u32],
    k: Option<usize>,
    relevant: impl Fn(u32, u32) -> bool + Sync,
) -> Result<EvalReport> {
    let per_query: Vec<Option<f64>> = rankings
        .par_iter()
        .map(|r| {
            let q = query_labels[r.query_index];
            average_precision_at(&r.relevance(|g| relevant(q, gallery_labels[g])), k)
        })
        .collect();
    let excluded = per_query.iter().filter(|p| p.is_none()).count();
    let included: Vec<f64> = per_query.iter().flatten().copied().collect();
    let mut query_ids = Vec::with_capacity(included.len());
    for (r, p) in rankings.iter().zip(&per_query) {
        if p.is_some() {
            query_ids.push(r.query_index);
        }
    }
    if included.is_empty() {
        return Err(Error::NoRelevantItems);
    }
    let name = match k {
        Some(k) => format!("map@{k}"),
        None => "map".to_string(),
    };
    Ok(EvalReport::from_per_query(name, included, k)
        .with_meta("excluded_queries", excluded)
        .with_meta("n_queries", rankings.len()))
}

/// Mean average precision of `queries` against `gallery` with same-species
/// relevance, optionally truncated at `k`.
pub fn map_retrieval(queries: &EmbeddingSet, gallery: &EmbeddingSet, k: Option<usize>) -> Result<EvalReport> {
    map_retrieval_by(queries, gallery, k, |a, b| a == b)
}

/// [`map_retrieval`] with a custom label relevance (e.g. same genus).
pub fn map_retrieval_by(
    queries: &EmbeddingSet,
    gallery: &EmbeddingSet,
    k: Option<usize>,
    relevant: impl Fn(u32, u32) -> bool + Sync,
) -> Result<EvalReport> {
    let rankings = rank_gallery(queries, gallery)?;
    map_from_rankings(&rankings, queries.labels(), gallery.labels(), k, relevant)
}

/// Averages per-query AP within each species, then across species. Needs a
/// report from [`map_retrieval`] in which no query was excluded.
pub fn species_averaged(report: &EvalReport, query_labels: &[u32]) -> Option<f64> {
    let pq = report.per_query.as_ref()?;
    if pq.len() != query_labels.len() {
        return None;
    }
    let mut by: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for (&l, &v) in query_labels.iter().zip(pq) {
        let e = by.entry(l).or_default();
        e.0 += v;
        e.1 += 1;
    }
    let means: Vec<f64> = by.values().map(|(s, n)| s / *n as f64).collect();
    Some(mean(&means))
}

/// Mean AP of uniformly random rankings of a gallery with `n_classes` classes
/// of `n_per_class` items each, for a query of one of those classes.
pub fn chance_map_oracle(n_per_class: usize, n_classes: usize, k: Option<usize>, trials: usize, seed: u64) -> f64 {
    if n_per_class == 0 || n_classes == 0 || trials == 0 {
        return 0.0;
    }
    let total = n_per_class * n_classes;
    let sum: f64 = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream(seed, StreamKind::ChanceOracle, t as u64);
            let mut rel: Vec<bool> = (0..total).map(|i| i < n_per_class).collect();
            rand::seq::SliceRandom::shuffle(rel.as_mut_slice(), &mut rng);
            average_precision_at(&rel, k).unwrap_or(0.0)
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    sum / trials as f64
}

/// Majority vote over the first `k` entries of a ranking; ties go to the tied
/// class whose best neighbor ranks highest.
fn vote(neighbors: &[usize], labels: &[u32]) -> u32 {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &n in neighbors {
        *counts.entry(labels[n]).or_default() += 1;
    }
    let best = counts.values().copied().max().unwrap_or(0);
    neighbors
        .iter()
        .map(|&n| labels[n])
        .find(|l| counts[l] == best)
        .expect("non-empty neighbor list")
}

/// kNN predictions of `queries` against `reference`.
pub fn knn_predict(queries: &EmbeddingSet, reference: &EmbeddingSet, k: usize) -> Result<Vec<u32>> {
    knn_predict_inner(queries, reference, k, false)
}

/// Leave-one-out kNN predictions within one set.
pub fn knn_predict_loo(set: &EmbeddingSet, k: usize) -> Result<Vec<u32>> {
    knn_predict_inner(set, set, k, true)
}

fn knn_predict_inner(queries: &EmbeddingSet, reference: &EmbeddingSet, k: usize, exclude_self: bool) -> Result<Vec<u32>> {
    let available = reference.len() - usize::from(exclude_self && !reference.is_empty());
    if reference.is_empty() {
        return Err(Error::EmptyGallery);
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k must be positive".into()));
    }
    if k > available {
        return Err(Error::KTooLarge { k, available });
    }
    let rankings = rank_gallery(queries, reference)?;
    Ok(rankings
        .par_iter()
        .map(|r| {
            let neighbors: Vec<usize> = r
                .gallery_order
                .iter()
                .copied()
                .filter(|&g| !(exclude_self && g == r.query_index))
                .take(k)
                .collect();
            vote(&neighbors, reference.labels())
        })
        .collect())
}

fn accuracy_report(name: &str, predictions: &[u32], truth: &[u32], k: Option<usize>) -> EvalReport {
    let per_query = predictions
        .iter()
        .zip(truth)
        .map(|(p, t)| if p == t { 1.0 } else { 0.0 })
        .collect();
    EvalReport::from_per_query(name, per_query, k)
}

pub fn knn_classify(queries: &EmbeddingSet, reference: &EmbeddingSet, k: usize) -> Result<EvalReport> {
    let pred = knn_predict(queries, reference, k)?;
    Ok(accuracy_report("knn_accuracy", &pred, queries.labels(), Some(k)))
}

pub fn knn_classify_loo(set: &EmbeddingSet, k: usize) -> Result<EvalReport> {
    let pred = knn_predict_loo(set, k)?;
    Ok(accuracy_report("knn_accuracy", &pred, set.labels(), Some(k)).with_meta("leave_one_out", true))
}

/// Predicted species and best cosine for each query, against one prototype
/// row per species. Ties go to the lowest species id.
pub fn zero_shot_scores(queries: &EmbeddingSet, prototypes: &EmbeddingSet) -> Result<Vec<(u32, f64)>> {
    if prototypes.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let sims = similarity_matrix(queries, prototypes)?;
    let labels = prototypes.labels();
    Ok((0..queries.len())
        .into_par_iter()
        .map(|i| {
            let row = sims.row(i);
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] || (row[j] == row[best] && labels[j] < labels[best]) {
                    best = j;
                }
            }
            (labels[best], row[best])
        })
        .collect())
}

pub fn zero_shot_predict(queries: &EmbeddingSet, prototypes: &EmbeddingSet) -> Result<Vec<u32>> {
    Ok(zero_shot_scores(queries, prototypes)?.into_iter().map(|(l, _)| l).collect())
}

pub fn zero_shot_classify(queries: &EmbeddingSet, prototypes: &EmbeddingSet) -> Result<EvalReport> {
    for &l in queries.labels() {
        if !prototypes.labels().contains(&l) {
            return Err(Error::MissingPrototype { species: l });
        }
    }
    let pred = zero_shot_predict(queries, prototypes)?;
    Ok(accuracy_report("zero_shot_accuracy", &pred, queries.labels(), None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{Matrix, Modality};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn set(rows: &[&[f64]], labels: &[u32]) -> EmbeddingSet {
        EmbeddingSet::new(Matrix::from_rows(rows).unwrap(), labels.to_vec(), Modality::Image).unwrap()
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true, true, true]).unwrap(), 1.0);
        assert_abs_diff_eq!(average_precision(&[true, false, true]).unwrap(), (1.0 + 2.0 / 3.0) / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(average_precision(&[false, false, true]).unwrap(), 1.0 / 3.0, epsilon = 1e-12);
        assert!(matches!(average_precision(&[false, false]), Err(Error::NoRelevantItems)));
    }

    #[test]
    fn ap_truncated() {
        // R = min(2, 2) = 2; only the first relevant is in the top 2
        assert_abs_diff_eq!(average_precision_at(&[true, false, true], Some(2)).unwrap(), 0.5, epsilon = 1e-12);
        // k beyond length is the untruncated AP
        assert_eq!(
            average_precision_at(&[false, true, true], Some(10)),
            average_precision_at(&[false, true, true], None)
        );
        // relevant items past the cutoff still make the query count, with AP 0
        assert_eq!(average_precision_at(&[false, false, true], Some(1)), Some(0.0));
    }

    #[test]
    fn ranking_breaks_ties_by_index() {
        let r = RankedList::from_scores(0, &[0.5, 0.9, 0.5, 0.9]);
        assert_eq!(r.gallery_order, vec![1, 3, 0, 2]);
        assert_eq!(r.scores, vec![0.9, 0.9, 0.5, 0.5]);
    }

    #[test]
    fn map_self_retrieval_is_perfect() {
        let s = set(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]], &[0, 1, 2]);
        let r = map_retrieval(&s, &s, None).unwrap();
        assert_eq!(r.value, 1.0);
        assert_eq!(r.metadata["excluded_queries"], "0");
    }

    #[test]
    fn map_perfect_ranking_two_species() {
        let q = set(&[&[1.0, 0.0]], &[0]);
        let g = set(&[&[1.0, 0.0], &[0.0, 1.0]], &[0, 1]);
        assert_eq!(map_retrieval(&q, &g, None).unwrap().value, 1.0);
    }

    #[test]
    fn map_excludes_queries_without_relevant_items() {
        let q = set(&[&[1.0, 0.0], &[0.0, 1.0]], &[0, 7]);
        let g = set(&[&[0.6, 0.8], &[1.0, 0.1]], &[0, 0]);
        let r = map_retrieval(&q, &g, None).unwrap();
        assert_eq!(r.per_query.as_ref().unwrap().len(), 1);
        assert_eq!(r.metadata["excluded_queries"], "1");
        assert_eq!(r.value, 1.0);
        let none = set(&[&[1.0, 0.0]], &[5]);
        assert!(matches!(map_retrieval(&none, &g, None), Err(Error::NoRelevantItems)));
    }

    #[test]
    fn map_errors() {
        let q = set(&[&[1.0, 0.0]], &[0]);
        let g3 = set(&[&[1.0, 0.0, 0.0]], &[0]);
        assert!(matches!(map_retrieval(&q, &g3, None), Err(Error::DimensionMismatch { .. })));
        let empty = EmbeddingSet::new(Matrix::zeros(0, 2), vec![], Modality::Image).unwrap();
        assert!(matches!(map_retrieval(&q, &empty, None), Err(Error::EmptyGallery)));
    }

    #[test]
    fn chance_oracle_examples() {
        assert_eq!(chance_map_oracle(5, 1, None, 100, 0), 1.0);
        // AP is 1 or 1/2 with equal probability
        let c = chance_map_oracle(1, 2, None, 20_000, 1);
        assert!((c - 0.75).abs() < 0.01, "{c}");
        let d = chance_map_oracle(10, 48, None, 1000, 2);
        assert!(d > 0.0 && d < 0.2, "{d}");
    }

    #[test]
    fn knn_examples() {
        let reference = set(&[&[1.0, 0.0], &[0.0, 1.0], &[0.7, 0.7]], &[4, 5, 6]);
        let q = set(&[&[0.0, 1.0]], &[5]);
        assert_eq!(knn_predict(&q, &reference, 1).unwrap(), vec![5]);

        let reference = set(&[&[1.0, 0.1], &[1.0, 0.2], &[1.0, 0.0], &[-1.0, 0.0]], &[0, 0, 1, 2]);
        let q = set(&[&[1.0, 0.05]], &[0]);
        assert_eq!(knn_predict(&q, &reference, 3).unwrap(), vec![0]);
    }

    #[test]
    fn knn_tie_goes_to_nearest_tied_class() {
        // neighbors by rank: B (0.99), A, A, B -> 2-2 tie, B is nearest
        let reference = set(&[&[1.0, 0.01], &[1.0, 0.2], &[1.0, 0.3], &[1.0, 0.4]], &[1, 0, 0, 1]);
        let q = set(&[&[1.0, 0.0]], &[0]);
        assert_eq!(knn_predict(&q, &reference, 4).unwrap(), vec![1]);
    }

    #[test]
    fn knn_errors_and_loo() {
        let s = set(&[&[1.0, 0.0], &[1.0, 0.1], &[0.0, 1.0]], &[0, 0, 1]);
        assert!(matches!(knn_predict(&s, &s, 4), Err(Error::KTooLarge { k: 4, available: 3 })));
        assert!(matches!(knn_predict_loo(&s, 3), Err(Error::KTooLarge { k: 3, available: 2 })));
        // without self exclusion every item finds itself
        assert_eq!(knn_classify(&s, &s, 1).unwrap().value, 1.0);
        // item 2 is alone in its class, so leave-one-out gets it wrong
        let r = knn_classify_loo(&s, 1).unwrap();
        assert_eq!(r.per_query.unwrap(), vec![1.0, 1.0, 0.0]);
    }

    #[test]
    fn zero_shot_examples() {
        let protos = set(&[&[1.0, 0.0], &[0.0, 1.0]], &[1, 2]);
        let q = set(&[&[0.0, 1.0], &[0.01, 1.0], &[1.0, 0.0]], &[2, 2, 1]);
        assert_eq!(zero_shot_predict(&q, &protos).unwrap(), vec![2, 2, 1]);
        assert_eq!(zero_shot_classify(&q, &protos).unwrap().value, 1.0);
        // equidistant: lowest species id wins
        let tie = set(&[&[1.0, 1.0]], &[2]);
        assert_eq!(zero_shot_predict(&tie, &protos).unwrap(), vec![1]);
        let missing = set(&[&[1.0, 0.0]], &[9]);
        assert!(matches!(zero_shot_classify(&missing, &protos), Err(Error::MissingPrototype { species: 9 })));
    }

    #[test]
    fn record_format() {
        let r = EvalReport::from_per_query("map", vec![1.0, 0.5], None).with_meta("config_hash", "abc");
        assert_eq!(r.to_record(), "metric=map\nvalue=0.750000\nn=2\nconfig_hash=abc\n");
    }

    fn rel_list() -> impl Strategy<Value = Vec<bool>> {
        prop::collection::vec(any::<bool>(), 1..40).prop_filter("has relevant", |v| v.iter().any(|&b| b))
    }

    proptest! {
        #[test]
        fn ap_in_unit_interval(rel in rel_list(), k in 1usize..50) {
            let ap = average_precision(&rel).unwrap();
            prop_assert!((0.0..=1.0).contains(&ap));
            let apk = average_precision_at(&rel, Some(k)).unwrap();
            prop_assert!((0.0..=1.0).contains(&apk));
        }

        #[test]
        fn ranking_depends_only_on_order(scores in prop::collection::vec(-1.0f64..1.0, 1..30)) {
            let a = RankedList::from_scores(0, &scores);
            let transformed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 2.0).collect();
            let b = RankedList::from_scores(0, &transformed);
            prop_assert_eq!(a.gallery_order, b.gallery_order);
        }
    }
}
