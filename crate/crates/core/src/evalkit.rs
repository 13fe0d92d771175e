//! Exhaustive cosine top-k retrieval and retrieval metrics.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::{Dataset, Product, Query, RelevanceClass};
use crate::encoder::{dot, embed, product_text, EmbeddingVector, TowerParams};
use crate::error::{Error, Result};
use crate::rng::{substream, Stream};
use crate::synthgen::GroundTruth;
use crate::text::tokens;

pub const EVAL_REPORT_FILE: &str = "eval_report.tsv";
pub const DEFAULT_KS: [usize; 5] = [20, 40, 128, 256, 512];

/// Product embeddings, one unit row per product.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    ids: Vec<String>,
    dim: usize,
    matrix: Vec<f64>,
    /// Identifies the encoder the index was built with.
    pub checkpoint: Option<String>,
}

impl RetrievalIndex {
    pub fn from_embeddings(ids: Vec<String>, rows: Vec<EmbeddingVector>) -> Result<Self> {
        if ids.is_empty() || ids.len() != rows.len() {
            return Err(Error::Validation("index needs one embedding per product id".into()));
        }
        let mut seen = HashSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Validation(format!("duplicate product id `{id}` in index")));
            }
        }
        let dim = rows[0].dim();
        if rows.iter().any(|r| r.dim() != dim) {
            return Err(Error::Validation("embedding dimensions differ".into()));
        }
        let matrix = rows.iter().flat_map(|r| r.as_slice().iter().copied()).collect();
        Ok(Self {
            ids,
            dim,
            matrix,
            checkpoint: None,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    pub fn scores(&self, query: &EmbeddingVector) -> Vec<f64> {
        (0..self.len()).map(|i| dot(self.row(i), query.as_slice())).collect()
    }
}

pub fn build_index(products: &[Product], params: &TowerParams) -> Result<RetrievalIndex> {
    if products.is_empty() {
        return Err(Error::Validation("cannot index an empty product list".into()));
    }
    let rows = products
        .par_iter()
        .map(|p| embed(params, &product_text(p)))
        .collect::<Result<Vec<_>>>()?;
    RetrievalIndex::from_embeddings(products.iter().map(|p| p.id.clone()).collect(), rows)
}

fn rank_order(ids: &[String], scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b]
        .total_cmp(&scores[a])
        .then_with(|| ids[a].cmp(&ids[b]))
}

/// Row positions and scores of the `k` best products, best first; ties go
/// to the smaller product id.
pub fn top_k_positions(index: &RetrievalIndex, query: &EmbeddingVector, k: usize) -> Result<Vec<(usize, f64)>> {
    if k > index.len() {
        return Err(Error::KTooLarge {
            k,
            size: index.len(),
        });
    }
    if query.dim() != index.dim() {
        return Err(Error::Validation("query and index dimensions differ".into()));
    }
    let scores = index.scores(query);
    let mut order: Vec<usize> = (0..index.len()).collect();
    if k == 0 {
        return Ok(Vec::new());
    }
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, |&a, &b| rank_order(&index.ids, &scores, a, b));
        order.truncate(k);
    }
    order.sort_unstable_by(|&a, &b| rank_order(&index.ids, &scores, a, b));
    Ok(order.into_iter().map(|i| (i, scores[i])).collect())
}

pub fn top_k(index: &RetrievalIndex, query: &EmbeddingVector, k: usize) -> Result<Vec<(String, f64)>> {
    Ok(top_k_positions(index, query, k)?
        .into_iter()
        .map(|(i, s)| (index.ids[i].clone(), s))
        .collect())
}

fn hits<S: AsRef<str>>(retrieved: &[S], golden: &BTreeSet<String>) -> usize {
    let distinct: HashSet<&str> = retrieved.iter().map(|s| s.as_ref()).collect();
    distinct.iter().filter(|id| golden.contains(**id)).count()
}

/// `None` when the golden set is empty.
pub fn em_recall_at_k<S: AsRef<str>>(retrieved: &[S], golden: &BTreeSet<String>) -> Option<f64> {
    (!golden.is_empty()).then(|| hits(retrieved, golden) as f64 / golden.len() as f64)
}

/// Share of the `k` slots holding an Exact product.
pub fn em_precision_at_k<S: AsRef<str>>(
    retrieved: &[S],
    k: usize,
    relevance: impl Fn(&str) -> Result<RelevanceClass>,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let mut exact = 0usize;
    for id in retrieved.iter().take(k) {
        if relevance(id.as_ref())? == RelevanceClass::Exact {
            exact += 1;
        }
    }
    Ok(exact as f64 / k as f64)
}

/// `None` when nothing was purchased.
pub fn order_recall_at_k<S: AsRef<str>>(retrieved: &[S], purchased: &BTreeSet<String>) -> Option<f64> {
    em_recall_at_k(retrieved, purchased)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalKind {
    SmallIndexEmRecall,
    BigIndexEmPrecision,
    PurchasedOrderRecall,
}

impl EvalKind {
    pub const ALL: [EvalKind; 3] = [
        EvalKind::SmallIndexEmRecall,
        EvalKind::BigIndexEmPrecision,
        EvalKind::PurchasedOrderRecall,
    ];

    pub fn metric_name(self) -> &'static str {
        match self {
            EvalKind::SmallIndexEmRecall => "em_recall",
            EvalKind::BigIndexEmPrecision => "em_precision",
            EvalKind::PurchasedOrderRecall => "order_recall",
        }
    }
}

impl fmt::Display for EvalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EvalKind::SmallIndexEmRecall => "small_index_em_recall",
            EvalKind::BigIndexEmPrecision => "big_index_em_precision",
            EvalKind::PurchasedOrderRecall => "purchased_order_recall",
        };
        f.write_str(s)
    }
}

/// Where the golden answers for an evaluation come from.
#[derive(Debug, Clone, Copy)]
pub enum Golden<'a> {
    /// Per-query golden product sets; the metric is recall.
    Sets(&'a BTreeMap<String, BTreeSet<String>>),
    /// Relevance classes of retrieved products; the metric is EM precision.
    Oracle(&'a GroundTruth),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub query_id: String,
    /// One value per cutoff; `None` where the query was excluded.
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutoffSummary {
    pub k: usize,
    pub queries: usize,
    pub excluded: usize,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub kind: EvalKind,
    pub per_query: Vec<QueryMetrics>,
    pub summaries: Vec<CutoffSummary>,
}

impl EvalResult {
    pub fn mean_at(&self, k: usize) -> Option<f64> {
        self.summaries.iter().find(|s| s.k == k).map(|s| s.mean)
    }
}

/// Retrieves once at the largest cutoff and scores every prefix.
pub fn run_eval(
    kind: EvalKind,
    ks: &[usize],
    index: &RetrievalIndex,
    params: &TowerParams,
    queries: &[Query],
    golden: Golden<'_>,
) -> Result<EvalResult> {
    let max_k = ks.iter().copied().max().ok_or_else(|| Error::Config("no cutoffs".into()))?;
    if ks.contains(&0) {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let per_query = queries
        .par_iter()
        .map(|q| {
            let emb = embed(params, &tokens(&q.text))?;
            let ranked = top_k_positions(index, &emb, max_k)?;
            let ids: Vec<&str> = ranked.iter().map(|&(i, _)| index.ids[i].as_str()).collect();
            let mut values = Vec::with_capacity(ks.len());
            for &k in ks {
                let prefix = &ids[..k];
                let v = match golden {
                    Golden::Sets(sets) => sets.get(&q.id).and_then(|g| em_recall_at_k(prefix, g)),
                    Golden::Oracle(truth) => {
                        Some(em_precision_at_k(prefix, k, |p| truth.relevance(&q.id, p))?)
                    }
                };
                values.push(v);
            }
            Ok(QueryMetrics {
                query_id: q.id.clone(),
                values,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let summaries = ks
        .iter()
        .enumerate()
        .map(|(j, &k)| {
            let included: Vec<f64> = per_query.iter().filter_map(|m| m.values[j]).collect();
            let mean = if included.is_empty() {
                0.0
            } else {
                included.iter().sum::<f64>() / included.len() as f64
            };
            CutoffSummary {
                k,
                queries: included.len(),
                excluded: per_query.len() - included.len(),
                mean,
            }
        })
        .collect();
    Ok(EvalResult {
        kind,
        per_query,
        summaries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    /// Queries drawn by traffic weight for the full-catalog precision set.
    pub big_index_queries: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![20],
            big_index_queries: 1000,
            seed: 7,
        }
    }
}

/// Query sets, product sets and golden answers for the three evaluations.
#[derive(Debug, Clone)]
pub struct EvalSuite {
    /// Products judged for any evaluation query.
    pub small_products: Vec<Product>,
    /// Judged Exact products per query.
    pub small_golden: BTreeMap<String, BTreeSet<String>>,
    pub small_queries: Vec<String>,
    pub big_queries: Vec<String>,
    /// Ordered products per query, whatever their relevance.
    pub purchased_golden: BTreeMap<String, BTreeSet<String>>,
    pub purchased_queries: Vec<String>,
}

impl EvalSuite {
    /// Builds the suite over `query_ids` (all catalog queries when `None`).
    pub fn from_dataset(dataset: &Dataset, query_ids: Option<&[String]>, config: &EvalConfig) -> Result<Self> {
        let catalog = &dataset.catalog;
        let wanted: BTreeSet<String> = match query_ids {
            Some(ids) => ids.iter().cloned().collect(),
            None => catalog.queries.iter().map(|q| q.id.clone()).collect(),
        };
        for id in &wanted {
            if catalog.query(id).is_none() {
                return Err(Error::Reference(format!("evaluation query `{id}`")));
            }
        }
        let mut judged: BTreeSet<&str> = BTreeSet::new();
        let mut small_golden: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for j in &dataset.judgments {
            if !wanted.contains(&j.query_id) {
                continue;
            }
            judged.insert(&j.product_id);
            let entry = small_golden.entry(j.query_id.clone()).or_default();
            if j.klass == RelevanceClass::Exact {
                entry.insert(j.product_id.clone());
            }
        }
        let small_products: Vec<Product> = catalog
            .products
            .iter()
            .filter(|p| judged.contains(p.id.as_str()))
            .cloned()
            .collect();
        let small_queries: Vec<String> = small_golden.keys().cloned().collect();

        let mut purchased_golden: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for e in &dataset.engagement {
            if e.orders > 0 && wanted.contains(&e.query_id) {
                purchased_golden
                    .entry(e.query_id.clone())
                    .or_default()
                    .insert(e.product_id.clone());
            }
        }
        let purchased_queries = purchased_golden.keys().cloned().collect();

        let pool: Vec<&Query> = catalog
            .queries
            .iter()
            .filter(|q| wanted.contains(&q.id))
            .collect();
        let n = config.big_index_queries.min(pool.len());
        let mut rng = substream(config.seed, Stream::EvalSplit);
        let mut big_queries: Vec<String> = if pool.iter().all(|q| q.traffic_weight == 0.0) {
            pool.choose_multiple(&mut rng, n).map(|q| q.id.clone()).collect()
        } else {
            pool.choose_multiple_weighted(&mut rng, n, |q| q.traffic_weight)
                .map_err(|e| Error::Config(e.to_string()))?
                .map(|q| q.id.clone())
                .collect()
        };
        big_queries.sort();
        Ok(Self {
            small_products,
            small_golden,
            small_queries,
            big_queries,
            purchased_golden,
            purchased_queries,
        })
    }
}

/// Evaluation outputs for one query set (clean or corrupted texts).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub query_set: String,
    pub results: Vec<EvalResult>,
}

impl EvalReport {
    pub fn result(&self, kind: EvalKind) -> Option<&EvalResult> {
        self.results.iter().find(|r| r.kind == kind)
    }

    pub fn metric(&self, kind: EvalKind, k: usize) -> Option<f64> {
        self.result(kind).and_then(|r| r.mean_at(k))
    }
}

/// Runs the requested evaluations. `query_texts` supplies the texts to embed
/// (for example corrupted copies); ids must match the suite's.
pub fn evaluate(
    suite: &EvalSuite,
    kinds: &[EvalKind],
    ks: &[usize],
    params: &TowerParams,
    catalog_products: &[Product],
    query_texts: &[Query],
    query_set: &str,
    truth: Option<&GroundTruth>,
) -> Result<EvalReport> {
    let by_id: BTreeMap<&str, &Query> = query_texts.iter().map(|q| (q.id.as_str(), q)).collect();
    let pick = |ids: &[String]| -> Result<Vec<Query>> {
        ids.iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .map(|q| (*q).clone())
                    .ok_or_else(|| Error::Reference(format!("no text for query `{id}`")))
            })
            .collect()
    };
    let mut big_index = None;
    let mut results = Vec::new();
    for &kind in kinds {
        let result = match kind {
            EvalKind::SmallIndexEmRecall => {
                let index = build_index(&suite.small_products, params)?;
                let ks = clamp_ks(ks, index.len());
                run_eval(kind, &ks, &index, params, &pick(&suite.small_queries)?, Golden::Sets(&suite.small_golden))?
            }
            EvalKind::BigIndexEmPrecision => {
                let truth = truth.ok_or_else(|| {
                    Error::Config("EM precision needs the ground-truth relevance oracle".into())
                })?;
                if big_index.is_none() {
                    big_index = Some(build_index(catalog_products, params)?);
                }
                let index = big_index.as_ref().expect("built above");
                run_eval(kind, ks, index, params, &pick(&suite.big_queries)?, Golden::Oracle(truth))?
            }
            EvalKind::PurchasedOrderRecall => {
                if big_index.is_none() {
                    big_index = Some(build_index(catalog_products, params)?);
                }
                let index = big_index.as_ref().expect("built above");
                run_eval(
                    kind,
                    ks,
                    index,
                    params,
                    &pick(&suite.purchased_queries)?,
                    Golden::Sets(&suite.purchased_golden),
                )?
            }
        };
        results.push(result);
    }
    Ok(EvalReport {
        query_set: query_set.to_string(),
        results,
    })
}

/// Cutoffs above the index size are dropped rather than failing the run.
fn clamp_ks(ks: &[usize], size: usize) -> Vec<usize> {
    let kept: Vec<usize> = ks.iter().copied().filter(|&k| k <= size).collect();
    if kept.is_empty() {
        vec![size]
    } else {
        kept
    }
}

/// Tab-separated summary lines, one per (query set, kind, cutoff).
pub fn report_tsv(reports: &[EvalReport]) -> String {
    let mut out = String::from("query_set\tkind\tmetric\tk\tqueries\texcluded\tvalue\n");
    for rep in reports {
        for res in &rep.results {
            for s in &res.summaries {
                out.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}\t{}\t{:.6}\n",
                    rep.query_set,
                    res.kind,
                    res.kind.metric_name(),
                    s.k,
                    s.queries,
                    s.excluded,
                    s.mean
                ));
            }
        }
    }
    out
}

pub fn write_report(reports: &[EvalReport], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, report_tsv(reports)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use rand::Rng as _;

    fn set(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    fn random_index(n: usize, d: usize, seed: u64) -> RetrievalIndex {
        let mut rng = substream(seed, Stream::EvalSplit);
        let rows = (0..n)
            .map(|_| EmbeddingVector::normalized((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        RetrievalIndex::from_embeddings((0..n).map(|i| format!("p{i:05}")).collect(), rows).unwrap()
    }

    #[test]
    fn recall_and_precision_examples() {
        assert_eq!(em_recall_at_k(&["p1", "p7"], &set(&["p1", "p2"])), Some(0.5));
        assert_eq!(em_recall_at_k(&["p2", "p1", "p3"], &set(&["p1", "p2"])), Some(1.0));
        assert_eq!(em_recall_at_k(&["p3"], &set(&["p1", "p2"])), Some(0.0));
        assert_eq!(em_recall_at_k(&["p3"], &set(&[])), None);
        assert_eq!(order_recall_at_k(&["a", "b", "p9"], &set(&["p9"])), Some(1.0));
        assert_eq!(order_recall_at_k(&["a"], &set(&["p9"])), Some(0.0));
        assert_eq!(order_recall_at_k(&["p1", "x"], &set(&["p1", "p2", "p3"])), Some(1.0 / 3.0));

        let ids: Vec<String> = (0..20).map(|i| format!("p{i}")).collect();
        let exact_below = |n: usize| {
            move |id: &str| -> Result<RelevanceClass> {
                let i: usize = id[1..].parse().unwrap();
                Ok(if i < n { RelevanceClass::Exact } else { RelevanceClass::Substitute })
            }
        };
        assert_eq!(em_precision_at_k(&ids, 20, exact_below(15)).unwrap(), 0.75);
        assert_eq!(em_precision_at_k(&ids, 20, exact_below(0)).unwrap(), 0.0);
        assert_eq!(em_precision_at_k(&ids, 20, exact_below(20)).unwrap(), 1.0);
    }

    #[test]
    fn top_k_matches_naive_sort() {
        let index = random_index(2000, 16, 3);
        let queries = random_index(50, 16, 4);
        for qi in 0..queries.len() {
            let q = EmbeddingVector::normalized(queries.row(qi).to_vec()).unwrap();
            let scores = index.scores(&q);
            let mut naive: Vec<(String, f64)> =
                index.ids().iter().cloned().zip(scores).collect();
            naive.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            naive.truncate(20);
            assert_eq!(top_k(&index, &q, 20).unwrap(), naive);
        }
    }

    #[test]
    fn top_k_identity_ties_and_bounds() {
        let index = random_index(100, 8, 5);
        let q = EmbeddingVector::normalized(index.row(42).to_vec()).unwrap();
        let best = &top_k(&index, &q, 1).unwrap()[0];
        assert_eq!(best.0, "p00042");
        assert!((best.1 - 1.0).abs() < 1e-12);

        let all = top_k(&index, &q, 100).unwrap();
        let ids: BTreeSet<&str> = all.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(ids.len(), 100);
        assert!(all.windows(2).all(|w| w[0].1 >= w[1].1));
        assert!(matches!(top_k(&index, &q, 101), Err(Error::KTooLarge { .. })));

        let v = EmbeddingVector::normalized(vec![1.0, 0.0]).unwrap();
        let tied = RetrievalIndex::from_embeddings(
            vec!["b".into(), "a".into(), "c".into()],
            vec![v.clone(), v.clone(), v.clone()],
        )
        .unwrap();
        let order: Vec<String> = top_k(&tied, &v, 3).unwrap().into_iter().map(|x| x.0).collect();
        assert_eq!(order, ["a", "b", "c"]);
    }

    #[test]
    fn build_index_contract() {
        let params = TowerParams::init(&EncoderConfig::default()).unwrap();
        let products: Vec<Product> = (0..100)
            .map(|i| Product {
                id: format!("p{i}"),
                title: format!("item{} thing", i % 17),
                attributes: Default::default(),
                product_type: "t".into(),
            })
            .collect();
        let a = build_index(&products, &params).unwrap();
        assert_eq!((a.len(), a.dim()), (100, 32));
        for i in 0..a.len() {
            let n = dot(a.row(i), a.row(i)).sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        assert_eq!(build_index(&products, &params).unwrap(), a);
        let mut dup = products.clone();
        dup[1].id = "p0".into();
        assert!(build_index(&dup, &params).is_err());
    }

    #[test]
    fn macro_average() {
        let index = random_index(10, 4, 9);
        let params = TowerParams::init(&EncoderConfig { dim: 4, hash_buckets: 16, ..Default::default() }).unwrap();
        let queries = vec![
            Query { id: "q1".into(), text: "x".into(), traffic_weight: 1.0 },
            Query { id: "q2".into(), text: "y".into(), traffic_weight: 1.0 },
        ];
        let all: BTreeSet<String> = index.ids().iter().cloned().collect();
        let mut golden = BTreeMap::new();
        golden.insert("q1".to_string(), all.clone());
        golden.insert("q2".to_string(), set(&["nowhere"]));
        let r = run_eval(EvalKind::SmallIndexEmRecall, &[10, 5], &index, &params, &queries, Golden::Sets(&golden)).unwrap();
        assert_eq!(r.mean_at(10), Some(0.5));
        assert_eq!(r.mean_at(5), Some(0.25));
        golden.remove("q2");
        let r = run_eval(EvalKind::SmallIndexEmRecall, &[10], &index, &params, &queries, Golden::Sets(&golden)).unwrap();
        assert_eq!(r.summaries[0].excluded, 1);
        assert_eq!(r.mean_at(10), Some(1.0));
    }
}
