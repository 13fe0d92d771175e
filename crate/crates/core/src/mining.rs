//! Offline hard-negative and semi-positive mining from model retrieval.
//!
//! A retrieved candidate is a negative when its PT is not among the query's
//! predicted PTs and fewer than half of the query tokens appear in its title.
//! It is a semi-positive when its PT is predicted with a score of at least
//! 0.3, at least half of the query tokens appear in its title, and it was
//! retrieved below position 50; its engagement label is
//! `min(2, 2 · overlap)`. Everything else is skipped.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, Product, PtPrediction, Query, Record};
use crate::encoder::{embed, TowerParams};
use crate::error::{Error, Result};
use crate::evalkit::{top_k_positions, RetrievalIndex};
use crate::labeling::{relevance_label, RelevanceParams};
use crate::rng::Rng;
use crate::rrm::RelevanceScorer;
use crate::text::{distinct_tokens, tokens};
use crate::training::{Origin, TrainRow, TrainingSet};

pub fn mined_file_name(iteration: usize) -> String {
    format!("mined_iteration_{iteration}.jsonl")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiningConfig {
    pub top_k: usize,
    pub pt_score_threshold: f64,
    pub overlap_threshold: f64,
    /// Semi-positives must sit strictly below this 1-based position.
    pub semi_positive_min_position: usize,
    pub negatives_per_query: usize,
    pub seed: u64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            top_k: 200,
            pt_score_threshold: 0.3,
            overlap_threshold: 0.5,
            semi_positive_min_position: 50,
            negatives_per_query: 10,
            seed: 7,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k <= self.semi_positive_min_position {
            return Err(Error::Config(
                "top_k must exceed semi_positive_min_position".into(),
            ));
        }
        for (name, v) in [
            ("pt_score_threshold", self.pt_score_threshold),
            ("overlap_threshold", self.overlap_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Negative,
    SemiPositive,
    Skip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningVerdict {
    pub query_id: String,
    pub product_id: String,
    /// 1-based retrieval rank.
    pub position: usize,
    pub verdict: Verdict,
    pub assigned_s: f64,
    pub assigned_r: f64,
}

impl Record for MiningVerdict {
    fn validate(&self) -> Result<(), String> {
        let ok = match self.verdict {
            Verdict::Negative => self.assigned_s == 0.0,
            Verdict::SemiPositive => (1.0..=2.0).contains(&self.assigned_s),
            Verdict::Skip => true,
        };
        if !ok || self.position == 0 || !(0.0..=1.0).contains(&self.assigned_r) {
            return Err(format!("inconsistent verdict for ({}, {})", self.query_id, self.product_id));
        }
        Ok(())
    }
}

/// Share of distinct query tokens that also occur in the title.
pub fn token_overlap_fraction(query: &str, title: &str) -> f64 {
    let q = distinct_tokens(query);
    if q.is_empty() {
        return 0.0;
    }
    let t: HashSet<String> = tokens(title).into_iter().collect();
    q.iter().filter(|w| t.contains(*w)).count() as f64 / q.len() as f64
}

/// The verdict rule on precomputed inputs. `pt_score` is `None` when the
/// product's PT is not among the query's predicted PTs.
pub fn verdict_rule(overlap: f64, pt_score: Option<f64>, position: usize, config: &MiningConfig) -> Verdict {
    match pt_score {
        None if overlap < config.overlap_threshold => Verdict::Negative,
        Some(score)
            if score >= config.pt_score_threshold
                && overlap >= config.overlap_threshold
                && position > config.semi_positive_min_position =>
        {
            Verdict::SemiPositive
        }
        _ => Verdict::Skip,
    }
}

pub fn semi_positive_label(overlap: f64) -> f64 {
    (2.0 * overlap).min(2.0)
}

#[allow(clippy::too_many_arguments)]
pub fn classify_candidate(
    query: &Query,
    product: &Product,
    position: usize,
    relevant_pts: &PtPrediction,
    config: &MiningConfig,
    scorer: &dyn RelevanceScorer,
    relevance: &RelevanceParams,
) -> Result<MiningVerdict> {
    if position == 0 {
        return Err(Error::Validation("retrieval positions are 1-based".into()));
    }
    let overlap = token_overlap_fraction(&query.text, &product.title);
    let pt_score = relevant_pts.score_of(&product.product_type);
    let verdict = verdict_rule(overlap, pt_score, position, config);
    let (assigned_s, assigned_r) = match verdict {
        Verdict::Skip => (0.0, 0.0),
        v => {
            let r = relevance_label(&scorer.probs(query, product)?, relevance).0;
            let s = if v == Verdict::SemiPositive { semi_positive_label(overlap) } else { 0.0 };
            (s, r)
        }
    };
    Ok(MiningVerdict {
        query_id: query.id.clone(),
        product_id: product.id.clone(),
        position,
        verdict,
        assigned_s,
        assigned_r,
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MinedQuery {
    /// Negatives after PT-stratified downsampling.
    pub negatives: Vec<MiningVerdict>,
    pub semi_positives: Vec<MiningVerdict>,
    /// Candidates classified negative before downsampling.
    pub negative_candidates: usize,
    pub skipped: usize,
}

impl MinedQuery {
    pub fn into_verdicts(self) -> Vec<MiningVerdict> {
        let mut v = self.negatives;
        v.extend(self.semi_positives);
        v
    }
}

/// Picks up to `quota` negatives round-robin over PT groups visited in a
/// random order; each group yields its candidates by ascending position.
pub fn downsample_by_pt(
    negatives: Vec<(MiningVerdict, String)>,
    quota: usize,
    rng: &mut Rng,
) -> Vec<MiningVerdict> {
    let mut groups: BTreeMap<String, Vec<MiningVerdict>> = BTreeMap::new();
    for (v, pt) in negatives {
        groups.entry(pt).or_default().push(v);
    }
    let mut lists: Vec<std::vec::IntoIter<MiningVerdict>> = groups
        .into_values()
        .map(|mut g| {
            g.sort_by_key(|v| v.position);
            g.into_iter()
        })
        .collect();
    lists.shuffle(rng);
    let mut out = Vec::with_capacity(quota);
    loop {
        let mut progressed = false;
        for it in lists.iter_mut() {
            if out.len() == quota {
                return out;
            }
            if let Some(v) = it.next() {
                out.push(v);
                progressed = true;
            }
        }
        if !progressed {
            return out;
        }
    }
}

/// Retrieves the query's top candidates and classifies each of them.
#[allow(clippy::too_many_arguments)]
pub fn mine_for_query(
    query: &Query,
    catalog: &Catalog,
    index: &RetrievalIndex,
    params: &TowerParams,
    scorer: &dyn RelevanceScorer,
    relevant_pts: &PtPrediction,
    config: &MiningConfig,
    relevance: &RelevanceParams,
    rng: &mut Rng,
) -> Result<MinedQuery> {
    let emb = embed(params, &tokens(&query.text))?;
    let k = config.top_k.min(index.len());
    let ranked = top_k_positions(index, &emb, k)?;
    let mut out = MinedQuery::default();
    let mut negatives = Vec::new();
    for (rank, (row, _)) in ranked.into_iter().enumerate() {
        let id = &index.ids()[row];
        let product = catalog
            .product(id)
            .ok_or_else(|| Error::Reference(format!("indexed product `{id}`")))?;
        let v = classify_candidate(query, product, rank + 1, relevant_pts, config, scorer, relevance)?;
        match v.verdict {
            Verdict::Negative => negatives.push((v, product.product_type.clone())),
            Verdict::SemiPositive => out.semi_positives.push(v),
            Verdict::Skip => out.skipped += 1,
        }
    }
    out.negative_candidates = negatives.len();
    out.negatives = downsample_by_pt(negatives, config.negatives_per_query, rng);
    Ok(out)
}

/// Appends mined negatives and semi-positives to `previous`. Existing rows
/// are kept as they are and win over any mined row for the same pair.
pub fn merge_mined(previous: &TrainingSet, mined: &[MiningVerdict]) -> TrainingSet {
    let mut seen: HashSet<(String, String)> = previous
        .rows
        .iter()
        .map(|r| (r.query_id.clone(), r.product_id.clone()))
        .collect();
    let mut rows = previous.rows.clone();
    for v in mined {
        let origin = match v.verdict {
            Verdict::Negative => Origin::OfflineNegative,
            Verdict::SemiPositive => Origin::SemiPositive,
            Verdict::Skip => continue,
        };
        if !seen.insert((v.query_id.clone(), v.product_id.clone())) {
            continue;
        }
        rows.push(TrainRow {
            query_id: v.query_id.clone(),
            product_id: v.product_id.clone(),
            s_revised: v.assigned_s,
            r: v.assigned_r,
            origin,
        });
    }
    TrainingSet { rows }
}

/// Per-query verdict counts as TSV.
pub fn summary_tsv(verdicts: &[MiningVerdict]) -> String {
    let mut counts: BTreeMap<&str, [usize; 2]> = BTreeMap::new();
    for v in verdicts {
        let c = counts.entry(&v.query_id).or_default();
        match v.verdict {
            Verdict::Negative => c[0] += 1,
            Verdict::SemiPositive => c[1] += 1,
            Verdict::Skip => {}
        }
    }
    let mut out = String::from("query_id\tnegative\tsemi_positive\n");
    for (q, c) in counts {
        let _ = writeln!(out, "{q}\t{}\t{}", c[0], c[1]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::PtScore;
    use crate::rng::{substream, Stream};
    use crate::rrm::RelevanceProbs;
    use proptest::prelude::*;

    struct Fixed(RelevanceProbs);

    impl RelevanceScorer for Fixed {
        fn probs(&self, _: &Query, _: &Product) -> Result<RelevanceProbs> {
            Ok(self.0)
        }
    }

    fn scorer() -> Fixed {
        Fixed(RelevanceProbs::new(0.1, 0.2, 0.7).unwrap())
    }

    fn query(text: &str) -> Query {
        Query { id: "q".into(), text: text.into(), traffic_weight: 1.0 }
    }

    fn product(id: &str, title: &str, pt: &str) -> Product {
        Product { id: id.into(), title: title.into(), attributes: Default::default(), product_type: pt.into() }
    }

    fn pts(entries: &[(&str, f64)]) -> PtPrediction {
        PtPrediction {
            query_id: "q".into(),
            entries: entries
                .iter()
                .map(|(p, s)| PtScore { product_type: p.to_string(), score: *s })
                .collect(),
        }
    }

    #[test]
    fn overlap_examples() {
        assert_eq!(token_overlap_fraction("red shoes", "Red Running Shoes for Men"), 1.0);
        assert_eq!(token_overlap_fraction("bird scooter for kids", "Electric Scooter Handlebar"), 0.25);
        assert_eq!(token_overlap_fraction("blue sofa", "blue sofa"), 1.0);
    }

    #[test]
    fn rule_examples() {
        let c = MiningConfig::default();
        assert_eq!(verdict_rule(0.2, None, 10, &c), Verdict::Negative);
        assert_eq!(verdict_rule(0.6, Some(0.9), 80, &c), Verdict::SemiPositive);
        assert_eq!(semi_positive_label(0.6), 1.2);
        assert_eq!(verdict_rule(0.6, Some(0.9), 30, &c), Verdict::Skip);
        assert_eq!(verdict_rule(0.7, None, 80, &c), Verdict::Skip);
        // Position exactly 50 is not below it.
        assert_eq!(verdict_rule(0.6, Some(0.9), 50, &c), Verdict::Skip);
        // A listed PT blocks the negative rule whatever its score.
        assert_eq!(verdict_rule(0.0, Some(0.05), 10, &c), Verdict::Skip);
        assert_eq!(semi_positive_label(0.5), 1.0);
        assert_eq!(semi_positive_label(1.0), 2.0);
    }

    #[test]
    fn classify_assigns_labels() {
        let c = MiningConfig::default();
        let q = query("red shoes for kids");
        let rel = RelevanceParams::default();
        let neg = classify_candidate(&q, &product("p1", "blue lamp", "lamps"), 10, &pts(&[("shoes", 1.0)]), &c, &scorer(), &rel).unwrap();
        assert_eq!(neg.verdict, Verdict::Negative);
        assert_eq!(neg.assigned_s, 0.0);
        assert!((neg.assigned_r - 0.1 * (0.1 + 0.1 * 0.2)).abs() < 1e-12);
        let semi = classify_candidate(&q, &product("p2", "red shoes for men", "shoes"), 80, &pts(&[("shoes", 1.0)]), &c, &scorer(), &rel).unwrap();
        assert_eq!(semi.verdict, Verdict::SemiPositive);
        assert_eq!(semi.assigned_s, 1.5);
        assert!(classify_candidate(&q, &product("p2", "x", "y"), 0, &pts(&[]), &c, &scorer(), &rel).is_err());
    }

    fn neg(id: usize, position: usize) -> MiningVerdict {
        MiningVerdict {
            query_id: "q".into(),
            product_id: format!("p{id}"),
            position,
            verdict: Verdict::Negative,
            assigned_s: 0.0,
            assigned_r: 0.0,
        }
    }

    #[test]
    fn round_robin_covers_each_pt() {
        let mut rng = substream(1, Stream::Mining);
        let cands: Vec<(MiningVerdict, String)> = (0..25)
            .map(|i| (neg(i, i + 1), format!("pt{}", i % 5)))
            .collect();
        let out = downsample_by_pt(cands.clone(), 5, &mut rng);
        let pts_of: HashSet<usize> = out.iter().map(|v| v.product_id[1..].parse::<usize>().unwrap() % 5).collect();
        assert_eq!(pts_of.len(), 5);
        // Hardest (smallest position) per group first.
        assert!(out.iter().all(|v| v.position <= 5));
        assert!(downsample_by_pt(Vec::new(), 5, &mut rng).is_empty());
        assert_eq!(downsample_by_pt(cands, 100, &mut rng).len(), 25);
    }

    fn engaged(q: &str, p: &str) -> TrainRow {
        TrainRow { query_id: q.into(), product_id: p.into(), s_revised: 2.0, r: 0.9, origin: Origin::Engaged }
    }

    #[test]
    fn merge_rules() {
        let prev = TrainingSet { rows: vec![engaged("q", "p1"), engaged("q", "p2")] };
        let mined = vec![neg(1, 3), neg(7, 4)];
        let merged = merge_mined(&prev, &mined);
        assert_eq!(merged.rows.len(), 3);
        assert_eq!(merged.rows[..2], prev.rows[..]);
        assert_eq!(merged.rows[2].product_id, "p7");
        assert_eq!(merged.rows[2].origin, Origin::OfflineNegative);
        assert_eq!(merge_mined(&merged, &mined), merged);
        let disjoint = merge_mined(&TrainingSet::default(), &[neg(3, 1)]);
        assert_eq!(disjoint.rows.len(), 1);
    }

    proptest! {
        #[test]
        fn verdicts_partition(overlap in 0.0..=1.0f64, listed in any::<bool>(), score in 0.0..=1.0f64, position in 1usize..300) {
            let c = MiningConfig::default();
            let pt = listed.then_some(score);
            let v = verdict_rule(overlap, pt, position, &c);
            let is_neg = pt.is_none() && overlap < 0.5;
            let is_semi = pt.is_some_and(|s| s >= 0.3) && overlap >= 0.5 && position > 50;
            prop_assert!(!(is_neg && is_semi));
            let expected = if is_neg { Verdict::Negative } else if is_semi { Verdict::SemiPositive } else { Verdict::Skip };
            prop_assert_eq!(v, expected);
            if v == Verdict::SemiPositive {
                let s = semi_positive_label(overlap);
                prop_assert!((1.0..=2.0).contains(&s));
            }
        }
    }
}
