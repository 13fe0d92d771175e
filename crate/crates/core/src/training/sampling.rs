//! Per-query stratified candidate sampling and in-batch negative selection.

use std::collections::HashSet;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::encoder::{cosine, EmbeddingVector};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Engaged,
    OfflineNegative,
    SemiPositive,
    InBatchNegative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledCandidate {
    pub product_id: String,
    pub s_revised: f64,
    pub r: f64,
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub query_id: String,
    pub candidates: Vec<LabeledCandidate>,
}

/// Engagement-label strata, highest first.
pub const STRATA: [&str; 4] = ["[1, inf)", "[0.1, 1)", "(0, 0.1)", "0"];

pub fn stratum(s: f64) -> usize {
    if s >= 1.0 {
        0
    } else if s >= 0.1 {
        1
    } else if s > 0.0 {
        2
    } else {
        3
    }
}

/// Draws up to `sum(quota)` candidates with `quota[i]` from stratum `i`.
///
/// A stratum short of its quota passes the deficit to the next lower stratum
/// (the zero-label stratum last). Whatever is still missing after that is
/// filled from leftover positives, highest stratum first. Returns `None`
/// when the pool has no positive candidate.
pub fn stratified_sample(
    pool: &[LabeledCandidate],
    quota: [usize; 4],
    rng: &mut Rng,
) -> Option<Vec<LabeledCandidate>> {
    let mut buckets: [Vec<usize>; 4] = Default::default();
    let mut seen = HashSet::new();
    for (i, c) in pool.iter().enumerate() {
        if seen.insert(c.product_id.as_str()) {
            buckets[stratum(c.s_revised)].push(i);
        }
    }
    if buckets[..3].iter().all(Vec::is_empty) {
        return None;
    }
    let mut taken: [Vec<usize>; 4] = Default::default();
    let mut carry = 0;
    for s in 0..4 {
        let want = quota[s] + carry;
        let n = want.min(buckets[s].len());
        let picks = sample(rng, buckets[s].len(), n);
        let mut chosen: Vec<usize> = picks.iter().map(|j| buckets[s][j]).collect();
        let chosen_set: HashSet<usize> = chosen.iter().copied().collect();
        buckets[s].retain(|i| !chosen_set.contains(i));
        taken[s].append(&mut chosen);
        carry = want - n;
    }
    for s in 0..3 {
        if carry == 0 {
            break;
        }
        let n = carry.min(buckets[s].len());
        let picks = sample(rng, buckets[s].len(), n);
        let chosen: Vec<usize> = picks.iter().map(|j| buckets[s][j]).collect();
        taken[s].extend(chosen);
        carry -= n;
    }
    Some(taken.iter().flatten().map(|&i| pool[i].clone()).collect())
}

/// A product embedding inside a batch, tagged with the query it was sampled for.
#[derive(Debug, Clone, Copy)]
pub struct BatchProduct<'a> {
    pub owner: usize,
    pub product_id: &'a str,
    pub embedding: &'a EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InBatchSelection {
    /// Positions into the batch product list, best first.
    pub picks: Vec<usize>,
    /// Fewer than `k` eligible products were available.
    pub short: bool,
}

/// The `k` products of other queries with the highest cosine to the query,
/// skipping ids the query already has. Ties go to the smaller product id.
pub fn in_batch_negatives(
    query_index: usize,
    query: &EmbeddingVector,
    products: &[BatchProduct<'_>],
    k: usize,
) -> InBatchSelection {
    let own: HashSet<&str> = products
        .iter()
        .filter(|p| p.owner == query_index)
        .map(|p| p.product_id)
        .collect();
    let mut seen = HashSet::new();
    let mut eligible: Vec<(usize, f64)> = products
        .iter()
        .enumerate()
        .filter(|(_, p)| p.owner != query_index && !own.contains(p.product_id))
        .filter(|(_, p)| seen.insert(p.product_id))
        .map(|(i, p)| (i, cosine(query, p.embedding)))
        .collect();
    eligible.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| products[a.0].product_id.cmp(products[b.0].product_id))
    });
    let short = eligible.len() < k;
    eligible.truncate(k);
    InBatchSelection {
        picks: eligible.into_iter().map(|(i, _)| i).collect(),
        short,
    }
}
