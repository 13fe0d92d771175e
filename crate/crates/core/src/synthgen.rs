//! Deterministic synthetic catalog, engagement log, judgments and PT
//! predictions with a recoverable ground truth.
//!
//! Products are `"<color> <brand> <noun> for <audience>"` items grouped by
//! product type (PT); each PT owns a few head nouns. A query is derived from
//! an anchor product: its noun (or a query-only synonym of it), optionally its
//! color and audience. Ground truth:
//!
//! * Exact: same noun, and every facet the query names matches.
//! * Substitute: same PT otherwise.
//! * Irrelevant: different PT.
//!
//! Engagement comes from a funnel (heavy-tailed impressions, then binomial
//! clicks, add-to-carts and orders) modulated by a per-product
//! attractiveness, so popular substitutes collect orders too. Irrelevant
//! pairs never convert on their own; false-positive orders are injected
//! afterwards so that the configured fraction of ordered pairs is Irrelevant.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rand_distr::{Binomial, Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::augment::{inject_typos_traced, KeyboardMap, TypoConfig, TypoEdit};
use crate::catalog::{
    load_jsonl, save_jsonl, Attributes, Catalog, Dataset, EngagementRecord, JudgmentRecord,
    Product, PtPrediction, PtScore, Query, Record, RelevanceClass, PRODUCTS_FILE,
};
use crate::error::{Error, Result};
use crate::rng::{substream, Rng, Stream};
use crate::text::is_numeric;

pub const GROUND_TRUTH_FILE: &str = "ground_truth.jsonl";
pub const CORRUPTED_QUERIES_FILE: &str = "queries_corrupted.jsonl";
pub const WORLD_CONFIG_FILE: &str = "world_config.json";

const COLORS: &[&str] = &[
    "red", "blue", "green", "black", "white", "gray", "pink", "brown", "navy", "beige", "yellow",
    "purple",
];
const AUDIENCES: &[&str] = &["men", "women", "kids", "baby", "teens", "unisex"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabConfig {
    pub nouns_per_type: usize,
    pub colors: usize,
    pub brands: usize,
    pub audiences: usize,
    /// Fraction of queries phrased with a query-only synonym of the noun.
    pub synonym_rate: f64,
    /// Probability a query names the anchor's color.
    pub color_rate: f64,
    /// Probability a query names the anchor's audience.
    pub audience_rate: f64,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            nouns_per_type: 4,
            colors: 8,
            brands: 40,
            audiences: 4,
            synonym_rate: 0.25,
            color_rate: 0.5,
            audience_rate: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngagementConfig {
    /// Cap on Exact products shown per query.
    pub max_exact_shown: usize,
    pub substitutes_shown: usize,
    pub irrelevant_shown: usize,
    /// Scale and tail index of the Pareto impression draw.
    pub impression_scale: f64,
    pub impression_tail: f64,
    /// Log-space spread of per-product attractiveness.
    pub popularity_sigma: f64,
    /// Click-through rate by class (Exact, Substitute, Irrelevant).
    pub ctr: [f64; 3],
    /// Add-to-cart rate given a click, by class.
    pub atc_rate: [f64; 3],
    pub order_rate: f64,
}

impl Default for EngagementConfig {
    fn default() -> Self {
        Self {
            max_exact_shown: 40,
            substitutes_shown: 12,
            irrelevant_shown: 4,
            impression_scale: 20.0,
            impression_tail: 1.5,
            popularity_sigma: 0.6,
            ctr: [0.06, 0.03, 0.004],
            atc_rate: [0.3, 0.25, 0.05],
            order_rate: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub seed: u64,
    pub num_product_types: usize,
    pub products_per_type: usize,
    pub num_queries: usize,
    pub vocab: VocabConfig,
    pub engagement: EngagementConfig,
    /// Fraction of ordered pairs that are ground-truth Irrelevant.
    pub false_positive_rate: f64,
    /// Probability each candidate pair of a query is judged.
    pub judgment_coverage: f64,
    /// Random catalog products added to each query's judgment pool.
    pub judgment_random_per_query: usize,
    /// Probability a judgment is replaced by a different random class.
    pub judgment_noise: f64,
    /// Fraction of evaluation queries corrupted with a typo.
    pub misspell_rate: f64,
    /// Extra low-score PTs listed in each query's PT prediction.
    pub pt_distractors: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            num_product_types: 20,
            products_per_type: 100,
            num_queries: 500,
            vocab: VocabConfig::default(),
            engagement: EngagementConfig::default(),
            false_positive_rate: 0.1,
            judgment_coverage: 0.6,
            judgment_random_per_query: 10,
            judgment_noise: 0.0,
            misspell_rate: 0.13,
            pt_distractors: 1,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("false_positive_rate", self.false_positive_rate),
            ("judgment_coverage", self.judgment_coverage),
            ("judgment_noise", self.judgment_noise),
            ("misspell_rate", self.misspell_rate),
            ("synonym_rate", self.vocab.synonym_rate),
            ("color_rate", self.vocab.color_rate),
            ("audience_rate", self.vocab.audience_rate),
            ("order_rate", self.engagement.order_rate),
        ];
        for (name, v) in rates {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        for v in self.engagement.ctr.iter().chain(&self.engagement.atc_rate) {
            if !(0.0..=1.0).contains(v) {
                return Err(Error::Config(format!("funnel rate {v} outside [0, 1]")));
            }
        }
        let counts = [
            ("num_product_types", self.num_product_types),
            ("products_per_type", self.products_per_type),
            ("num_queries", self.num_queries),
            ("nouns_per_type", self.vocab.nouns_per_type),
            ("colors", self.vocab.colors),
            ("brands", self.vocab.brands),
            ("audiences", self.vocab.audiences),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.vocab.colors > COLORS.len() {
            return Err(Error::Config(format!("at most {} colors", COLORS.len())));
        }
        if self.vocab.audiences > AUDIENCES.len() {
            return Err(Error::Config(format!("at most {} audiences", AUDIENCES.len())));
        }
        if self.pt_distractors >= self.num_product_types {
            return Err(Error::Config("pt_distractors must be below num_product_types".into()));
        }
        if !(self.engagement.impression_scale > 0.0 && self.engagement.impression_tail > 0.0) {
            return Err(Error::Config("impression scale and tail must be positive".into()));
        }
        Ok(())
    }
}

/// Facets of one query intent; also the ground-truth row format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryTruth {
    pub query_id: String,
    pub product_type: String,
    pub noun: String,
    pub color: Option<String>,
    pub audience: Option<String>,
    pub exact: BTreeSet<String>,
    pub substitute: BTreeSet<String>,
    pub purchased: BTreeSet<String>,
}

impl Record for QueryTruth {
    fn validate(&self) -> Result<(), String> {
        if self.exact.iter().any(|p| self.substitute.contains(p)) {
            return Err(format!("query `{}`: product both exact and substitute", self.query_id));
        }
        Ok(())
    }

    fn unique_key(&self) -> Option<String> {
        Some(self.query_id.clone())
    }
}

/// Relevance of every generated (query, product) pair, plus purchased sets.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    queries: BTreeMap<String, QueryTruth>,
    products: HashSet<String>,
}

impl GroundTruth {
    pub fn new(rows: Vec<QueryTruth>, product_ids: impl IntoIterator<Item = String>) -> Self {
        Self {
            queries: rows.into_iter().map(|r| (r.query_id.clone(), r)).collect(),
            products: product_ids.into_iter().collect(),
        }
    }

    pub fn relevance(&self, query_id: &str, product_id: &str) -> Result<RelevanceClass> {
        let q = self
            .queries
            .get(query_id)
            .ok_or_else(|| Error::Reference(format!("query `{query_id}` not in ground truth")))?;
        if !self.products.contains(product_id) {
            return Err(Error::Reference(format!(
                "product `{product_id}` not in ground truth"
            )));
        }
        Ok(if q.exact.contains(product_id) {
            RelevanceClass::Exact
        } else if q.substitute.contains(product_id) {
            RelevanceClass::Substitute
        } else {
            RelevanceClass::Irrelevant
        })
    }

    pub fn query(&self, query_id: &str) -> Option<&QueryTruth> {
        self.queries.get(query_id)
    }

    pub fn rows(&self) -> impl Iterator<Item = &QueryTruth> {
        self.queries.values()
    }

    pub fn purchased(&self, query_id: &str) -> Option<&BTreeSet<String>> {
        self.queries.get(query_id).map(|q| &q.purchased)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let rows: Vec<&QueryTruth> = self.queries.values().collect();
        save_jsonl(&rows, path)
    }

    /// Loads `ground_truth.jsonl` and the product ids of `products.jsonl`
    /// from a dataset directory.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let rows: Vec<QueryTruth> = load_jsonl(dir.join(GROUND_TRUTH_FILE))?;
        let products: Vec<Product> = load_jsonl(dir.join(PRODUCTS_FILE))?;
        Ok(Self::new(rows, products.into_iter().map(|p| p.id)))
    }
}

/// Everything one generation run produces.
#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub dataset: Dataset,
    pub ground_truth: GroundTruth,
    /// Same ids as the catalog queries; a `misspell_rate` share altered.
    pub corrupted_queries: Vec<CorruptedQuery>,
}

impl World {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.dataset.save(dir)?;
        self.ground_truth.save(dir.join(GROUND_TRUTH_FILE))?;
        let corrupted: Vec<&Query> = self.corrupted_queries.iter().map(|c| &c.corrupted).collect();
        save_jsonl(&corrupted, dir.join(CORRUPTED_QUERIES_FILE))?;
        let cfg = serde_json::to_string_pretty(&self.config)?;
        let path = dir.join(WORLD_CONFIG_FILE);
        fs::write(&path, cfg + "\n").map_err(|e| Error::io(path, e))
    }
}

struct Facets {
    pt: usize,
    noun: usize,
    color: usize,
    brand: usize,
    audience: usize,
}

fn pseudo_word(rng: &mut Rng, syllables: usize) -> String {
    const ONSETS: &[&str] = &[
        "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "tr", "st",
        "pl", "gr", "sh",
    ];
    const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS.choose(rng).unwrap());
        w.push_str(VOWELS.choose(rng).unwrap());
    }
    w
}

fn unique_words(rng: &mut Rng, n: usize, taken: &mut HashSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syl = rng.random_range(2..=3);
        let w = pseudo_word(rng, syl);
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn pareto_count(rng: &mut Rng, scale: f64, tail: f64) -> u64 {
    let u: f64 = rng.random_range(f64::EPSILON..1.0);
    let v = scale * u.powf(-1.0 / tail);
    v.ceil().min(1.0e6) as u64
}

fn binomial(rng: &mut Rng, n: u64, p: f64) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    Binomial::new(n, p.min(1.0)).expect("valid binomial").sample(rng)
}

/// Generates a world. Identical configs give identical worlds.
pub fn generate_world(config: &WorldConfig) -> Result<World> {
    config.validate()?;
    let seed = config.seed;
    let v = &config.vocab;

    let mut vocab_rng = substream(seed, Stream::Vocabulary);
    let mut taken: HashSet<String> = COLORS
        .iter()
        .chain(AUDIENCES)
        .map(|s| s.to_string())
        .collect();
    taken.insert("for".into());
    let n_nouns = config.num_product_types * v.nouns_per_type;
    let nouns = unique_words(&mut vocab_rng, n_nouns, &mut taken);
    let synonyms = unique_words(&mut vocab_rng, n_nouns, &mut taken);
    let brands = unique_words(&mut vocab_rng, v.brands, &mut taken);
    let colors = &COLORS[..v.colors];
    let audiences = &AUDIENCES[..v.audiences];
    let pt_name = |pt: usize| format!("pt{pt:03}");

    // Products.
    let mut prod_rng = substream(seed, Stream::Products);
    let popularity = LogNormal::new(0.0, config.engagement.popularity_sigma.max(0.0))
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut products = Vec::new();
    let mut facets = Vec::new();
    let mut attractiveness = Vec::new();
    for pt in 0..config.num_product_types {
        for i in 0..config.products_per_type {
            let f = Facets {
                pt,
                noun: pt * v.nouns_per_type + i % v.nouns_per_type,
                color: prod_rng.random_range(0..colors.len()),
                brand: prod_rng.random_range(0..brands.len()),
                audience: prod_rng.random_range(0..audiences.len()),
            };
            let id = format!("p{:05}", products.len());
            let title = format!(
                "{} {} {} for {}",
                colors[f.color], brands[f.brand], nouns[f.noun], audiences[f.audience]
            );
            let attributes: Attributes = [
                ("color", colors[f.color]),
                ("brand", brands[f.brand].as_str()),
                ("audience", audiences[f.audience]),
            ]
            .into_iter()
            .collect();
            products.push(Product {
                id,
                title,
                attributes,
                product_type: pt_name(pt),
            });
            attractiveness.push(popularity.sample(&mut prod_rng));
            facets.push(f);
        }
    }

    // Queries, each anchored on a product so it has at least one Exact match.
    let mut q_rng = substream(seed, Stream::Queries);
    let weight_dist = LogNormal::new(0.0, 1.0).expect("valid lognormal");
    let mut queries = Vec::new();
    let mut truths = Vec::new();
    let mut seen_text = HashSet::new();
    let mut attempts = 0usize;
    while queries.len() < config.num_queries {
        attempts += 1;
        if attempts > config.num_queries * 200 {
            return Err(Error::Config(
                "vocabulary too small for the requested number of distinct queries".into(),
            ));
        }
        let anchor = &facets[q_rng.random_range(0..facets.len())];
        let use_syn = q_rng.random_bool(v.synonym_rate);
        let color = q_rng.random_bool(v.color_rate).then_some(anchor.color);
        let audience = q_rng.random_bool(v.audience_rate).then_some(anchor.audience);
        let head = if use_syn { &synonyms[anchor.noun] } else { &nouns[anchor.noun] };
        let mut text = String::new();
        if let Some(c) = color {
            text.push_str(colors[c]);
            text.push(' ');
        }
        text.push_str(head);
        if let Some(a) = audience {
            text.push_str(" for ");
            text.push_str(audiences[a]);
        }
        if !seen_text.insert(text.clone()) {
            continue;
        }
        let id = format!("q{:05}", queries.len());
        let mut exact = BTreeSet::new();
        let mut substitute = BTreeSet::new();
        for (p, f) in products.iter().zip(&facets) {
            if f.pt != anchor.pt {
                continue;
            }
            let is_exact = f.noun == anchor.noun
                && color.is_none_or(|c| c == f.color)
                && audience.is_none_or(|a| a == f.audience);
            if is_exact {
                exact.insert(p.id.clone());
            } else {
                substitute.insert(p.id.clone());
            }
        }
        truths.push(QueryTruth {
            query_id: id.clone(),
            product_type: pt_name(anchor.pt),
            noun: nouns[anchor.noun].clone(),
            color: color.map(|c| colors[c].to_string()),
            audience: audience.map(|a| audiences[a].to_string()),
            exact,
            substitute,
            purchased: BTreeSet::new(),
        });
        queries.push(Query {
            id,
            text,
            traffic_weight: weight_dist.sample(&mut q_rng),
        });
    }

    let pos_of: HashMap<&str, usize> = products
        .iter()
        .enumerate()
        .map(|(i, p)| (p.id.as_str(), i))
        .collect();

    // Engagement funnel.
    let e = &config.engagement;
    let mut eng_rng = substream(seed, Stream::Engagement);
    let mut engagement: Vec<EngagementRecord> = Vec::new();
    let mut shown: Vec<Vec<usize>> = Vec::with_capacity(queries.len());
    for (q, t) in queries.iter().zip(&truths) {
        let mut exact: Vec<usize> = t.exact.iter().map(|id| pos_of[id.as_str()]).collect();
        exact.shuffle(&mut eng_rng);
        exact.truncate(e.max_exact_shown);
        let subs: Vec<usize> = t.substitute.iter().map(|id| pos_of[id.as_str()]).collect();
        let mut picked: Vec<(usize, RelevanceClass)> =
            exact.into_iter().map(|i| (i, RelevanceClass::Exact)).collect();
        picked.extend(
            subs.choose_multiple(&mut eng_rng, e.substitutes_shown)
                .map(|&i| (i, RelevanceClass::Substitute)),
        );
        let mut irr = BTreeSet::new();
        while irr.len() < e.irrelevant_shown {
            let i = eng_rng.random_range(0..products.len());
            if products[i].product_type != t.product_type {
                irr.insert(i);
            }
            if irr.len() + t.exact.len() + t.substitute.len() >= products.len() {
                break;
            }
        }
        picked.extend(irr.into_iter().map(|i| (i, RelevanceClass::Irrelevant)));
        picked.sort_by_key(|&(i, _)| i);

        let mut shown_q = Vec::with_capacity(picked.len());
        for (i, class) in picked {
            let c = class.index();
            let impressions = pareto_count(&mut eng_rng, e.impression_scale, e.impression_tail);
            let ctr = (e.ctr[c] * attractiveness[i]).min(0.95);
            let clicks = binomial(&mut eng_rng, impressions, ctr);
            let atcs = binomial(&mut eng_rng, clicks, (e.atc_rate[c] * attractiveness[i]).min(0.95));
            let orders = if class == RelevanceClass::Irrelevant {
                0
            } else {
                binomial(&mut eng_rng, atcs, e.order_rate)
            };
            engagement.push(EngagementRecord {
                query_id: q.id.clone(),
                product_id: products[i].id.clone(),
                impressions,
                clicks,
                atcs,
                orders,
            });
            shown_q.push(i);
        }
        shown.push(shown_q);
    }

    // False-positive orders on Irrelevant pairs, copying the funnel of real
    // ordered pairs so they are indistinguishable in the log.
    let fpr = config.false_positive_rate;
    let ordered: Vec<usize> = (0..engagement.len())
        .filter(|&i| engagement[i].orders > 0)
        .collect();
    let n_rel = ordered.len();
    let n_fp = if fpr >= 1.0 {
        for &i in &ordered {
            engagement[i].orders = 0;
        }
        n_rel
    } else {
        (fpr * n_rel as f64 / (1.0 - fpr)).round() as usize
    };
    if n_fp > 0 && n_rel == 0 {
        return Err(Error::Config("no ordered pairs to model false positives on".into()));
    }
    let mut existing: HashMap<(usize, usize), usize> = HashMap::new();
    {
        let q_pos: HashMap<&str, usize> =
            queries.iter().enumerate().map(|(i, q)| (q.id.as_str(), i)).collect();
        for (r, rec) in engagement.iter().enumerate() {
            existing.insert((q_pos[rec.query_id.as_str()], pos_of[rec.product_id.as_str()]), r);
        }
    }
    let mut injected = 0;
    let mut guard = 0usize;
    while injected < n_fp {
        guard += 1;
        if guard > n_fp * 1000 + 1000 {
            return Err(Error::Config("could not place false-positive pairs".into()));
        }
        let qi = eng_rng.random_range(0..queries.len());
        let pi = eng_rng.random_range(0..products.len());
        if products[pi].product_type == truths[qi].product_type {
            continue;
        }
        let template = &engagement[ordered[eng_rng.random_range(0..ordered.len())]];
        let (imp, clk, atc) = (template.impressions, template.clicks, template.atcs);
        let orders = template.orders.max(1);
        match existing.get(&(qi, pi)) {
            Some(&r) if engagement[r].orders > 0 => continue,
            Some(&r) => {
                let rec = &mut engagement[r];
                rec.impressions = imp;
                rec.clicks = clk;
                rec.atcs = atc.max(orders);
                rec.orders = orders;
            }
            None => {
                existing.insert((qi, pi), engagement.len());
                engagement.push(EngagementRecord {
                    query_id: queries[qi].id.clone(),
                    product_id: products[pi].id.clone(),
                    impressions: imp.max(atc).max(orders),
                    clicks: clk.max(atc).max(orders),
                    atcs: atc.max(orders),
                    orders,
                });
                shown[qi].push(pi);
            }
        }
        injected += 1;
    }
    engagement.sort_by(|a, b| (&a.query_id, &a.product_id).cmp(&(&b.query_id, &b.product_id)));
    for rec in &engagement {
        if rec.orders > 0 {
            let qi: usize = rec.query_id[1..].parse().expect("generated id");
            truths[qi].purchased.insert(rec.product_id.clone());
        }
    }

    let ground_truth = GroundTruth::new(truths, products.iter().map(|p| p.id.clone()));

    // Judgments over each query's shown products plus random catalog items.
    let mut j_rng = substream(seed, Stream::Judgments);
    let mut judgments = Vec::new();
    for (qi, q) in queries.iter().enumerate() {
        let mut pool: BTreeSet<usize> = shown[qi].iter().copied().collect();
        for _ in 0..config.judgment_random_per_query {
            pool.insert(j_rng.random_range(0..products.len()));
        }
        for pi in pool {
            if !j_rng.random_bool(config.judgment_coverage) {
                continue;
            }
            let mut klass = ground_truth.relevance(&q.id, &products[pi].id)?;
            if config.judgment_noise > 0.0 && j_rng.random_bool(config.judgment_noise) {
                let others: Vec<RelevanceClass> = RelevanceClass::ALL
                    .into_iter()
                    .filter(|&c| c != klass)
                    .collect();
                klass = *others.choose(&mut j_rng).unwrap();
            }
            judgments.push(JudgmentRecord {
                query_id: q.id.clone(),
                product_id: products[pi].id.clone(),
                klass,
            });
        }
    }

    // PT predictions: the true PT at 1.0 plus low-score distractors.
    let mut pt_rng = substream(seed, Stream::PtPredictions);
    let mut pt_predictions = Vec::new();
    for q in &queries {
        let t = ground_truth.query(&q.id).expect("every query has a truth row");
        let mut entries = vec![PtScore {
            product_type: t.product_type.clone(),
            score: 1.0,
        }];
        let mut others: Vec<usize> = (0..config.num_product_types)
            .filter(|&pt| pt_name(pt) != t.product_type)
            .collect();
        others.shuffle(&mut pt_rng);
        let mut distractors: Vec<PtScore> = others
            .into_iter()
            .take(config.pt_distractors)
            .map(|pt| PtScore {
                product_type: pt_name(pt),
                score: (pt_rng.random_range(0.05..0.25f64) * 1000.0).round() / 1000.0,
            })
            .collect();
        distractors.sort_by(|a, b| b.score.total_cmp(&a.score));
        entries.extend(distractors);
        pt_predictions.push(PtPrediction {
            query_id: q.id.clone(),
            entries,
        });
    }

    let corrupted_queries = corrupt_eval_queries(&queries, config.misspell_rate, seed)?;

    let dataset = Dataset {
        catalog: Catalog::new(queries, products)?,
        engagement,
        judgments,
        pt_predictions,
    };
    dataset.check_references()?;
    Ok(World {
        config: config.clone(),
        dataset,
        ground_truth,
        corrupted_queries,
    })
}

/// A query paired with its (possibly unchanged) corrupted copy.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptedQuery {
    pub original: Query,
    pub corrupted: Query,
    pub edit: Option<TypoEdit>,
}

impl CorruptedQuery {
    pub fn altered(&self) -> bool {
        self.original.text != self.corrupted.text
    }
}

/// Corrupts a `rate` share of queries with exactly one typo each. Queries made
/// only of numbers are left intact.
pub fn corrupt_eval_queries(queries: &[Query], rate: f64, seed: u64) -> Result<Vec<CorruptedQuery>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!("misspell rate {rate} outside [0, 1]")));
    }
    let mut rng = substream(seed, Stream::EvalCorruption);
    let keyboard = KeyboardMap::qwerty();
    let always = TypoConfig {
        injection_probability: 1.0,
        ..TypoConfig::default()
    };
    let mut out = Vec::with_capacity(queries.len());
    for q in queries {
        let mut corrupted = q.clone();
        let mut edit = None;
        let selected = rng.random_bool(rate);
        let corruptible = q.text.split_whitespace().any(|w| !is_numeric(w));
        if selected && corruptible {
            for _ in 0..64 {
                let (text, e) = inject_typos_traced(&q.text, &always, &keyboard, &mut rng);
                if e.is_some() {
                    corrupted.text = text;
                    edit = e;
                    break;
                }
            }
        }
        out.push(CorruptedQuery {
            original: q.clone(),
            corrupted,
            edit,
        });
    }
    Ok(out)
}
