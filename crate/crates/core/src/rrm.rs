//! Relevance reward model.
//!
//! Produces class probabilities (exact, substitute, irrelevant) for a
//! (query, product) pair. Three backends share the [`RelevanceScorer`]
//! interface: a linear-softmax model over query/product interaction features
//! trained on judgments, a ground-truth oracle, and a table of precomputed
//! scores.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::catalog::{
    load_jsonl, Catalog, Dataset, JudgmentRecord, Product, PtPrediction, Query, Record,
    RelevanceClass,
};
use crate::error::{Error, Result};
use crate::mining::token_overlap_fraction;
use crate::rng::{substream, Stream};
use crate::synthgen::GroundTruth;
use crate::text::{distinct_tokens, tokens};

pub const RRM_PARAMS_FILE: &str = "rrm_params.json";
pub const RRM_SCORES_FILE: &str = "rrm_scores.jsonl";
pub const FEATURE_SCHEMA_VERSION: u32 = 1;
pub const NUM_FEATURES: usize = 5;
pub const FEATURE_NAMES: [&str; NUM_FEATURES] = [
    "token_overlap",
    "pt_match",
    "attr_match_count",
    "title_len_ratio",
    "bias",
];

const SIMPLEX_TOL: f64 = 1e-9;

/// Probabilities of the exact, substitute and irrelevant classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelevanceProbs {
    #[serde(rename = "pE")]
    p_exact: f64,
    #[serde(rename = "pS")]
    p_substitute: f64,
    #[serde(rename = "pI")]
    p_irrelevant: f64,
}

impl RelevanceProbs {
    pub fn new(p_exact: f64, p_substitute: f64, p_irrelevant: f64) -> Result<Self> {
        let probs = Self {
            p_exact,
            p_substitute,
            p_irrelevant,
        };
        probs.check()?;
        Ok(probs)
    }

    fn check(&self) -> Result<()> {
        let parts = [self.p_exact, self.p_substitute, self.p_irrelevant];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Validation(format!("probabilities {parts:?} outside [0, 1]")));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Validation(format!("probabilities sum to {sum}")));
        }
        Ok(())
    }

    /// Softmax of three logits.
    pub fn from_logits(logits: [f64; 3]) -> Self {
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e = logits.map(|l| (l - m).exp());
        let z: f64 = e.iter().sum();
        Self {
            p_exact: e[0] / z,
            p_substitute: e[1] / z,
            p_irrelevant: e[2] / z,
        }
    }

    pub fn one_hot(class: RelevanceClass) -> Self {
        let mut p = [0.0; 3];
        p[class.index()] = 1.0;
        Self {
            p_exact: p[0],
            p_substitute: p[1],
            p_irrelevant: p[2],
        }
    }

    pub fn exact(&self) -> f64 {
        self.p_exact
    }

    pub fn substitute(&self) -> f64 {
        self.p_substitute
    }

    pub fn irrelevant(&self) -> f64 {
        self.p_irrelevant
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.p_exact, self.p_substitute, self.p_irrelevant]
    }

    /// Most probable class; ties resolve toward Exact.
    pub fn argmax(&self) -> RelevanceClass {
        let a = self.as_array();
        let mut best = 0;
        for i in 1..3 {
            if a[i] > a[best] {
                best = i;
            }
        }
        RelevanceClass::from_index(best)
    }
}

/// Anything that can assign class probabilities to a pair.
pub trait RelevanceScorer: Send + Sync {
    fn probs(&self, query: &Query, product: &Product) -> Result<RelevanceProbs>;
}

/// Interaction features between a query and a product.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossFeatures {
    pub token_overlap: f64,
    pub pt_match: f64,
    pub attr_match_count: f64,
    pub title_len_ratio: f64,
    pub bias: f64,
}

impl CrossFeatures {
    pub fn as_array(&self) -> [f64; NUM_FEATURES] {
        [
            self.token_overlap,
            self.pt_match,
            self.attr_match_count,
            self.title_len_ratio,
            self.bias,
        ]
    }
}

/// Features for a pair. `query_pt` is the query's predicted product type, if
/// known; without it `pt_match` is 0.
pub fn featurize(query: &Query, product: &Product, query_pt: Option<&str>) -> CrossFeatures {
    let q_tokens = distinct_tokens(&query.text);
    let attr_match_count = product
        .attributes
        .iter()
        .filter(|(_, value)| {
            let v = tokens(value);
            !v.is_empty() && v.iter().all(|t| q_tokens.contains(t))
        })
        .count();
    let title_len = tokens(&product.title).len() as f64;
    CrossFeatures {
        token_overlap: token_overlap_fraction(&query.text, &product.title),
        pt_match: f64::from(u8::from(query_pt == Some(product.product_type.as_str()))),
        attr_match_count: attr_match_count as f64,
        title_len_ratio: title_len / q_tokens.len().max(1) as f64,
        bias: 1.0,
    }
}

/// Linear logits, one row per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RrmParams {
    pub weights: [[f64; NUM_FEATURES]; 3],
}

impl RrmParams {
    pub fn zeros() -> Self {
        Self {
            weights: [[0.0; NUM_FEATURES]; 3],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().flatten().all(|w| w.is_finite())
    }

    pub fn logits(&self, feats: &CrossFeatures) -> [f64; 3] {
        let x = feats.as_array();
        self.weights
            .map(|row| row.iter().zip(&x).map(|(w, v)| w * v).sum())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = RrmParamsFile {
            version: FEATURE_SCHEMA_VERSION,
            features: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            weights: self.weights,
        };
        let body = serde_json::to_string_pretty(&file)? + "\n";
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: RrmParamsFile = serde_json::from_str(&body)?;
        if file.version != FEATURE_SCHEMA_VERSION || file.features != FEATURE_NAMES {
            return Err(Error::Validation(format!(
                "{}: feature schema mismatch (version {})",
                path.display(),
                file.version
            )));
        }
        let params = RrmParams { weights: file.weights };
        if !params.is_finite() {
            return Err(Error::Validation("non-finite RRM weights".into()));
        }
        Ok(params)
    }
}

#[derive(Serialize, Deserialize)]
struct RrmParamsFile {
    version: u32,
    features: Vec<String>,
    weights: [[f64; NUM_FEATURES]; 3],
}

pub fn rrm_predict(params: &RrmParams, feats: &CrossFeatures) -> RelevanceProbs {
    RelevanceProbs::from_logits(params.logits(feats))
}

/// One labeled example for reward-model training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JudgedExample {
    pub features: CrossFeatures,
    pub klass: RelevanceClass,
}

/// Mean cross-entropy and its gradient with respect to the weights.
pub fn rrm_loss_and_grad(
    params: &RrmParams,
    examples: &[JudgedExample],
) -> (f64, [[f64; NUM_FEATURES]; 3]) {
    let mut loss = 0.0;
    let mut grad = [[0.0; NUM_FEATURES]; 3];
    if examples.is_empty() {
        return (0.0, grad);
    }
    for ex in examples {
        let x = ex.features.as_array();
        let p = rrm_predict(params, &ex.features).as_array();
        let y = ex.klass.index();
        loss -= p[y].max(f64::MIN_POSITIVE).ln();
        for (c, row) in grad.iter_mut().enumerate() {
            let d = p[c] - f64::from(u8::from(c == y));
            for (g, v) in row.iter_mut().zip(&x) {
                *g += d * v;
            }
        }
    }
    let n = examples.len() as f64;
    for g in grad.iter_mut().flatten() {
        *g /= n;
    }
    (loss / n, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RrmHyper {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Share of judged pairs held out from training.
    pub holdout_fraction: f64,
}

impl Default for RrmHyper {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            epochs: 400,
            seed: 7,
            holdout_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RrmFit {
    pub params: RrmParams,
    /// Training cross-entropy at the start and after every epoch.
    pub loss_curve: Vec<f64>,
}

/// Full-batch gradient descent with a fixed step on standardized features.
/// The returned weights act on raw features (standardization folded in).
pub fn rrm_train(examples: &[JudgedExample], hyper: &RrmHyper) -> Result<RrmFit> {
    let mut counts = [0usize; 3];
    for ex in examples {
        counts[ex.klass.index()] += 1;
    }
    if counts.contains(&0) {
        return Err(Error::DegenerateData(format!(
            "reward model needs every class; got counts {counts:?}"
        )));
    }
    if !(hyper.learning_rate > 0.0 && hyper.learning_rate.is_finite()) {
        return Err(Error::Config("learning rate must be positive".into()));
    }

    // Standardize non-bias features.
    let n = examples.len() as f64;
    let mut mean = [0.0; NUM_FEATURES];
    let mut std = [1.0; NUM_FEATURES];
    for k in 0..NUM_FEATURES - 1 {
        let m = examples.iter().map(|e| e.features.as_array()[k]).sum::<f64>() / n;
        let var = examples
            .iter()
            .map(|e| (e.features.as_array()[k] - m).powi(2))
            .sum::<f64>()
            / n;
        mean[k] = m;
        std[k] = if var > 1e-12 { var.sqrt() } else { 1.0 };
    }
    let scaled: Vec<JudgedExample> = examples
        .iter()
        .map(|e| {
            let x = e.features.as_array();
            let z: Vec<f64> = (0..NUM_FEATURES)
                .map(|k| if k == NUM_FEATURES - 1 { 1.0 } else { (x[k] - mean[k]) / std[k] })
                .collect();
            JudgedExample {
                features: CrossFeatures {
                    token_overlap: z[0],
                    pt_match: z[1],
                    attr_match_count: z[2],
                    title_len_ratio: z[3],
                    bias: z[4],
                },
                klass: e.klass,
            }
        })
        .collect();

    let mut rng = substream(hyper.seed, Stream::RrmInit);
    let mut params = RrmParams::zeros();
    for w in params.weights.iter_mut().flatten() {
        *w = rng.random_range(-0.01..0.01);
    }
    let mut curve = Vec::with_capacity(hyper.epochs + 1);
    let (mut loss, mut grad) = rrm_loss_and_grad(&params, &scaled);
    curve.push(loss);
    for _ in 0..hyper.epochs {
        for (row, grow) in params.weights.iter_mut().zip(&grad) {
            for (w, g) in row.iter_mut().zip(grow) {
                *w -= hyper.learning_rate * g;
            }
        }
        (loss, grad) = rrm_loss_and_grad(&params, &scaled);
        curve.push(loss);
    }

    // Fold standardization back: w·z = Σ w_k (x_k − μ_k)/σ_k + w_b.
    let mut raw = RrmParams::zeros();
    for c in 0..3 {
        let mut bias = params.weights[c][NUM_FEATURES - 1];
        for k in 0..NUM_FEATURES - 1 {
            raw.weights[c][k] = params.weights[c][k] / std[k];
            bias -= params.weights[c][k] * mean[k] / std[k];
        }
        raw.weights[c][NUM_FEATURES - 1] = bias;
    }
    if !raw.is_finite() {
        return Err(Error::DegenerateData("reward model diverged".into()));
    }
    Ok(RrmFit {
        params: raw,
        loss_curve: curve,
    })
}

/// Query id to top predicted PT.
pub fn top_pt_map(predictions: &[PtPrediction]) -> HashMap<String, String> {
    predictions
        .iter()
        .filter_map(|p| p.top().map(|t| (p.query_id.clone(), t.to_string())))
        .collect()
}

/// Featurized judgments, split into (train, held-out) by a seeded shuffle.
pub fn judged_examples(
    dataset: &Dataset,
    holdout_fraction: f64,
    seed: u64,
) -> Result<(Vec<JudgedExample>, Vec<JudgedExample>)> {
    let pts = top_pt_map(&dataset.pt_predictions);
    let mut all = Vec::with_capacity(dataset.judgments.len());
    for j in &dataset.judgments {
        all.push(judged_example(&dataset.catalog, &pts, j)?);
    }
    let mut rng = substream(seed, Stream::RrmSplit);
    all.shuffle(&mut rng);
    let n_hold = ((all.len() as f64) * holdout_fraction.clamp(0.0, 1.0)).round() as usize;
    let held = all.split_off(all.len() - n_hold);
    Ok((all, held))
}

fn judged_example(
    catalog: &Catalog,
    pts: &HashMap<String, String>,
    j: &JudgmentRecord,
) -> Result<JudgedExample> {
    let q = catalog
        .query(&j.query_id)
        .ok_or_else(|| Error::Reference(format!("judgment query `{}`", j.query_id)))?;
    let p = catalog
        .product(&j.product_id)
        .ok_or_else(|| Error::Reference(format!("judgment product `{}`", j.product_id)))?;
    Ok(JudgedExample {
        features: featurize(q, p, pts.get(&q.id).map(String::as_str)),
        klass: j.klass,
    })
}

/// Share of examples whose argmax class matches the label.
pub fn accuracy(params: &RrmParams, examples: &[JudgedExample]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let hits = examples
        .iter()
        .filter(|e| rrm_predict(params, &e.features).argmax() == e.klass)
        .count();
    hits as f64 / examples.len() as f64
}

/// Nearest-rank quantiles of P^E over the examples judged `klass`. On
/// held-out Irrelevant pairs the 0.9 and 0.95 quantiles are the natural
/// revision thresholds for a newly fitted model. `None` without such examples.
pub fn exact_prob_quantiles(
    params: &RrmParams,
    examples: &[JudgedExample],
    klass: RelevanceClass,
    qs: &[f64],
) -> Option<Vec<f64>> {
    let mut pe: Vec<f64> = examples
        .iter()
        .filter(|e| e.klass == klass)
        .map(|e| rrm_predict(params, &e.features).exact())
        .collect();
    if pe.is_empty() {
        return None;
    }
    pe.sort_by(f64::total_cmp);
    let n = pe.len();
    Some(
        qs.iter()
            .map(|q| pe[((q.clamp(0.0, 1.0) * n as f64).ceil() as usize).clamp(1, n) - 1])
            .collect(),
    )
}

/// The trained linear model as a scorer.
#[derive(Debug, Clone)]
pub struct SurrogateScorer {
    params: RrmParams,
    query_pts: HashMap<String, String>,
}

impl SurrogateScorer {
    pub fn new(params: RrmParams, predictions: &[PtPrediction]) -> Self {
        Self {
            params,
            query_pts: top_pt_map(predictions),
        }
    }
}

impl RelevanceScorer for SurrogateScorer {
    fn probs(&self, query: &Query, product: &Product) -> Result<RelevanceProbs> {
        let pt = self.query_pts.get(&query.id).map(String::as_str);
        Ok(rrm_predict(&self.params, &featurize(query, product, pt)))
    }
}

/// Ground-truth scorer. With sharpness `s` the true class gets `s / (s + 2)`
/// and each other class `1 / (s + 2)`; infinite sharpness is one-hot.
#[derive(Debug, Clone)]
pub struct OracleScorer<'a> {
    truth: &'a GroundTruth,
    sharpness: f64,
}

pub fn oracle_scorer(truth: &GroundTruth, sharpness: f64) -> Result<OracleScorer<'_>> {
    if sharpness.is_nan() || sharpness < 1.0 {
        return Err(Error::Config(format!("oracle sharpness {sharpness} must be >= 1")));
    }
    Ok(OracleScorer { truth, sharpness })
}

impl OracleScorer<'_> {
    pub fn class_probs(&self, class: RelevanceClass) -> RelevanceProbs {
        if self.sharpness.is_infinite() {
            return RelevanceProbs::one_hot(class);
        }
        let s = self.sharpness;
        let other = 1.0 / (s + 2.0);
        let mut p = [other; 3];
        p[class.index()] = 1.0 - 2.0 * other;
        RelevanceProbs {
            p_exact: p[0],
            p_substitute: p[1],
            p_irrelevant: p[2],
        }
    }
}

impl RelevanceScorer for OracleScorer<'_> {
    fn probs(&self, query: &Query, product: &Product) -> Result<RelevanceProbs> {
        let class = self.truth.relevance(&query.id, &product.id)?;
        Ok(self.class_probs(class))
    }
}

/// One line of `rrm_scores.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub query_id: String,
    pub product_id: String,
    pub probs: RelevanceProbs,
}

impl Record for ScoreRow {
    fn validate(&self) -> Result<(), String> {
        self.probs.check().map_err(|e| e.to_string())
    }
}

/// Scores looked up from a precomputed batch-inference file.
#[derive(Debug, Clone, Default)]
pub struct PrecomputedScorer {
    table: HashMap<(String, String), RelevanceProbs>,
}

impl PrecomputedScorer {
    pub fn new(rows: Vec<ScoreRow>) -> Self {
        Self {
            table: rows
                .into_iter()
                .map(|r| ((r.query_id, r.product_id), r.probs))
                .collect(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::new(load_jsonl(path)?))
    }
}

impl RelevanceScorer for PrecomputedScorer {
    fn probs(&self, query: &Query, product: &Product) -> Result<RelevanceProbs> {
        self.table
            .get(&(query.id.clone(), product.id.clone()))
            .copied()
            .ok_or_else(|| Error::Reference(format!("no score for ({}, {})", query.id, product.id)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::Attributes;
    use crate::rng::substream;

    fn query(text: &str) -> Query {
        Query { id: "q".into(), text: text.into(), traffic_weight: 1.0 }
    }

    fn product(title: &str, pt: &str, attrs: &[(&str, &str)]) -> Product {
        Product {
            id: "p".into(),
            title: title.into(),
            attributes: attrs.iter().copied().collect::<Attributes>(),
            product_type: pt.into(),
        }
    }

    #[test]
    fn featurize_examples() {
        let f = featurize(
            &query("red shoes"),
            &product("red running shoes for men", "footwear", &[]),
            Some("footwear"),
        );
        assert_eq!(f.token_overlap, 1.0);
        assert_eq!(f.pt_match, 1.0);
        assert_eq!(f.attr_match_count, 0.0);
        assert_eq!(f.title_len_ratio, 2.5);
        assert_eq!(f.bias, 1.0);

        let same = featurize(&query("blue sofa"), &product("blue sofa", "x", &[]), Some("x"));
        assert_eq!(same.token_overlap, 1.0);

        let attrs = featurize(
            &query("red shoes for kids"),
            &product("red acme shoes for kids", "f", &[("color", "red"), ("brand", "acme"), ("audience", "kids")]),
            None,
        );
        assert_eq!(attrs.attr_match_count, 2.0);
        assert_eq!(attrs.pt_match, 0.0);
    }

    #[test]
    fn zero_weights_give_uniform() {
        let f = featurize(&query("a"), &product("a b", "t", &[]), None);
        let p = rrm_predict(&RrmParams::zeros(), &f).as_array();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn logit_shift_invariance() {
        let mut rng = substream(3, Stream::RrmInit);
        let mut params = RrmParams::zeros();
        for w in params.weights.iter_mut().flatten() {
            *w = rng.random_range(-2.0..2.0);
        }
        let f = featurize(&query("red shoes"), &product("red shoes for men", "t", &[]), Some("t"));
        let base = rrm_predict(&params, &f).as_array();
        let mut shifted = params.clone();
        for row in shifted.weights.iter_mut() {
            row[NUM_FEATURES - 1] += 17.25;
        }
        let moved = rrm_predict(&shifted, &f).as_array();
        for (a, b) in base.iter().zip(&moved) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn toy_examples() -> Vec<JudgedExample> {
        let mk = |overlap: f64, pt: f64, klass| JudgedExample {
            features: CrossFeatures {
                token_overlap: overlap,
                pt_match: pt,
                attr_match_count: 0.0,
                title_len_ratio: 2.0,
                bias: 1.0,
            },
            klass,
        };
        vec![
            mk(1.0, 1.0, RelevanceClass::Exact),
            mk(0.3, 1.0, RelevanceClass::Substitute),
            mk(0.0, 0.0, RelevanceClass::Irrelevant),
        ]
    }

    #[test]
    fn toy_training_descends_and_is_deterministic() {
        let hyper = RrmHyper { epochs: 200, ..Default::default() };
        let fit = rrm_train(&toy_examples(), &hyper).unwrap();
        assert!(fit.loss_curve.last().unwrap() < &fit.loss_curve[0]);
        for w in fit.loss_curve.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "loss increased: {w:?}");
        }
        let again = rrm_train(&toy_examples(), &hyper).unwrap();
        assert_eq!(fit.params, again.params);
        assert_eq!(accuracy(&fit.params, &toy_examples()), 1.0);
    }

    #[test]
    fn single_class_data_is_rejected() {
        let ex = vec![toy_examples()[0]; 4];
        assert!(matches!(rrm_train(&ex, &RrmHyper::default()), Err(Error::DegenerateData(_))));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = substream(21, Stream::RrmInit);
        let classes = RelevanceClass::ALL;
        let examples: Vec<JudgedExample> = (0..12)
            .map(|i| JudgedExample {
                features: CrossFeatures {
                    token_overlap: rng.random_range(0.0..1.0),
                    pt_match: f64::from(rng.random_range(0..2u8)),
                    attr_match_count: f64::from(rng.random_range(0..3u8)),
                    title_len_ratio: rng.random_range(0.5..5.0),
                    bias: 1.0,
                },
                klass: classes[i % 3],
            })
            .collect();
        let mut params = RrmParams::zeros();
        for w in params.weights.iter_mut().flatten() {
            *w = rng.random_range(-1.0..1.0);
        }
        let (_, grad) = rrm_loss_and_grad(&params, &examples);
        let h = 1e-6;
        for c in 0..3 {
            for k in 0..NUM_FEATURES {
                let mut plus = params.clone();
                plus.weights[c][k] += h;
                let mut minus = params.clone();
                minus.weights[c][k] -= h;
                let fd = (rrm_loss_and_grad(&plus, &examples).0
                    - rrm_loss_and_grad(&minus, &examples).0)
                    / (2.0 * h);
                let a = grad[c][k];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
                assert!(rel < 1e-4, "w[{c}][{k}]: analytic {a} vs fd {fd}");
            }
        }
    }

    #[test]
    fn oracle_mappings() {
        use crate::synthgen::QueryTruth;
        use std::collections::BTreeSet;
        let truth = GroundTruth::new(
            vec![QueryTruth {
                query_id: "q".into(),
                product_type: "t".into(),
                noun: "n".into(),
                color: None,
                audience: None,
                exact: BTreeSet::from(["pe".to_string()]),
                substitute: BTreeSet::from(["ps".to_string()]),
                purchased: BTreeSet::new(),
            }],
            ["pe", "ps", "pi"].map(String::from),
        );
        let q = query("x");
        let mut pe = product("x", "t", &[]);
        pe.id = "pe".into();
        let mut pi = product("x", "u", &[]);
        pi.id = "pi".into();
        let hard = oracle_scorer(&truth, f64::INFINITY).unwrap();
        assert_eq!(hard.probs(&q, &pe).unwrap().as_array(), [1.0, 0.0, 0.0]);
        assert_eq!(hard.probs(&q, &pi).unwrap().as_array(), [0.0, 0.0, 1.0]);
        let soft = oracle_scorer(&truth, 8.0).unwrap();
        let p = soft.probs(&q, &pe).unwrap();
        assert!((p.exact() - 0.8).abs() < 1e-12);
        p.check().unwrap();
        let mut unknown = product("x", "t", &[]);
        unknown.id = "zz".into();
        assert!(soft.probs(&q, &unknown).is_err());
        assert!(oracle_scorer(&truth, 0.5).is_err());
    }

    #[test]
    fn exact_quantiles_use_nearest_rank() {
        let mut params = RrmParams::zeros();
        params.weights[0][0] = 1.0;
        let ex = |x: f64, klass| JudgedExample {
            features: CrossFeatures {
                token_overlap: x,
                pt_match: 0.0,
                attr_match_count: 0.0,
                title_len_ratio: 0.0,
                bias: 1.0,
            },
            klass,
        };
        let mut examples: Vec<JudgedExample> = (0..10).rev().map(|i| ex(i as f64 / 10.0, RelevanceClass::Irrelevant)).collect();
        examples.push(ex(5.0, RelevanceClass::Exact));
        // P^E = e^x / (e^x + 2); ranks 9 and 10 of 10 are x = 0.8 and 0.9.
        let pe = |x: f64| x.exp() / (x.exp() + 2.0);
        let q = exact_prob_quantiles(&params, &examples, RelevanceClass::Irrelevant, &[0.9, 0.95, 0.0]).unwrap();
        assert!((q[0] - pe(0.8)).abs() < 1e-12);
        assert!((q[1] - pe(0.9)).abs() < 1e-12);
        assert!((q[2] - pe(0.0)).abs() < 1e-12);
        assert!(exact_prob_quantiles(&params, &examples, RelevanceClass::Substitute, &[0.5]).is_none());
    }

    #[test]
    fn params_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(RRM_PARAMS_FILE);
        let mut params = RrmParams::zeros();
        params.weights[1][2] = -0.123456789012345;
        params.save(&path).unwrap();
        assert_eq!(RrmParams::load(&path).unwrap(), params);
    }

    #[test]
    fn simplex_validation() {
        assert!(RelevanceProbs::new(0.5, 0.5, 0.0).is_ok());
        assert!(RelevanceProbs::new(0.5, 0.6, 0.0).is_err());
        assert!(RelevanceProbs::new(-0.1, 0.6, 0.5).is_err());
    }
}
