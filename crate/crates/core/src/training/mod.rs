//! Multi-objective listwise training of the dual encoder.
//!
//! Each epoch shuffles the training queries, draws one stratified candidate
//! list per query, appends in-batch negatives, and minimizes
//! `ω · engagement loss + (1 − ω) · relevance loss` with Adam. The ANCE loop
//! alternates training with mining hard negatives and semi-positives from
//! the current model's retrieval results.

mod loss;
mod sampling;

pub use loss::{loss_eng, loss_rel, loss_total, normalize_labels, softmax, softmax_loss, SoftmaxLoss};
pub use sampling::{
    in_batch_negatives, stratified_sample, stratum, BatchProduct, InBatchSelection,
    LabeledCandidate, Origin, TrainingExample, STRATA,
};

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{inject_typos, KeyboardMap, TypoConfig};
use crate::catalog::{Catalog, Dataset, Record};
use crate::encoder::{
    dot, embed_backward, embed_forward, product_text, EncoderGrads, Forward, TowerParams,
};
use crate::error::{Error, Result};
use crate::evalkit::build_index;
use crate::labeling::{relevance_label, LabeledRow, RelevanceParams};
use crate::mining::{merge_mined, mine_for_query, MiningConfig, MiningVerdict};
use crate::rng::{indexed_substream, Stream};
use crate::rrm::RelevanceScorer;
use crate::text::tokens;

pub const TRAIN_CONFIG_FILE: &str = "train_config.json";
pub const LOSS_CURVE_FILE: &str = "loss_curve.tsv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Candidates drawn per query (N); equals the sum of `strata_quota`.
    pub products_per_query: usize,
    /// Draws per engagement stratum: [1, ∞), [0.1, 1), (0, 0.1), 0.
    pub strata_quota: [usize; 4],
    pub in_batch_k: usize,
    /// Queries per batch. Sized for a few hundred training queries; large
    /// logs can afford the usual 72.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub omega: f64,
    pub epochs: usize,
    pub ance_iterations: usize,
    pub seed: u64,
    /// Typo injection on training queries; `None` trains on clean text.
    pub typos: Option<TypoConfig>,
    /// Random catalog products added per query as zero-label negatives.
    pub random_negatives_per_query: usize,
    /// Offline mining between ANCE iterations; `None` disables it.
    pub mining: Option<MiningConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            products_per_query: 10,
            strata_quota: [4, 1, 2, 3],
            in_batch_k: 5,
            batch_size: 16,
            learning_rate: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            omega: 0.5,
            epochs: 5,
            ance_iterations: 1,
            seed: 7,
            typos: None,
            random_negatives_per_query: 10,
            mining: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(Error::Config(format!("omega {} outside [0, 1]", self.omega)));
        }
        if self.products_per_query == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("products_per_query, batch_size and epochs must be positive".into()));
        }
        if self.ance_iterations == 0 {
            return Err(Error::Config("ance_iterations must be positive".into()));
        }
        if self.strata_quota.iter().sum::<usize>() != self.products_per_query {
            return Err(Error::Config(format!(
                "strata quota {:?} does not sum to products_per_query {}",
                self.strata_quota, self.products_per_query
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.adam_eps > 0.0) {
            return Err(Error::Config("invalid Adam constants".into()));
        }
        if let Some(t) = &self.typos {
            t.validate()?;
        }
        if let Some(m) = &self.mining {
            m.validate()?;
        }
        if self.ance_iterations > 1 && self.mining.is_none() {
            return Err(Error::Config("more than one ANCE iteration requires mining".into()));
        }
        Ok(())
    }
}

/// One (query, product) training pair with its labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub query_id: String,
    pub product_id: String,
    pub s_revised: f64,
    pub r: f64,
    pub origin: Origin,
}

impl Record for TrainRow {
    fn validate(&self) -> Result<(), String> {
        if !(self.s_revised >= 0.0 && self.s_revised.is_finite()) || !(0.0..=1.0).contains(&self.r) {
            return Err(format!("({}, {}): label out of range", self.query_id, self.product_id));
        }
        if self.origin == Origin::OfflineNegative && self.s_revised != 0.0 {
            return Err("offline negatives must have a zero engagement label".into());
        }
        Ok(())
    }
}

/// Labeled pairs grouped later into per-query candidate pools.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingSet {
    pub rows: Vec<TrainRow>,
}

impl TrainingSet {
    /// Engaged rows for the queries in `keep` (all when `None`).
    pub fn from_labeled(rows: &[LabeledRow], keep: Option<&HashSet<String>>) -> Self {
        let rows = rows
            .iter()
            .filter(|r| keep.is_none_or(|k| k.contains(&r.query_id)))
            .map(|r| TrainRow {
                query_id: r.query_id.clone(),
                product_id: r.product_id.clone(),
                s_revised: r.s_revised,
                r: r.r,
                origin: Origin::Engaged,
            })
            .collect();
        Self { rows }
    }

    pub fn query_ids(&self) -> BTreeSet<String> {
        self.rows.iter().map(|r| r.query_id.clone()).collect()
    }

    /// Pairs with a positive engagement label.
    pub fn positives(&self) -> BTreeSet<(String, String)> {
        self.rows
            .iter()
            .filter(|r| r.s_revised > 0.0)
            .map(|r| (r.query_id.clone(), r.product_id.clone()))
            .collect()
    }

    pub fn pools(&self) -> BTreeMap<String, Vec<LabeledCandidate>> {
        let mut out: BTreeMap<String, Vec<LabeledCandidate>> = BTreeMap::new();
        for r in &self.rows {
            out.entry(r.query_id.clone()).or_default().push(LabeledCandidate {
                product_id: r.product_id.clone(),
                s_revised: r.s_revised,
                r: r.r,
                origin: r.origin,
            });
        }
        out
    }

    /// Adds `per_query` uniformly drawn catalog products per query as
    /// zero-label negatives, skipping products the query already has.
    pub fn add_random_negatives(
        &mut self,
        catalog: &Catalog,
        scorer: &dyn RelevanceScorer,
        relevance: &RelevanceParams,
        per_query: usize,
        seed: u64,
    ) -> Result<()> {
        if per_query == 0 {
            return Ok(());
        }
        let mut have: BTreeMap<String, HashSet<String>> = BTreeMap::new();
        for r in &self.rows {
            have.entry(r.query_id.clone()).or_default().insert(r.product_id.clone());
        }
        let n_products = catalog.products.len();
        let have: Vec<(String, HashSet<String>)> = have.into_iter().collect();
        let added: Vec<Vec<TrainRow>> = have
            .par_iter()
            .enumerate()
            .map(|(qi, (qid, existing))| {
                let query = catalog
                    .query(qid)
                    .ok_or_else(|| Error::Reference(format!("training query `{qid}`")))?;
                let mut rng = indexed_substream(seed, Stream::RandomNegatives, qi as u64);
                let mut order: Vec<usize> = (0..n_products).collect();
                order.shuffle(&mut rng);
                let mut rows = Vec::with_capacity(per_query);
                for pi in order {
                    if rows.len() == per_query {
                        break;
                    }
                    let p = &catalog.products[pi];
                    if existing.contains(&p.id) {
                        continue;
                    }
                    let r = relevance_label(&scorer.probs(query, p)?, relevance).0;
                    rows.push(TrainRow {
                        query_id: qid.clone(),
                        product_id: p.id.clone(),
                        s_revised: 0.0,
                        r,
                        origin: Origin::OfflineNegative,
                    });
                }
                Ok(rows)
            })
            .collect::<Result<_>>()?;
        self.rows.extend(added.into_iter().flatten());
        Ok(())
    }
}

/// One query of a batch with its candidates' labels and tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub query_id: String,
    pub query_tokens: Vec<String>,
    pub candidates: Vec<(LabeledCandidate, Vec<String>)>,
}

/// Gradients of the batch loss with respect to every trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub encoder: EncoderGrads,
    pub log_sigma: f64,
    pub log_tau: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutput {
    /// Mean of the per-query weighted losses.
    pub loss: f64,
    /// Sum and count of the engagement and relevance terms that were defined.
    pub eng: (f64, usize),
    pub rel: (f64, usize),
    pub grads: ParamGrads,
    /// Queries that got fewer than `k` in-batch negatives.
    pub short: usize,
}

struct ItemOut {
    total: f64,
    eng: Option<f64>,
    rel: Option<f64>,
    d_query: Vec<f64>,
    d_products: Vec<(usize, Vec<f64>)>,
    d_log_sigma: f64,
    d_log_tau: f64,
    short: bool,
}

fn optional_loss(scores: &[f64], labels: &[f64], temperature: f64) -> Result<Option<SoftmaxLoss>> {
    match normalize_labels(labels) {
        Ok(w) => Ok(Some(softmax_loss(scores, &w, temperature)?)),
        Err(Error::DegenerateLabels) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Loss and gradients for one batch. A query whose engagement (or relevance)
/// labels are all zero contributes nothing to that term.
pub fn batch_loss_and_grad(
    params: &TowerParams,
    items: &[BatchItem],
    in_batch_k: usize,
    omega: f64,
) -> Result<BatchOutput> {
    let d = params.dim();
    if items.is_empty() {
        return Err(Error::DegenerateData("empty batch".into()));
    }
    let fwd_q: Vec<Forward> = items
        .par_iter()
        .map(|it| embed_forward(params, &it.query_tokens))
        .collect::<Result<_>>()?;
    let fwd_p: Vec<Vec<Forward>> = items
        .par_iter()
        .map(|it| {
            it.candidates
                .iter()
                .map(|(_, t)| embed_forward(params, t))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut slots: Vec<&Forward> = Vec::new();
    let mut batch: Vec<BatchProduct> = Vec::new();
    let mut first_slot = Vec::with_capacity(items.len());
    for (i, (it, fwds)) in items.iter().zip(&fwd_p).enumerate() {
        first_slot.push(slots.len());
        for ((c, _), f) in it.candidates.iter().zip(fwds) {
            slots.push(f);
            batch.push(BatchProduct {
                owner: i,
                product_id: &c.product_id,
                embedding: &f.output,
            });
        }
    }
    let (sigma, tau) = (params.sigma(), params.tau());

    let outs: Vec<ItemOut> = items
        .par_iter()
        .enumerate()
        .map(|(i, it)| {
            let q = &fwd_q[i].output;
            let sel = in_batch_negatives(i, q, &batch, in_batch_k);
            let own = first_slot[i]..first_slot[i] + it.candidates.len();
            let members: Vec<usize> = own.chain(sel.picks.iter().copied()).collect();
            let mut s_labels: Vec<f64> = it.candidates.iter().map(|(c, _)| c.s_revised).collect();
            let mut r_labels: Vec<f64> = it.candidates.iter().map(|(c, _)| c.r).collect();
            s_labels.resize(members.len(), 0.0);
            r_labels.resize(members.len(), 0.0);
            let scores: Vec<f64> = members
                .iter()
                .map(|&m| dot(q.as_slice(), slots[m].output.as_slice()))
                .collect();
            let eng = optional_loss(&scores, &s_labels, sigma)?;
            let rel = optional_loss(&scores, &r_labels, tau)?;
            let mut d_scores = vec![0.0; members.len()];
            let mut total = 0.0;
            let (mut d_log_sigma, mut d_log_tau) = (0.0, 0.0);
            if let Some(l) = &eng {
                total += omega * l.value;
                for (a, g) in d_scores.iter_mut().zip(&l.d_scores) {
                    *a += omega * g;
                }
                d_log_sigma += omega * l.d_log_temperature;
            }
            if let Some(l) = &rel {
                total += (1.0 - omega) * l.value;
                for (a, g) in d_scores.iter_mut().zip(&l.d_scores) {
                    *a += (1.0 - omega) * g;
                }
                d_log_tau += (1.0 - omega) * l.d_log_temperature;
            }
            let mut d_query = vec![0.0; d];
            let mut d_products = Vec::with_capacity(members.len());
            for (&m, &g) in members.iter().zip(&d_scores) {
                let p = slots[m].output.as_slice();
                for (a, v) in d_query.iter_mut().zip(p) {
                    *a += g * v;
                }
                d_products.push((m, q.as_slice().iter().map(|v| g * v).collect()));
            }
            Ok(ItemOut {
                total,
                eng: eng.map(|l| l.value),
                rel: rel.map(|l| l.value),
                d_query,
                d_products,
                d_log_sigma,
                d_log_tau,
                short: sel.short,
            })
        })
        .collect::<Result<_>>()?;

    let n = items.len() as f64;
    let mut slot_up = vec![vec![0.0; d]; slots.len()];
    let mut loss = 0.0;
    let (mut eng, mut rel) = ((0.0, 0), (0.0, 0));
    let (mut g_sigma, mut g_tau) = (0.0, 0.0);
    let mut short = 0;
    for o in &outs {
        loss += o.total;
        if let Some(v) = o.eng {
            eng.0 += v;
            eng.1 += 1;
        }
        if let Some(v) = o.rel {
            rel.0 += v;
            rel.1 += 1;
        }
        g_sigma += o.d_log_sigma;
        g_tau += o.d_log_tau;
        short += usize::from(o.short);
        for (m, g) in &o.d_products {
            for (a, v) in slot_up[*m].iter_mut().zip(g) {
                *a += v;
            }
        }
    }
    let scale = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| x / n).collect() };
    let query_grads: Vec<EncoderGrads> = fwd_q
        .par_iter()
        .zip(&outs)
        .map(|(f, o)| embed_backward(params, f, &scale(&o.d_query)))
        .collect();
    let product_grads: Vec<EncoderGrads> = slots
        .par_iter()
        .zip(&slot_up)
        .map(|(f, g)| embed_backward(params, f, &scale(g)))
        .collect();
    let mut encoder = EncoderGrads::zeros(d);
    for g in query_grads.iter().chain(&product_grads) {
        encoder.add(g);
    }
    let (mut log_sigma, mut log_tau) = (g_sigma / n, g_tau / n);
    if params.config.tie_temperatures {
        log_sigma += log_tau;
        log_tau = 0.0;
    }
    Ok(BatchOutput {
        loss: loss / n,
        eng,
        rel,
        grads: ParamGrads {
            encoder,
            log_sigma,
            log_tau,
        },
        short,
    })
}

/// Adam over the flattened parameters: table, projection, log σ, log τ.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(params: &TowerParams, config: &TrainConfig) -> Self {
        let n = params.table.len() + params.projection.len() + 2;
        Self {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut TowerParams, grads: &ParamGrads) {
        let d = params.dim();
        let n_table = params.table.len();
        let n_proj = params.projection.len();
        let mut g = vec![0.0; self.m.len()];
        for (&row, gr) in &grads.encoder.table_rows {
            g[row * d..(row + 1) * d].copy_from_slice(gr);
        }
        g[n_table..n_table + n_proj].copy_from_slice(&grads.encoder.projection);
        g[n_table + n_proj] = grads.log_sigma;
        g[n_table + n_proj + 1] = grads.log_tau;

        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let update = |i: usize, m: &mut f64, v: &mut f64| -> f64 {
            *m = b1 * *m + (1.0 - b1) * g[i];
            *v = b2 * *v + (1.0 - b2) * g[i] * g[i];
            lr * (*m / bc1) / ((*v / bc2).sqrt() + eps)
        };
        for (i, (w, (m, v))) in params
            .table
            .iter_mut()
            .chain(params.projection.iter_mut())
            .chain([&mut params.log_sigma, &mut params.log_tau])
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .enumerate()
        {
            *w -= update(i, m, v);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_loss_eng: f64,
    pub mean_loss_rel: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: TowerParams,
    pub curve: Vec<EpochStats>,
    /// Queries that received fewer in-batch negatives than requested.
    pub short_batches: usize,
    /// Sampled examples dropped for lacking a positive candidate.
    pub dropped_examples: usize,
}

struct TrainContext<'a> {
    pools: Vec<(String, Vec<LabeledCandidate>)>,
    query_text: Vec<&'a str>,
    product_tokens: HashMap<&'a str, Vec<String>>,
    keyboard: KeyboardMap,
}

impl<'a> TrainContext<'a> {
    fn new(set: &TrainingSet, catalog: &'a Catalog) -> Result<Self> {
        let pools: Vec<(String, Vec<LabeledCandidate>)> = set.pools().into_iter().collect();
        if pools.is_empty() {
            return Err(Error::DegenerateData("empty training set".into()));
        }
        let mut query_text = Vec::with_capacity(pools.len());
        let mut product_tokens = HashMap::new();
        for (qid, pool) in &pools {
            let q = catalog
                .query(qid)
                .ok_or_else(|| Error::Reference(format!("training query `{qid}`")))?;
            query_text.push(q.text.as_str());
            for c in pool {
                if !product_tokens.contains_key(c.product_id.as_str()) {
                    let p = catalog
                        .product(&c.product_id)
                        .ok_or_else(|| Error::Reference(format!("training product `{}`", c.product_id)))?;
                    product_tokens.insert(p.id.as_str(), product_text(p));
                }
            }
        }
        Ok(Self {
            pools,
            query_text,
            product_tokens,
            keyboard: KeyboardMap::qwerty(),
        })
    }

    /// Examples of one epoch in batch order.
    fn epoch_items(&self, config: &TrainConfig, epoch: usize) -> (Vec<BatchItem>, usize) {
        let mut order: Vec<usize> = (0..self.pools.len()).collect();
        order.shuffle(&mut indexed_substream(config.seed, Stream::BatchOrder, epoch as u64));
        let key = |qi: usize| ((epoch as u64) << 32) | qi as u64;
        let items: Vec<Option<BatchItem>> = order
            .par_iter()
            .map(|&qi| {
                let (qid, pool) = &self.pools[qi];
                let mut rng = indexed_substream(config.seed, Stream::Sampling, key(qi));
                let picked = stratified_sample(pool, config.strata_quota, &mut rng)?;
                let text = match &config.typos {
                    Some(t) => {
                        let mut trng = indexed_substream(t.seed ^ config.seed, Stream::Typos, key(qi));
                        inject_typos(self.query_text[qi], t, &self.keyboard, &mut trng)
                    }
                    None => self.query_text[qi].to_string(),
                };
                let mut query_tokens = tokens(&text);
                if query_tokens.is_empty() {
                    query_tokens = tokens(self.query_text[qi]);
                }
                let candidates = picked
                    .into_iter()
                    .map(|c| {
                        let t = self.product_tokens[c.product_id.as_str()].clone();
                        (c, t)
                    })
                    .collect();
                Some(BatchItem {
                    query_id: qid.clone(),
                    query_tokens,
                    candidates,
                })
            })
            .collect();
        let dropped = items.iter().filter(|i| i.is_none()).count();
        (items.into_iter().flatten().collect(), dropped)
    }
}

fn run_epochs(
    set: &TrainingSet,
    catalog: &Catalog,
    params: &mut TowerParams,
    config: &TrainConfig,
    adam: &mut Adam,
    first_epoch: usize,
) -> Result<(Vec<EpochStats>, usize, usize)> {
    let ctx = TrainContext::new(set, catalog)?;
    let mut curve = Vec::with_capacity(config.epochs);
    let (mut short, mut dropped) = (0, 0);
    for e in 0..config.epochs {
        let epoch = first_epoch + e;
        let (items, dropped_now) = ctx.epoch_items(config, epoch);
        dropped += dropped_now;
        if items.is_empty() {
            return Err(Error::DegenerateData("no query has a positive candidate".into()));
        }
        let (mut sum, mut eng, mut rel) = (0.0, (0.0, 0usize), (0.0, 0usize));
        for (b, chunk) in items.chunks(config.batch_size).enumerate() {
            let out = batch_loss_and_grad(params, chunk, config.in_batch_k, config.omega)?;
            if !out.loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    detail: format!("loss = {}", out.loss),
                });
            }
            sum += out.loss * chunk.len() as f64;
            eng.0 += out.eng.0;
            eng.1 += out.eng.1;
            rel.0 += out.rel.0;
            rel.1 += out.rel.1;
            short += out.short;
            adam.step(params, &out.grads);
            if !params.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    detail: "parameters became non-finite".into(),
                });
            }
        }
        let mean = |(s, n): (f64, usize)| if n == 0 { 0.0 } else { s / n as f64 };
        curve.push(EpochStats {
            epoch,
            mean_loss: sum / items.len() as f64,
            mean_loss_eng: mean(eng),
            mean_loss_rel: mean(rel),
        });
    }
    Ok((curve, short, dropped))
}

/// Trains `params` on `set` for `config.epochs` epochs.
pub fn train(
    set: &TrainingSet,
    catalog: &Catalog,
    params: TowerParams,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut params = params;
    let mut adam = Adam::new(&params, config);
    let (curve, short_batches, dropped_examples) =
        run_epochs(set, catalog, &mut params, config, &mut adam, 0)?;
    Ok(TrainOutcome {
        params,
        curve,
        short_batches,
        dropped_examples,
    })
}

#[derive(Debug, Clone)]
pub struct AnceOutcome {
    pub params: TowerParams,
    /// Loss curve of each iteration.
    pub curves: Vec<Vec<EpochStats>>,
    /// Verdicts mined after each iteration but the last.
    pub mined: Vec<Vec<MiningVerdict>>,
    /// Training set used by each iteration.
    pub sets: Vec<TrainingSet>,
    pub short_batches: usize,
    pub dropped_examples: usize,
}

/// Alternates training with offline mining for `config.ance_iterations`
/// rounds; optimizer state carries over between rounds.
pub fn ance_loop(
    initial: TrainingSet,
    dataset: &Dataset,
    scorer: &dyn RelevanceScorer,
    relevance: &RelevanceParams,
    params: TowerParams,
    config: &TrainConfig,
) -> Result<AnceOutcome> {
    config.validate()?;
    let catalog = &dataset.catalog;
    let mut params = params;
    let mut adam = Adam::new(&params, config);
    let mut set = initial;
    let mut out = AnceOutcome {
        params: params.clone(),
        curves: Vec::new(),
        mined: Vec::new(),
        sets: Vec::new(),
        short_batches: 0,
        dropped_examples: 0,
    };
    for it in 0..config.ance_iterations {
        let (curve, short, dropped) =
            run_epochs(&set, catalog, &mut params, config, &mut adam, it * config.epochs)?;
        out.curves.push(curve);
        out.short_batches += short;
        out.dropped_examples += dropped;
        out.sets.push(set.clone());
        if it + 1 == config.ance_iterations {
            break;
        }
        let mining = config.mining.as_ref().expect("validated");
        let queries: Vec<String> = set.query_ids().into_iter().collect();
        let verdicts = mine_pass(&queries, dataset, &params, scorer, relevance, mining, it)?;
        set = merge_mined(&set, &verdicts);
        out.mined.push(verdicts);
    }
    out.params = params;
    Ok(out)
}

/// Mines every query in `queries` against the full catalog under `params`.
/// `iteration` keys the sampling streams so passes differ.
pub fn mine_pass(
    queries: &[String],
    dataset: &Dataset,
    params: &TowerParams,
    scorer: &dyn RelevanceScorer,
    relevance: &RelevanceParams,
    mining: &MiningConfig,
    iteration: usize,
) -> Result<Vec<MiningVerdict>> {
    mining.validate()?;
    let catalog = &dataset.catalog;
    let pt_map = dataset.pt_prediction_map();
    let index = build_index(&catalog.products, params)?;
    let verdicts: Vec<Vec<MiningVerdict>> = queries
        .par_iter()
        .enumerate()
        .map(|(qi, qid)| {
            let q = catalog
                .query(qid)
                .ok_or_else(|| Error::Reference(format!("training query `{qid}`")))?;
            let pts = pt_map
                .get(qid)
                .ok_or_else(|| Error::Reference(format!("no PT prediction for query `{qid}`")))?;
            let mut rng = indexed_substream(mining.seed, Stream::Mining, ((iteration as u64) << 32) | qi as u64);
            let mined = mine_for_query(q, catalog, &index, params, scorer, pts, mining, relevance, &mut rng)?;
            Ok(mined.into_verdicts())
        })
        .collect::<Result<_>>()?;
    Ok(verdicts.into_iter().flatten().collect())
}

pub fn loss_curve_tsv(curve: &[EpochStats]) -> String {
    let mut out = String::from("epoch\tmean_loss\tmean_loss_eng\tmean_loss_rel\n");
    for e in curve {
        let _ = writeln!(
            out,
            "{}\t{:.9}\t{:.9}\t{:.9}",
            e.epoch, e.mean_loss, e.mean_loss_eng, e.mean_loss_rel
        );
    }
    out
}

pub fn write_loss_curve(curve: &[EpochStats], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, loss_curve_tsv(curve)).map_err(|e| Error::io(path, e))
}
