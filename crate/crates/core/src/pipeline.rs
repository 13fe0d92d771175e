//! End-to-end runs: reward model, labels, training, evaluation, and the
//! experiment presets that compare configurations.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::TypoConfig;
use crate::catalog::{Dataset, Query, RelevanceClass};
use crate::encoder::{EncoderConfig, TowerParams};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, EvalConfig, EvalKind, EvalReport, EvalSuite};
use crate::labeling::{annotate_dataset, LabelScheme, LabeledRow, LabelingConfig, RevisionParams};
use crate::mining::{MiningConfig, MiningVerdict};
use crate::rrm::{
    accuracy, exact_prob_quantiles, judged_examples, oracle_scorer, rrm_train, OracleScorer, RelevanceScorer, RrmHyper,
    RrmFit, RrmParams, SurrogateScorer,
};
use crate::rng::{indexed_substream, Stream};
use crate::synthgen::{GroundTruth, World};
use crate::training::{ance_loop, EpochStats, TrainConfig, TrainingSet};

/// Which reward model backs the labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ScorerKind {
    /// Linear model trained on judgments.
    #[default]
    Surrogate,
    /// Ground truth with the given sharpness (`null` for one-hot).
    Oracle { sharpness: Option<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub labeling: LabelingConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub rrm: RrmHyper,
    pub scorer: ScorerKind,
    pub eval: EvalConfig,
    /// Share of queries held out from training for evaluation.
    pub eval_fraction: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            labeling: LabelingConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            rrm: RrmHyper::default(),
            scorer: ScorerKind::default(),
            eval: EvalConfig::default(),
            eval_fraction: 0.2,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.labeling.validate()?;
        self.encoder.validate()?;
        self.train.validate()?;
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(Error::Config("eval_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Reseeds everything that drives training (not the world, the split or
    /// the reward model).
    pub fn with_training_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.encoder.seed = seed;
        if let Some(t) = self.train.typos.as_mut() {
            t.seed = seed;
        }
        if let Some(m) = self.train.mining.as_mut() {
            m.seed = seed;
        }
        self
    }

    pub fn apply(mut self, t: &Toggles) -> Self {
        if let Some(o) = t.omega {
            self.train.omega = o;
        }
        if let Some(on) = t.typos {
            self.train.typos = on.then(|| TypoConfig {
                seed: self.train.seed,
                ..TypoConfig::default()
            });
        }
        if let Some(on) = t.label_revision {
            self.labeling.revision = on.then(RevisionParams::default);
        }
        if let Some(on) = t.new_labels {
            self.labeling.scheme = if on { LabelScheme::Weighted } else { LabelScheme::OrdersOnly };
        }
        if let Some(on) = t.mining {
            if on {
                self.train.mining = Some(MiningConfig {
                    seed: self.train.seed,
                    ..MiningConfig::default()
                });
                self.train.ance_iterations = self.train.ance_iterations.max(2);
            } else {
                self.train.mining = None;
                self.train.ance_iterations = 1;
            }
        }
        self
    }
}

/// Module switches; `None` leaves the configured value alone.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Toggles {
    pub omega: Option<f64>,
    pub typos: Option<bool>,
    pub label_revision: Option<bool>,
    pub new_labels: Option<bool>,
    pub mining: Option<bool>,
}

/// Seeded split of query ids into (train, eval).
pub fn split_queries(dataset: &Dataset, eval_fraction: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    let mut ids: Vec<String> = dataset.catalog.queries.iter().map(|q| q.id.clone()).collect();
    ids.sort();
    ids.shuffle(&mut indexed_substream(seed, Stream::EvalSplit, 1));
    let n_eval = (ids.len() as f64 * eval_fraction).round() as usize;
    let mut eval = ids.split_off(ids.len() - n_eval);
    ids.sort();
    eval.sort();
    (ids, eval)
}

enum Scorer<'a> {
    Surrogate(SurrogateScorer),
    Oracle(OracleScorer<'a>),
}

impl Scorer<'_> {
    fn as_dyn(&self) -> &dyn RelevanceScorer {
        match self {
            Scorer::Surrogate(s) => s,
            Scorer::Oracle(o) => o,
        }
    }
}

/// Reward model fit summary.
#[derive(Debug, Clone, PartialEq)]
pub struct RrmSummary {
    pub params: RrmParams,
    pub train_accuracy: f64,
    pub holdout_accuracy: f64,
    /// Held-out Irrelevant P^E at the 90th and 95th percentiles: candidate
    /// `t_low` and `t_high` for this model.
    pub suggested_thresholds: Option<(f64, f64)>,
    pub loss_curve: Vec<f64>,
}

/// A world plus everything shared by runs over it: the split, the reward
/// model and the evaluation sets.
pub struct Workbench<'a> {
    pub dataset: &'a Dataset,
    pub truth: &'a GroundTruth,
    pub train_queries: Vec<String>,
    pub eval_queries: Vec<String>,
    /// Evaluation queries whose corrupted text differs from the original.
    pub corrupted_eval: Vec<Query>,
    pub rrm: Option<RrmSummary>,
    pub suite: EvalSuite,
    scorer: Scorer<'a>,
}

impl<'a> Workbench<'a> {
    pub fn from_world(world: &'a World, config: &PipelineConfig) -> Result<Self> {
        let corrupted: Vec<Query> = world
            .corrupted_queries
            .iter()
            .filter(|c| c.altered())
            .map(|c| c.corrupted.clone())
            .collect();
        Self::new(&world.dataset, &world.ground_truth, &corrupted, config)
    }

    /// `corrupted` holds altered query copies (ids as in the catalog).
    pub fn new(
        dataset: &'a Dataset,
        truth: &'a GroundTruth,
        corrupted: &[Query],
        config: &PipelineConfig,
    ) -> Result<Self> {
        Self::with_rrm(dataset, truth, corrupted, config, None)
    }

    /// Like [`Workbench::new`], but a surrogate scorer uses `fitted` instead
    /// of training its own reward model.
    pub fn with_rrm(
        dataset: &'a Dataset,
        truth: &'a GroundTruth,
        corrupted: &[Query],
        config: &PipelineConfig,
        fitted: Option<RrmParams>,
    ) -> Result<Self> {
        config.validate()?;
        let (train_queries, eval_queries) = split_queries(dataset, config.eval_fraction, config.eval.seed);
        let (scorer, rrm) = match config.scorer {
            ScorerKind::Surrogate => {
                let (train, held) = judged_examples(dataset, config.rrm.holdout_fraction, config.rrm.seed)?;
                let fit = match fitted {
                    Some(params) => RrmFit { params, loss_curve: Vec::new() },
                    None => rrm_train(&train, &config.rrm)?,
                };
                let summary = RrmSummary {
                    train_accuracy: accuracy(&fit.params, &train),
                    holdout_accuracy: accuracy(&fit.params, &held),
                    suggested_thresholds: exact_prob_quantiles(&fit.params, &held, RelevanceClass::Irrelevant, &[0.9, 0.95])
                        .map(|q| (q[0], q[1])),
                    params: fit.params.clone(),
                    loss_curve: fit.loss_curve,
                };
                (
                    Scorer::Surrogate(SurrogateScorer::new(fit.params, &dataset.pt_predictions)),
                    Some(summary),
                )
            }
            ScorerKind::Oracle { sharpness } => (
                Scorer::Oracle(oracle_scorer(truth, sharpness.unwrap_or(f64::INFINITY))?),
                None,
            ),
        };
        let suite = EvalSuite::from_dataset(dataset, Some(&eval_queries), &config.eval)?;
        let eval_set: HashSet<&str> = eval_queries.iter().map(String::as_str).collect();
        let corrupted_eval = corrupted
            .iter()
            .filter(|q| eval_set.contains(q.id.as_str()))
            .cloned()
            .collect();
        Ok(Self {
            dataset,
            truth,
            train_queries,
            eval_queries,
            corrupted_eval,
            rrm,
            suite,
            scorer,
        })
    }

    pub fn scorer(&self) -> &dyn RelevanceScorer {
        self.scorer.as_dyn()
    }

    /// Labels for every engagement row.
    pub fn annotate(&self, labeling: &LabelingConfig) -> Result<Vec<LabeledRow>> {
        annotate_dataset(&self.dataset.engagement, &self.dataset.catalog, self.scorer(), labeling)
    }

    /// Training set for the training queries from precomputed labels.
    pub fn training_set(&self, labels: &[LabeledRow], config: &PipelineConfig) -> Result<TrainingSet> {
        let keep: HashSet<String> = self.train_queries.iter().cloned().collect();
        let mut set = TrainingSet::from_labeled(labels, Some(&keep));
        set.add_random_negatives(
            &self.dataset.catalog,
            self.scorer(),
            &config.labeling.relevance,
            config.train.random_negatives_per_query,
            config.train.seed,
        )?;
        Ok(set)
    }

    pub fn train(&self, set: TrainingSet, config: &PipelineConfig) -> Result<TrainedModel> {
        let params = TowerParams::init(&config.encoder)?;
        let out = ance_loop(
            set,
            self.dataset,
            self.scorer(),
            &config.labeling.relevance,
            params,
            &config.train,
        )?;
        Ok(TrainedModel {
            params: out.params,
            curves: out.curves,
            mined: out.mined,
            final_set_size: out.sets.last().map_or(0, |s| s.rows.len()),
            short_batches: out.short_batches,
            dropped_examples: out.dropped_examples,
        })
    }

    /// Clean evaluation, plus the corrupted set when it is non-empty.
    pub fn evaluate(&self, params: &TowerParams, kinds: &[EvalKind], ks: &[usize]) -> Result<Vec<EvalReport>> {
        evaluate_split(&self.suite, self.dataset, Some(self.truth), &self.corrupted_eval, params, kinds, ks)
    }

    /// Labels, trains and evaluates one configuration.
    pub fn run(&self, config: &PipelineConfig) -> Result<RunResult> {
        config.validate()?;
        let labels = self.annotate(&config.labeling)?;
        self.run_with_labels(&labels, config)
    }

    pub fn run_with_labels(&self, labels: &[LabeledRow], config: &PipelineConfig) -> Result<RunResult> {
        let set = self.training_set(labels, config)?;
        let model = self.train(set, config)?;
        let reports = self.evaluate(&model.params, &EvalKind::ALL, &config.eval.ks)?;
        Ok(RunResult { model, reports })
    }
}

/// Evaluates `suite` on the catalog query texts ("clean") and, when
/// `corrupted` is non-empty, on those texts for the suite queries they cover
/// ("corrupted").
pub fn evaluate_split(
    suite: &EvalSuite,
    dataset: &Dataset,
    truth: Option<&GroundTruth>,
    corrupted: &[Query],
    params: &TowerParams,
    kinds: &[EvalKind],
    ks: &[usize],
) -> Result<Vec<EvalReport>> {
    let products = &dataset.catalog.products;
    let mut reports = vec![evaluate(suite, kinds, ks, params, products, &dataset.catalog.queries, "clean", truth)?];
    if !corrupted.is_empty() {
        let ids: BTreeSet<&str> = corrupted.iter().map(|q| q.id.as_str()).collect();
        let restrict = |v: &[String]| -> Vec<String> { v.iter().filter(|id| ids.contains(id.as_str())).cloned().collect() };
        let sub = EvalSuite {
            small_products: suite.small_products.clone(),
            small_golden: suite.small_golden.clone(),
            small_queries: restrict(&suite.small_queries),
            big_queries: restrict(&suite.big_queries),
            purchased_golden: suite.purchased_golden.clone(),
            purchased_queries: restrict(&suite.purchased_queries),
        };
        reports.push(evaluate(&sub, kinds, ks, params, products, corrupted, "corrupted", truth)?);
    }
    Ok(reports)
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: TowerParams,
    pub curves: Vec<Vec<EpochStats>>,
    pub mined: Vec<Vec<MiningVerdict>>,
    pub final_set_size: usize,
    /// Batches where some query had fewer than `in_batch_k` in-batch negatives.
    pub short_batches: usize,
    /// Query-epochs skipped for lack of a positive candidate.
    pub dropped_examples: usize,
}

impl TrainedModel {
    pub fn curve(&self) -> Vec<EpochStats> {
        self.curves.iter().flatten().cloned().collect()
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub model: TrainedModel,
    pub reports: Vec<EvalReport>,
}

impl RunResult {
    pub fn metric(&self, query_set: &str, kind: EvalKind, k: usize) -> Option<f64> {
        self.reports
            .iter()
            .find(|r| r.query_set == query_set)
            .and_then(|r| r.metric(kind, k))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    OmegaSweep,
    AblationLr,
    AblationTi,
    AblationLsNs,
    AblationMol,
    FullStack,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::OmegaSweep,
        Preset::AblationLr,
        Preset::AblationTi,
        Preset::AblationLsNs,
        Preset::AblationMol,
        Preset::FullStack,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::OmegaSweep => "omega_sweep",
            Preset::AblationLr => "ablation_lr",
            Preset::AblationTi => "ablation_ti",
            Preset::AblationLsNs => "ablation_ls_ns",
            Preset::AblationMol => "ablation_mol",
            Preset::FullStack => "full_stack",
        }
    }

    /// Named arms as toggles over the base configuration.
    pub fn arms(self) -> Vec<(String, Toggles)> {
        let t = Toggles::default();
        let pair = |off: Toggles, on: Toggles| vec![("control".to_string(), off), ("treatment".to_string(), on)];
        match self {
            Preset::OmegaSweep => OMEGA_GRID
                .iter()
                .map(|&o| (format!("omega={o}"), Toggles { omega: Some(o), ..t }))
                .collect(),
            Preset::AblationLr => pair(
                Toggles { label_revision: Some(false), ..t },
                Toggles { label_revision: Some(true), ..t },
            ),
            Preset::AblationTi => pair(Toggles { typos: Some(false), ..t }, Toggles { typos: Some(true), ..t }),
            Preset::AblationLsNs => pair(
                Toggles { new_labels: Some(false), mining: Some(false), ..t },
                Toggles { new_labels: Some(true), mining: Some(true), ..t },
            ),
            Preset::AblationMol => pair(Toggles { omega: Some(1.0), ..t }, Toggles { omega: Some(0.5), ..t }),
            Preset::FullStack => pair(
                Toggles {
                    omega: Some(1.0),
                    typos: Some(false),
                    label_revision: Some(false),
                    new_labels: Some(false),
                    mining: Some(false),
                },
                Toggles {
                    omega: Some(0.5),
                    typos: Some(true),
                    label_revision: Some(true),
                    new_labels: Some(true),
                    mining: Some(true),
                },
            ),
        }
    }
}

pub const OMEGA_GRID: [f64; 7] = [0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0];

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Preset::ALL.iter().map(|p| p.name()).collect();
            Error::Config(format!("unknown preset `{s}`; expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone)]
pub struct ArmResult {
    pub arm: String,
    pub toggles: Toggles,
    pub run: RunResult,
}

/// Runs every arm of a preset. Arms that share labeling settings share one
/// annotation pass.
pub fn run_preset(bench: &Workbench<'_>, base: &PipelineConfig, preset: Preset) -> Result<Vec<ArmResult>> {
    let mut cache: Vec<(LabelingConfig, Vec<LabeledRow>)> = Vec::new();
    let mut out = Vec::new();
    for (arm, toggles) in preset.arms() {
        let config = base.clone().apply(&toggles);
        let labels = match cache.iter().find(|(c, _)| *c == config.labeling) {
            Some((_, l)) => l.clone(),
            None => {
                let l = bench.annotate(&config.labeling)?;
                cache.push((config.labeling, l.clone()));
                l
            }
        };
        let run = bench.run_with_labels(&labels, &config)?;
        out.push(ArmResult { arm, toggles, run });
    }
    Ok(out)
}

/// One line per (arm, query set, kind, cutoff), then control/treatment
/// deltas for two-arm presets.
pub fn comparison_tsv(preset: Preset, arms: &[ArmResult]) -> String {
    let mut out = String::from("preset\tarm\tquery_set\tkind\tk\tvalue\n");
    for a in arms {
        for rep in &a.run.reports {
            for res in &rep.results {
                for s in &res.summaries {
                    let _ = writeln!(out, "{preset}\t{}\t{}\t{}\t{}\t{:.6}", a.arm, rep.query_set, res.kind, s.k, s.mean);
                }
            }
        }
    }
    if let [control, treatment] = arms {
        for rep in &treatment.run.reports {
            for res in &rep.results {
                for s in &res.summaries {
                    if let Some(c) = control.run.metric(&rep.query_set, res.kind, s.k) {
                        let _ = writeln!(
                            out,
                            "{preset}\tdelta\t{}\t{}\t{}\t{:.6}",
                            rep.query_set,
                            res.kind,
                            s.k,
                            s.mean - c
                        );
                    }
                }
            }
        }
    }
    out
}

/// ω against the clean small-index EM recall at `k`, one row per arm.
pub fn omega_table(arms: &[ArmResult], k: usize) -> Vec<(f64, f64)> {
    arms.iter()
        .filter_map(|a| {
            let o = a.toggles.omega?;
            Some((o, a.run.metric("clean", EvalKind::SmallIndexEmRecall, k)?))
        })
        .collect()
}

/// Single-file SVG line chart of an ω sweep.
pub fn omega_svg(points: &[(f64, f64)], k: usize) -> String {
    let (w, h, pad) = (480.0, 320.0, 48.0);
    let lo = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let x = |o: f64| pad + o * (w - 2.0 * pad);
    let y = |v: f64| h - pad - (v - lo) / span * (h - 2.0 * pad);
    let path: Vec<String> = points.iter().map(|&(o, v)| format!("{:.1},{:.1}", x(o), y(v))).collect();
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{pad}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"{pts}\"/>\n",
        b = h - pad,
        r = w - pad,
        pts = path.join(" ")
    );
    for &(o, v) in points {
        let _ = writeln!(
            svg,
            "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"steelblue\"/><text x=\"{:.1}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\">{o}</text>",
            x(o),
            y(v),
            x(o),
            h - pad + 14.0
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"20\" font-size=\"12\" text-anchor=\"middle\">EM Recall@{k} vs omega ({lo:.3} to {hi:.3})</text>\n</svg>",
        w / 2.0
    );
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_names_round_trip() {
        for p in Preset::ALL {
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
        let err = "nope".parse::<Preset>().unwrap_err().to_string();
        assert!(err.contains("omega_sweep") && err.contains("full_stack"));
    }

    #[test]
    fn preset_shapes() {
        assert_eq!(Preset::OmegaSweep.arms().len(), 7);
        assert_eq!(Preset::AblationLr.arms().len(), 2);
    }

    #[test]
    fn toggles_map_to_single_switches() {
        let base = PipelineConfig::default();
        let on = base.clone().apply(&Toggles { label_revision: Some(false), ..Default::default() });
        assert!(on.labeling.revision.is_none());
        assert_eq!(on.train, base.train);
        let ls = base.clone().apply(&Toggles { new_labels: Some(false), ..Default::default() });
        assert_eq!(ls.labeling.scheme, LabelScheme::OrdersOnly);
        let ns = base.clone().apply(&Toggles { mining: Some(true), ..Default::default() });
        assert!(ns.train.mining.is_some() && ns.train.ance_iterations >= 2);
        let ti = base.apply(&Toggles { typos: Some(true), ..Default::default() });
        assert!(ti.train.typos.is_some());
    }
}
