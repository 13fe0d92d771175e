//! Engagement labels, reward-model label revision and relevance labels.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, EngagementRecord, Record};
use crate::error::{Error, Result};
use crate::rrm::{RelevanceProbs, RelevanceScorer};

pub const LABELED_TRAINING_FILE: &str = "labeled_training.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelingWeights {
    pub w_i: f64,
    pub w_c: f64,
    pub w_a: f64,
}

impl Default for LabelingWeights {
    fn default() -> Self {
        Self {
            w_i: 0.001,
            w_c: 0.01,
            w_a: 0.1,
        }
    }
}

impl LabelingWeights {
    pub fn validate(&self) -> Result<()> {
        if 0.0 < self.w_i && self.w_i < self.w_c && self.w_c < self.w_a && self.w_a < 1.0 {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "labeling weights must satisfy 0 < w_i < w_c < w_a < 1, got {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RevisionParams {
    pub t_low: f64,
    pub t_high: f64,
    pub a: f64,
    pub b: f64,
}

impl Default for RevisionParams {
    fn default() -> Self {
        Self {
            t_low: 0.3,
            t_high: 0.7,
            a: 0.1,
            b: 0.01,
        }
    }
}

impl RevisionParams {
    pub fn validate(&self) -> Result<()> {
        let thresholds = 0.0 < self.t_low && self.t_low < self.t_high && self.t_high < 1.0;
        if thresholds && 0.0 < self.b && self.b < self.a {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid revision parameters {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RelevanceParams {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for RelevanceParams {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.1,
        }
    }
}

impl RelevanceParams {
    pub fn validate(&self) -> Result<()> {
        let ok = |l: f64| 0.0 < l && l < 1.0;
        if ok(self.lambda1) && ok(self.lambda2) {
            Ok(())
        } else {
            Err(Error::Config(format!("penalties must lie in (0, 1), got {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EngagementLabel(pub f64);

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelevanceLabel(pub f64);

pub fn engagement_label(rec: &EngagementRecord, w: &LabelingWeights) -> EngagementLabel {
    EngagementLabel(
        w.w_i * rec.impressions as f64
            + w.w_c * rec.clicks as f64
            + w.w_a * rec.atcs as f64
            + rec.orders as f64,
    )
}

/// Downgrades a label whose exact-match probability is low.
pub fn revise_label(s: EngagementLabel, probs: &RelevanceProbs, p: &RevisionParams) -> EngagementLabel {
    let pe = probs.exact();
    if p.t_low <= pe && pe < p.t_high && s.0 > p.a {
        EngagementLabel(p.a)
    } else if pe < p.t_low && s.0 > p.b {
        EngagementLabel(p.b)
    } else {
        s
    }
}

pub fn relevance_label(probs: &RelevanceProbs, p: &RelevanceParams) -> RelevanceLabel {
    let base = probs.exact() + p.lambda2 * probs.substitute();
    if probs.irrelevant() > probs.exact().max(probs.substitute()) {
        RelevanceLabel(p.lambda1 * base)
    } else {
        RelevanceLabel(base)
    }
}

/// How raw engagement counts become a label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelScheme {
    /// Weighted impressions, clicks, add-to-carts and orders.
    #[default]
    Weighted,
    /// Order count alone.
    OrdersOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelingConfig {
    pub scheme: LabelScheme,
    pub weights: LabelingWeights,
    /// `None` disables revision.
    pub revision: Option<RevisionParams>,
    pub relevance: RelevanceParams,
}

impl Default for LabelingConfig {
    fn default() -> Self {
        Self {
            scheme: LabelScheme::Weighted,
            weights: LabelingWeights::default(),
            revision: Some(RevisionParams::default()),
            relevance: RelevanceParams::default(),
        }
    }
}

impl LabelingConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if let Some(r) = &self.revision {
            r.validate()?;
        }
        self.relevance.validate()
    }

    pub fn raw_label(&self, rec: &EngagementRecord) -> EngagementLabel {
        match self.scheme {
            LabelScheme::Weighted => engagement_label(rec, &self.weights),
            LabelScheme::OrdersOnly => EngagementLabel(rec.orders as f64),
        }
    }
}

/// One line of `labeled_training.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledRow {
    pub query_id: String,
    pub product_id: String,
    pub s_raw: f64,
    pub s_revised: f64,
    pub r: f64,
    pub probs: RelevanceProbs,
}

impl Record for LabeledRow {
    fn validate(&self) -> Result<(), String> {
        let finite = [self.s_raw, self.s_revised, self.r].iter().all(|v| v.is_finite());
        if !finite || self.s_raw < 0.0 || self.s_revised < 0.0 || !(0.0..=1.0).contains(&self.r) {
            return Err(format!(
                "({}, {}): label out of range",
                self.query_id, self.product_id
            ));
        }
        Ok(())
    }
}

/// Labels every engagement row; output order follows the input.
pub fn annotate_dataset(
    engagement: &[EngagementRecord],
    catalog: &Catalog,
    scorer: &dyn RelevanceScorer,
    config: &LabelingConfig,
) -> Result<Vec<LabeledRow>> {
    config.validate()?;
    engagement
        .par_iter()
        .map(|rec| {
            let q = catalog
                .query(&rec.query_id)
                .ok_or_else(|| Error::Reference(format!("engagement query `{}`", rec.query_id)))?;
            let p = catalog.product(&rec.product_id).ok_or_else(|| {
                Error::Reference(format!("engagement product `{}`", rec.product_id))
            })?;
            let probs = scorer.probs(q, p)?;
            let s_raw = config.raw_label(rec);
            let s_revised = match &config.revision {
                Some(rp) => revise_label(s_raw, &probs, rp),
                None => s_raw,
            };
            Ok(LabeledRow {
                query_id: rec.query_id.clone(),
                product_id: rec.product_id.clone(),
                s_raw: s_raw.0,
                s_revised: s_revised.0,
                r: relevance_label(&probs, &config.relevance).0,
                probs,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn probs(e: f64, s: f64, i: f64) -> RelevanceProbs {
        RelevanceProbs::new(e, s, i).unwrap()
    }

    /// Probabilities with a given exact mass, the rest split evenly.
    fn with_exact(pe: f64) -> RelevanceProbs {
        probs(pe, (1.0 - pe) / 2.0, 1.0 - pe - (1.0 - pe) / 2.0)
    }

    fn rec(i: u64, c: u64, a: u64, o: u64) -> EngagementRecord {
        EngagementRecord {
            query_id: "q".into(),
            product_id: "p".into(),
            impressions: i,
            clicks: c,
            atcs: a,
            orders: o,
        }
    }

    #[test]
    fn engagement_label_examples() {
        let w = LabelingWeights::default();
        // 1000/1000 + 50/100 + 10/10 + 2, computed in exact integer tenths.
        let expected = (10 + 5 + 10 + 20) as f64 / 10.0;
        assert!((engagement_label(&rec(1000, 50, 10, 2), &w).0 - expected).abs() < 1e-9);
        assert_eq!(engagement_label(&rec(0, 0, 0, 0), &w).0, 0.0);
        assert_eq!(engagement_label(&rec(0, 0, 0, 1), &w).0, 1.0);
    }

    #[test]
    fn revision_examples() {
        let p = RevisionParams::default();
        let s = EngagementLabel(4.5);
        assert_eq!(revise_label(s, &with_exact(0.5), &p).0, 0.1);
        assert_eq!(revise_label(s, &with_exact(0.2), &p).0, 0.01);
        assert_eq!(revise_label(s, &with_exact(0.85), &p).0, 4.5);
        assert_eq!(revise_label(EngagementLabel(0.005), &with_exact(0.2), &p).0, 0.005);
    }

    #[test]
    fn revision_boundaries_are_half_open() {
        let p = RevisionParams::default();
        let s = EngagementLabel(3.0);
        assert_eq!(revise_label(s, &with_exact(0.3), &p).0, 0.1);
        assert_eq!(revise_label(s, &with_exact(0.7), &p).0, 3.0);
        // s equal to a is not strictly above it.
        assert_eq!(revise_label(EngagementLabel(0.1), &with_exact(0.5), &p).0, 0.1);
        assert_eq!(revise_label(EngagementLabel(0.01), &with_exact(0.1), &p).0, 0.01);
    }

    #[test]
    fn relevance_examples() {
        let l = RelevanceParams::default();
        let a = relevance_label(&probs(0.8, 0.15, 0.05), &l).0;
        assert!((a - (0.8 + 0.1 * 0.15)).abs() < 1e-9);
        let b = relevance_label(&probs(0.1, 0.2, 0.7), &l).0;
        assert!((b - 0.1 * (0.1 + 0.1 * 0.2)).abs() < 1e-9);
        assert_eq!(relevance_label(&probs(1.0, 0.0, 0.0), &l).0, 1.0);
        assert_eq!(relevance_label(&probs(0.0, 0.0, 1.0), &l).0, 0.0);
    }

    #[test]
    fn orders_only_scheme() {
        let cfg = LabelingConfig {
            scheme: LabelScheme::OrdersOnly,
            ..Default::default()
        };
        assert_eq!(cfg.raw_label(&rec(1000, 50, 10, 2)).0, 2.0);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(RevisionParams { t_low: 0.8, ..Default::default() }.validate().is_err());
        assert!(RevisionParams { b: 0.2, ..Default::default() }.validate().is_err());
        assert!(RelevanceParams { lambda1: 1.0, ..Default::default() }.validate().is_err());
        assert!(LabelingWeights { w_c: 0.0005, ..Default::default() }.validate().is_err());
    }

    fn simplex() -> impl Strategy<Value = RelevanceProbs> {
        (0.0..1.0f64, 0.0..1.0f64).prop_map(|(u, v)| {
            let (lo, hi) = if u < v { (u, v) } else { (v, u) };
            let (e, s) = (lo, hi - lo);
            probs(e, s, (1.0 - e - s).max(0.0))
        })
    }

    proptest! {
        #[test]
        fn revision_never_increases(s in 0.0..50.0f64, p in simplex()) {
            let out = revise_label(EngagementLabel(s), &p, &RevisionParams::default());
            prop_assert!(out.0 <= s);
        }

        #[test]
        fn revision_branches_are_exclusive(s in 0.0..50.0f64, p in simplex()) {
            let rp = RevisionParams::default();
            let pe = p.exact();
            let to_a = rp.t_low <= pe && pe < rp.t_high && s > rp.a;
            let to_b = pe < rp.t_low && s > rp.b;
            prop_assert!(!(to_a && to_b));
            let out = revise_label(EngagementLabel(s), &p, &rp).0;
            let expected = if to_a { rp.a } else if to_b { rp.b } else { s };
            prop_assert_eq!(out, expected);
        }

        #[test]
        fn relevance_in_unit_interval(p in simplex()) {
            let r = relevance_label(&p, &RelevanceParams::default()).0;
            prop_assert!((0.0..=1.0).contains(&r));
            if p.irrelevant() > p.exact().max(p.substitute()) {
                prop_assert!(r < 0.055);
            }
        }

        #[test]
        fn relevance_increases_with_exact_mass(e in 0.0..0.4f64, d in 0.001..0.1f64, s in 0.0..0.4f64) {
            // Moving mass from irrelevant to exact while the same branch holds.
            let l = RelevanceParams::default();
            let a = probs(e, s, 1.0 - e - s);
            let b = probs(e + d, s, 1.0 - e - s - d);
            let branch = |p: &RelevanceProbs| p.irrelevant() > p.exact().max(p.substitute());
            prop_assume!(branch(&a) == branch(&b));
            prop_assert!(relevance_label(&b, &l).0 > relevance_label(&a, &l).0);
        }
    }
}
