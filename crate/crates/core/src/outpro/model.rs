//! Fitted detector: forest, signal plan, calibration.

use std::sync::Arc;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metric::{MetricKind, MetricSpec, SubspaceMetric};
use super::optics::optics_reachability;
use super::profile::{signal_slots, top_k, Counter, Neighborhood, ProximityProfile};
use crate::data::{row_slice, Dataset, Standardizer};
use crate::forest::{Forest, ForestParams, LeafRule};
use crate::varprio::{compute_importance_with, select_signal, ImportancePlan, ReleaseIndex, VarPrioParams};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "trim")]
pub enum Aggregation {
    Mean,
    /// Drop this fraction of distances from each end before averaging.
    TrimmedMean(f64),
}

impl Aggregation {
    fn apply(&self, mut v: Vec<f64>) -> f64 {
        match *self {
            Aggregation::Mean => v.iter().sum::<f64>() / v.len() as f64,
            Aggregation::TrimmedMean(frac) => {
                v.sort_by(f64::total_cmp);
                let cut = ((frac * v.len() as f64).floor() as usize).min((v.len() - 1) / 2);
                let kept = &v[cut..v.len() - cut];
                kept.iter().sum::<f64>() / kept.len() as f64
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Aggregation::TrimmedMean(f) if !(0.0..0.5).contains(&f) => {
                Err(Error::InvalidParameter(format!("trim fraction {f} outside [0, 0.5)")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OodParams {
    /// Neighborhood size K.
    pub k: usize,
    pub metric: MetricSpec,
    pub alpha: f64,
    pub aggregation: Aggregation,
    pub forest: ForestParams,
    pub varprio: VarPrioParams,
}

impl Default for OodParams {
    fn default() -> Self {
        Self {
            k: 50,
            metric: MetricSpec::default(),
            alpha: 0.05,
            aggregation: Aggregation::Mean,
            forest: ForestParams::default(),
            varprio: VarPrioParams::default(),
        }
    }
}

/// The metric-independent part of a fitted detector: everything needed to
/// find the neighborhood of a query.
#[derive(Debug)]
pub struct OutProEngine {
    forest: Forest,
    plan: ImportancePlan,
    standardizer: Standardizer,
    train: Array2<f64>,
    response: Vec<f64>,
    index: ReleaseIndex,
    slot: Vec<Option<usize>>,
}

impl OutProEngine {
    /// Standardizes `train`, fits the forest on the standardized features and
    /// picks the signal set. When no feature scores positive every feature
    /// gets equal weight.
    pub fn fit(train: &Dataset, forest: &ForestParams, varprio: &VarPrioParams) -> Result<Self> {
        let standardizer = Standardizer::fit_dataset(train);
        let x = standardizer.transform(train.features())?;
        let y = train.response().to_vec();
        let fitted = Forest::fit(&x, &y, forest)?;
        let index = ReleaseIndex::new(&x);
        let raw = compute_importance_with(&fitted, &index, &y, varprio.max_rules, varprio.seed)?;
        let plan = match select_signal(&raw, varprio.policy) {
            Ok(plan) => plan,
            Err(Error::NoSignal) => {
                log::warn!("no feature has positive importance; using all features with equal weight");
                ImportancePlan {
                    raw_scores: raw,
                    ..ImportancePlan::uniform(train.d())
                }
            }
            Err(e) => return Err(e),
        };
        Self::from_parts(fitted, plan, standardizer, x, y)
    }

    pub fn from_parts(
        forest: Forest,
        plan: ImportancePlan,
        standardizer: Standardizer,
        train: Array2<f64>,
        response: Vec<f64>,
    ) -> Result<Self> {
        let d = forest.n_features();
        if train.ncols() != d || standardizer.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: train.ncols(),
            });
        }
        if response.len() != train.nrows() {
            return Err(Error::InvalidParameter("response length differs from row count".into()));
        }
        if plan.signal.len() != plan.weights.len() {
            return Err(Error::InvalidParameter("signal and weights differ in length".into()));
        }
        let slot = signal_slots(&plan.signal, d)?;
        let train = train.as_standard_layout().into_owned();
        let index = ReleaseIndex::new(&train);
        Ok(Self {
            forest,
            plan,
            standardizer,
            train,
            response,
            index,
            slot,
        })
    }

    pub fn forest(&self) -> &Forest {
        &self.forest
    }

    pub fn plan(&self) -> &ImportancePlan {
        &self.plan
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    /// Standardized training features.
    pub fn train(&self) -> &Array2<f64> {
        &self.train
    }

    pub fn response(&self) -> &[f64] {
        &self.response
    }

    pub fn n(&self) -> usize {
        self.train.nrows()
    }

    pub fn d(&self) -> usize {
        self.train.ncols()
    }

    fn counter_for(&self, x: &[f64]) -> Result<Counter<'_>> {
        Ok(self.counter_from(&self.forest.leaf_rules_containing(x)?))
    }

    fn counter_from(&self, rules: &[LeafRule]) -> Counter<'_> {
        let mut counter = Counter::new(&self.index, &self.slot, self.plan.signal.len());
        for rule in rules {
            counter.add_rule(rule);
        }
        counter
    }

    /// Profile of every training point against a standardized query.
    pub fn frequency_profiles(&self, x: &[f64]) -> Result<Vec<ProximityProfile>> {
        Ok(self.counter_for(x)?.profiles())
    }

    /// Top-`k` neighbors of a standardized query; `exclude` removes one
    /// training row from the candidates.
    pub fn neighborhood(&self, x: &[f64], k: usize, exclude: Option<usize>) -> Result<Neighborhood> {
        top_k(self.counter_for(x)?.candidates(exclude), k)
    }

    /// Neighborhood of every training row, built from the trees where the
    /// row was out-of-bag and with the row itself excluded. In-bag leaves are
    /// cut around the row, so full-forest neighborhoods sit farther away than
    /// a fresh point's.
    pub fn train_neighborhoods(&self, k: usize) -> Result<Vec<Neighborhood>> {
        (0..self.n())
            .into_par_iter()
            .map(|i| {
                let rules = self.forest.oob_leaf_rules_containing(i, row_slice(&self.train, i))?;
                top_k(self.counter_from(&rules).candidates(Some(i)), k)
            })
            .collect()
    }

    /// Neighborhoods of raw (unstandardized) rows.
    pub fn neighborhoods(&self, rows: &Array2<f64>, k: usize) -> Result<Vec<Neighborhood>> {
        let z = self.standardizer.transform(rows)?;
        (0..z.nrows())
            .into_par_iter()
            .map(|i| self.neighborhood(row_slice(&z, i), k, None))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodResult {
    pub score: f64,
    pub percentile: f64,
    pub flagged: bool,
    pub neighborhood: Vec<usize>,
}

/// A calibrated detector: engine plus metric, K and threshold.
#[derive(Debug, Clone)]
pub struct OodModel {
    engine: Arc<OutProEngine>,
    metric: SubspaceMetric,
    k: usize,
    alpha: f64,
    aggregation: Aggregation,
    train_scores: Vec<f64>,
    sorted_scores: Vec<f64>,
    threshold: f64,
}

/// Everything needed to rebuild a calibrated model without refitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParts {
    pub forest: Forest,
    pub plan: ImportancePlan,
    pub standardizer: Standardizer,
    pub train: Array2<f64>,
    pub response: Vec<f64>,
    pub metric: MetricSpec,
    pub k: usize,
    pub alpha: f64,
    pub aggregation: Aggregation,
    pub train_scores: Vec<f64>,
    pub threshold: f64,
}

impl OodModel {
    pub fn fit(train: &Dataset, params: &OodParams) -> Result<Self> {
        params.metric.validate()?;
        params.aggregation.validate()?;
        check_alpha(params.alpha, train.n())?;
        let engine = Arc::new(OutProEngine::fit(train, &params.forest, &params.varprio)?);
        Self::calibrate(engine, params.metric, params.k, params.alpha, params.aggregation)
    }

    /// Scores each training row with itself excluded and sets the threshold.
    pub fn calibrate(
        engine: Arc<OutProEngine>,
        metric: MetricSpec,
        k: usize,
        alpha: f64,
        aggregation: Aggregation,
    ) -> Result<Self> {
        let neighborhoods = engine.train_neighborhoods(k)?;
        Self::calibrate_with(engine, metric, k, alpha, aggregation, &neighborhoods)
    }

    /// Like [`OodModel::calibrate`] with precomputed self-excluded training
    /// neighborhoods, so several metrics can share one profiling pass.
    pub fn calibrate_with(
        engine: Arc<OutProEngine>,
        metric: MetricSpec,
        k: usize,
        alpha: f64,
        aggregation: Aggregation,
        neighborhoods: &[Neighborhood],
    ) -> Result<Self> {
        aggregation.validate()?;
        let n = engine.n();
        if neighborhoods.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: neighborhoods.len(),
            });
        }
        let metric = SubspaceMetric::new(metric, &engine.plan, &engine.train)?;
        let mut model = Self {
            engine,
            metric,
            k,
            alpha,
            aggregation,
            train_scores: Vec::new(),
            sorted_scores: Vec::new(),
            threshold: f64::NAN,
        };
        let scores: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| model.score_neighborhood(row_slice(&model.engine.train, i), &neighborhoods[i]))
            .collect::<Result<_>>()?;
        model.set_scores(scores)?;
        Ok(model)
    }

    fn set_scores(&mut self, scores: Vec<f64>) -> Result<()> {
        self.threshold = calibration_threshold(&scores, self.alpha)?;
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        self.sorted_scores = sorted;
        self.train_scores = scores;
        Ok(())
    }

    pub fn from_parts(parts: ModelParts) -> Result<Self> {
        let engine = OutProEngine::from_parts(
            parts.forest,
            parts.plan,
            parts.standardizer,
            parts.train,
            parts.response,
        )?;
        if parts.train_scores.len() != engine.n() {
            return Err(Error::DimensionMismatch {
                expected: engine.n(),
                found: parts.train_scores.len(),
            });
        }
        let metric = SubspaceMetric::new(parts.metric, &engine.plan, &engine.train)?;
        let mut model = Self {
            engine: Arc::new(engine),
            metric,
            k: parts.k,
            alpha: parts.alpha,
            aggregation: parts.aggregation,
            train_scores: Vec::new(),
            sorted_scores: Vec::new(),
            threshold: f64::NAN,
        };
        model.set_scores(parts.train_scores)?;
        if model.threshold.to_bits() != parts.threshold.to_bits() {
            return Err(Error::InvalidParameter(
                "stored threshold does not match the stored training scores".into(),
            ));
        }
        Ok(model)
    }

    pub fn to_parts(&self) -> ModelParts {
        let e = &self.engine;
        ModelParts {
            forest: e.forest.clone(),
            plan: e.plan.clone(),
            standardizer: e.standardizer.clone(),
            train: e.train.clone(),
            response: e.response.clone(),
            metric: *self.metric.spec(),
            k: self.k,
            alpha: self.alpha,
            aggregation: self.aggregation,
            train_scores: self.train_scores.clone(),
            threshold: self.threshold,
        }
    }

    pub fn engine(&self) -> &Arc<OutProEngine> {
        &self.engine
    }

    pub fn metric(&self) -> &SubspaceMetric {
        &self.metric
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn train_scores(&self) -> &[f64] {
        &self.train_scores
    }

    /// Score of a standardized point against a given neighborhood.
    pub fn score_neighborhood(&self, x: &[f64], nb: &Neighborhood) -> Result<f64> {
        let train = &self.engine.train;
        if self.metric.kind() == MetricKind::Optics {
            let m = nb.size() + 1;
            let s = self.metric.signal().len();
            let mut pts = Array2::zeros((m, s));
            for (r, &i) in nb.indices.iter().enumerate() {
                pts.row_mut(r)
                    .assign(&ndarray::ArrayView1::from(&self.metric.scaled(row_slice(train, i))));
            }
            pts.row_mut(m - 1)
                .assign(&ndarray::ArrayView1::from(&self.metric.scaled(x)));
            return optics_reachability(&pts, m - 1, self.metric.spec().min_pts);
        }
        let dists = nb
            .indices
            .iter()
            .map(|&i| self.metric.distance(x, row_slice(train, i)))
            .collect::<Result<Vec<f64>>>()?;
        Ok(self.aggregation.apply(dists))
    }

    /// Percentile and flag for a score.
    pub fn result_for(&self, score: f64, neighborhood: Vec<usize>) -> OodResult {
        let below = self.sorted_scores.partition_point(|&s| s <= score);
        OodResult {
            score,
            percentile: 100.0 * below as f64 / self.sorted_scores.len() as f64,
            flagged: score > self.threshold,
            neighborhood,
        }
    }

    pub fn score_point(&self, x_raw: &[f64]) -> Result<OodResult> {
        let z = self.engine.standardizer.transform_row(x_raw)?;
        let nb = self.engine.neighborhood(&z, self.k, None)?;
        let score = self.score_neighborhood(&z, &nb)?;
        Ok(self.result_for(score, nb.indices))
    }

    /// Scores rows in parallel; results keep row order.
    pub fn score_batch(&self, rows: &Array2<f64>) -> Result<Vec<OodResult>> {
        if rows.ncols() != self.engine.d() {
            return Err(Error::DimensionMismatch {
                expected: self.engine.d(),
                found: rows.ncols(),
            });
        }
        let rows = rows.as_standard_layout();
        (0..rows.nrows())
            .into_par_iter()
            .map(|i| self.score_point(rows.row(i).to_slice().expect("standard layout")))
            .collect()
    }
}

fn check_alpha(alpha: f64, n: usize) -> Result<usize> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    let k = order_statistic_rank(1.0 - alpha, n);
    if k > n.saturating_sub(1) {
        return Err(Error::TooSmall(format!(
            "{n} training scores cannot support alpha = {alpha}: the threshold would be order statistic {k} of {n}"
        )));
    }
    Ok(k)
}

/// ⌈q·n⌉ with a small guard against representation error (0.95·1000 is
/// slightly above 950 in binary).
pub(crate) fn order_statistic_rank(q: f64, n: usize) -> usize {
    ((q * n as f64) - 1e-9).ceil().max(1.0) as usize
}

/// The ⌈(1−α)n⌉-th smallest score.
pub fn calibration_threshold(scores: &[f64], alpha: f64) -> Result<f64> {
    let k = check_alpha(alpha, scores.len())?;
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s[k - 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn threshold_is_the_order_statistic() {
        let scores: Vec<f64> = (1..=1000).rev().map(|v| v as f64).collect();
        assert_eq!(calibration_threshold(&scores, 0.05).unwrap(), 950.0);
        assert!(calibration_threshold(&scores, 0.0).is_err());
        assert!(calibration_threshold(&scores, 1e-4).is_err());
        assert!(calibration_threshold(&[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn trimmed_mean_drops_both_tails() {
        let v = vec![100.0, 1.0, 2.0, 3.0, -50.0];
        assert_eq!(Aggregation::TrimmedMean(0.2).apply(v.clone()), 2.0);
        assert_eq!(Aggregation::Mean.apply(v), 11.2);
        assert!(Aggregation::TrimmedMean(0.5).validate().is_err());
    }

    proptest! {
        #[test]
        fn raising_alpha_never_raises_threshold(
            scores in proptest::collection::vec(0.0f64..100.0, 20..200),
            a in 0.05f64..0.5,
            b in 0.05f64..0.5,
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let t_lo = calibration_threshold(&scores, lo).unwrap();
            let t_hi = calibration_threshold(&scores, hi).unwrap();
            prop_assert!(t_hi <= t_lo);
        }
    }
}
