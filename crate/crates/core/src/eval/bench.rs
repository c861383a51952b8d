//! Replicated benchmarks: Friedman data with shift anomalies, and any
//! dataset with copula anomalies.

use std::sync::Arc;
use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::auc_pr;
use super::report::{BenchmarkReport, RunRecord};
use crate::anomgen::{gen_friedman, gen_shift_anomalies, AnomalyMode, CopulaModel, FriedmanSpec};
use crate::baselines::{BaselineKind, BaselineModel, BaselineParams};
use crate::data::{row_slice, split, Dataset, SplitSpec};
use crate::forest::{permutation_importance, top_features};
use crate::outpro::{MetricKind, MetricSpec, Neighborhood, OodModel, OodParams, OutProEngine};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FriedmanBench {
    pub replicates: usize,
    pub n: usize,
    pub d: usize,
    pub sigma: f64,
    pub train_fraction: f64,
    /// Shift magnitudes in units of each feature's standard deviation.
    pub shifts: Vec<f64>,
    /// Share of features (by permutation importance) that get shifted.
    pub top_fraction: f64,
    pub metrics: Vec<MetricKind>,
    pub baselines: Vec<BaselineKind>,
    pub ood: OodParams,
    pub baseline: BaselineParams,
    /// Replicate r uses seed `seed + r`.
    pub seed: u64,
}

impl Default for FriedmanBench {
    fn default() -> Self {
        Self {
            replicates: 20,
            n: 2000,
            d: 10,
            sigma: 1.0,
            train_fraction: 0.8,
            shifts: vec![0.05, 0.25, 0.5, 1.0, 2.0],
            top_fraction: 0.1,
            metrics: MetricKind::ALL.to_vec(),
            baselines: BaselineKind::ALL.to_vec(),
            ood: OodParams::default(),
            baseline: BaselineParams::default(),
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CopulaBench {
    pub replicates: usize,
    pub train_fraction: f64,
    pub modes: Vec<AnomalyMode>,
    pub gamma: f64,
    pub q: f64,
    pub metrics: Vec<MetricKind>,
    pub baselines: Vec<BaselineKind>,
    pub ood: OodParams,
    pub baseline: BaselineParams,
    pub seed: u64,
}

impl Default for CopulaBench {
    fn default() -> Self {
        Self {
            replicates: 10,
            train_fraction: 0.8,
            modes: vec![AnomalyMode::Warp, AnomalyMode::Joint, AnomalyMode::Support],
            gamma: 4.0,
            q: 0.05,
            metrics: MetricKind::ALL.to_vec(),
            baselines: BaselineKind::ALL.to_vec(),
            ood: OodParams::default(),
            baseline: BaselineParams::default(),
            seed: 1,
        }
    }
}

/// Independent sub-seeds for the random steps of one replicate.
fn sub_seed(seed: u64, step: u64) -> u64 {
    let mut z = seed ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const DATA: u64 = 1;
const SPLIT: u64 = 2;
const FOREST: u64 = 3;
const VARPRIO: u64 = 4;
const ANOMALY: u64 = 5;
const BASELINE: u64 = 6;
const IMPORTANCE: u64 = 7;

/// One labeled anomaly set to pool with the ID test points.
pub struct Scenario {
    pub mode: AnomalyMode,
    pub param: f64,
    pub points: Array2<f64>,
    pub labels: Vec<bool>,
}

struct Methods<'a> {
    metrics: &'a [MetricKind],
    baselines: &'a [BaselineKind],
    ood: &'a OodParams,
    baseline: &'a BaselineParams,
}

pub fn run_friedman_benchmark(cfg: &FriedmanBench) -> Result<BenchmarkReport> {
    validate_common(cfg.replicates, cfg.train_fraction)?;
    if cfg.shifts.is_empty() {
        return Err(Error::InvalidParameter("no shift magnitudes configured".into()));
    }
    let methods = Methods {
        metrics: &cfg.metrics,
        baselines: &cfg.baselines,
        ood: &cfg.ood,
        baseline: &cfg.baseline,
    };
    let records: Vec<RunRecord> = (0..cfg.replicates as u64)
        .into_par_iter()
        .map(|r| {
            let seed = cfg.seed.wrapping_add(r);
            let prepared = gen_friedman(&FriedmanSpec {
                n: cfg.n,
                d: cfg.d,
                sigma: cfg.sigma,
                seed: sub_seed(seed, DATA),
            })
            .and_then(|ds| {
                split(
                    &ds,
                    SplitSpec {
                        train_fraction: cfg.train_fraction,
                        seed: sub_seed(seed, SPLIT),
                    },
                )
            });
            let scenarios = |engine: &OutProEngine, test: &Dataset| -> Result<Vec<Scenario>> {
                let imp = permutation_importance(
                    engine.forest(),
                    engine.train(),
                    engine.response(),
                    sub_seed(seed, IMPORTANCE),
                )?;
                let targets = top_features(&imp, cfg.top_fraction);
                cfg.shifts
                    .iter()
                    .enumerate()
                    .map(|(k, &shift)| {
                        let b = gen_shift_anomalies(test, &targets, shift, sub_seed(seed, ANOMALY + 16 * k as u64))?;
                        Ok(Scenario {
                            mode: AnomalyMode::Shift,
                            param: shift,
                            points: b.points,
                            labels: b.labels,
                        })
                    })
                    .collect()
            };
            let placeholders: Vec<(AnomalyMode, f64)> = cfg.shifts.iter().map(|&s| (AnomalyMode::Shift, s)).collect();
            match prepared {
                Ok((train, test)) => {
                    evaluate_replicate("friedman", seed, &train, &test, &methods, scenarios, &placeholders)
                }
                Err(e) => failed_all("friedman", seed, &methods, &placeholders, &e),
            }
        })
        .flatten()
        .collect();
    Ok(BenchmarkReport::new(records))
}

/// Copula anomalies generated from the training split, one block per mode,
/// each matched in size to the test split.
pub fn run_copula_benchmark(name: &str, ds: &Dataset, cfg: &CopulaBench) -> Result<BenchmarkReport> {
    validate_common(cfg.replicates, cfg.train_fraction)?;
    if cfg.modes.is_empty() || cfg.modes.contains(&AnomalyMode::Shift) {
        return Err(Error::InvalidParameter(
            "copula benchmarks take warp, joint and support modes".into(),
        ));
    }
    let methods = Methods {
        metrics: &cfg.metrics,
        baselines: &cfg.baselines,
        ood: &cfg.ood,
        baseline: &cfg.baseline,
    };
    let param_of = |mode: AnomalyMode| if mode == AnomalyMode::Warp { cfg.gamma } else { cfg.q };
    let placeholders: Vec<(AnomalyMode, f64)> = cfg.modes.iter().map(|&m| (m, param_of(m))).collect();
    let records: Vec<RunRecord> = (0..cfg.replicates as u64)
        .into_par_iter()
        .map(|r| {
            let seed = cfg.seed.wrapping_add(r);
            let prepared = split(
                ds,
                SplitSpec {
                    train_fraction: cfg.train_fraction,
                    seed: sub_seed(seed, SPLIT),
                },
            );
            let scenarios = |engine: &OutProEngine, test: &Dataset| -> Result<Vec<Scenario>> {
                let train = Dataset::from_rows(
                    engine.standardizer().inverse(engine.train())?,
                    engine.response().to_vec(),
                )?;
                let copula = CopulaModel::fit(&train, cfg.q)?;
                let m = test.n();
                cfg.modes
                    .iter()
                    .enumerate()
                    .map(|(k, &mode)| {
                        let s = sub_seed(seed, ANOMALY + 16 * k as u64);
                        let b = match mode {
                            AnomalyMode::Warp => copula.gen_warp(m, cfg.gamma, s)?,
                            AnomalyMode::Joint => copula.gen_joint(m, cfg.q, s)?,
                            _ => copula.gen_support(m, cfg.q, s)?,
                        };
                        Ok(Scenario {
                            mode,
                            param: param_of(mode),
                            points: b.points,
                            labels: b.labels,
                        })
                    })
                    .collect()
            };
            match prepared {
                Ok((train, test)) => evaluate_replicate(name, seed, &train, &test, &methods, scenarios, &placeholders),
                Err(e) => failed_all(name, seed, &methods, &placeholders, &e),
            }
        })
        .flatten()
        .collect();
    Ok(BenchmarkReport::new(records))
}

fn validate_common(replicates: usize, train_fraction: f64) -> Result<()> {
    if replicates == 0 {
        return Err(Error::InvalidParameter("at least one replicate is needed".into()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    Ok(())
}

fn method_names(methods: &Methods) -> Vec<String> {
    methods
        .metrics
        .iter()
        .map(|m| format!("outpro-{m}"))
        .chain(methods.baselines.iter().map(|b| b.name().to_string()))
        .collect()
}

fn failed_all(
    dataset: &str,
    seed: u64,
    methods: &Methods,
    blocks: &[(AnomalyMode, f64)],
    err: &Error,
) -> Vec<RunRecord> {
    let mut out = Vec::new();
    for method in method_names(methods) {
        for &(mode, param) in blocks {
            out.push(RunRecord::failed(dataset, &method, mode, param, seed, err.to_string()));
        }
    }
    out
}

/// Scores of the ID test rows and of every scenario for one method.
struct MethodScores {
    test: Vec<f64>,
    test_flags: Vec<bool>,
    scenarios: Vec<Vec<f64>>,
}

fn evaluate_replicate<F>(
    dataset: &str,
    seed: u64,
    train: &Dataset,
    test: &Dataset,
    methods: &Methods,
    make_scenarios: F,
    blocks: &[(AnomalyMode, f64)],
) -> Vec<RunRecord>
where
    F: Fn(&OutProEngine, &Dataset) -> Result<Vec<Scenario>>,
{
    let started = Instant::now();
    let forest = crate::forest::ForestParams {
        seed: sub_seed(seed, FOREST),
        ..methods.ood.forest
    };
    let varprio = crate::varprio::VarPrioParams {
        seed: sub_seed(seed, VARPRIO),
        ..methods.ood.varprio
    };
    let engine = match OutProEngine::fit(train, &forest, &varprio) {
        Ok(e) => Arc::new(e),
        Err(e) => return failed_all(dataset, seed, methods, blocks, &e),
    };
    let scenarios = match make_scenarios(&engine, test) {
        Ok(s) => s,
        Err(e) => return failed_all(dataset, seed, methods, blocks, &e),
    };
    let shared_time = started.elapsed().as_secs_f64();

    let mut out = Vec::new();
    let mut push = |method: &str, result: Result<MethodScores>, secs: f64| match result {
        Ok(scores) => {
            let flag_rate = scores.test_flags.iter().filter(|f| **f).count() as f64 / scores.test_flags.len() as f64;
            for (sc, anomaly_scores) in scenarios.iter().zip(&scores.scenarios) {
                let pooled: Vec<f64> = scores.test.iter().chain(anomaly_scores).copied().collect();
                let labels: Vec<bool> = std::iter::repeat_n(false, scores.test.len())
                    .chain(sc.labels.iter().copied())
                    .collect();
                let mut rec = RunRecord {
                    dataset: dataset.to_string(),
                    method: method.to_string(),
                    mode: sc.mode,
                    param: sc.param,
                    seed,
                    auc_pr: None,
                    flag_rate: Some(flag_rate),
                    runtime_s: secs,
                    error: None,
                };
                match auc_pr(&pooled, &labels) {
                    Ok(a) => rec.auc_pr = Some(a),
                    Err(e) => rec.error = Some(e.to_string()),
                }
                out.push(rec);
            }
        }
        Err(e) => {
            for sc in &scenarios {
                let mut rec = RunRecord::failed(dataset, method, sc.mode, sc.param, seed, e.to_string());
                rec.runtime_s = secs;
                out.push(rec);
            }
        }
    };

    if !methods.metrics.is_empty() {
        let t = Instant::now();
        let k = methods.ood.k;
        let prepared = (|| -> Result<_> {
            let train_nb = engine.train_neighborhoods(k)?;
            let test_z = engine.standardizer().transform(test.features())?;
            let test_nb = engine.neighborhoods(test.features(), k)?;
            let sc = scenarios
                .iter()
                .map(|s| {
                    let z = engine.standardizer().transform(&s.points)?;
                    let nb = engine.neighborhoods(&s.points, k)?;
                    Ok((z, nb))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((train_nb, test_z, test_nb, sc))
        })();
        let profiling = t.elapsed().as_secs_f64();
        for &kind in methods.metrics {
            let name = format!("outpro-{kind}");
            let t = Instant::now();
            let result = match &prepared {
                Ok((train_nb, test_z, test_nb, sc)) => {
                    score_outpro(&engine, kind, methods.ood, train_nb, test_z, test_nb, sc)
                }
                Err(e) => Err(Error::InvalidParameter(e.to_string())),
            };
            push(&name, result, shared_time + profiling + t.elapsed().as_secs_f64());
        }
    }

    for &kind in methods.baselines {
        let t = Instant::now();
        let params = BaselineParams {
            seed: sub_seed(seed, BASELINE),
            ..*methods.baseline
        };
        let result = score_baseline(&engine, kind, &params, test, &scenarios);
        push(kind.name(), result, shared_time + t.elapsed().as_secs_f64());
    }
    out
}

fn score_outpro(
    engine: &Arc<OutProEngine>,
    kind: MetricKind,
    ood: &OodParams,
    train_nb: &[Neighborhood],
    test_z: &Array2<f64>,
    test_nb: &[Neighborhood],
    scenarios: &[(Array2<f64>, Vec<Neighborhood>)],
) -> Result<MethodScores> {
    let spec = MetricSpec { kind, ..ood.metric };
    let model = OodModel::calibrate_with(Arc::clone(engine), spec, ood.k, ood.alpha, ood.aggregation, train_nb)?;
    let score_all = |z: &Array2<f64>, nb: &[Neighborhood]| -> Result<Vec<f64>> {
        (0..z.nrows())
            .into_par_iter()
            .map(|i| model.score_neighborhood(row_slice(z, i), &nb[i]))
            .collect()
    };
    let test = score_all(test_z, test_nb)?;
    let test_flags = test.iter().map(|&s| s > model.threshold()).collect();
    let scenarios = scenarios
        .iter()
        .map(|(z, nb)| score_all(z, nb))
        .collect::<Result<Vec<_>>>()?;
    Ok(MethodScores {
        test,
        test_flags,
        scenarios,
    })
}

fn score_baseline(
    engine: &Arc<OutProEngine>,
    kind: BaselineKind,
    params: &BaselineParams,
    test: &Dataset,
    scenarios: &[Scenario],
) -> Result<MethodScores> {
    let model = BaselineModel::fit(kind, Arc::clone(engine), params)?;
    let results = model.score_batch(test.features())?;
    let test_scores = results.iter().map(|r| r.score).collect();
    let test_flags = results.iter().map(|r| r.flagged).collect();
    let scenarios = scenarios
        .iter()
        .map(|s| Ok(model.score_batch(&s.points)?.into_iter().map(|r| r.score).collect()))
        .collect::<Result<Vec<_>>>()?;
    Ok(MethodScores {
        test: test_scores,
        test_flags,
        scenarios,
    })
}
