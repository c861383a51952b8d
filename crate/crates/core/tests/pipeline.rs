use ndarray::{s, Array2};
use outpro::anomgen::{gen_friedman, AnomalyMode, CopulaModel, FriedmanSpec};
use outpro::baselines::BaselineKind;
use outpro::data::Dataset;
use outpro::eval::{run_copula_benchmark, run_friedman_benchmark, BenchmarkReport, CopulaBench, FriedmanBench};
use outpro::forest::ForestParams;
use outpro::outpro::{optics_reachability, MetricKind, OodModel, OodParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn small_params(seed: u64) -> OodParams {
    OodParams {
        k: 25,
        forest: ForestParams {
            ntree: 100,
            seed,
            ..ForestParams::default()
        },
        ..OodParams::default()
    }
}

fn column_sd(x: &Array2<f64>, j: usize) -> f64 {
    let c = x.column(j);
    let n = c.len() as f64;
    let mean = c.sum() / n;
    (c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

#[test]
fn far_shift_on_a_signal_feature_is_flagged() {
    let mut flagged = 0;
    for run in 0..20u64 {
        let train = gen_friedman(&FriedmanSpec {
            n: 500,
            d: 10,
            sigma: 1.0,
            seed: 100 + run,
        })
        .unwrap();
        let model = OodModel::fit(&train, &small_params(run)).unwrap();
        let j = model.engine().plan().signal[0];
        let fresh = gen_friedman(&FriedmanSpec {
            n: 2,
            d: 10,
            sigma: 1.0,
            seed: 900 + run,
        })
        .unwrap();
        let mut x = fresh.features().row(0).to_vec();
        x[j] += 10.0 * column_sd(train.features(), j);
        if model.score_point(&x).unwrap().flagged {
            flagged += 1;
        }
    }
    assert!(flagged >= 19, "flagged {flagged}/20");
}

#[test]
fn query_between_blobs_is_less_reachable_than_blob_members() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut rows = Vec::new();
    for center in [[0.0, 0.0], [20.0, 20.0]] {
        for _ in 0..15 {
            rows.push(center[0] + rng.sample::<f64, _>(StandardNormal));
            rows.push(center[1] + rng.sample::<f64, _>(StandardNormal));
        }
    }
    let blobs = Array2::from_shape_vec((30, 2), rows.clone()).unwrap();
    rows.extend([10.0, 10.0]);
    let with_query = Array2::from_shape_vec((31, 2), rows).unwrap();

    let min_pts = 5;
    let query = optics_reachability(&with_query, 30, min_pts).unwrap();
    let internal = (0..30)
        .map(|i| optics_reachability(&blobs, i, min_pts).unwrap())
        .collect::<Vec<_>>();
    // Most blob members sit well inside their blob; one of them bridges the gap.
    let mut sorted = internal.clone();
    sorted.sort_by(f64::total_cmp);
    assert!(query >= sorted[28], "query {query} vs internal {sorted:?}");
    assert!(query > 10.0);
}

fn strip_runtime(report: &BenchmarkReport) -> Vec<String> {
    report
        .records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.runtime_s = 0.0;
            format!("{r:?}")
        })
        .collect()
}

#[test]
fn friedman_benchmark_is_reproducible() {
    let cfg = FriedmanBench {
        replicates: 2,
        n: 300,
        shifts: vec![0.5, 1.0],
        metrics: vec![MetricKind::Product, MetricKind::Euclidean],
        baselines: vec![BaselineKind::Msp, BaselineKind::KnnInput],
        ood: small_params(0),
        ..FriedmanBench::default()
    };
    let a = run_friedman_benchmark(&cfg).unwrap();
    let b = run_friedman_benchmark(&cfg).unwrap();
    assert_eq!(strip_runtime(&a), strip_runtime(&b));
    // Two replicates by two shifts by four methods.
    assert_eq!(a.records.len(), 16);
    assert!(a.failures().is_empty());
    for r in &a.records {
        assert_eq!(r.mode, AnomalyMode::Shift);
        let auc = r.auc_pr.unwrap();
        assert!((0.0..=1.0).contains(&auc));
    }
    let (ranks, excluded) = a.ranks();
    assert!(excluded.is_empty());
    assert_eq!(ranks.len(), 2 * 4);
}

fn correlated_gaussian(n: usize, d: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Array2::zeros((n, d));
    for i in 0..n {
        let shared: f64 = rng.sample(StandardNormal);
        for j in 0..d {
            let e: f64 = rng.sample(StandardNormal);
            x[[i, j]] = 0.6 * shared + 0.8 * e + j as f64;
        }
    }
    let y = x.rows().into_iter().map(|r| r[0] + 2.0 * r[1]).collect();
    Dataset::from_rows(x, y).unwrap()
}

#[test]
fn copula_benchmark_reports_each_mode() {
    let ds = correlated_gaussian(300, 4, 2);
    let cfg = CopulaBench {
        replicates: 2,
        metrics: vec![MetricKind::Product],
        baselines: vec![BaselineKind::MahalanobisInput],
        ood: small_params(0),
        ..CopulaBench::default()
    };
    let report = run_copula_benchmark("toy", &ds, &cfg).unwrap();
    assert_eq!(report.records.len(), 2 * 3 * 2);
    for mode in [AnomalyMode::Warp, AnomalyMode::Joint, AnomalyMode::Support] {
        let n = report.records.iter().filter(|r| r.mode == mode).count();
        assert_eq!(n, 4, "{mode}");
    }
    assert!(report.records.iter().all(|r| r.dataset == "toy"));
    let again = run_copula_benchmark("toy", &ds, &cfg).unwrap();
    assert_eq!(strip_runtime(&report), strip_runtime(&again));
}

#[test]
fn warp_labels_match_recomputed_distances() {
    let ds = correlated_gaussian(400, 3, 7);
    let copula = CopulaModel::fit(&ds, 0.05).unwrap();
    let batch = copula.gen_warp(300, 4.0, 11).unwrap();
    let inv = copula.correlation().clone().try_inverse().unwrap();
    let latents = batch.latents.as_ref().unwrap();
    let mut checked = 0;
    for (r, &label) in batch.labels.iter().enumerate() {
        let z = nalgebra::DVector::from_iterator(3, latents.slice(s![r, ..]).iter().copied());
        let dm = (z.transpose() * &inv * &z)[(0, 0)].sqrt();
        if (dm - copula.tau()).abs() < 1e-9 {
            continue;
        }
        assert_eq!(label, dm > copula.tau(), "row {r}: d_M {dm} vs cutoff {}", copula.tau());
        checked += 1;
    }
    assert!(checked > 290);
    assert!(batch.labels.iter().any(|l| *l) && batch.labels.iter().any(|l| !*l));
}
