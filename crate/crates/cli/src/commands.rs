use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use outpro::anomgen::{gen_shift_anomalies, AnomalyBatch, AnomalyMode, CopulaModel};
use outpro::data::{load_csv, load_feature_csv, Dataset, Standardizer};
use outpro::eval::{run_copula_benchmark, run_friedman_benchmark, BenchmarkReport};
use outpro::forest::{permutation_importance, top_features, Forest};
use outpro::outpro::{OodModel, OodResult};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::bundle::ModelBundle;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::{BenchDatasetArgs, BenchFriedmanArgs, FitArgs, GenArgs, OutputFormat, ReportArgs, ScoreArgs};

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> CliResult<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| CliError::Usage(format!("missing --{name} (or the matching [paths] entry)")))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn fit(mut cfg: RunConfig, a: FitArgs) -> CliResult<()> {
    let data = required(a.data, &cfg.paths.data, "data")?;
    let out = required(a.out, &cfg.paths.bundle, "out")?;
    if let Some(r) = a.response {
        cfg.response = r;
    }
    if let Some(k) = a.k {
        cfg.ood.k = k;
    }
    if let Some(m) = a.metric {
        cfg.ood.metric.kind = m;
    }
    if let Some(alpha) = a.alpha {
        cfg.ood.alpha = alpha;
    }
    if let Some(ntree) = a.ntree {
        cfg.ood.forest.ntree = ntree;
    }
    if let Some(seed) = a.seed {
        cfg.ood.forest.seed = seed;
        cfg.ood.varprio.seed = seed;
    }
    cfg.paths.data = Some(data.clone());
    cfg.paths.bundle = Some(out.clone());

    let ds = load_csv(&data, &cfg.response)?;
    log::info!("fitting on {} rows, {} features", ds.n(), ds.d());
    let model = OodModel::fit(&ds, &cfg.ood)?;
    let plan = model.engine().plan();
    println!("signal set ({}):", plan.policy);
    for (&j, w) in plan.signal.iter().zip(&plan.weights) {
        println!("  {:<20} {w:.4}", ds.feature_names()[j]);
    }
    println!(
        "metric {}, K = {}, alpha = {}",
        model.metric().kind(),
        model.k(),
        model.alpha()
    );
    println!("threshold {}", model.threshold());
    ModelBundle::new(&model, ds.feature_names().to_vec(), ds.response_name().to_string(), cfg).save(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct ScoreRecord<'a> {
    row: usize,
    #[serde(flatten)]
    result: &'a OodResult,
    metric: &'a str,
    k: usize,
}

pub fn score(cfg: RunConfig, a: ScoreArgs) -> CliResult<()> {
    let bundle_path = required(a.model, &cfg.paths.bundle, "model")?;
    let data = required(a.data, &cfg.paths.data, "data")?;
    let out = required(a.out, &cfg.paths.output, "out")?;
    let bundle = ModelBundle::load(&bundle_path)?;
    let model = bundle.to_model()?;
    let x = load_feature_csv(&data, &bundle.feature_names)?;

    let overlap = training_overlap(&model, &x)?;
    if overlap > 0 {
        log::warn!(
            "{overlap} of {} rows match training rows exactly; scores treat every row as fresh data, \
             so those rows count themselves as neighbors",
            x.nrows()
        );
    }
    let results = model.score_batch(&x)?;
    let metric = model.metric().kind().name();
    let k = model.k();

    let mut w = create(&out)?;
    match a.format {
        OutputFormat::Csv => {
            let mut c = csv::Writer::from_writer(&mut w);
            c.write_record(["row", "score", "percentile", "flagged", "metric", "k", "neighborhood"])
                .map_err(outpro::Error::from)?;
            for (i, r) in results.iter().enumerate() {
                let nb: Vec<String> = r.neighborhood.iter().map(usize::to_string).collect();
                c.write_record([
                    i.to_string(),
                    r.score.to_string(),
                    r.percentile.to_string(),
                    u8::from(r.flagged).to_string(),
                    metric.to_string(),
                    k.to_string(),
                    nb.join(" "),
                ])
                .map_err(outpro::Error::from)?;
            }
            c.flush().map_err(io_err(&out))?;
        }
        OutputFormat::Jsonl => {
            for (row, result) in results.iter().enumerate() {
                serde_json::to_writer(&mut w, &ScoreRecord { row, result, metric, k })?;
                w.write_all(b"\n").map_err(io_err(&out))?;
            }
        }
    }
    w.flush().map_err(io_err(&out))?;
    let flagged = results.iter().filter(|r| r.flagged).count();
    println!(
        "scored {} rows, {flagged} flagged; wrote {}",
        results.len(),
        out.display()
    );
    Ok(())
}

/// Rows of `x` whose standardized values equal a training row bit for bit.
fn training_overlap(model: &OodModel, x: &ndarray::Array2<f64>) -> CliResult<usize> {
    let engine = model.engine();
    let key = |r: ndarray::ArrayView1<f64>| r.iter().map(|v| v.to_bits()).collect::<Vec<u64>>();
    let train: HashSet<Vec<u64>> = engine.train().rows().into_iter().map(key).collect();
    let z = engine.standardizer().transform(x)?;
    Ok(z.rows().into_iter().filter(|r| train.contains(&key(*r))).count())
}

pub fn gen_anomalies(mut cfg: RunConfig, a: GenArgs) -> CliResult<()> {
    let out = required(a.out, &cfg.paths.output, "out")?;
    if let Some(r) = a.response {
        cfg.response = r;
    }
    let an = &mut cfg.anomaly;
    if let Some(m) = a.mode {
        an.mode = m;
    }
    if let Some(c) = a.count {
        an.count = c;
    }
    if let Some(g) = a.gamma {
        an.gamma = g;
    }
    if let Some(q) = a.q {
        an.q = q;
    }
    if let Some(m) = a.magnitude {
        an.magnitude = m;
    }
    if let Some(t) = a.targets {
        an.targets = t;
    }
    if let Some(s) = a.seed {
        an.seed = s;
    }

    let (ds, source) = match (a.model, a.data.or_else(|| cfg.paths.data.clone())) {
        (Some(model), _) => {
            let bundle = ModelBundle::load(&model)?;
            let p = &bundle.model;
            let raw = p.standardizer.inverse(&p.train)?;
            let ds = Dataset::new(
                raw,
                p.response.clone(),
                bundle.feature_names.clone(),
                &bundle.response_name,
            )?;
            (ds, model)
        }
        (None, Some(data)) => (load_csv(&data, &cfg.response)?, data),
        (None, None) => return Err(CliError::Usage("give --data or --model".into())),
    };

    let an = &cfg.anomaly;
    let mut meta = json!({
        "source": source,
        "mode": an.mode,
        "count": an.count,
        "seed": an.seed,
    });
    let batch: AnomalyBatch = match an.mode {
        AnomalyMode::Shift => {
            let targets = shift_targets(&ds, &cfg)?;
            let rows = pick_rows(ds.n(), an.count, an.seed)?;
            let base = ds.subset(&rows);
            meta["magnitude"] = json!(an.magnitude);
            meta["targets"] = json!(targets.iter().map(|&j| &ds.feature_names()[j]).collect::<Vec<_>>());
            gen_shift_anomalies(&base, &targets, an.magnitude, an.seed)?
        }
        mode => {
            let copula = CopulaModel::fit(&ds, an.q)?;
            meta["q"] = json!(an.q);
            meta["tau"] = json!(copula.tau());
            meta["jitter"] = json!(copula.jitter());
            meta["tail_convention"] = json!("tail mass q for joint and support");
            match mode {
                AnomalyMode::Warp => {
                    meta["gamma"] = json!(an.gamma);
                    copula.gen_warp(an.count, an.gamma, an.seed)?
                }
                AnomalyMode::Joint => copula.gen_joint(an.count, an.q, an.seed)?,
                _ => copula.gen_support(an.count, an.q, an.seed)?,
            }
        }
    };
    meta["n_anomalous"] = json!(batch.n_anomalous());
    meta["rows"] = json!(batch.len());

    batch.write_csv(ds.feature_names(), &out)?;
    let meta_path = PathBuf::from(format!("{}.meta.json", out.display()));
    let mut w = create(&meta_path)?;
    serde_json::to_writer_pretty(&mut w, &meta)?;
    w.flush().map_err(io_err(&meta_path))?;
    println!(
        "wrote {} {} rows ({} labeled anomalous) to {}",
        batch.len(),
        batch.mode,
        batch.n_anomalous(),
        out.display()
    );
    Ok(())
}

fn shift_targets(ds: &Dataset, cfg: &RunConfig) -> CliResult<Vec<usize>> {
    let an = &cfg.anomaly;
    if !an.targets.is_empty() {
        return an
            .targets
            .iter()
            .map(|name| {
                ds.feature_names()
                    .iter()
                    .position(|f| f == name)
                    .ok_or_else(|| CliError::Usage(format!("unknown target feature '{name}'")))
            })
            .collect();
    }
    let z = Standardizer::fit_dataset(ds).transform(ds.features())?;
    let forest = Forest::fit(&z, ds.response(), &cfg.ood.forest)?;
    let scores = permutation_importance(&forest, &z, ds.response(), an.seed)?;
    Ok(top_features(&scores, an.top_fraction))
}

fn pick_rows(n: usize, count: usize, seed: u64) -> CliResult<Vec<usize>> {
    if count > n {
        return Err(CliError::Usage(format!("count {count} exceeds the {n} available rows")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = rand::seq::index::sample(&mut rng, n, count).into_vec();
    rows.sort_unstable();
    Ok(rows)
}

fn write_report(report: &BenchmarkReport, dir: &Path, summary: serde_json::Value) -> CliResult<()> {
    let files = report.write_csvs(dir)?;
    let (_, excluded) = report.ranks();
    let failures: Vec<_> = report
        .failures()
        .into_iter()
        .map(|r| {
            json!({
                "dataset": r.dataset, "method": r.method, "mode": r.mode,
                "param": r.param, "seed": r.seed, "error": r.error,
            })
        })
        .collect();
    let mut summary = summary;
    summary["metric"] = json!("average precision (step-wise precision-recall area)");
    summary["failures"] = json!(failures);
    summary["excluded_from_ranks"] = json!(excluded);
    let path = dir.join("summary.json");
    let mut w = create(&path)?;
    serde_json::to_writer_pretty(&mut w, &summary)?;
    w.flush().map_err(io_err(&path))?;
    for f in &files {
        println!("wrote {}", f.display());
    }
    if !failures.is_empty() {
        eprintln!("{} runs failed; see {}", failures.len(), path.display());
    }
    print_aggregate(report);
    Ok(())
}

fn print_aggregate(report: &BenchmarkReport) {
    println!(
        "{:<12} {:<22} {:<8} {:>7} {:>8} {:>8} {:>6}",
        "dataset", "method", "mode", "param", "auc_pr", "sd", "flag"
    );
    for a in report.aggregate() {
        println!(
            "{:<12} {:<22} {:<8} {:>7} {:>8.4} {:>8.4} {:>6.3}",
            a.dataset, a.method, a.mode, a.param, a.auc_pr_mean, a.auc_pr_sd, a.flag_rate_mean
        );
    }
}

pub fn bench_friedman(mut cfg: RunConfig, a: BenchFriedmanArgs) -> CliResult<()> {
    let dir = required(a.out_dir, &cfg.paths.out_dir, "out-dir")?;
    let b = &mut cfg.bench_friedman;
    if let Some(r) = a.replicates {
        b.replicates = r;
    }
    if let Some(n) = a.n {
        b.n = n;
    }
    if let Some(s) = a.shifts {
        b.shifts = s;
    }
    if let Some(s) = a.seed {
        b.seed = s;
    }
    let report = run_friedman_benchmark(b)?;
    write_report(
        &report,
        &dir,
        json!({ "benchmark": "friedman", "config": cfg.bench_friedman }),
    )
}

pub fn bench_dataset(mut cfg: RunConfig, a: BenchDatasetArgs) -> CliResult<()> {
    let dir = required(a.out_dir, &cfg.paths.out_dir, "out-dir")?;
    let data = required(a.data, &cfg.paths.data, "data")?;
    if let Some(r) = a.response {
        cfg.response = r;
    }
    let b = &mut cfg.bench_dataset;
    if let Some(r) = a.replicates {
        b.replicates = r;
    }
    if let Some(m) = a.modes {
        b.modes = m;
    }
    if let Some(s) = a.seed {
        b.seed = s;
    }
    let name = a.name.unwrap_or_else(|| {
        data.file_stem()
            .map_or_else(|| "dataset".to_string(), |s| s.to_string_lossy().into_owned())
    });
    let ds = load_csv(&data, &cfg.response)?;
    let report = run_copula_benchmark(&name, &ds, &cfg.bench_dataset)?;
    write_report(
        &report,
        &dir,
        json!({ "benchmark": "copula", "dataset": name, "source": data, "config": cfg.bench_dataset }),
    )
}

pub fn report(a: ReportArgs) -> CliResult<()> {
    let report = BenchmarkReport::read_results(&a.results)?;
    if let Some(dir) = a.out_dir {
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        if dir.join("results.csv") != a.results {
            report.write_csvs(&dir)?;
        } else {
            // Keep the original results file untouched.
            let tmp = dir.join(".report-tmp");
            report.write_csvs(&tmp)?;
            for name in ["aggregate.csv", "ranks.csv"] {
                std::fs::rename(tmp.join(name), dir.join(name)).map_err(io_err(&dir))?;
            }
            std::fs::remove_dir_all(&tmp).map_err(io_err(&tmp))?;
        }
        println!("wrote aggregate.csv and ranks.csv to {}", dir.display());
    }
    print_aggregate(&report);
    let (ranks, excluded) = report.ranks();
    println!();
    println!(
        "{:<12} {:<8} {:>7} {:<22} {:>9}",
        "dataset", "mode", "param", "method", "mean_rank"
    );
    for r in ranks {
        println!(
            "{:<12} {:<8} {:>7} {:<22} {:>9.3}",
            r.dataset, r.mode, r.param, r.method, r.mean_rank
        );
    }
    if !excluded.is_empty() {
        println!("excluded from ranks (a method failed): {}", excluded.join(", "));
    }
    Ok(())
}
