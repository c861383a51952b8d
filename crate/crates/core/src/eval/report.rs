//! Benchmark records and their CSV tables.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::average_ranks;
use crate::anomgen::AnomalyMode;
use crate::{Error, Result};

/// One (replicate, method, anomaly block) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub dataset: String,
    pub method: String,
    pub mode: AnomalyMode,
    /// Shift magnitude, warp exponent or tail mass, depending on the mode.
    pub param: f64,
    pub seed: u64,
    pub auc_pr: Option<f64>,
    /// Share of ID test points flagged at the calibrated threshold.
    pub flag_rate: Option<f64>,
    pub runtime_s: f64,
    pub error: Option<String>,
}

impl RunRecord {
    pub fn failed(dataset: &str, method: &str, mode: AnomalyMode, param: f64, seed: u64, error: String) -> Self {
        Self {
            dataset: dataset.to_string(),
            method: method.to_string(),
            mode,
            param,
            seed,
            auc_pr: None,
            flag_rate: None,
            runtime_s: 0.0,
            error: Some(error),
        }
    }

    pub fn ok(&self) -> bool {
        self.auc_pr.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub dataset: String,
    pub method: String,
    pub mode: AnomalyMode,
    pub param: f64,
    pub runs: usize,
    pub failed: usize,
    pub auc_pr_mean: f64,
    pub auc_pr_sd: f64,
    pub flag_rate_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub dataset: String,
    pub mode: AnomalyMode,
    pub param: f64,
    pub method: String,
    pub mean_rank: f64,
    /// Runs that entered the ranking (all methods succeeded).
    pub runs: usize,
}

/// Records of a benchmark in a fixed order: dataset, seed, method, mode, param.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub records: Vec<RunRecord>,
}

type BlockKey = (String, AnomalyMode, u64);

impl BenchmarkReport {
    pub fn new(mut records: Vec<RunRecord>) -> Self {
        records.sort_by(|a, b| {
            (&a.dataset, a.seed, &a.method, a.mode)
                .cmp(&(&b.dataset, b.seed, &b.method, b.mode))
                .then(a.param.total_cmp(&b.param))
        });
        Self { records }
    }

    pub fn failures(&self) -> Vec<&RunRecord> {
        self.records.iter().filter(|r| r.error.is_some()).collect()
    }

    /// Mean and sample sd of AUC-PR per (dataset, method, mode, param).
    pub fn aggregate(&self) -> Vec<AggregateRow> {
        let mut groups: BTreeMap<(String, String, AnomalyMode, u64), Vec<&RunRecord>> = BTreeMap::new();
        for r in &self.records {
            groups
                .entry((r.dataset.clone(), r.method.clone(), r.mode, r.param.to_bits()))
                .or_default()
                .push(r);
        }
        groups
            .into_iter()
            .map(|((dataset, method, mode, param), rs)| {
                let aucs: Vec<f64> = rs.iter().filter_map(|r| r.auc_pr).collect();
                let flags: Vec<f64> = rs.iter().filter_map(|r| r.flag_rate).collect();
                let (auc_pr_mean, auc_pr_sd) = mean_sd(&aucs);
                AggregateRow {
                    dataset,
                    method,
                    mode,
                    param: f64::from_bits(param),
                    runs: rs.len(),
                    failed: rs.len() - aucs.len(),
                    auc_pr_mean,
                    auc_pr_sd,
                    flag_rate_mean: mean_sd(&flags).0,
                }
            })
            .collect()
    }

    /// Mean AUC-PR rank per method within each (dataset, mode, param) block.
    /// Replicates where any method failed are left out of that block and
    /// returned as `dataset/mode/param/seed` labels.
    pub fn ranks(&self) -> (Vec<RankRow>, Vec<String>) {
        let mut blocks: BTreeMap<BlockKey, BTreeMap<u64, BTreeMap<String, Option<f64>>>> = BTreeMap::new();
        for r in &self.records {
            blocks
                .entry((r.dataset.clone(), r.mode, r.param.to_bits()))
                .or_default()
                .entry(r.seed)
                .or_default()
                .insert(r.method.clone(), r.auc_pr);
        }
        let mut rows = Vec::new();
        let mut excluded = Vec::new();
        for ((dataset, mode, param), runs) in blocks {
            let param = f64::from_bits(param);
            let n_methods = runs.values().map(BTreeMap::len).max().unwrap_or(0);
            let mut complete = Vec::new();
            for (seed, run) in runs {
                if run.len() == n_methods && run.values().all(Option::is_some) {
                    complete.push(run.into_iter().map(|(m, v)| (m, v.expect("checked"))).collect());
                } else {
                    excluded.push(format!("{dataset}/{mode}/{param}/{seed}"));
                }
            }
            if let Ok(ranks) = average_ranks(&complete) {
                for (method, mean_rank) in ranks {
                    rows.push(RankRow {
                        dataset: dataset.clone(),
                        mode,
                        param,
                        method,
                        mean_rank,
                        runs: complete.len(),
                    });
                }
            }
        }
        (rows, excluded)
    }

    /// Writes `results.csv`, `aggregate.csv` and `ranks.csv` into `dir`.
    pub fn write_csvs(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();

        let results = dir.join("results.csv");
        let mut w = writer(&results)?;
        w.write_record([
            "dataset",
            "method",
            "mode",
            "param",
            "seed",
            "auc_pr",
            "flag_rate",
            "runtime_s",
        ])?;
        for r in &self.records {
            w.write_record([
                r.dataset.clone(),
                r.method.clone(),
                r.mode.to_string(),
                r.param.to_string(),
                r.seed.to_string(),
                opt(r.auc_pr),
                opt(r.flag_rate),
                format!("{:.6}", r.runtime_s),
            ])?;
        }
        finish(w, &results)?;

        let aggregate = dir.join("aggregate.csv");
        let mut w = writer(&aggregate)?;
        w.write_record([
            "dataset",
            "method",
            "mode",
            "param",
            "runs",
            "failed",
            "auc_pr_mean",
            "auc_pr_sd",
            "flag_rate_mean",
        ])?;
        for a in self.aggregate() {
            w.write_record([
                a.dataset,
                a.method,
                a.mode.to_string(),
                a.param.to_string(),
                a.runs.to_string(),
                a.failed.to_string(),
                a.auc_pr_mean.to_string(),
                a.auc_pr_sd.to_string(),
                a.flag_rate_mean.to_string(),
            ])?;
        }
        finish(w, &aggregate)?;

        let ranks = dir.join("ranks.csv");
        let mut w = writer(&ranks)?;
        w.write_record(["dataset", "mode", "param", "method", "mean_rank", "runs"])?;
        for r in self.ranks().0 {
            w.write_record([
                r.dataset,
                r.mode.to_string(),
                r.param.to_string(),
                r.method,
                r.mean_rank.to_string(),
                r.runs.to_string(),
            ])?;
        }
        finish(w, &ranks)?;
        Ok(vec![results, aggregate, ranks])
    }

    /// Reads back a `results.csv` written by [`BenchmarkReport::write_csvs`].
    /// Error messages are not stored there, so failed cells come back with a
    /// generic note.
    pub fn read_results(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut rdr = csv::Reader::from_reader(file);
        let expected = [
            "dataset",
            "method",
            "mode",
            "param",
            "seed",
            "auc_pr",
            "flag_rate",
            "runtime_s",
        ];
        let header = rdr.headers()?.clone();
        if header.iter().ne(expected.iter().copied()) {
            return Err(Error::InvalidParameter(format!(
                "{} does not have the results header {}",
                path.display(),
                expected.join(",")
            )));
        }
        let mut records = Vec::new();
        for (k, row) in rdr.records().enumerate() {
            let row = row?;
            let cell = |i: usize| row.get(i).unwrap_or("");
            let bad = |i: usize| Error::BadCell {
                row: k + 1,
                column: expected[i].to_string(),
                value: cell(i).to_string(),
            };
            let num = |i: usize| cell(i).parse::<f64>().map_err(|_| bad(i));
            let opt = |i: usize| if cell(i).is_empty() { Ok(None) } else { num(i).map(Some) };
            let auc_pr = opt(5)?;
            records.push(RunRecord {
                dataset: cell(0).to_string(),
                method: cell(1).to_string(),
                mode: cell(2).parse().map_err(|_| bad(2))?,
                param: num(3)?,
                seed: cell(4).parse().map_err(|_| bad(4))?,
                auc_pr,
                flag_rate: opt(6)?,
                runtime_s: num(7)?,
                error: auc_pr.is_none().then(|| "failed".to_string()),
            });
        }
        Ok(Self::new(records))
    }
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(csv::Writer::from_writer(file))
}

fn finish(mut w: csv::Writer<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}
