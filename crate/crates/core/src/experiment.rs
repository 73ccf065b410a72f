//! Config-driven experiment runner: generate, schedule, fit, score, and
//! write error traces.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::drl::{self, Aggregator, DistributedReport, FaultSpec, Learner, Shards, Truth};
use crate::error::{OrlError, Result};
use crate::median::{
    weiszfeld_median, Aggregation, Estimate, DEFAULT_CA, DEFAULT_MAX_ITER, DEFAULT_TOL,
};
use crate::par;
use crate::rlr::{self, RegressionData, RegressionModel, StepSchedule};
use crate::rpca::{self, SubspaceBasis};
use crate::synth::{self, BatchPlan, BatchSchedule, LrGenSpec, PcaGenSpec};

/// Per-batch (or per-shard) trim when the config does not set one.
pub const DEFAULT_TRIM: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    PcaOnline,
    LrOnline,
    PcaDistributed,
    LrDistributed,
    MedianBench,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Algorithm {
    /// Online median filter, or geometric-median aggregation when distributed.
    OrlMedianFilter,
    /// Running mean, or plain averaging when distributed.
    OnlineAverage,
    /// The robust learner on all scheduled samples at once, trimmed at the
    /// overall outlier fraction.
    BatchCentralized,
    /// Standard PCA on all samples, or least-squares SGD over the stream.
    NonRobustBaseline,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::OrlMedianFilter => "OrlMedianFilter",
            Algorithm::OnlineAverage => "OnlineAverage",
            Algorithm::BatchCentralized => "BatchCentralized",
            Algorithm::NonRobustBaseline => "NonRobustBaseline",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", deny_unknown_fields)]
pub enum GenSpec {
    Pca(PcaGenSpec),
    Lr(LrGenSpec),
}

impl GenSpec {
    fn lambda(&self) -> f64 {
        match self {
            GenSpec::Pca(s) => s.lambda,
            GenSpec::Lr(s) => s.lambda,
        }
    }
}

fn default_repeats() -> usize {
    1
}

fn default_c_a() -> f64 {
    DEFAULT_CA
}

/// A single experiment. `gen.seed` and `gen.lambda` are replaced per cell by
/// the derived repeat seed and the sweep value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub gen: Option<GenSpec>,
    #[serde(default)]
    pub schedule: Option<BatchSchedule>,
    #[serde(default)]
    pub algorithms: Vec<Algorithm>,
    /// Outlier fractions to sweep; defaults to `gen.lambda`.
    #[serde(default)]
    pub sweep: Vec<f64>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_c_a")]
    pub c_a: f64,
    /// Trim fraction used by each batch or worker learner.
    #[serde(default)]
    pub trim: Option<f64>,
    #[serde(default)]
    pub fault: Option<FaultSpec>,
    #[serde(default)]
    pub sgd: Option<StepSchedule>,
    /// Input for `MedianBench`.
    #[serde(default)]
    pub points: Vec<Vec<f64>>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn config_err(msg: impl Into<String>) -> OrlError {
    OrlError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn trim(&self) -> f64 {
        self.trim.unwrap_or(DEFAULT_TRIM)
    }

    pub fn sweep_values(&self) -> Vec<f64> {
        if self.sweep.is_empty() {
            self.gen.iter().map(GenSpec::lambda).collect()
        } else {
            self.sweep.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(config_err("repeats must be at least 1"));
        }
        if !(self.c_a > 0.0 && self.c_a.is_finite()) {
            return Err(config_err(format!(
                "c_a must be positive, got {}",
                self.c_a
            )));
        }
        if let Some(t) = self.trim {
            if !(0.0..1.0).contains(&t) {
                return Err(config_err(format!("trim must lie in [0, 1), got {t}")));
            }
        }
        if self.task == Task::MedianBench {
            if self.points.is_empty() {
                return Err(config_err("MedianBench needs a non-empty `points` list"));
            }
            return Ok(());
        }
        let gen = self
            .gen
            .as_ref()
            .ok_or_else(|| config_err("missing `gen`"))?;
        let wants_pca = matches!(self.task, Task::PcaOnline | Task::PcaDistributed);
        if wants_pca != matches!(gen, GenSpec::Pca(_)) {
            return Err(config_err(format!(
                "generator does not match task {:?}",
                self.task
            )));
        }
        match gen {
            GenSpec::Pca(s) => s.validate(),
            GenSpec::Lr(s) => s.validate(),
        }
        .map_err(|e| config_err(e.to_string()))?;
        if self.schedule.is_none() {
            return Err(config_err("missing `schedule`"));
        }
        if self.algorithms.is_empty() {
            return Err(config_err("`algorithms` is empty"));
        }
        for &l in &self.sweep_values() {
            if !(0.0..1.0).contains(&l) {
                return Err(config_err(format!("sweep value {l} outside [0, 1)")));
            }
        }
        if let Some(f) = &self.fault {
            f.validate().map_err(|e| config_err(e.to_string()))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub lambda: f64,
    pub algorithm: String,
    pub repeat: usize,
    /// Batch index `t` for online tasks, worker count `k` for distributed ones.
    pub step: usize,
    /// `None` marks a failed run.
    pub error: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ErrorTrace {
    pub rows: Vec<TraceRow>,
}

impl ErrorTrace {
    pub fn sort(&mut self) {
        self.rows.sort_by(|a, b| {
            a.lambda
                .total_cmp(&b.lambda)
                .then_with(|| a.algorithm.cmp(&b.algorithm))
                .then(a.repeat.cmp(&b.repeat))
                .then(a.step.cmp(&b.step))
        });
    }

    /// Error at the last step of each `(lambda, algorithm, repeat)` run.
    pub fn final_errors(&self) -> BTreeMap<(String, String, usize), Option<f64>> {
        let mut last: BTreeMap<(String, String, usize), (usize, Option<f64>)> = BTreeMap::new();
        for r in &self.rows {
            let key = (fmt_float(r.lambda), r.algorithm.clone(), r.repeat);
            let e = last.entry(key).or_insert((r.step, r.error));
            if r.step >= e.0 {
                *e = (r.step, r.error);
            }
        }
        last.into_iter().map(|(k, v)| (k, v.1)).collect()
    }
}

/// 17 significant digits, enough to round-trip an `f64`.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `lambda,algorithm,repeat,step,error`, sorted, failures as `failed`.
pub fn emit_csv(trace: &ErrorTrace, path: &Path) -> Result<()> {
    let mut sorted = trace.clone();
    sorted.sort();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["lambda", "algorithm", "repeat", "step", "error"])?;
    for r in &sorted.rows {
        w.write_record([
            fmt_float(r.lambda),
            r.algorithm.clone(),
            r.repeat.to_string(),
            r.step.to_string(),
            r.error.map_or_else(|| "failed".to_string(), fmt_float),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub trace: ErrorTrace,
    pub summary: serde_json::Value,
    /// One report per distributed run, in cell order.
    pub reports: Vec<DistributedReport>,
}

impl ExperimentOutput {
    /// `trace.csv`, `summary.json`, and `reports.json` for distributed tasks.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        emit_csv(&self.trace, &dir.join("trace.csv"))?;
        fs::write(
            dir.join("summary.json"),
            serde_json::to_string_pretty(&self.summary)? + "\n",
        )?;
        if !self.reports.is_empty() {
            fs::write(
                dir.join("reports.json"),
                serde_json::to_string_pretty(&self.reports)? + "\n",
            )?;
        }
        Ok(())
    }
}

enum Prepared {
    Pca {
        samples: DMatrix<f64>,
        plan: BatchPlan,
        truth: SubspaceBasis,
    },
    Lr {
        data: RegressionData,
        plan: BatchPlan,
        truth: RegressionModel,
    },
}

impl Prepared {
    fn truth(&self) -> Truth {
        match self {
            Prepared::Pca { truth, .. } => Truth::Subspace(truth.clone()),
            Prepared::Lr { truth, .. } => Truth::Model(truth.clone()),
        }
    }

    fn steps(&self) -> usize {
        match self {
            Prepared::Pca { plan, .. } | Prepared::Lr { plan, .. } => plan.batches.len(),
        }
    }

    fn pooled_indices(&self) -> Vec<usize> {
        match self {
            Prepared::Pca { plan, .. } | Prepared::Lr { plan, .. } => plan.batches.concat(),
        }
    }
}

fn prepare(cfg: &ExperimentConfig, lambda: f64, seed: u64) -> Result<Prepared> {
    let schedule = cfg.schedule.as_ref().expect("validated");
    let schedule_seed = synth::derive_seed(seed, 1, 0);
    match cfg.gen.as_ref().expect("validated") {
        GenSpec::Pca(g) => {
            let ds = synth::gen_pca(&PcaGenSpec {
                lambda,
                seed,
                ..g.clone()
            })?;
            let plan = synth::schedule_batches(&ds.inlier_mask, schedule, schedule_seed)?;
            Ok(Prepared::Pca {
                samples: ds.samples,
                plan,
                truth: ds.truth,
            })
        }
        GenSpec::Lr(g) => {
            let ds = synth::gen_lr(&LrGenSpec {
                lambda,
                seed,
                ..g.clone()
            })?;
            let plan = synth::schedule_batches(&ds.inlier_mask, schedule, schedule_seed)?;
            Ok(Prepared::Lr {
                data: ds.data,
                plan,
                truth: ds.truth,
            })
        }
    }
}

type Curve = Vec<(usize, f64)>;

fn final_point(steps: usize, e: f64) -> Curve {
    vec![(steps, e)]
}

fn run_online(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    alg: Algorithm,
    lambda: f64,
) -> Result<Curve> {
    let trim = cfg.trim();
    let t = prep.steps();
    let aggregation = |alg| match alg {
        Algorithm::OrlMedianFilter => Aggregation::MedianFilter { c_a: cfg.c_a },
        _ => Aggregation::RunningMean,
    };
    let numbered = |errs: Vec<f64>| {
        errs.into_iter()
            .enumerate()
            .map(|(i, e)| (i + 1, e))
            .collect()
    };
    match prep {
        Prepared::Pca {
            samples,
            plan,
            truth,
        } => {
            let d = truth.d();
            match alg {
                Algorithm::OrlMedianFilter | Algorithm::OnlineAverage => {
                    let batches = synth::pca_batches(samples, plan);
                    let path = rpca::online_pca_path(&batches, d, trim, aggregation(alg))?;
                    Ok(numbered(
                        path.iter()
                            .map(|b| rpca::subspace_error(b, truth))
                            .collect::<Result<_>>()?,
                    ))
                }
                Algorithm::BatchCentralized | Algorithm::NonRobustBaseline => {
                    let pooled = samples.select_columns(&prep.pooled_indices());
                    let trim = if alg == Algorithm::BatchCentralized {
                        lambda
                    } else {
                        0.0
                    };
                    let b = rpca::rc_pca(&pooled, d, trim)?;
                    Ok(final_point(t, rpca::subspace_error(&b, truth)?))
                }
            }
        }
        Prepared::Lr { data, plan, truth } => match alg {
            Algorithm::OrlMedianFilter | Algorithm::OnlineAverage => {
                let batches = synth::lr_batches(data, plan);
                let path = rlr::online_lr_path(&batches, trim, aggregation(alg))?;
                Ok(numbered(
                    path.iter()
                        .map(|m| rlr::regression_error(m, truth))
                        .collect::<Result<_>>()?,
                ))
            }
            Algorithm::BatchCentralized => {
                let m = rlr::rotr(&data.select(&prep.pooled_indices()), lambda, true)?;
                Ok(final_point(t, rlr::regression_error(&m, truth)?))
            }
            Algorithm::NonRobustBaseline => {
                let batches = synth::lr_batches(data, plan);
                let (path, diverged) = rlr::sgd_lr_path(&batches, cfg.sgd.unwrap_or_default())?;
                if diverged {
                    log::warn!("SGD baseline diverged at lambda {lambda}");
                }
                Ok(numbered(
                    path.iter()
                        .map(|m| rlr::regression_error(m, truth))
                        .collect::<Result<_>>()?,
                ))
            }
        },
    }
}

fn run_distributed_alg(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    alg: Algorithm,
    lambda: f64,
    repeat: usize,
    reports: &mut Vec<DistributedReport>,
) -> Result<Curve> {
    let trim = cfg.trim();
    let k = prep.steps();
    let (shards, learner) = match prep {
        Prepared::Pca {
            samples,
            plan,
            truth,
        } => (
            Shards::Pca(synth::pca_batches(samples, plan)),
            Learner::RcPca {
                d: truth.d(),
                lambda: trim,
            },
        ),
        Prepared::Lr { data, plan, .. } => (
            Shards::Regression(synth::lr_batches(data, plan)),
            Learner::Rotr {
                lambda: trim,
                normalize: true,
            },
        ),
    };
    let aggregator = match alg {
        Algorithm::OrlMedianFilter => Aggregator::GeometricMedian,
        Algorithm::OnlineAverage => Aggregator::Average,
        // Centralised baselines see the pooled data; reuse the online versions.
        _ => {
            return run_online(cfg, prep, alg, lambda)
                .map(|c| final_point(k, c.last().expect("non-empty").1))
        }
    };
    // Each repeat draws its own faulty workers; both aggregators see the same draw.
    let mut fault = cfg.fault.unwrap_or_else(FaultSpec::none);
    fault.seed = synth::derive_seed(fault.seed, 2, repeat as u64);
    let outcome = drl::run_distributed(&shards, &learner, &fault, aggregator)?;
    let report = DistributedReport::new(&outcome, aggregator, fault, &prep.truth())?;
    let e = report.error;
    reports.push(report);
    Ok(final_point(k, e))
}

struct CellResult {
    rows: Vec<TraceRow>,
    reports: Vec<DistributedReport>,
}

fn run_cell(cfg: &ExperimentConfig, lambda: f64, repeat: usize) -> CellResult {
    // The seed depends on the repeat only, so sweep points share inliers.
    let seed = synth::derive_seed(cfg.seed, 0, repeat as u64);
    let distributed = matches!(cfg.task, Task::PcaDistributed | Task::LrDistributed);
    let prep = prepare(cfg, lambda, seed);
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for &alg in &cfg.algorithms {
        let curve = prep.as_ref().map_err(|e| e.to_string()).and_then(|p| {
            let r = if distributed {
                run_distributed_alg(cfg, p, alg, lambda, repeat, &mut reports)
            } else {
                run_online(cfg, p, alg, lambda)
            };
            r.map_err(|e| e.to_string())
        });
        match curve {
            Ok(points) => rows.extend(points.into_iter().map(|(step, e)| TraceRow {
                lambda,
                algorithm: alg.name().into(),
                repeat,
                step,
                error: Some(e),
            })),
            Err(msg) => {
                log::warn!(
                    "{} failed at lambda {lambda}, repeat {repeat}: {msg}",
                    alg.name()
                );
                let step = cfg.schedule.map_or(0, |s| s.batches);
                rows.push(TraceRow {
                    lambda,
                    algorithm: alg.name().into(),
                    repeat,
                    step,
                    error: None,
                });
            }
        }
    }
    CellResult { rows, reports }
}

fn run_median_bench(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let points = cfg
        .points
        .iter()
        .map(|p| Estimate::weights(p.clone()))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| config_err(e.to_string()))?;
    let (m, diag) = weiszfeld_median(&points, DEFAULT_TOL, DEFAULT_MAX_ITER)
        .map_err(|e| config_err(e.to_string()))?;
    let trace = ErrorTrace {
        rows: vec![TraceRow {
            lambda: 0.0,
            algorithm: "GeometricMedian".into(),
            repeat: 0,
            step: diag.iterations,
            error: Some(diag.final_objective),
        }],
    };
    let summary = json!({
        "task": cfg.task,
        "median": m.values(),
        "objective": diag.final_objective,
        "iterations": diag.iterations,
        "converged": diag.converged,
    });
    Ok(ExperimentOutput {
        trace,
        summary,
        reports: Vec::new(),
    })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    if cfg.task == Task::MedianBench {
        return run_median_bench(cfg);
    }
    let sweep = cfg.sweep_values();
    let cells: Vec<(f64, usize)> = sweep
        .iter()
        .flat_map(|&l| (0..cfg.repeats).map(move |r| (l, r)))
        .collect();
    let results = par::map_slice(&cells, |&(l, r)| run_cell(cfg, l, r));
    let mut trace = ErrorTrace::default();
    let mut reports = Vec::new();
    for c in results {
        trace.rows.extend(c.rows);
        reports.extend(c.reports);
    }
    trace.sort();
    let summary = summarize(cfg, &trace);
    Ok(ExperimentOutput {
        trace,
        summary,
        reports,
    })
}

fn summarize(cfg: &ExperimentConfig, trace: &ErrorTrace) -> serde_json::Value {
    let mut cells: BTreeMap<(String, String), Vec<Option<f64>>> = BTreeMap::new();
    for ((l, a, _), e) in trace.final_errors() {
        cells.entry((l, a)).or_default().push(e);
    }
    let cells: Vec<serde_json::Value> = cells
        .into_iter()
        .map(|((l, a), errs)| {
            let ok: Vec<f64> = errs.iter().flatten().copied().collect();
            let mean = (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64);
            json!({
                "lambda": l.parse::<f64>().unwrap_or(f64::NAN),
                "algorithm": a,
                "runs": errs.len(),
                "failures": errs.len() - ok.len(),
                "mean_final_error": mean,
                "final_errors": errs,
            })
        })
        .collect();
    let mut notes = serde_json::Map::new();
    if let Some(s) = &cfg.schedule {
        notes.insert("placement".into(), json!(s.placement));
    }
    if matches!(cfg.gen, Some(GenSpec::Lr(_))) {
        notes.insert(
            "outlier_response".into(),
            json!("y = -theta^T x + v, v ~ N(0, sigma_e^2)"),
        );
    }
    if let Some(FaultSpec {
        kind: drl::FaultKind::Latency { .. },
        ..
    }) = cfg.fault
    {
        notes.insert(
            "latency_model".into(),
            json!("late workers refit on the first half of their shard"),
        );
    }
    json!({
        "task": cfg.task,
        "seed": cfg.seed,
        "repeats": cfg.repeats,
        "c_a": cfg.c_a,
        "trim": cfg.trim(),
        "sweep": cfg.sweep_values(),
        "notes": notes,
        "cells": cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::Placement;

    fn pca_cfg() -> ExperimentConfig {
        ExperimentConfig::from_json(
            r#"{
                "task": "PcaOnline",
                "seed": 5,
                "gen": {"model": "Pca", "p": 6, "d": 2, "sigma_e": 0.5, "sigma_o": 10.0, "n": 600, "lambda": 0.1, "seed": 0},
                "schedule": {"batches": 6, "placement": {"kind": "UniformShuffle"}},
                "algorithms": ["OrlMedianFilter", "OnlineAverage", "BatchCentralized", "NonRobustBaseline"],
                "sweep": [0.0, 0.2],
                "repeats": 2,
                "trim": 0.2
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn rejects_unknown_and_invalid_fields() {
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"task": "MedianBench", "pointz": []}"#),
            Err(OrlError::Config(_))
        ));
        assert!(ExperimentConfig::from_json(r#"{"task": "MedianBench", "points": []}"#).is_err());
        let mut cfg = pca_cfg();
        cfg.repeats = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = pca_cfg();
        cfg.sweep = vec![1.0];
        assert!(cfg.validate().is_err());
        let mut cfg = pca_cfg();
        cfg.task = Task::LrOnline;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn trace_is_complete() {
        let out = run_experiment(&pca_cfg()).unwrap();
        // 2 lambdas x 2 repeats x (6 + 6 + 1 + 1) rows.
        assert_eq!(out.trace.rows.len(), 2 * 2 * 14);
        assert!(out
            .trace
            .rows
            .iter()
            .all(|r| r.error.is_some_and(|e| e >= 0.0)));
        assert_eq!(out.summary["cells"].as_array().unwrap().len(), 8);
    }

    #[test]
    fn failures_become_rows() {
        let mut cfg = pca_cfg();
        cfg.schedule = Some(BatchSchedule {
            batches: 6,
            placement: Placement::AdversarialFront {
                fraction: 1.0,
                per_batch_lambda: 0.9,
            },
        });
        let out = run_experiment(&cfg).unwrap();
        let failed = out.trace.rows.iter().filter(|r| r.error.is_none()).count();
        assert_eq!(failed, 2 * 2 * 4);
    }

    #[test]
    fn csv_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        emit_csv(&ErrorTrace::default(), &path).unwrap();
        assert_eq!(
            fs::read_to_string(&path).unwrap(),
            "lambda,algorithm,repeat,step,error\n"
        );
        let one = ErrorTrace {
            rows: vec![TraceRow {
                lambda: 0.1,
                algorithm: "A".into(),
                repeat: 0,
                step: 3,
                error: None,
            }],
        };
        emit_csv(&one, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.ends_with("1.0000000000000001e-1,A,0,3,failed\n"));
    }

    #[test]
    fn median_bench_summary() {
        let cfg = ExperimentConfig::from_json(
            r#"{"task": "MedianBench", "points": [[1.0], [2.0], [100.0]]}"#,
        )
        .unwrap();
        let out = run_experiment(&cfg).unwrap();
        let m = out.summary["median"][0].as_f64().unwrap();
        assert!((m - 2.0).abs() < 1e-6);
    }
}
