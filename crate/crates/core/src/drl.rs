//! Single-process simulation of distributed robust learning: workers fit
//! local estimates on their shards, faults are injected, and the results are
//! aggregated by geometric median or by averaging.

use nalgebra::DMatrix;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, OrlError, Result};
use crate::median::{coordinate_mean, weiszfeld_median, Estimate, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::par;
use crate::rlr::{regression_error, rotr, RegressionData, RegressionModel};
use crate::rpca::{rc_pca, subspace_error, ProjectorEstimate, SubspaceBasis};
use crate::synth::ceil_count;

/// Fraction of its shard a late worker gets through.
pub const LATE_FRACTION: f64 = 0.5;

const LATENCY_STREAM: u64 = 1;
const COMM_STREAM: u64 = 2;

/// Base learner each worker runs on its shard.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum Learner {
    /// RC-PCA; the worker reports its flattened projector.
    RcPca {
        d: usize,
        lambda: f64,
    },
    Rotr {
        lambda: f64,
        normalize: bool,
    },
}

#[derive(Debug, Clone)]
pub enum Shards {
    Pca(Vec<DMatrix<f64>>),
    Regression(Vec<RegressionData>),
}

impl Shards {
    pub fn len(&self) -> usize {
        match self {
            Shards::Pca(s) => s.len(),
            Shards::Regression(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn sample_count(&self, w: usize) -> usize {
        match self {
            Shards::Pca(s) => s[w].ncols(),
            Shards::Regression(s) => s[w].n(),
        }
    }

    fn check(&self) -> Result<()> {
        if self.len() < 2 {
            return Err(invalid(
                "shards",
                format!("need k >= 2 workers, got {}", self.len()),
            ));
        }
        let (dims, counts): (Vec<usize>, Vec<usize>) = match self {
            Shards::Pca(s) => s.iter().map(|m| (m.nrows(), m.ncols())).unzip(),
            Shards::Regression(s) => s.iter().map(|d| (d.p(), d.n())).unzip(),
        };
        for &p in &dims {
            check_dim("shard feature count", dims[0], p)?;
        }
        if counts.contains(&0) {
            return Err(OrlError::Empty("shard"));
        }
        Ok(())
    }
}

/// Local fit on the first `fraction` of worker `w`'s shard.
pub fn local_estimate(
    learner: &Learner,
    shards: &Shards,
    w: usize,
    fraction: f64,
) -> Result<Estimate> {
    let count = ceil_count(fraction * shards.sample_count(w) as f64);
    match (learner, shards) {
        (Learner::RcPca { d, lambda }, Shards::Pca(s)) => {
            let x = s[w].columns(0, count).into_owned();
            Ok(rc_pca(&x, *d, *lambda)?.projector().to_estimate())
        }
        (Learner::Rotr { lambda, normalize }, Shards::Regression(s)) => {
            Ok(rotr(&s[w].prefix(count), *lambda, *normalize)?.to_estimate())
        }
        _ => Err(invalid("learner", "learner does not match the shard type")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum WorkerStatus {
    Ok,
    Late { fraction_processed: f64 },
    Corrupted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerResult {
    pub worker_id: usize,
    pub estimate: Estimate,
    pub status: WorkerStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorkerFailure {
    pub worker_id: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum FaultKind {
    None,
    /// Aggregation starts once `stop_when_done_fraction` of workers finish;
    /// the rest report estimates from half their shard.
    Latency {
        stop_when_done_fraction: f64,
    },
    /// A `node_fraction` of workers have `element_flip_fraction` of their
    /// coordinates sign-flipped in transit.
    CommError {
        node_fraction: f64,
        element_flip_fraction: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub kind: FaultKind,
    #[serde(default)]
    pub seed: u64,
}

impl FaultSpec {
    pub fn none() -> Self {
        Self {
            kind: FaultKind::None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fractions: &[f64] = match &self.kind {
            FaultKind::None => &[],
            FaultKind::Latency {
                stop_when_done_fraction,
            } => {
                if stop_when_done_fraction.is_nan() || *stop_when_done_fraction <= 0.0 {
                    return Err(invalid("stop_when_done_fraction", "must lie in (0, 1]"));
                }
                std::slice::from_ref(stop_when_done_fraction)
            }
            FaultKind::CommError {
                node_fraction,
                element_flip_fraction,
            } => &[*node_fraction, *element_flip_fraction],
        };
        if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(invalid(
                "fault",
                format!("fractions must lie in [0, 1]: {:?}", self.kind),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregator {
    GeometricMedian,
    Average,
}

fn fault_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Full-shard estimates of every worker, computed concurrently.
pub fn compute_workers(
    shards: &Shards,
    learner: &Learner,
) -> Result<(Vec<WorkerResult>, Vec<WorkerFailure>)> {
    shards.check()?;
    let outcomes = par::map_indexed(shards.len(), |w| local_estimate(learner, shards, w, 1.0));
    Ok(split_outcomes(
        outcomes.into_iter().enumerate(),
        WorkerStatus::Ok,
    ))
}

fn split_outcomes(
    outcomes: impl Iterator<Item = (usize, Result<Estimate>)>,
    status: WorkerStatus,
) -> (Vec<WorkerResult>, Vec<WorkerFailure>) {
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (worker_id, r) in outcomes {
        match r {
            Ok(estimate) => ok.push(WorkerResult {
                worker_id,
                estimate,
                status,
            }),
            Err(e) => failed.push(WorkerFailure {
                worker_id,
                reason: e.to_string(),
            }),
        }
    }
    (ok, failed)
}

/// Marks a uniformly chosen `ceil((1 - stop_fraction) k)` of the workers late
/// and replaces their estimates with fits on the first half of their shards.
pub fn inject_latency(
    results: Vec<WorkerResult>,
    stop_fraction: f64,
    learner: &Learner,
    shards: &Shards,
    seed: u64,
) -> Result<(Vec<WorkerResult>, Vec<WorkerFailure>)> {
    if !(stop_fraction > 0.0 && stop_fraction <= 1.0) {
        return Err(invalid(
            "stop_fraction",
            format!("must lie in (0, 1], got {stop_fraction}"),
        ));
    }
    let k = results.len();
    let late_count = ceil_count((1.0 - stop_fraction) * k as f64).min(k);
    let mut late = vec![false; k];
    for i in index::sample(&mut fault_rng(seed, LATENCY_STREAM), k, late_count) {
        late[i] = true;
    }
    let redone = par::map_indexed(k, |i| {
        if late[i] {
            Some(local_estimate(
                learner,
                shards,
                results[i].worker_id,
                LATE_FRACTION,
            ))
        } else {
            None
        }
    });
    let mut kept = Vec::with_capacity(k);
    let mut failed = Vec::new();
    for (r, new) in results.into_iter().zip(redone) {
        match new {
            None => kept.push(r),
            Some(Ok(estimate)) => kept.push(WorkerResult {
                estimate,
                status: WorkerStatus::Late {
                    fraction_processed: LATE_FRACTION,
                },
                ..r
            }),
            Some(Err(e)) => failed.push(WorkerFailure {
                worker_id: r.worker_id,
                reason: e.to_string(),
            }),
        }
    }
    Ok((kept, failed))
}

/// Flips the sign of `ceil(flip_fraction m)` random coordinates in each of
/// `ceil(node_fraction k)` random workers.
pub fn inject_comm_error(
    mut results: Vec<WorkerResult>,
    node_fraction: f64,
    flip_fraction: f64,
    seed: u64,
) -> Result<Vec<WorkerResult>> {
    for (name, f) in [
        ("node_fraction", node_fraction),
        ("flip_fraction", flip_fraction),
    ] {
        if !(0.0..=1.0).contains(&f) {
            return Err(invalid(name, format!("must lie in [0, 1], got {f}")));
        }
    }
    let k = results.len();
    let mut rng = fault_rng(seed, COMM_STREAM);
    let mut nodes =
        index::sample(&mut rng, k, ceil_count(node_fraction * k as f64).min(k)).into_vec();
    nodes.sort_unstable();
    for w in nodes {
        let r = &mut results[w];
        let m = r.estimate.len();
        let coords =
            index::sample(&mut rng, m, ceil_count(flip_fraction * m as f64).min(m)).into_vec();
        r.estimate.flip_signs(&coords);
        r.status = WorkerStatus::Corrupted;
    }
    Ok(results)
}

/// Combines worker estimates. Input order does not matter.
pub fn aggregate(results: &[WorkerResult], aggregator: Aggregator) -> Result<Estimate> {
    if results.is_empty() {
        return Err(OrlError::Empty("worker results"));
    }
    let mut sorted: Vec<&WorkerResult> = results.iter().collect();
    sorted.sort_by_key(|r| r.worker_id);
    let points: Vec<Estimate> = sorted.iter().map(|r| r.estimate.clone()).collect();
    match aggregator {
        Aggregator::GeometricMedian => {
            let (m, diag) = weiszfeld_median(&points, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
            if !diag.converged {
                log::warn!(
                    "Weiszfeld stopped after {} iterations without converging",
                    diag.iterations
                );
            }
            Ok(m)
        }
        Aggregator::Average => coordinate_mean(&points),
    }
}

#[derive(Debug, Clone)]
pub struct DistributedOutcome {
    pub aggregate: Estimate,
    pub workers: Vec<WorkerResult>,
    pub failed: Vec<WorkerFailure>,
}

/// Worker estimates after fault injection, sorted by worker id.
pub fn faulty_workers(
    shards: &Shards,
    learner: &Learner,
    fault: &FaultSpec,
) -> Result<(Vec<WorkerResult>, Vec<WorkerFailure>)> {
    fault.validate()?;
    let (workers, mut failed) = compute_workers(shards, learner)?;
    let workers = match fault.kind {
        FaultKind::None => workers,
        FaultKind::Latency {
            stop_when_done_fraction,
        } => {
            let (w, f) = inject_latency(
                workers,
                stop_when_done_fraction,
                learner,
                shards,
                fault.seed,
            )?;
            failed.extend(f);
            w
        }
        FaultKind::CommError {
            node_fraction,
            element_flip_fraction,
        } => inject_comm_error(workers, node_fraction, element_flip_fraction, fault.seed)?,
    };
    failed.sort_by_key(|f| f.worker_id);
    for f in &failed {
        log::warn!("worker {} failed: {}", f.worker_id, f.reason);
    }
    if workers.is_empty() {
        return Err(OrlError::AllWorkersFailed(shards.len()));
    }
    Ok((workers, failed))
}

pub fn run_distributed(
    shards: &Shards,
    learner: &Learner,
    fault: &FaultSpec,
    aggregator: Aggregator,
) -> Result<DistributedOutcome> {
    let (workers, failed) = faulty_workers(shards, learner, fault)?;
    Ok(DistributedOutcome {
        aggregate: aggregate(&workers, aggregator)?,
        workers,
        failed,
    })
}

/// Ground truth against which estimates are scored.
#[derive(Debug, Clone)]
pub enum Truth {
    Subspace(SubspaceBasis),
    Model(RegressionModel),
}

impl Truth {
    /// Subspace error after top-`d` extraction, or relative regression error.
    pub fn error(&self, estimate: &Estimate) -> Result<f64> {
        match self {
            Truth::Subspace(b) => {
                let basis = ProjectorEstimate::from_estimate(estimate)?.top_basis(b.d())?;
                subspace_error(&basis, b)
            }
            Truth::Model(m) => regression_error(&RegressionModel::from_estimate(estimate)?, m),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct WorkerReport {
    pub id: usize,
    pub status: String,
    pub local_error: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DistributedReport {
    pub aggregator: Aggregator,
    pub k: usize,
    pub fault: FaultSpec,
    pub error: f64,
    pub per_worker: Vec<WorkerReport>,
}

impl DistributedReport {
    pub fn new(
        outcome: &DistributedOutcome,
        aggregator: Aggregator,
        fault: FaultSpec,
        truth: &Truth,
    ) -> Result<Self> {
        let mut per_worker: Vec<WorkerReport> = outcome
            .workers
            .iter()
            .map(|w| {
                Ok(WorkerReport {
                    id: w.worker_id,
                    status: match w.status {
                        WorkerStatus::Ok => "ok".into(),
                        WorkerStatus::Late { fraction_processed } => {
                            format!("late({fraction_processed})")
                        }
                        WorkerStatus::Corrupted => "corrupted".into(),
                    },
                    local_error: Some(truth.error(&w.estimate)?),
                })
            })
            .collect::<Result<_>>()?;
        per_worker.extend(outcome.failed.iter().map(|f| WorkerReport {
            id: f.worker_id,
            status: "failed".into(),
            local_error: None,
        }));
        per_worker.sort_by_key(|w| w.id);
        Ok(Self {
            aggregator,
            k: per_worker.len(),
            fault,
            error: truth.error(&outcome.aggregate)?,
            per_worker,
        })
    }
}
