//! Robust linear regression by per-coordinate trimmed correlation (RoTR),
//! its online wrapper, and the non-robust baselines.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, OrlError, Result};
use crate::median::{Aggregation, Estimate, OnlineAggregator, SpaceTag};
use crate::par;
use crate::trimmed::{check_fraction, rows_of, trimmed_inner, TrimSpec};

/// Trim fraction to use when the outlier fraction is unknown.
pub const DEFAULT_LAMBDA: f64 = 0.5;

const DIVERGENCE_NORM: f64 = 1e12;

/// Covariates (features x samples) and responses.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionData {
    x: DMatrix<f64>,
    y: Vec<f64>,
}

impl RegressionData {
    pub fn new(x: DMatrix<f64>, y: Vec<f64>) -> Result<Self> {
        check_dim("regression responses", x.ncols(), y.len())?;
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(OrlError::NonFinite("regression data"));
        }
        Ok(Self { x, y })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn p(&self) -> usize {
        self.x.nrows()
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Sub-dataset made of the given sample indices, in that order.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select_columns(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }

    /// The first `count` samples.
    pub fn prefix(&self, count: usize) -> Self {
        let count = count.min(self.n());
        Self {
            x: self.x.columns(0, count).into_owned(),
            y: self.y[..count].to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionModel {
    theta: Vec<f64>,
}

impl RegressionModel {
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(OrlError::NonFinite("regression model"));
        }
        Ok(Self { theta })
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn p(&self) -> usize {
        self.theta.len()
    }

    pub fn to_estimate(&self) -> Estimate {
        Estimate::from_trusted(self.theta.clone(), SpaceTag::RegressionWeights(self.p()))
    }

    pub fn from_estimate(e: &Estimate) -> Result<Self> {
        match e.space() {
            SpaceTag::RegressionWeights(_) => Ok(Self {
                theta: e.values().to_vec(),
            }),
            SpaceTag::FlattenedProjector(_) => {
                Err(invalid("estimate", "expected regression weights"))
            }
        }
    }
}

/// RoTR: `theta_j = <y, X_j>` trimmed of the `floor(lambda N)` largest
/// products, divided by the number of kept products when `normalize` is set.
pub fn rotr(data: &RegressionData, lambda: f64, normalize: bool) -> Result<RegressionModel> {
    check_fraction(lambda)?;
    let n = data.n();
    if n < 2 {
        return Err(invalid("data", format!("need at least 2 samples, got {n}")));
    }
    let spec = TrimSpec::from_fraction(lambda, n)?;
    let scale = if normalize {
        1.0 / (n - spec.drop_count) as f64
    } else {
        1.0
    };
    let rows = rows_of(&data.x);
    let theta = par::map_indexed(data.p(), |j| {
        trimmed_inner(&data.y, &rows[j], spec).expect("validated shapes") * scale
    });
    RegressionModel::new(theta)
}

fn check_batches(batches: &[RegressionData]) -> Result<usize> {
    let first = batches.first().ok_or(OrlError::Empty("batch stream"))?;
    for b in batches {
        check_dim("batch feature count", first.p(), b.p())?;
    }
    Ok(first.p())
}

/// Normalised RoTR estimate of every batch, in batch order.
pub fn batch_estimates(batches: &[RegressionData], lambda: f64) -> Result<Vec<Estimate>> {
    check_batches(batches)?;
    par::try_map_slice(batches, |b| rotr(b, lambda, true).map(|m| m.to_estimate()))
}

/// Online regression estimate after every batch.
pub fn online_lr_path(
    batches: &[RegressionData],
    lambda: f64,
    aggregation: Aggregation,
) -> Result<Vec<RegressionModel>> {
    let p = check_batches(batches)?;
    let estimates = batch_estimates(batches, lambda)?;
    let mut agg = OnlineAggregator::new(SpaceTag::RegressionWeights(p), aggregation)?;
    let mut path = Vec::with_capacity(estimates.len());
    for e in &estimates {
        agg.absorb(e)?;
        path.push(RegressionModel::from_estimate(&agg.current())?);
    }
    Ok(path)
}

pub fn online_lr(
    batches: &[RegressionData],
    lambda: f64,
    aggregation: Aggregation,
) -> Result<RegressionModel> {
    let mut path = online_lr_path(batches, lambda, aggregation)?;
    Ok(path.pop().expect("non-empty stream"))
}

/// ORL-LR: median filtering of per-batch RoTR estimates.
pub fn orl_lr(batches: &[RegressionData], lambda: f64, c_a: f64) -> Result<RegressionModel> {
    online_lr(batches, lambda, Aggregation::MedianFilter { c_a })
}

/// Running mean of per-batch RoTR estimates.
pub fn averaging_lr_baseline(batches: &[RegressionData], lambda: f64) -> Result<RegressionModel> {
    online_lr(batches, lambda, Aggregation::RunningMean)
}

/// Step size `eta0 / (1 + k / t0)` at sample `k`, over `passes` sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSchedule {
    pub eta0: f64,
    pub t0: f64,
    pub passes: usize,
}

impl Default for StepSchedule {
    fn default() -> Self {
        Self {
            eta0: 0.002,
            t0: 10_000.0,
            passes: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdOutcome {
    pub model: RegressionModel,
    /// Set when the iterate norm exceeded `1e12`; `model` then holds the
    /// last iterate before that happened.
    pub diverged: bool,
}

/// Least-squares SGD, one sample at a time. Records the iterate after every
/// batch of the final pass.
pub fn sgd_lr_path(
    batches: &[RegressionData],
    schedule: StepSchedule,
) -> Result<(Vec<RegressionModel>, bool)> {
    let p = check_batches(batches)?;
    if !(schedule.eta0 > 0.0 && schedule.t0 > 0.0) || schedule.passes == 0 {
        return Err(invalid("step schedule", format!("{schedule:?}")));
    }
    let mut theta = vec![0.0; p];
    let mut next = vec![0.0; p];
    let mut k = 0u64;
    let mut path = Vec::with_capacity(batches.len());
    let mut diverged = false;
    'passes: for pass in 0..schedule.passes {
        for b in batches {
            for (col, &y) in b.x.column_iter().zip(&b.y) {
                let eta = schedule.eta0 / (1.0 + k as f64 / schedule.t0);
                k += 1;
                let resid: f64 = col.iter().zip(&theta).map(|(a, t)| a * t).sum::<f64>() - y;
                for ((n, t), a) in next.iter_mut().zip(&theta).zip(col.iter()) {
                    *n = t - eta * resid * a;
                }
                let norm = crate::median::norm(&next);
                if norm.is_nan() || norm > DIVERGENCE_NORM {
                    diverged = true;
                    break 'passes;
                }
                std::mem::swap(&mut theta, &mut next);
            }
            if pass + 1 == schedule.passes {
                path.push(RegressionModel {
                    theta: theta.clone(),
                });
            }
        }
    }
    if diverged {
        log::warn!("SGD diverged after {k} samples");
        let last = RegressionModel { theta };
        path.resize(batches.len(), last);
    }
    Ok((path, diverged))
}

pub fn sgd_lr_baseline(batches: &[RegressionData], schedule: StepSchedule) -> Result<SgdOutcome> {
    let (mut path, diverged) = sgd_lr_path(batches, schedule)?;
    Ok(SgdOutcome {
        model: path.pop().expect("non-empty stream"),
        diverged,
    })
}

/// `||est - truth|| / ||truth||`.
pub fn regression_error(est: &RegressionModel, truth: &RegressionModel) -> Result<f64> {
    check_dim("regression model", truth.p(), est.p())?;
    let scale = crate::median::norm(&truth.theta);
    if scale == 0.0 {
        return Err(invalid("truth", "zero-norm reference model"));
    }
    Ok(crate::median::distance(&est.theta, &truth.theta) / scale)
}
