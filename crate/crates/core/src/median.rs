//! Geometric median: an exact Weiszfeld solver and the online median filter
//! that folds streaming mini-batch estimates into one robust running estimate.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, OrlError, Result};

/// Default gradient tolerance of the Weiszfeld solver.
pub const DEFAULT_TOL: f64 = 1e-9;
/// Default iteration cap of the Weiszfeld solver.
pub const DEFAULT_MAX_ITER: usize = 10_000;

const MAX_EXTRAPOLATION_DOUBLINGS: usize = 30;
/// Default strong-convexity constant of the median filter.
pub const DEFAULT_CA: f64 = 1.0;

/// Relative distance below which an iterate is treated as sitting on a data point.
const COINCIDENT_EPS: f64 = 1e-12;

/// Which parameter space an [`Estimate`] lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpaceTag {
    /// Regression weights of dimension `p`.
    RegressionWeights(usize),
    /// A `p x p` projector flattened row-major into `p * p` values.
    FlattenedProjector(usize),
}

impl SpaceTag {
    /// Number of stored values for an estimate in this space.
    pub fn len(&self) -> usize {
        match *self {
            SpaceTag::RegressionWeights(p) => p,
            SpaceTag::FlattenedProjector(p) => p * p,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A point in parameter space. Entries are always finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    values: Vec<f64>,
    space: SpaceTag,
}

impl Estimate {
    pub fn new(values: Vec<f64>, space: SpaceTag) -> Result<Self> {
        check_dim("estimate length", space.len(), values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(OrlError::NonFinite("estimate"));
        }
        Ok(Self { values, space })
    }

    /// Regression-weight estimate from a plain vector.
    pub fn weights(values: Vec<f64>) -> Result<Self> {
        let p = values.len();
        Self::new(values, SpaceTag::RegressionWeights(p))
    }

    pub fn zeros(space: SpaceTag) -> Self {
        Self {
            values: vec![0.0; space.len()],
            space,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn space(&self) -> SpaceTag {
        self.space
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }

    pub fn distance(&self, other: &Estimate) -> f64 {
        distance(&self.values, &other.values)
    }

    /// Internal constructor for values already known to be finite.
    pub(crate) fn from_trusted(values: Vec<f64>, space: SpaceTag) -> Self {
        debug_assert_eq!(values.len(), space.len());
        Self { values, space }
    }

    /// Flips the sign of the listed coordinates.
    pub(crate) fn flip_signs(&mut self, coords: &[usize]) {
        for &c in coords {
            self.values[c] = -self.values[c];
        }
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn validate_points(points: &[Estimate]) -> Result<SpaceTag> {
    let first = points.first().ok_or(OrlError::Empty("median points"))?;
    let space = first.space();
    for p in points {
        if p.space() != space {
            return Err(OrlError::DimensionMismatch {
                context: "median points",
                expected: space.len(),
                got: p.len(),
            });
        }
    }
    Ok(space)
}

/// Mean distance from `theta` to the points: `(1/T) sum ||theta_i - theta||`.
pub fn median_objective(points: &[Estimate], theta: &[f64]) -> f64 {
    let total: f64 = points.iter().map(|p| distance(p.values(), theta)).sum();
    total / points.len() as f64
}

/// Coordinate-wise mean of a non-empty set of estimates.
pub fn coordinate_mean(points: &[Estimate]) -> Result<Estimate> {
    let space = validate_points(points)?;
    let mut mean = vec![0.0; space.len()];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p.values()) {
            *m += v;
        }
    }
    let n = points.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Estimate::new(mean, space).map_err(|_| OrlError::NonFinite("coordinate mean"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MedianDiagnostics {
    pub iterations: usize,
    /// Value of the mean-distance objective at the returned point.
    pub final_objective: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeiszfeldStatus {
    Running,
    /// Gradient below tolerance, or a data point passed the subgradient test.
    Converged,
    /// A step failed to decrease the objective; the previous iterate is kept.
    Stalled,
}

/// Stepwise Weiszfeld iteration, started at the coordinate-wise mean.
///
/// Exposed so callers can observe the objective after every iterate; the
/// objective never increases from one accepted iterate to the next.
pub struct Weiszfeld<'a> {
    points: &'a [Estimate],
    current: Vec<f64>,
    objective: f64,
    tol: f64,
    iterations: usize,
    status: WeiszfeldStatus,
}

impl<'a> Weiszfeld<'a> {
    pub fn new(points: &'a [Estimate], tol: f64) -> Result<Self> {
        if !(tol > 0.0 && tol.is_finite()) {
            return Err(invalid("tol", format!("must be positive, got {tol}")));
        }
        let start = coordinate_mean(points)?;
        let objective = median_objective(points, start.values());
        Ok(Self {
            points,
            current: start.into_values(),
            objective,
            tol,
            iterations: 0,
            status: WeiszfeldStatus::Running,
        })
    }

    pub fn current(&self) -> &[f64] {
        &self.current
    }

    pub fn objective(&self) -> f64 {
        self.objective
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn status(&self) -> WeiszfeldStatus {
        self.status
    }

    /// Sum of unit vectors from `anchor` towards every point that does not
    /// coincide with it, plus the inverse-distance weight sum and the number
    /// of coincident points.
    fn pull_at(&self, anchor: &[f64]) -> (Vec<f64>, f64, usize) {
        let scale = norm(anchor).max(1.0);
        let mut pull = vec![0.0; anchor.len()];
        let mut inv_sum = 0.0;
        let mut coincident = 0usize;
        for p in self.points {
            let d = distance(p.values(), anchor);
            if d <= COINCIDENT_EPS * scale {
                coincident += 1;
                continue;
            }
            inv_sum += 1.0 / d;
            for (r, (x, a)) in pull.iter_mut().zip(p.values().iter().zip(anchor)) {
                *r += (x - a) / d;
            }
        }
        (pull, inv_sum, coincident)
    }

    /// If `anchor` satisfies the subgradient optimality condition
    /// `||sum_{i != j} u_i|| <= multiplicity`, it is an exact minimiser.
    fn anchor_is_optimal(&self, anchor: &[f64]) -> bool {
        let (pull, _, coincident) = self.pull_at(anchor);
        coincident > 0 && norm(&pull) <= coincident as f64
    }

    fn accept(&mut self, next: Vec<f64>, status: WeiszfeldStatus) -> WeiszfeldStatus {
        let obj = median_objective(self.points, &next);
        if obj <= self.objective {
            self.current = next;
            self.objective = obj;
            self.status = status;
        } else {
            self.status = WeiszfeldStatus::Stalled;
        }
        self.status
    }

    /// Advances one iterate and reports the resulting status.
    pub fn step(&mut self) -> WeiszfeldStatus {
        if self.status != WeiszfeldStatus::Running {
            return self.status;
        }
        self.iterations += 1;
        let n = self.points.len() as f64;

        // Nearest data point, used for both the singularity guard and the
        // exact-anchor shortcut.
        let (nearest, nearest_dist) = self
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| (i, distance(p.values(), &self.current)))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .expect("non-empty points");
        let anchor = self.points[nearest].values();

        if nearest_dist <= COINCIDENT_EPS * norm(anchor).max(1.0) {
            let anchor = anchor.to_vec();
            let (pull, inv_sum, coincident) = self.pull_at(&anchor);
            let pull_norm = norm(&pull);
            if pull_norm <= coincident as f64 || inv_sum == 0.0 {
                return self.accept(anchor, WeiszfeldStatus::Converged);
            }
            // Move off the data point along the residual direction by the
            // modified Weiszfeld step, which strictly decreases the objective.
            let scale = (1.0 - coincident as f64 / pull_norm) / inv_sum;
            let next: Vec<f64> = anchor
                .iter()
                .zip(&pull)
                .map(|(a, r)| a + scale * r)
                .collect();
            return self.accept(next, WeiszfeldStatus::Running);
        }

        if nearest_dist <= self.tol && self.anchor_is_optimal(anchor) {
            let anchor = anchor.to_vec();
            return self.accept(anchor, WeiszfeldStatus::Converged);
        }

        let m = self.current.len();
        let mut grad = vec![0.0; m];
        let mut weighted = vec![0.0; m];
        let mut inv_sum = 0.0;
        for p in self.points {
            let d = distance(p.values(), &self.current);
            let w = 1.0 / d;
            inv_sum += w;
            for k in 0..m {
                let x = p.values()[k];
                grad[k] += (self.current[k] - x) * w;
                weighted[k] += x * w;
            }
        }
        if norm(&grad) / n < self.tol {
            self.status = WeiszfeldStatus::Converged;
            return self.status;
        }
        let next: Vec<f64> = weighted.iter().map(|v| v / inv_sum).collect();
        if next == self.current {
            self.status = WeiszfeldStatus::Stalled;
            return self.status;
        }
        let next = self.extrapolate(next);
        self.accept(next, WeiszfeldStatus::Running)
    }

    /// Doubles the Weiszfeld displacement while the objective keeps falling.
    /// Plain Weiszfeld crawls through ill-conditioned valleys; this keeps
    /// every accepted step at least as good as the plain one.
    fn extrapolate(&self, plain: Vec<f64>) -> Vec<f64> {
        let dir: Vec<f64> = plain
            .iter()
            .zip(&self.current)
            .map(|(p, c)| p - c)
            .collect();
        let mut best_obj = median_objective(self.points, &plain);
        let mut best = plain;
        let mut beta = 2.0;
        for _ in 0..MAX_EXTRAPOLATION_DOUBLINGS {
            let trial: Vec<f64> = self
                .current
                .iter()
                .zip(&dir)
                .map(|(c, d)| c + beta * d)
                .collect();
            let obj = median_objective(self.points, &trial);
            if obj.is_nan() || obj >= best_obj {
                break;
            }
            best = trial;
            best_obj = obj;
            beta *= 2.0;
        }
        best
    }
}

/// Geometric median of `points` by Weiszfeld iteration.
///
/// Returns a point whose objective gradient norm is below `tol`, or a data
/// point that passes the subgradient optimality test. With two points the
/// iteration starts, and stays, at their midpoint.
pub fn weiszfeld_median(
    points: &[Estimate],
    tol: f64,
    max_iter: usize,
) -> Result<(Estimate, MedianDiagnostics)> {
    let space = validate_points(points)?;
    let mut solver = Weiszfeld::new(points, tol)?;
    while solver.iterations() < max_iter && solver.step() == WeiszfeldStatus::Running {}
    let diagnostics = MedianDiagnostics {
        iterations: solver.iterations(),
        final_objective: solver.objective(),
        converged: solver.status() == WeiszfeldStatus::Converged,
    };
    Ok((Estimate::from_trusted(solver.current, space), diagnostics))
}

/// [`weiszfeld_median`] with the default tolerance and iteration cap.
pub fn geometric_median(points: &[Estimate]) -> Result<Estimate> {
    weiszfeld_median(points, DEFAULT_TOL, DEFAULT_MAX_ITER).map(|(m, _)| m)
}

/// State of the online median filter: the running estimate, the number of
/// absorbed estimates and the strong-convexity constant `c_a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterState {
    current: Estimate,
    t: u64,
    c_a: f64,
}

impl FilterState {
    /// Fresh filter at the origin of `space`.
    pub fn new(space: SpaceTag, c_a: f64) -> Result<Self> {
        if !(c_a > 0.0 && c_a.is_finite()) {
            return Err(invalid("c_a", format!("must be positive, got {c_a}")));
        }
        Ok(Self {
            current: Estimate::zeros(space),
            t: 0,
            c_a,
        })
    }

    /// Filter resumed from an arbitrary state.
    pub fn from_parts(current: Estimate, t: u64, c_a: f64) -> Result<Self> {
        let mut state = Self::new(current.space(), c_a)?;
        state.current = current;
        state.t = t;
        Ok(state)
    }

    pub fn current(&self) -> &Estimate {
        &self.current
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn c_a(&self) -> f64 {
        self.c_a
    }

    /// Absorbs one estimate: a projected subgradient step on the median
    /// objective with step size `1 / (c_a t)`, i.e. a convex combination
    /// with weight `min(1, 2 eta / ||current - new||)`.
    pub fn step(&self, new_estimate: &Estimate) -> Result<Self> {
        if new_estimate.space() != self.current.space() {
            return Err(OrlError::DimensionMismatch {
                context: "filter step",
                expected: self.current.len(),
                got: new_estimate.len(),
            });
        }
        if new_estimate.values().iter().any(|v| !v.is_finite()) {
            return Err(OrlError::NonFinite("filter input"));
        }
        let t = self.t + 1;
        let eta = 1.0 / (self.c_a * t as f64);
        let dist = self.current.distance(new_estimate);
        let current = if dist == 0.0 {
            // Zero subgradient at a coincident point.
            self.current.clone()
        } else {
            let w = (2.0 * eta / dist).min(1.0);
            if w == 1.0 {
                new_estimate.clone()
            } else {
                let values = self
                    .current
                    .values()
                    .iter()
                    .zip(new_estimate.values())
                    .map(|(a, b)| (1.0 - w) * a + w * b)
                    .collect();
                Estimate::from_trusted(values, self.current.space())
            }
        };
        Ok(Self {
            current,
            t,
            c_a: self.c_a,
        })
    }
}

/// Functional form of [`FilterState::step`].
pub fn filter_step(state: &FilterState, new_estimate: &Estimate) -> Result<FilterState> {
    state.step(new_estimate)
}

/// Folds the median filter over a stream starting from the origin.
pub fn run_filter<'a, I>(estimates: I, c_a: f64) -> Result<Estimate>
where
    I: IntoIterator<Item = &'a Estimate>,
{
    let mut iter = estimates.into_iter();
    let first = iter.next().ok_or(OrlError::Empty("filter stream"))?;
    let mut state = FilterState::new(first.space(), c_a)?.step(first)?;
    for e in iter {
        state = state.step(e)?;
    }
    Ok(state.current)
}

/// How an online pipeline combines its per-batch estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Aggregation {
    /// Online geometric-median filtering with constant `c_a`.
    MedianFilter { c_a: f64 },
    /// Uniform running mean (the non-robust baseline).
    RunningMean,
}

#[derive(Debug, Clone)]
enum AggregatorState {
    Filter(FilterState),
    Mean { mean: Vec<f64>, t: u64 },
}

/// Sequential fold of per-batch estimates under an [`Aggregation`] rule.
#[derive(Debug, Clone)]
pub struct OnlineAggregator {
    space: SpaceTag,
    state: AggregatorState,
}

impl OnlineAggregator {
    pub fn new(space: SpaceTag, aggregation: Aggregation) -> Result<Self> {
        let state = match aggregation {
            Aggregation::MedianFilter { c_a } => {
                AggregatorState::Filter(FilterState::new(space, c_a)?)
            }
            Aggregation::RunningMean => AggregatorState::Mean {
                mean: vec![0.0; space.len()],
                t: 0,
            },
        };
        Ok(Self { space, state })
    }

    pub fn absorb(&mut self, estimate: &Estimate) -> Result<()> {
        if estimate.space() != self.space {
            return Err(OrlError::DimensionMismatch {
                context: "online aggregator",
                expected: self.space.len(),
                got: estimate.len(),
            });
        }
        match &mut self.state {
            AggregatorState::Filter(state) => *state = state.step(estimate)?,
            AggregatorState::Mean { mean, t } => {
                *t += 1;
                let k = *t as f64;
                for (m, v) in mean.iter_mut().zip(estimate.values()) {
                    *m = ((k - 1.0) * *m + v) / k;
                }
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> u64 {
        match &self.state {
            AggregatorState::Filter(s) => s.steps(),
            AggregatorState::Mean { t, .. } => *t,
        }
    }

    pub fn current(&self) -> Estimate {
        match &self.state {
            AggregatorState::Filter(s) => s.current().clone(),
            AggregatorState::Mean { mean, .. } => Estimate::from_trusted(mean.clone(), self.space),
        }
    }
}

fn c_gamma(gamma: f64) -> f64 {
    (1.0 - gamma) * (1.0 / (1.0 - 2.0 * gamma)).sqrt()
}

/// Robustness radius multiplier `C_gamma = (1 - gamma) sqrt(1 / (1 - 2 gamma))`.
///
/// If more than `(1 - gamma) T` of the points lie within `r` of some centre,
/// their geometric median lies within `C_gamma r` of that centre.
pub fn robustness_radius(gamma: f64) -> Result<f64> {
    if !(gamma > 0.0 && gamma < 0.5) {
        return Err(invalid(
            "gamma",
            format!("must lie in (0, 0.5), got {gamma}"),
        ));
    }
    Ok(c_gamma(gamma))
}
