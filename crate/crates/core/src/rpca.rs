//! Robust PCA: batch RC-PCA on a trimmed covariance, and the online wrapper
//! that median-filters per-batch projectors.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{check_dim, invalid, OrlError, Result};
use crate::median::{Aggregation, Estimate, OnlineAggregator, SpaceTag};
use crate::par;
use crate::trimmed::{symmetrize, trimmed_covariance};

/// Per-batch trim fraction used by [`orl_pca`].
pub const DEFAULT_BATCH_TRIM: f64 = 0.5;

const ORTHONORMAL_TOL: f64 = 1e-8;

/// A `p x d` matrix with orthonormal columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceBasis {
    basis: DMatrix<f64>,
}

impl SubspaceBasis {
    pub fn new(basis: DMatrix<f64>) -> Result<Self> {
        let (p, d) = basis.shape();
        if d == 0 || d > p {
            return Err(invalid(
                "basis",
                format!("need 1 <= d <= p, got p={p}, d={d}"),
            ));
        }
        if basis.iter().any(|v| !v.is_finite()) {
            return Err(OrlError::NonFinite("subspace basis"));
        }
        let gram = basis.transpose() * &basis;
        let off = (gram - DMatrix::<f64>::identity(d, d)).abs().max();
        if off > ORTHONORMAL_TOL {
            return Err(invalid(
                "basis",
                format!("columns not orthonormal (deviation {off:e})"),
            ));
        }
        Ok(Self { basis })
    }

    /// Orthonormalises the columns of `m` by thin QR.
    pub fn orthonormalize(m: DMatrix<f64>) -> Result<Self> {
        let (p, d) = m.shape();
        if d == 0 || d > p {
            return Err(invalid(
                "basis",
                format!("need 1 <= d <= p, got p={p}, d={d}"),
            ));
        }
        Self::new(m.qr().q())
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn p(&self) -> usize {
        self.basis.nrows()
    }

    pub fn d(&self) -> usize {
        self.basis.ncols()
    }

    pub fn projector(&self) -> ProjectorEstimate {
        ProjectorEstimate {
            projector: &self.basis * self.basis.transpose(),
        }
    }
}

/// A `p x p` projector, the representation the online filter works on.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorEstimate {
    projector: DMatrix<f64>,
}

impl ProjectorEstimate {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.projector
    }

    pub fn p(&self) -> usize {
        self.projector.nrows()
    }

    /// Row-major flattening.
    pub fn to_estimate(&self) -> Estimate {
        let p = self.p();
        let values = self.projector.transpose().iter().copied().collect();
        Estimate::from_trusted(values, SpaceTag::FlattenedProjector(p))
    }

    /// Inverse of [`Self::to_estimate`]. The matrix is not required to be a
    /// projector, since filtered iterates are convex combinations of them.
    pub fn from_estimate(e: &Estimate) -> Result<Self> {
        match e.space() {
            SpaceTag::FlattenedProjector(p) => Ok(Self {
                projector: DMatrix::from_row_slice(p, p, e.values()),
            }),
            SpaceTag::RegressionWeights(_) => {
                Err(invalid("estimate", "expected a flattened projector"))
            }
        }
    }

    /// Top-`d` eigenvectors of the symmetrised matrix.
    pub fn top_basis(&self, d: usize) -> Result<SubspaceBasis> {
        top_eigenvectors(&symmetrize(&self.projector)?, d)
    }
}

/// Leading `d` eigenvectors of a symmetric matrix, largest eigenvalue first,
/// each column signed so its largest-magnitude entry is positive.
fn top_eigenvectors(sym: &DMatrix<f64>, d: usize) -> Result<SubspaceBasis> {
    let p = sym.nrows();
    if d == 0 || d > p {
        return Err(invalid("d", format!("need 1 <= d <= p = {p}, got {d}")));
    }
    if sym.iter().any(|v| !v.is_finite()) {
        return Err(OrlError::NonFinite("covariance"));
    }
    if sym.iter().all(|&v| v == 0.0) {
        return Err(OrlError::RankDeficient(
            "covariance is identically zero".into(),
        ));
    }
    let eig = SymmetricEigen::new(sym.clone());
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let mut basis = DMatrix::zeros(p, d);
    for (k, &idx) in order.iter().take(d).enumerate() {
        let mut col = eig.eigenvectors.column(idx).into_owned();
        let lead = col
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
            .map(|(_, v)| *v)
            .unwrap_or(0.0);
        if lead < 0.0 {
            col.neg_mut();
        }
        basis.set_column(k, &col);
    }
    SubspaceBasis::new(basis)
}

/// RC-PCA: top-`d` eigenvectors of the symmetrised trimmed covariance of the
/// columns of `samples` (features x samples).
pub fn rc_pca(samples: &DMatrix<f64>, d: usize, lambda: f64) -> Result<SubspaceBasis> {
    let p = samples.nrows();
    if d == 0 || d > p {
        return Err(invalid("d", format!("need 1 <= d <= p = {p}, got {d}")));
    }
    let cov = symmetrize(&trimmed_covariance(samples, lambda)?)?;
    top_eigenvectors(&cov, d)
}

/// Untrimmed PCA on the second-moment matrix.
pub fn standard_pca(samples: &DMatrix<f64>, d: usize) -> Result<SubspaceBasis> {
    rc_pca(samples, d, 0.0)
}

fn check_batches(batches: &[DMatrix<f64>], d: usize) -> Result<usize> {
    let first = batches.first().ok_or(OrlError::Empty("batch stream"))?;
    let p = first.nrows();
    for b in batches {
        check_dim("batch feature count", p, b.nrows())?;
        if b.ncols() < d + 1 {
            return Err(invalid(
                "batch",
                format!("need at least d+1 = {} columns, got {}", d + 1, b.ncols()),
            ));
        }
    }
    Ok(p)
}

/// Per-batch RC-PCA projectors, computed concurrently and returned in batch order.
pub fn batch_projectors(batches: &[DMatrix<f64>], d: usize, trim: f64) -> Result<Vec<Estimate>> {
    check_batches(batches, d)?;
    par::try_map_slice(batches, |b| {
        rc_pca(b, d, trim).map(|basis| basis.projector().to_estimate())
    })
}

/// Streaming online PCA: absorbs one batch at a time.
#[derive(Debug, Clone)]
pub struct OnlinePca {
    d: usize,
    trim: f64,
    aggregator: OnlineAggregator,
}

impl OnlinePca {
    pub fn new(p: usize, d: usize, trim: f64, aggregation: Aggregation) -> Result<Self> {
        if d == 0 || d > p {
            return Err(invalid("d", format!("need 1 <= d <= p = {p}, got {d}")));
        }
        crate::trimmed::check_fraction(trim)?;
        Ok(Self {
            d,
            trim,
            aggregator: OnlineAggregator::new(SpaceTag::FlattenedProjector(p), aggregation)?,
        })
    }

    pub fn absorb_batch(&mut self, batch: &DMatrix<f64>) -> Result<()> {
        check_batches(std::slice::from_ref(batch), self.d)?;
        let e = rc_pca(batch, self.d, self.trim)?.projector().to_estimate();
        self.absorb_projector(&e)
    }

    pub fn absorb_projector(&mut self, projector: &Estimate) -> Result<()> {
        self.aggregator.absorb(projector)
    }

    pub fn steps(&self) -> u64 {
        self.aggregator.steps()
    }

    /// The filtered (or averaged) projector matrix.
    pub fn state(&self) -> Result<ProjectorEstimate> {
        ProjectorEstimate::from_estimate(&self.aggregator.current())
    }

    pub fn estimate(&self) -> Result<SubspaceBasis> {
        self.state()?.top_basis(self.d)
    }
}

/// Online PCA estimate after every batch, in order.
pub fn online_pca_path(
    batches: &[DMatrix<f64>],
    d: usize,
    trim: f64,
    aggregation: Aggregation,
) -> Result<Vec<SubspaceBasis>> {
    let p = check_batches(batches, d)?;
    let projectors = batch_projectors(batches, d, trim)?;
    let mut online = OnlinePca::new(p, d, trim, aggregation)?;
    let mut path = Vec::with_capacity(projectors.len());
    for e in &projectors {
        online.absorb_projector(e)?;
        path.push(online.estimate()?);
    }
    Ok(path)
}

/// Final online PCA estimate.
pub fn online_pca(
    batches: &[DMatrix<f64>],
    d: usize,
    trim: f64,
    aggregation: Aggregation,
) -> Result<SubspaceBasis> {
    let p = check_batches(batches, d)?;
    let projectors = batch_projectors(batches, d, trim)?;
    let mut online = OnlinePca::new(p, d, trim, aggregation)?;
    for e in &projectors {
        online.absorb_projector(e)?;
    }
    online.estimate()
}

/// ORL-PCA with the default per-batch trim of one half.
pub fn orl_pca(batches: &[DMatrix<f64>], d: usize, c_a: f64) -> Result<SubspaceBasis> {
    orl_pca_with_trim(batches, d, c_a, DEFAULT_BATCH_TRIM)
}

pub fn orl_pca_with_trim(
    batches: &[DMatrix<f64>],
    d: usize,
    c_a: f64,
    trim: f64,
) -> Result<SubspaceBasis> {
    online_pca(batches, d, trim, Aggregation::MedianFilter { c_a })
}

/// Running mean of per-batch RC-PCA projectors.
pub fn averaging_pca_baseline(
    batches: &[DMatrix<f64>],
    d: usize,
    lambda: f64,
) -> Result<SubspaceBasis> {
    online_pca(batches, d, lambda, Aggregation::RunningMean)
}

/// `||P_est - P_truth||_F / sqrt(d)`.
pub fn subspace_error(est: &SubspaceBasis, truth: &SubspaceBasis) -> Result<f64> {
    check_dim("subspace ambient dimension", truth.p(), est.p())?;
    check_dim("subspace dimension", truth.d(), est.d())?;
    let diff = est.projector().projector - truth.projector().projector;
    Ok(diff.norm() / (truth.d() as f64).sqrt())
}
