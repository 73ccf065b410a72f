//! Seeded synthetic data for the PCA and regression experiments, and batch
//! schedules that control where the outliers land.
//!
//! Every logical source draws from its own ChaCha8 stream of the same seed,
//! so changing the outlier count never changes the inlier draws.

use nalgebra::DMatrix;
use rand::seq::{index, SliceRandom};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, OrlError, Result};
use crate::rlr::{RegressionData, RegressionModel};
use crate::rpca::SubspaceBasis;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
enum Source {
    Truth = 1,
    Signal = 2,
    Noise = 3,
    Outlier = 4,
    OutlierNoise = 5,
    Shuffle = 6,
    Derive = 7,
}

fn stream(seed: u64, source: Source) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(source as u64);
    rng
}

/// Child seed for slot `(a, b)` of a base seed.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(Source::Derive as u64 + (a << 8));
    rng.set_word_pos(u128::from(b) * 2);
    rng.next_u64()
}

/// Number of outliers for fraction `lambda` of `n`.
pub fn outlier_count(lambda: f64, n: usize) -> usize {
    (lambda * n as f64).floor() as usize
}

fn check_common(lambda: f64, sigma_e: f64, sigma_o: f64, n: usize, p: usize) -> Result<()> {
    crate::trimmed::check_fraction(lambda)?;
    for (name, v) in [("sigma_e", sigma_e), ("sigma_o", sigma_o)] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(invalid(
                name,
                format!("must be finite and non-negative, got {v}"),
            ));
        }
    }
    if n == 0 || p == 0 {
        return Err(invalid(
            "dimensions",
            format!("need p >= 1 and n >= 1, got p={p}, n={n}"),
        ));
    }
    Ok(())
}

fn uniform(rng: &mut ChaCha8Rng, half_width: f64) -> f64 {
    if half_width == 0.0 {
        0.0
    } else {
        rng.random_range(-half_width..=half_width)
    }
}

/// `x = theta* z + e` for inliers, uniform noise for outliers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PcaGenSpec {
    pub p: usize,
    pub d: usize,
    pub sigma_e: f64,
    pub sigma_o: f64,
    pub n: usize,
    pub lambda: f64,
    pub seed: u64,
}

impl PcaGenSpec {
    pub fn validate(&self) -> Result<()> {
        check_common(self.lambda, self.sigma_e, self.sigma_o, self.n, self.p)?;
        if self.d == 0 || self.d > self.p {
            return Err(invalid(
                "d",
                format!("need 1 <= d <= p = {}, got {}", self.p, self.d),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrGenSpec {
    pub p: usize,
    pub sigma_e: f64,
    pub sigma_o: f64,
    pub n: usize,
    pub lambda: f64,
    pub seed: u64,
}

impl LrGenSpec {
    pub fn validate(&self) -> Result<()> {
        check_common(self.lambda, self.sigma_e, self.sigma_o, self.n, self.p)
    }
}

/// Generated PCA samples. Inliers occupy the leading columns.
#[derive(Debug, Clone)]
pub struct PcaDataset {
    pub samples: DMatrix<f64>,
    pub truth: SubspaceBasis,
    pub inlier_mask: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct LrDataset {
    pub data: RegressionData,
    pub truth: RegressionModel,
    pub inlier_mask: Vec<bool>,
}

fn mask(n: usize, outliers: usize) -> Vec<bool> {
    (0..n).map(|i| i < n - outliers).collect()
}

pub fn gen_pca(spec: &PcaGenSpec) -> Result<PcaDataset> {
    spec.validate()?;
    let (p, d, n) = (spec.p, spec.d, spec.n);
    let n_out = outlier_count(spec.lambda, n);
    let n_in = n - n_out;

    let mut truth_rng = stream(spec.seed, Source::Truth);
    let raw = DMatrix::from_fn(p, d, |_, _| truth_rng.sample::<f64, _>(StandardNormal));
    let truth = SubspaceBasis::orthonormalize(raw)?;

    let mut signal = stream(spec.seed, Source::Signal);
    let z = DMatrix::from_fn(d, n_in, |_, _| signal.sample::<f64, _>(StandardNormal));
    let mut noise = stream(spec.seed, Source::Noise);
    let eps = DMatrix::from_fn(p, n_in, |_, _| {
        spec.sigma_e * noise.sample::<f64, _>(StandardNormal)
    });
    let inliers = truth.basis() * z + eps;

    let mut out_rng = stream(spec.seed, Source::Outlier);
    let mut samples = DMatrix::zeros(p, n);
    samples.columns_mut(0, n_in).copy_from(&inliers);
    for j in n_in..n {
        for i in 0..p {
            samples[(i, j)] = uniform(&mut out_rng, spec.sigma_o);
        }
    }
    Ok(PcaDataset {
        samples,
        truth,
        inlier_mask: mask(n, n_out),
    })
}

/// `y = theta*^T x + e` for inliers; outliers have uniform covariates and
/// `y = -theta*^T x + v`.
pub fn gen_lr(spec: &LrGenSpec) -> Result<LrDataset> {
    spec.validate()?;
    let (p, n) = (spec.p, spec.n);
    let n_out = outlier_count(spec.lambda, n);
    let n_in = n - n_out;

    let mut truth_rng = stream(spec.seed, Source::Truth);
    let theta: Vec<f64> = (0..p).map(|_| truth_rng.sample(StandardNormal)).collect();

    let mut signal = stream(spec.seed, Source::Signal);
    let mut noise = stream(spec.seed, Source::Noise);
    let mut out_rng = stream(spec.seed, Source::Outlier);
    let mut out_noise = stream(spec.seed, Source::OutlierNoise);
    let mut x = DMatrix::zeros(p, n);
    let mut y = Vec::with_capacity(n);
    for j in 0..n {
        let inlier = j < n_in;
        for i in 0..p {
            x[(i, j)] = if inlier {
                signal.sample(StandardNormal)
            } else {
                uniform(&mut out_rng, spec.sigma_o)
            };
        }
        let fit: f64 = x.column(j).iter().zip(&theta).map(|(a, t)| a * t).sum();
        y.push(if inlier {
            fit + spec.sigma_e * noise.sample::<f64, _>(StandardNormal)
        } else {
            -fit + spec.sigma_e * out_noise.sample::<f64, _>(StandardNormal)
        });
    }
    Ok(LrDataset {
        data: RegressionData::new(x, y)?,
        truth: RegressionModel::new(theta)?,
        inlier_mask: mask(n, n_out),
    })
}

/// Where the outliers go when samples are dealt into batches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum Placement {
    /// Uniform random permutation.
    UniformShuffle,
    /// The first `ceil(fraction T)` batches carry `per_batch_lambda` outliers.
    AdversarialFront {
        fraction: f64,
        per_batch_lambda: f64,
    },
    /// As `AdversarialFront`, but the designated batches are a seeded random
    /// subset rather than the leading ones.
    AdversarialScattered {
        fraction: f64,
        per_batch_lambda: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchSchedule {
    pub batches: usize,
    pub placement: Placement,
}

/// Sample indices per batch, realised outlier fractions, and the dropped tail.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub batches: Vec<Vec<usize>>,
    pub lambdas: Vec<f64>,
    pub tail: Vec<usize>,
}

impl BatchPlan {
    pub fn batch_size(&self) -> usize {
        self.batches.first().map_or(0, Vec::len)
    }
}

/// `ceil` that ignores floating-point fuzz just above an integer.
pub(crate) fn ceil_count(x: f64) -> usize {
    (x - 1e-9).ceil().max(0.0) as usize
}

pub fn schedule_batches(
    inlier_mask: &[bool],
    schedule: &BatchSchedule,
    seed: u64,
) -> Result<BatchPlan> {
    let n = inlier_mask.len();
    let t = schedule.batches;
    if t == 0 || t > n {
        return Err(invalid(
            "batches",
            format!("need 1 <= T <= N = {n}, got {t}"),
        ));
    }
    let b = n / t;
    let mut rng = stream(seed, Source::Shuffle);
    let mut batches: Vec<Vec<usize>> = Vec::with_capacity(t);
    let tail;
    match schedule.placement {
        Placement::UniformShuffle => {
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(&mut rng);
            tail = all.split_off(t * b);
            batches.extend(all.chunks(b).map(<[usize]>::to_vec));
        }
        Placement::AdversarialFront {
            fraction,
            per_batch_lambda,
        }
        | Placement::AdversarialScattered {
            fraction,
            per_batch_lambda,
        } => {
            if !(0.0..=1.0).contains(&fraction) || !(0.0..=1.0).contains(&per_batch_lambda) {
                return Err(invalid(
                    "placement",
                    format!("fractions must lie in [0, 1], got {fraction}, {per_batch_lambda}"),
                ));
            }
            let m = ceil_count(fraction * t as f64).min(t);
            let designated: Vec<usize> = match schedule.placement {
                Placement::AdversarialScattered { .. } => {
                    let mut d = index::sample(&mut rng, t, m).into_vec();
                    d.sort_unstable();
                    d
                }
                _ => (0..m).collect(),
            };
            let per_out = (per_batch_lambda * b as f64).round() as usize;
            let per_in = b - per_out;
            let mut inliers: Vec<usize> = (0..n).filter(|&i| inlier_mask[i]).collect();
            let mut outliers: Vec<usize> = (0..n).filter(|&i| !inlier_mask[i]).collect();
            if m * per_out > outliers.len() || m * per_in > inliers.len() {
                return Err(OrlError::Schedule(format!(
                    "{m} batches of {b} with {per_out} outliers each need {} outliers and {} inliers; have {} and {}",
                    m * per_out,
                    m * per_in,
                    outliers.len(),
                    inliers.len()
                )));
            }
            inliers.shuffle(&mut rng);
            outliers.shuffle(&mut rng);
            let mut rest: Vec<usize> = inliers.split_off(m * per_in);
            rest.extend(outliers.split_off(m * per_out));
            rest.shuffle(&mut rng);
            let mut remaining_tail = rest.split_off((t - m) * b);
            remaining_tail.sort_unstable();
            tail = remaining_tail;
            let mut fill = rest.chunks(b);
            let mut is_designated = vec![false; t];
            for &k in &designated {
                is_designated[k] = true;
            }
            let (mut ins, mut outs) = (
                inliers.chunks(per_in.max(1)),
                outliers.chunks(per_out.max(1)),
            );
            for flag in is_designated {
                if flag {
                    let mut batch = Vec::with_capacity(b);
                    if per_in > 0 {
                        batch.extend_from_slice(ins.next().expect("counted"));
                    }
                    if per_out > 0 {
                        batch.extend_from_slice(outs.next().expect("counted"));
                    }
                    batch.shuffle(&mut rng);
                    batches.push(batch);
                } else {
                    batches.push(fill.next().expect("counted").to_vec());
                }
            }
        }
    }
    if !tail.is_empty() {
        log::info!(
            "dropping {} samples that do not fill a batch of {b}",
            tail.len()
        );
    }
    let lambdas = batches
        .iter()
        .map(|batch| batch.iter().filter(|&&i| !inlier_mask[i]).count() as f64 / b as f64)
        .collect();
    Ok(BatchPlan {
        batches,
        lambdas,
        tail,
    })
}

pub fn pca_batches(samples: &DMatrix<f64>, plan: &BatchPlan) -> Vec<DMatrix<f64>> {
    plan.batches
        .iter()
        .map(|idx| samples.select_columns(idx))
        .collect()
}

pub fn lr_batches(data: &RegressionData, plan: &BatchPlan) -> Vec<RegressionData> {
    plan.batches.iter().map(|idx| data.select(idx)).collect()
}

/// Splits `n` samples into `k` contiguous shards of `floor(n / k)`.
pub fn contiguous_shards(n: usize, k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > n {
        return Err(invalid("k", format!("need 1 <= k <= n = {n}, got {k}")));
    }
    let s = n / k;
    Ok((0..k).map(|w| (w * s..(w + 1) * s).collect()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pca_spec(lambda: f64, sigma_e: f64, n: usize) -> PcaGenSpec {
        PcaGenSpec {
            p: 8,
            d: 2,
            sigma_e,
            sigma_o: 10.0,
            n,
            lambda,
            seed: 42,
        }
    }

    #[test]
    fn noiseless_pca_lies_in_span() {
        let ds = gen_pca(&pca_spec(0.0, 0.0, 200)).unwrap();
        let proj = ds.truth.projector();
        let resid = &ds.samples - proj.matrix() * &ds.samples;
        assert!(resid.abs().max() < 1e-10);
    }

    #[test]
    fn outlier_count_and_range() {
        let ds = gen_pca(&pca_spec(0.3, 1.0, 1000)).unwrap();
        assert_eq!(ds.inlier_mask.iter().filter(|m| !**m).count(), 300);
        for (j, &m) in ds.inlier_mask.iter().enumerate() {
            if !m {
                assert!(ds.samples.column(j).iter().all(|v| v.abs() <= 10.0));
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_inliers_stable() {
        let a = gen_pca(&pca_spec(0.2, 1.0, 300)).unwrap();
        let b = gen_pca(&pca_spec(0.2, 1.0, 300)).unwrap();
        assert_eq!(a.samples, b.samples);
        // Fewer outliers: the shared inlier prefix is unchanged.
        let c = gen_pca(&pca_spec(0.1, 1.0, 300)).unwrap();
        assert_eq!(a.samples.columns(0, 240), c.samples.columns(0, 240));
        assert_eq!(a.truth, c.truth);
    }

    #[test]
    fn noiseless_lr_is_exact() {
        let ds = gen_lr(&LrGenSpec {
            p: 5,
            sigma_e: 0.0,
            sigma_o: 10.0,
            n: 100,
            lambda: 0.0,
            seed: 3,
        })
        .unwrap();
        let fit = ds.data.x().transpose() * nalgebra::DVector::from_vec(ds.truth.theta().to_vec());
        for (a, b) in fit.iter().zip(ds.data.y()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn lr_outliers_flip_the_response() {
        let ds = gen_lr(&LrGenSpec {
            p: 3,
            sigma_e: 0.0,
            sigma_o: 10.0,
            n: 50,
            lambda: 0.2,
            seed: 5,
        })
        .unwrap();
        let theta = ds.truth.theta();
        for j in 40..50 {
            let fit: f64 = ds
                .data
                .x()
                .column(j)
                .iter()
                .zip(theta)
                .map(|(a, t)| a * t)
                .sum();
            assert_eq!(ds.data.y()[j], -fit);
        }
        let lr_again = gen_lr(&LrGenSpec {
            p: 3,
            sigma_e: 0.0,
            sigma_o: 10.0,
            n: 50,
            lambda: 0.2,
            seed: 5,
        })
        .unwrap();
        assert_eq!(ds.data, lr_again.data);
    }

    #[test]
    fn spec_validation() {
        assert!(gen_pca(&PcaGenSpec {
            d: 9,
            ..pca_spec(0.0, 1.0, 10)
        })
        .is_err());
        assert!(gen_pca(&pca_spec(1.0, 1.0, 10)).is_err());
        assert!(gen_pca(&pca_spec(0.1, -1.0, 10)).is_err());
    }

    #[test]
    fn single_batch_holds_everything() {
        let mask = vec![true; 17];
        let s = BatchSchedule {
            batches: 1,
            placement: Placement::UniformShuffle,
        };
        let plan = schedule_batches(&mask, &s, 1).unwrap();
        assert_eq!(plan.batches.len(), 1);
        let mut all = plan.batches[0].clone();
        all.sort_unstable();
        assert_eq!(all, (0..17).collect::<Vec<_>>());
        assert!(plan.tail.is_empty());
    }

    #[test]
    fn uniform_records_tail() {
        let mask = vec![true; 23];
        let s = BatchSchedule {
            batches: 5,
            placement: Placement::UniformShuffle,
        };
        let plan = schedule_batches(&mask, &s, 1).unwrap();
        assert_eq!(plan.batch_size(), 4);
        assert_eq!(plan.tail.len(), 3);
    }

    fn adversarial_mask() -> Vec<bool> {
        // 20000 samples, 8400 outliers: 20 batches at 0.9 plus 0.1 elsewhere.
        (0..20_000).map(|i| i >= 8_400).collect()
    }

    #[test]
    fn front_placement_hits_target_fractions() {
        let mask = adversarial_mask();
        let s = BatchSchedule {
            batches: 50,
            placement: Placement::AdversarialFront {
                fraction: 0.4,
                per_batch_lambda: 0.9,
            },
        };
        let plan = schedule_batches(&mask, &s, 9).unwrap();
        assert_eq!(plan.batch_size(), 400);
        for (k, &l) in plan.lambdas.iter().enumerate() {
            if k < 20 {
                assert!((l - 0.9).abs() <= 1.0 / 400.0);
            }
        }
        let placed: f64 = plan.lambdas.iter().map(|l| l * 400.0).sum();
        let placed_out = plan.batches.iter().flatten().filter(|&&i| !mask[i]).count();
        assert_eq!(placed.round() as usize, placed_out);
        assert_eq!(
            placed_out + plan.tail.iter().filter(|&&i| !mask[i]).count(),
            8_400
        );
    }

    #[test]
    fn scattered_placement_designates_a_random_subset() {
        let mask = adversarial_mask();
        let s = BatchSchedule {
            batches: 50,
            placement: Placement::AdversarialScattered {
                fraction: 0.4,
                per_batch_lambda: 0.9,
            },
        };
        let plan = schedule_batches(&mask, &s, 9).unwrap();
        let heavy: Vec<usize> = (0..50)
            .filter(|&k| (plan.lambdas[k] - 0.9).abs() <= 1.0 / 400.0)
            .collect();
        assert_eq!(heavy.len(), 20);
        assert_ne!(heavy, (0..20).collect::<Vec<_>>());
        assert_eq!(plan, schedule_batches(&mask, &s, 9).unwrap());
    }

    #[test]
    fn infeasible_placement_errors() {
        let mask: Vec<bool> = (0..1000).map(|i| i >= 100).collect();
        let s = BatchSchedule {
            batches: 10,
            placement: Placement::AdversarialFront {
                fraction: 0.5,
                per_batch_lambda: 0.9,
            },
        };
        assert!(matches!(
            schedule_batches(&mask, &s, 1),
            Err(OrlError::Schedule(_))
        ));
        let s = BatchSchedule {
            batches: 0,
            placement: Placement::UniformShuffle,
        };
        assert!(schedule_batches(&mask, &s, 1).is_err());
    }

    #[test]
    fn ceil_count_ignores_fuzz() {
        assert_eq!(ceil_count(0.1 * 30.0), 3);
        assert_eq!(ceil_count(2.2), 3);
        assert_eq!(ceil_count(0.0), 0);
    }

    #[test]
    fn derived_seeds_differ() {
        let s: Vec<u64> = (0..4)
            .flat_map(|a| (0..4).map(move |b| derive_seed(7, a, b)))
            .collect();
        let mut u = s.clone();
        u.sort_unstable();
        u.dedup();
        assert_eq!(u.len(), s.len());
        assert_eq!(derive_seed(7, 1, 2), derive_seed(7, 1, 2));
    }

    proptest::proptest! {
        #[test]
        fn conservation(n in 20usize..400, t in 1usize..20, lam in 0.0..0.5f64, seed in 0u64..100) {
            let mask: Vec<bool> = (0..n).map(|i| (i as f64) >= lam * n as f64).collect();
            for placement in [
                Placement::UniformShuffle,
                Placement::AdversarialFront { fraction: 0.2, per_batch_lambda: lam },
                Placement::AdversarialScattered { fraction: 0.2, per_batch_lambda: lam },
            ] {
                let s = BatchSchedule { batches: t.min(n), placement };
                let Ok(plan) = schedule_batches(&mask, &s, seed) else { continue };
                let mut seen: Vec<usize> = plan.batches.iter().flatten().chain(&plan.tail).copied().collect();
                seen.sort_unstable();
                proptest::prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
                proptest::prop_assert!(plan.batches.iter().all(|b| b.len() == n / t.min(n)));
            }
        }
    }
}
