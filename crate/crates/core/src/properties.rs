//! Monte Carlo checks of the structural properties of scatter functionals and
//! numerical replays of the uniqueness arguments for the covariance matrix.
//!
//! Every check draws its data from child streams of one [`Seed`], so a report
//! is a deterministic function of its inputs. Replicates run in parallel and
//! are reduced in replicate order.
//!
//! Estimator failures inside a check (a singular scatter, a zero row for
//! Tyler) do not abort the check: they are recorded as a failed report whose
//! details carry the error. Precondition violations are returned as errors.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::distributions::{sample, standardized_sum_spec, DistributionSpec, MarginalSpec, Seed};
use crate::error::{Error, Result};
use crate::linalg::{frobenius_distance, frobenius_distance_raw, Sample, SpdMatrix};
use crate::scatter::{map_indexed, ScatterSpec};

/// Tolerances shared by the checks and the acceptance suite.
pub mod thresholds {
    /// Exact sample-level identities.
    pub const ALGEBRAIC: f64 = 1e-10;
    /// Fixed-point identities: ten times the default solver tolerance.
    pub const SOLVER: f64 = 10.0 * crate::scatter::DEFAULT_TOL;
    /// Consistency-level agreement at n = 2·10⁴.
    pub const STATISTICAL: f64 = 0.05;
    pub const ADDITIVITY: f64 = 0.08;
    /// Random affine maps are drawn with condition number at most this.
    pub const MAX_CONDITION: f64 = 100.0;
}

/// Number of random `(A, b)` pairs per replicate in the equivariance checks.
pub const AFFINE_PAIRS: usize = 10;
/// Cap on the number of column pairs used by [`fae_expansion_experiment`].
pub const MAX_EXPANSION_PAIRS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Property {
    AffineEquivariance,
    Additivity,
    IndependenceProperty,
    JointIndependence,
    FullAffineEquivariance,
    NormalContinuity,
    FaeExpansion,
    SumExpansion,
    SubvectorConsistency,
    Proportionality,
}

impl Property {
    pub fn name(self) -> &'static str {
        match self {
            Property::AffineEquivariance => "affine_equivariance",
            Property::Additivity => "additivity",
            Property::IndependenceProperty => "independence_property",
            Property::JointIndependence => "joint_independence",
            Property::FullAffineEquivariance => "full_affine_equivariance",
            Property::NormalContinuity => "normal_continuity",
            Property::FaeExpansion => "fae_expansion",
            Property::SumExpansion => "sum_expansion",
            Property::SubvectorConsistency => "subvector_consistency",
            Property::Proportionality => "proportionality",
        }
    }
}

/// Outcome of one property check. `pass` holds exactly when
/// `statistic <= threshold`; a NaN statistic (estimator failure) never passes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyReport {
    pub property: Property,
    pub statistic: f64,
    pub threshold: f64,
    pub pass: bool,
    pub n: usize,
    pub replicates: usize,
    pub seed: Seed,
    pub details: BTreeMap<String, Value>,
}

impl PropertyReport {
    fn new(property: Property, statistic: f64, trial: &Trial) -> Self {
        Self {
            property,
            statistic,
            threshold: trial.threshold,
            pass: statistic <= trial.threshold,
            n: trial.n,
            replicates: trial.replicates,
            seed: trial.seed,
            details: BTreeMap::new(),
        }
    }

    fn failed(property: Property, trial: &Trial, err: &Error) -> Self {
        let mut r = Self::new(property, f64::NAN, trial);
        r.details.insert("error_kind".into(), json!(err.kind()));
        r.details.insert("error".into(), json!(err.to_string()));
        r
    }

    fn with(mut self, key: &str, value: Value) -> Self {
        self.details.insert(key.into(), value);
        self
    }

    /// Marks the report as a failure demonstration: the property is expected
    /// not to hold, so a large statistic is the evidence sought.
    pub fn expect_fail(self) -> Self {
        self.with("direction", json!("expected-fail"))
    }

    pub fn error_kind(&self) -> Option<&str> {
        self.details.get("error_kind").and_then(Value::as_str)
    }
}

/// Sample size, replicate count, seed and pass threshold of one check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trial {
    pub n: usize,
    pub replicates: usize,
    pub seed: Seed,
    pub threshold: f64,
}

impl Trial {
    pub fn new(n: usize, replicates: usize, seed: Seed, threshold: f64) -> Self {
        Self { n, replicates, seed, threshold }
    }

    fn validate(&self, min_n: usize) -> Result<()> {
        if self.n < min_n {
            return Err(Error::InvalidInput(format!("need n >= {min_n}, got {}", self.n)));
        }
        if self.replicates == 0 {
            return Err(Error::InvalidInput("need at least one replicate".into()));
        }
        if self.threshold.is_nan() || self.threshold < 0.0 {
            return Err(Error::InvalidInput(format!("threshold must be non-negative, got {}", self.threshold)));
        }
        Ok(())
    }

    /// Runs `f` once per replicate in parallel; results come back in replicate order.
    fn run<T: Send>(&self, f: impl Fn(usize, Seed) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
        let seed = self.seed;
        map_indexed(self.replicates, |r| f(r, seed.child(r as u64))).into_iter().collect()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn random_orthogonal(dim: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    g.qr().q()
}

/// Random full-row-rank `A ∈ ℝ^{k×p}` with singular values log-uniform in
/// `[1, 10]` (condition number at most 10), and `b ~ N(0, I_k)`.
pub fn random_affine(k: usize, p: usize, rng: &mut ChaCha8Rng) -> (DMatrix<f64>, DVector<f64>) {
    assert!(k >= 1 && k <= p, "random_affine needs 1 <= k <= p");
    let left = random_orthogonal(k, rng);
    let right = random_orthogonal(p, rng);
    let singular = DVector::from_fn(k, |_, _| 10f64.powf(rng.random::<f64>()));
    let a = left * DMatrix::from_diagonal(&singular) * right.columns(0, k).transpose();
    let b = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
    (a, b)
}

/// Relative equivariance defect `‖S(Ax+b) − A S(x) Aᵀ‖_F / ‖A S(x) Aᵀ‖_F`.
pub fn equivariance_statistic(transformed: &SpdMatrix, predicted: &SpdMatrix) -> Result<f64> {
    Ok(frobenius_distance(transformed, predicted)? / predicted.matrix().norm())
}

/// Frobenius distance after trace-`p` normalization of both sides.
pub fn proportionality_statistic(transformed: &SpdMatrix, predicted: &SpdMatrix) -> Result<f64> {
    frobenius_distance(&transformed.trace_normalized()?, &predicted.trace_normalized()?)
}

fn affine_sweep(
    property: Property,
    spec: &ScatterSpec,
    dist: &DistributionSpec,
    trial: &Trial,
    statistic: fn(&SpdMatrix, &SpdMatrix) -> Result<f64>,
) -> Result<PropertyReport> {
    let p = dist.validate()?;
    trial.validate(p + 1)?;
    let per_replicate = trial.run(|_, seed| {
        let x = sample(dist, trial.n, seed.child(0))?;
        let mut rng = seed.child(1).rng();
        let base = spec.estimate(&x)?;
        let mut worst = 0.0f64;
        for _ in 0..AFFINE_PAIRS {
            let (a, b) = random_affine(p, p, &mut rng);
            let moved = spec.estimate(&x.affine(&a, &b)?)?;
            worst = worst.max(statistic(&moved.matrix, &base.matrix.congruence(&a)?)?);
        }
        Ok(worst)
    });
    Ok(match per_replicate {
        Ok(v) => PropertyReport::new(property, max(&v), trial).with("per_replicate", json!(v)),
        Err(e) => PropertyReport::failed(property, trial, &e),
    }
    .with("functional", json!(spec.label())))
}

/// Affine equivariance: worst relative defect over random invertible `(A, b)`.
pub fn equivariance_check(spec: &ScatterSpec, dist: &DistributionSpec, trial: &Trial) -> Result<PropertyReport> {
    affine_sweep(Property::AffineEquivariance, spec, dist, trial, equivariance_statistic)
}

/// Equivariance up to proportionality, comparing trace-normalized matrices.
pub fn proportionality_check(spec: &ScatterSpec, dist: &DistributionSpec, trial: &Trial) -> Result<PropertyReport> {
    affine_sweep(Property::Proportionality, spec, dist, trial, proportionality_statistic)
}

/// Additivity: mean over replicates of `‖S(x + y) − S(x) − S(y)‖_F` for
/// independently drawn `x` and `y`.
pub fn additivity_check(
    spec: &ScatterSpec,
    dx: &DistributionSpec,
    dy: &DistributionSpec,
    trial: &Trial,
) -> Result<PropertyReport> {
    let p = dx.validate()?;
    let q = dy.validate()?;
    if p != q {
        return Err(Error::DimensionMismatch { expected: p, found: q });
    }
    trial.validate(1000)?;
    let per_replicate = trial.run(|_, seed| {
        let x = sample(dx, trial.n, seed.child(0))?;
        let y = sample(dy, trial.n, seed.child(1))?;
        let sx = spec.estimate(&x)?.matrix;
        let sy = spec.estimate(&y)?.matrix;
        let sxy = spec.estimate(&x.add(&y)?)?.matrix;
        frobenius_distance_raw(sxy.matrix(), &(sx.matrix() + sy.matrix()))
    });
    Ok(match per_replicate {
        Ok(v) => PropertyReport::new(Property::Additivity, mean(&v), trial).with("per_replicate", json!(v)),
        Err(e) => PropertyReport::failed(Property::Additivity, trial, &e),
    }
    .with("functional", json!(spec.label())))
}

/// Replicate-averaged estimates, or the first estimator error.
fn averaged_estimate(spec: &ScatterSpec, dist: &DistributionSpec, trial: &Trial) -> Result<DMatrix<f64>> {
    let mats = trial.run(|_, seed| {
        let x = sample(dist, trial.n, seed)?;
        Ok(spec.estimate(&x)?.matrix.into_matrix())
    })?;
    let mut acc = mats[0].clone() * 0.0;
    for m in &mats {
        acc += m;
    }
    Ok(acc / mats.len() as f64)
}

/// Independence property: `max |{S(x)}_jk|` over the designated pairs, with
/// `S(x)` averaged over replicates. Every pair must be certified independent
/// by the distribution; `None` designates all certified pairs.
pub fn independence_check(
    spec: &ScatterSpec,
    dist: &DistributionSpec,
    pairs: Option<&[(usize, usize)]>,
    trial: &Trial,
) -> Result<PropertyReport> {
    let p = dist.validate()?;
    trial.validate(p + 1)?;
    let pairs: Vec<(usize, usize)> = match pairs {
        Some(list) => {
            for &(j, k) in list {
                if !dist.certifies_independent(j, k)? {
                    return Err(Error::MissingCertificate(j, k));
                }
            }
            list.to_vec()
        }
        None => {
            let blocks = dist.independence_blocks()?;
            let all: Vec<_> = (0..p)
                .flat_map(|j| ((j + 1)..p).map(move |k| (j, k)))
                .filter(|&(j, k)| blocks[j] != blocks[k])
                .collect();
            if all.is_empty() {
                return Err(Error::MissingCertificate(0, p.min(2) - 1));
            }
            all
        }
    };
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no component pairs designated".into()));
    }
    Ok(match averaged_estimate(spec, dist, trial) {
        Ok(m) => {
            let stat = max(&pairs.iter().map(|&(j, k)| m[(j, k)].abs()).collect::<Vec<_>>());
            PropertyReport::new(Property::IndependenceProperty, stat, trial).with("pairs", json!(pairs))
        }
        Err(e) => PropertyReport::failed(Property::IndependenceProperty, trial, &e),
    }
    .with("functional", json!(spec.label())))
}

/// Joint independence property: largest off-diagonal magnitude of the
/// replicate-averaged `S(x)` for a distribution with mutually independent
/// components.
pub fn joint_independence_check(spec: &ScatterSpec, dist: &DistributionSpec, trial: &Trial) -> Result<PropertyReport> {
    let p = dist.validate()?;
    trial.validate(p + 1)?;
    if !dist.is_fully_independent()? {
        let blocks = dist.independence_blocks()?;
        let (j, k) = (0..p)
            .flat_map(|j| ((j + 1)..p).map(move |k| (j, k)))
            .find(|&(j, k)| blocks[j] == blocks[k])
            .unwrap_or((0, 0));
        return Err(Error::MissingCertificate(j, k));
    }
    Ok(match averaged_estimate(spec, dist, trial) {
        Ok(m) => {
            let avg = SpdMatrix::new(m)?;
            PropertyReport::new(Property::JointIndependence, avg.max_abs_off_diagonal(), trial)
        }
        Err(e) => PropertyReport::failed(Property::JointIndependence, trial, &e),
    }
    .with("functional", json!(spec.label())))
}

/// Full affine equivariance from dimension `p` to `k < p`: mean over
/// replicates of `‖S_k(Ax + b) − A S_p(x) Aᵀ‖_F` for random rank-`k` `A`.
pub fn full_equivariance_check(
    spec: &ScatterSpec,
    dist: &DistributionSpec,
    k: usize,
    trial: &Trial,
) -> Result<PropertyReport> {
    let p = dist.validate()?;
    if k == 0 || k >= p {
        return Err(Error::InvalidInput(format!("need 1 <= k < p, got k = {k}, p = {p}")));
    }
    trial.validate(p + 1)?;
    let per_replicate = trial.run(|_, seed| {
        let x = sample(dist, trial.n, seed.child(0))?;
        let (a, b) = random_affine(k, p, &mut seed.child(1).rng());
        full_equivariance_defect(spec, &x, &a, &b)
    });
    Ok(match per_replicate {
        Ok(v) => PropertyReport::new(Property::FullAffineEquivariance, mean(&v), trial).with("per_replicate", json!(v)),
        Err(e) => PropertyReport::failed(Property::FullAffineEquivariance, trial, &e),
    }
    .with("functional", json!(spec.label()))
    .with("k", json!(k))
    .with("p", json!(p)))
}

/// `‖S_k(Ax + b) − A S_p(x) Aᵀ‖_F` for one sample and one (possibly
/// rank-deficient) `A`; semidefinite values are admitted on the image side.
pub fn full_equivariance_defect(spec: &ScatterSpec, x: &Sample, a: &DMatrix<f64>, b: &DVector<f64>) -> Result<f64> {
    let full = spec.estimate(x)?.matrix;
    let image = spec.estimate_semidefinite(&x.affine(a, b)?)?.matrix;
    frobenius_distance_raw(image.matrix(), &(a * full.matrix() * a.transpose()))
}

/// Largest deviation between the entries of `S_p(x)` and the same family
/// applied to one- and two-dimensional marginals: `S₁(x_i)` on the diagonal,
/// `{S₂(x_i, x_j)}₁₂` off it. Averaged over replicates.
pub fn subvector_consistency_check(spec: &ScatterSpec, dist: &DistributionSpec, trial: &Trial) -> Result<PropertyReport> {
    let p = dist.validate()?;
    if p < 2 {
        return Err(Error::InvalidInput("subvector consistency needs p >= 2".into()));
    }
    trial.validate(p + 1)?;
    let per_replicate = trial.run(|_, seed| {
        let x = sample(dist, trial.n, seed)?;
        let full = spec.estimate(&x)?.matrix;
        let mut worst = 0.0f64;
        for i in 0..p {
            let s1 = spec.estimate(&x.columns(&[i])?)?.matrix;
            worst = worst.max((full.get(i, i) - s1.get(0, 0)).abs());
            for j in (i + 1)..p {
                let s2 = spec.estimate(&x.columns(&[i, j])?)?.matrix;
                worst = worst.max((full.get(i, j) - s2.get(0, 1)).abs());
            }
        }
        Ok(worst)
    });
    Ok(match per_replicate {
        Ok(v) => PropertyReport::new(Property::SubvectorConsistency, mean(&v), trial).with("per_replicate", json!(v)),
        Err(e) => PropertyReport::failed(Property::SubvectorConsistency, trial, &e),
    }
    .with("functional", json!(spec.label())))
}

/// The two ways of writing the first diagonal element for the construction
/// `y = (y₁ + y₂, z₂, …, z_p)` with independent standard normal padding:
/// `{S_p(y)}₁₁` directly, and `𝟙ᵀ S₂(y₁, y₂) 𝟙`. The statistic is their mean
/// absolute difference; both sides and the population value
/// `Σ₁₁ + 2Σ₁₂ + Σ₂₂` are stored in the details.
pub fn sum_expansion_check(
    spec: &ScatterSpec,
    joint: &DistributionSpec,
    p_total: usize,
    trial: &Trial,
) -> Result<PropertyReport> {
    let q = joint.validate()?;
    if q != 2 {
        return Err(Error::DimensionMismatch { expected: 2, found: q });
    }
    if p_total < 2 {
        return Err(Error::InvalidInput("sum expansion needs p_total >= 2".into()));
    }
    trial.validate(p_total + 1)?;
    let sigma = joint.true_covariance()?;
    let population = sigma.get(0, 0) + 2.0 * sigma.get(0, 1) + sigma.get(1, 1);
    let padding = DistributionSpec::standard_normal(p_total - 1);
    let sides = trial.run(|_, seed| {
        let pair = sample(joint, trial.n, seed.child(0))?;
        let z = sample(&padding, trial.n, seed.child(1))?;
        let summed = pair.affine(&DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), &DVector::zeros(1))?;
        let y = summed.hstack(&z)?;
        let direct = spec.estimate(&y)?.matrix.get(0, 0);
        let s2 = spec.estimate(&pair)?.matrix;
        let expanded = s2.get(0, 0) + 2.0 * s2.get(0, 1) + s2.get(1, 1);
        Ok((direct, expanded))
    });
    Ok(match sides {
        Ok(v) => {
            let diffs: Vec<f64> = v.iter().map(|(a, b)| (a - b).abs()).collect();
            let direct: Vec<f64> = v.iter().map(|s| s.0).collect();
            let expanded: Vec<f64> = v.iter().map(|s| s.1).collect();
            PropertyReport::new(Property::SumExpansion, mean(&diffs), trial)
                .with("direct", json!(mean(&direct)))
                .with("expanded", json!(mean(&expanded)))
        }
        Err(e) => PropertyReport::failed(Property::SumExpansion, trial, &e),
    }
    .with("population", json!(population))
    .with("functional", json!(spec.label()))
    .with("p_total", json!(p_total)))
}

/// One point of a normal-continuity curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuityPoint {
    pub n: usize,
    /// Mean over replicates of `‖S − Σ‖_F`.
    pub error: f64,
}

/// Evaluates `S` on `m` draws of `(1/√n) Σ xᵢ` for each `n` in `n_grid` and
/// records the Frobenius distance to the population covariance `Σ`.
pub fn normal_continuity_experiment(
    spec: &ScatterSpec,
    dist: &DistributionSpec,
    n_grid: &[usize],
    m: usize,
    replicates: usize,
    seed: Seed,
) -> Result<Vec<ContinuityPoint>> {
    if n_grid.is_empty() || n_grid.contains(&0) || n_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidInput("n_grid must be non-empty, positive and strictly ascending".into()));
    }
    if m < 1000 || replicates == 0 {
        return Err(Error::InvalidInput(format!("need m >= 1000 and replicates >= 1, got {m}, {replicates}")));
    }
    let sigma = dist.true_covariance()?;
    n_grid
        .iter()
        .enumerate()
        .map(|(g, &n)| {
            let law = standardized_sum_spec(dist, n);
            let grid_seed = seed.child(g as u64);
            let errors = map_indexed(replicates, |r| -> Result<f64> {
                let x = sample(&law, m, grid_seed.child(r as u64))?;
                frobenius_distance(&spec.estimate(&x)?.matrix, &sigma)
            })
            .into_iter()
            .collect::<Result<Vec<f64>>>()?;
            Ok(ContinuityPoint { n, error: mean(&errors) })
        })
        .collect()
}

/// Report form of [`normal_continuity_experiment`]: the statistic is the error
/// at the largest `n`; the curve and the last/first error ratio go in the details.
pub fn normal_continuity_check(
    spec: &ScatterSpec,
    dist: &DistributionSpec,
    n_grid: &[usize],
    trial: &Trial,
) -> Result<PropertyReport> {
    dist.validate()?;
    match normal_continuity_experiment(spec, dist, n_grid, trial.n, trial.replicates, trial.seed) {
        Ok(curve) => {
            let first = curve[0].error;
            let last = curve[curve.len() - 1].error;
            Ok(PropertyReport::new(Property::NormalContinuity, last, trial)
                .with("curve", json!(curve))
                .with("ratio_last_first", json!(last / first))
                .with("functional", json!(spec.label())))
        }
        Err(e @ Error::InvalidInput(_)) => Err(e),
        Err(e) => Ok(PropertyReport::failed(Property::NormalContinuity, trial, &e).with("functional", json!(spec.label()))),
    }
}

/// Numerical form of the expansion
/// `S₁((1/√n) Σ yᵢ) = mean S₁(yᵢ) + (n − 1) · mean {S₂(yᵢ, yⱼ)}₁₂`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaeExpansion {
    pub n: usize,
    pub m: usize,
    /// `S₁` of the standardized sum of the `n` coordinates.
    pub lhs: f64,
    /// Mean of `S₁(yᵢ)` over the coordinates.
    pub s1_hat: f64,
    /// Mean of `{S₂(yᵢ, yⱼ)}₁₂` over coordinate pairs.
    pub c_hat: f64,
    /// `|lhs − s1_hat − (n − 1) c_hat|`.
    pub residual: f64,
    pub pairs: usize,
}

/// Draws `m` i.i.d. vectors `y = (y₁, …, yₙ)` with i.i.d. coordinates from
/// `marginal` and evaluates both sides of the expansion on the same draws.
/// Uses all coordinate pairs when there are at most [`MAX_EXPANSION_PAIRS`],
/// otherwise a balanced cyclic subset.
pub fn fae_expansion_experiment(
    spec: &ScatterSpec,
    marginal: &MarginalSpec,
    n: usize,
    m: usize,
    seed: Seed,
) -> Result<FaeExpansion> {
    marginal.validate()?;
    if n == 0 || m < 1000 {
        return Err(Error::InvalidInput(format!("need n >= 1 and m >= 1000, got {n}, {m}")));
    }
    let y = sample(&DistributionSpec::product(vec![marginal.clone(); n]), m, seed)?;
    let ones = DMatrix::from_element(1, n, 1.0 / (n as f64).sqrt());
    let lhs = spec.estimate(&y.affine(&ones, &DVector::zeros(1))?)?.matrix.get(0, 0);

    let diag = map_indexed(n, |i| -> Result<f64> { Ok(spec.estimate(&y.columns(&[i])?)?.matrix.get(0, 0)) })
        .into_iter()
        .collect::<Result<Vec<f64>>>()?;
    let s1_hat = mean(&diag);

    let all_pairs = n * (n - 1) / 2;
    let pairs: Vec<(usize, usize)> = if all_pairs <= MAX_EXPANSION_PAIRS {
        (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).collect()
    } else {
        let shifts = (MAX_EXPANSION_PAIRS / n).max(1);
        (1..=shifts).flat_map(|k| (0..n).map(move |i| (i, (i + k) % n))).collect()
    };
    let c_hat = if pairs.is_empty() {
        0.0
    } else {
        let off = map_indexed(pairs.len(), |t| -> Result<f64> {
            let (i, j) = pairs[t];
            Ok(spec.estimate(&y.columns(&[i, j])?)?.matrix.get(0, 1))
        })
        .into_iter()
        .collect::<Result<Vec<f64>>>()?;
        mean(&off)
    };
    let residual = (lhs - s1_hat - (n as f64 - 1.0) * c_hat).abs();
    Ok(FaeExpansion { n, m, lhs, s1_hat, c_hat, residual, pairs: pairs.len() })
}

/// Report form of [`fae_expansion_experiment`] with the residual as statistic.
pub fn fae_expansion_check(
    spec: &ScatterSpec,
    marginal: &MarginalSpec,
    n: usize,
    trial: &Trial,
) -> Result<PropertyReport> {
    let m = trial.n;
    match fae_expansion_experiment(spec, marginal, n, m, trial.seed) {
        Ok(e) => Ok(PropertyReport::new(Property::FaeExpansion, e.residual, trial)
            .with("expansion", json!(e))
            .with("marginal_variance", json!(marginal.variance()))
            .with("functional", json!(spec.label()))),
        Err(e @ Error::InvalidInput(_)) => Err(e),
        Err(e) => Ok(PropertyReport::failed(Property::FaeExpansion, trial, &e).with("functional", json!(spec.label()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(threshold: f64) -> Trial {
        Trial::new(300, 2, Seed(11), threshold)
    }

    #[test]
    fn random_affine_is_well_conditioned() {
        let mut rng = Seed(3).rng();
        for (k, p) in [(1, 3), (2, 4), (3, 3)] {
            let (a, b) = random_affine(k, p, &mut rng);
            assert_eq!(a.shape(), (k, p));
            assert_eq!(b.len(), k);
            let sv = a.clone().svd(false, false).singular_values;
            let cond = sv.max() / sv.min();
            assert!(cond <= thresholds::MAX_CONDITION, "{cond}");
        }
    }

    #[test]
    fn cov_equivariance_is_exact() {
        let r = equivariance_check(&ScatterSpec::cov(), &DistributionSpec::laplace_product(3, 1.0), &small(thresholds::ALGEBRAIC)).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn tyler_fails_plain_equivariance_but_is_proportional() {
        let dist = DistributionSpec::laplace_product(3, 1.0);
        let plain = equivariance_check(&ScatterSpec::tyler(), &dist, &small(thresholds::SOLVER)).unwrap();
        assert!(plain.statistic > 0.1, "{plain:?}");
        let prop = proportionality_check(&ScatterSpec::tyler(), &dist, &small(thresholds::SOLVER)).unwrap();
        assert!(prop.pass, "{prop:?}");
    }

    #[test]
    fn proportionality_negative_control() {
        let m = SpdMatrix::from_row_slice(2, &[2.0, 0.9, 0.9, 1.0]).unwrap();
        let mut zeroed = m.matrix().clone();
        zeroed[(0, 1)] = 0.0;
        zeroed[(1, 0)] = 0.0;
        let stat = proportionality_statistic(&SpdMatrix::new(zeroed).unwrap(), &m).unwrap();
        assert!(stat > thresholds::SOLVER);
        assert_eq!(proportionality_statistic(&m, &m.scaled(3.0).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn reports_are_deterministic() {
        let dist = DistributionSpec::laplace_product(2, 1.0);
        let trial = Trial::new(1000, 3, Seed(5), 0.08);
        let a = additivity_check(&ScatterSpec::t_m(3.0), &dist, &DistributionSpec::standard_normal(2), &trial).unwrap();
        let b = additivity_check(&ScatterSpec::t_m(3.0), &dist, &DistributionSpec::standard_normal(2), &trial).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn degenerate_summand_is_recorded() {
        let zero = DistributionSpec::affine(&DMatrix::zeros(2, 2), &DVector::zeros(2), DistributionSpec::standard_normal(2));
        let trial = Trial::new(1000, 1, Seed(1), 0.08);
        let r = additivity_check(&ScatterSpec::cov(), &DistributionSpec::standard_normal(2), &zero, &trial).unwrap();
        assert!(!r.pass);
        assert!(r.statistic.is_nan());
        assert_eq!(r.error_kind(), Some("SingularScatter"));
    }

    #[test]
    fn missing_certificate() {
        let mix = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let dist = DistributionSpec::affine(&mix, &DVector::zeros(2), DistributionSpec::laplace_product(2, 1.0));
        let trial = small(0.05);
        assert!(matches!(
            independence_check(&ScatterSpec::cov(), &dist, Some(&[(0, 1)]), &trial),
            Err(Error::MissingCertificate(0, 1))
        ));
        assert!(matches!(independence_check(&ScatterSpec::cov(), &dist, None, &trial), Err(Error::MissingCertificate(..))));
        assert!(matches!(joint_independence_check(&ScatterSpec::cov(), &dist, &trial), Err(Error::MissingCertificate(0, 1))));
    }

    #[test]
    fn full_equivariance_rank_deficient_image() {
        let x = sample(&DistributionSpec::laplace_product(3, 1.0), 500, Seed(2)).unwrap();
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 0.5, 0.0, 0.0, 0.0]);
        let d = full_equivariance_defect(&ScatterSpec::cov(), &x, &a, &DVector::zeros(2)).unwrap();
        assert!(d <= thresholds::ALGEBRAIC, "{d}");
        assert!(full_equivariance_defect(&ScatterSpec::t_m(3.0), &x, &a, &DVector::zeros(2)).is_err());
    }

    #[test]
    fn full_equivariance_preconditions() {
        let dist = DistributionSpec::laplace_product(3, 1.0);
        assert!(full_equivariance_check(&ScatterSpec::cov(), &dist, 0, &small(0.05)).is_err());
        assert!(full_equivariance_check(&ScatterSpec::cov(), &dist, 3, &small(0.05)).is_err());
    }

    #[test]
    fn cov_subvector_consistency_is_exact() {
        let r = subvector_consistency_check(&ScatterSpec::cov(), &DistributionSpec::laplace_product(4, 1.0), &small(thresholds::ALGEBRAIC)).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn fae_expansion_single_term() {
        let e = fae_expansion_experiment(&ScatterSpec::cov(), &MarginalSpec::Laplace { scale: 1.0 }, 1, 1000, Seed(4)).unwrap();
        assert_eq!(e.pairs, 0);
        assert_eq!(e.c_hat, 0.0);
        assert_eq!(e.lhs, e.s1_hat);
    }

    #[test]
    fn fae_expansion_is_an_identity_for_cov() {
        let e = fae_expansion_experiment(&ScatterSpec::cov(), &MarginalSpec::CenteredExponential { rate: 1.0 }, 8, 1000, Seed(4)).unwrap();
        assert_eq!(e.pairs, 28);
        assert!(e.residual <= 1e-12, "{e:?}");
    }

    #[test]
    fn sum_expansion_anticorrelated_records_singularity() {
        let flip = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let joint = DistributionSpec::affine(&flip, &DVector::zeros(2), DistributionSpec::standard_normal(1));
        let r = sum_expansion_check(&ScatterSpec::cov(), &joint, 3, &Trial::new(500, 1, Seed(1), 0.1)).unwrap();
        assert!(!r.pass);
        assert_eq!(r.error_kind(), Some("SingularScatter"));
        assert_eq!(r.details["population"], json!(0.0));
    }

    #[test]
    fn continuity_grid_validation() {
        let d = DistributionSpec::laplace_product(2, 1.0);
        assert!(normal_continuity_experiment(&ScatterSpec::cov(), &d, &[4, 1], 1000, 1, Seed(0)).is_err());
        assert!(normal_continuity_experiment(&ScatterSpec::cov(), &d, &[1, 4], 999, 1, Seed(0)).is_err());
        assert!(normal_continuity_experiment(&ScatterSpec::cov(), &d, &[], 1000, 1, Seed(0)).is_err());
    }

    #[test]
    fn report_pass_matches_threshold() {
        let r = PropertyReport::new(Property::Additivity, 0.1, &small(0.05));
        assert!(!r.pass);
        let r = PropertyReport::new(Property::Additivity, 0.05, &small(0.05));
        assert!(r.pass);
        let nan = PropertyReport::new(Property::Additivity, f64::NAN, &small(0.05));
        assert!(!nan.pass);
        assert_eq!(r.clone().expect_fail().details["direction"], json!("expected-fail"));
    }
}
