//! Scatter functionals on samples: covariance, Cov4, M-functionals with
//! t or Huber weights, Tyler's shape matrix, symmetrized wrappers and the
//! minimum covariance determinant.
//!
//! Every functional reads nothing but its [`Sample`] argument. Values are
//! standardized so that the functional returns `I_p` at the standard normal:
//! the raw value is divided by a calibration constant which is analytic where
//! known (Cov4: `p + 2`, symmetrized functionals: `2`) and estimated by
//! [`calibrate_gaussian`] otherwise.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::distributions::{sample, DistributionSpec, Seed};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_factor, second_moment, weighted_scatter, whitened_norms, Sample, SpdMatrix};

pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_ITER: usize = 500;
/// Largest difference sample materialized by [`symmetrize`] before switching
/// to a balanced cyclic subset of pairs.
pub const DEFAULT_MAX_DIFFERENCES: usize = 250_000;
/// MCD enumerates every subset up to this sample size.
pub const MCD_EXHAUSTIVE_MAX_N: usize = 25;
pub const MCD_DEFAULT_STARTS: usize = 10;
const MCD_MAX_CSTEPS: usize = 200;

/// Weight function `w(d)` of an M-functional, `d` the squared Mahalanobis distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightSpec {
    /// `w(d) = (p + ν) / (ν + d)`; the multivariate t maximum-likelihood weight.
    StudentT { nu: f64 },
    /// `w(d) = min(1, k / d)` with `k` a squared-distance threshold.
    Huber { threshold: f64 },
}

impl WeightSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            WeightSpec::StudentT { nu } => nu > 0.0 && nu.is_finite(),
            WeightSpec::Huber { threshold } => threshold > 0.0 && threshold.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid weight parameters: {self:?}")))
        }
    }

    pub fn weight(&self, d: f64, p: usize) -> f64 {
        match *self {
            WeightSpec::StudentT { nu } => (p as f64 + nu) / (nu + d),
            WeightSpec::Huber { threshold } => {
                if d <= threshold {
                    1.0
                } else {
                    threshold / d
                }
            }
        }
    }
}

/// Gaussian-consistency divisor, either shared by every dimension or stored
/// per dimension (a family `{S_k}` is standardized separately in each `k`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, try_from = "serde_json::Value")]
pub enum Calibration {
    Uniform(f64),
    PerDimension(BTreeMap<usize, f64>),
}

impl TryFrom<serde_json::Value> for Calibration {
    type Error = String;

    fn try_from(v: serde_json::Value) -> std::result::Result<Self, String> {
        match v {
            serde_json::Value::Number(n) => n.as_f64().map(Calibration::Uniform).ok_or("calibration is not a number".into()),
            serde_json::Value::Object(map) => map
                .into_iter()
                .map(|(k, v)| {
                    let p = k.parse::<usize>().map_err(|_| format!("calibration key {k:?} is not a dimension"))?;
                    let c = v.as_f64().ok_or(format!("calibration for p = {p} is not a number"))?;
                    Ok((p, c))
                })
                .collect::<std::result::Result<BTreeMap<_, _>, String>>()
                .map(Calibration::PerDimension),
            other => Err(format!("calibration must be a number or a map of dimension to constant, got {other}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScatterFamily {
    Cov,
    Cov4,
    MScatter { weight: WeightSpec, tol: f64, max_iter: usize },
    TylerShape { tol: f64, max_iter: usize },
    Symmetrized { inner: Box<ScatterSpec>, max_differences: usize },
    Mcd { alpha: f64, starts: usize, seed: Seed },
}

/// A scatter functional: the family with its parameters and calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawScatterSpec", into = "RawScatterSpec")]
pub struct ScatterSpec {
    pub family: ScatterFamily,
    pub calibration: Option<Calibration>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum FamilyTag {
    Cov,
    Cov4,
    MScatter,
    TylerShape,
    Symmetrized,
    Mcd,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScatterSpec {
    family: FamilyTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight: Option<WeightSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    inner: Option<Box<ScatterSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    starts: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    max_iter: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    max_differences: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    calibration: Option<Calibration>,
}

impl TryFrom<RawScatterSpec> for ScatterSpec {
    type Error = String;

    fn try_from(raw: RawScatterSpec) -> std::result::Result<Self, String> {
        let unexpected = |field: &str, present: bool| -> std::result::Result<(), String> {
            if present {
                Err(format!("field `{field}` is not valid for family {:?}", raw.family))
            } else {
                Ok(())
            }
        };
        let iterative = matches!(raw.family, FamilyTag::MScatter | FamilyTag::TylerShape);
        unexpected("tol", !iterative && raw.tol.is_some())?;
        unexpected("max_iter", !iterative && raw.max_iter.is_some())?;
        unexpected("weight", raw.family != FamilyTag::MScatter && raw.weight.is_some())?;
        unexpected("inner", raw.family != FamilyTag::Symmetrized && raw.inner.is_some())?;
        unexpected("max_differences", raw.family != FamilyTag::Symmetrized && raw.max_differences.is_some())?;
        let mcd = raw.family == FamilyTag::Mcd;
        unexpected("alpha", !mcd && raw.alpha.is_some())?;
        unexpected("starts", !mcd && raw.starts.is_some())?;
        unexpected("seed", !mcd && raw.seed.is_some())?;

        let tol = raw.tol.unwrap_or(DEFAULT_TOL);
        let max_iter = raw.max_iter.unwrap_or(DEFAULT_MAX_ITER);
        let family = match raw.family {
            FamilyTag::Cov => ScatterFamily::Cov,
            FamilyTag::Cov4 => ScatterFamily::Cov4,
            FamilyTag::MScatter => ScatterFamily::MScatter {
                weight: raw.weight.ok_or("m_scatter requires `weight`")?,
                tol,
                max_iter,
            },
            FamilyTag::TylerShape => ScatterFamily::TylerShape { tol, max_iter },
            FamilyTag::Symmetrized => ScatterFamily::Symmetrized {
                inner: raw.inner.ok_or("symmetrized requires `inner`")?,
                max_differences: raw.max_differences.unwrap_or(DEFAULT_MAX_DIFFERENCES),
            },
            FamilyTag::Mcd => ScatterFamily::Mcd {
                alpha: raw.alpha.ok_or("mcd requires `alpha`")?,
                starts: raw.starts.unwrap_or(MCD_DEFAULT_STARTS),
                seed: Seed(raw.seed.unwrap_or(0)),
            },
        };
        let spec = ScatterSpec { family, calibration: raw.calibration };
        spec.validate().map_err(|e| e.to_string())?;
        Ok(spec)
    }
}

impl From<ScatterSpec> for RawScatterSpec {
    fn from(spec: ScatterSpec) -> Self {
        let mut raw = RawScatterSpec {
            family: FamilyTag::Cov,
            weight: None,
            inner: None,
            alpha: None,
            starts: None,
            seed: None,
            tol: None,
            max_iter: None,
            max_differences: None,
            calibration: spec.calibration,
        };
        match spec.family {
            ScatterFamily::Cov => {}
            ScatterFamily::Cov4 => raw.family = FamilyTag::Cov4,
            ScatterFamily::MScatter { weight, tol, max_iter } => {
                raw.family = FamilyTag::MScatter;
                raw.weight = Some(weight);
                raw.tol = Some(tol);
                raw.max_iter = Some(max_iter);
            }
            ScatterFamily::TylerShape { tol, max_iter } => {
                raw.family = FamilyTag::TylerShape;
                raw.tol = Some(tol);
                raw.max_iter = Some(max_iter);
            }
            ScatterFamily::Symmetrized { inner, max_differences } => {
                raw.family = FamilyTag::Symmetrized;
                raw.inner = Some(inner);
                raw.max_differences = Some(max_differences);
            }
            ScatterFamily::Mcd { alpha, starts, seed } => {
                raw.family = FamilyTag::Mcd;
                raw.alpha = Some(alpha);
                raw.starts = Some(starts);
                raw.seed = Some(seed.0);
            }
        }
        raw
    }
}

/// The value `S(x)` of a functional on a sample, with solver diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatterEstimate {
    pub matrix: SpdMatrix,
    pub iterations: usize,
    pub converged: bool,
    pub functional: ScatterSpec,
}

impl ScatterEstimate {
    /// Turns a non-converged fixed point into [`Error::NoConvergence`].
    pub fn require_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NoConvergence { iterations: self.iterations, residual: f64::NAN })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Centering {
    SampleMean,
    /// Data is already centro-symmetric (pairwise differences).
    None,
}

struct RawValue {
    matrix: DMatrix<f64>,
    iterations: usize,
    converged: bool,
}

impl RawValue {
    fn direct(matrix: DMatrix<f64>) -> Self {
        Self { matrix, iterations: 0, converged: true }
    }
}

impl ScatterSpec {
    pub fn new(family: ScatterFamily) -> Self {
        Self { family, calibration: None }
    }

    pub fn cov() -> Self {
        Self::new(ScatterFamily::Cov)
    }

    pub fn cov4() -> Self {
        Self::new(ScatterFamily::Cov4)
    }

    pub fn m_scatter(weight: WeightSpec) -> Self {
        Self::new(ScatterFamily::MScatter { weight, tol: DEFAULT_TOL, max_iter: DEFAULT_MAX_ITER })
    }

    /// M-functional with Student t weights.
    pub fn t_m(nu: f64) -> Self {
        Self::m_scatter(WeightSpec::StudentT { nu })
    }

    pub fn tyler() -> Self {
        Self::new(ScatterFamily::TylerShape { tol: DEFAULT_TOL, max_iter: DEFAULT_MAX_ITER })
    }

    pub fn symmetrized(inner: ScatterSpec) -> Self {
        Self::new(ScatterFamily::Symmetrized { inner: Box::new(inner), max_differences: DEFAULT_MAX_DIFFERENCES })
    }

    pub fn mcd(alpha: f64, starts: usize, seed: Seed) -> Self {
        Self::new(ScatterFamily::Mcd { alpha, starts, seed })
    }

    pub fn with_calibration(mut self, calibration: Calibration) -> Self {
        self.calibration = Some(calibration);
        self
    }

    /// Records `constant` as the calibration for dimension `p`, keeping any
    /// constants already stored for other dimensions.
    pub fn with_dimension_calibration(mut self, p: usize, constant: f64) -> Self {
        let mut map = match self.calibration.take() {
            Some(Calibration::PerDimension(map)) => map,
            _ => BTreeMap::new(),
        };
        map.insert(p, constant);
        self.calibration = Some(Calibration::PerDimension(map));
        self
    }

    /// Short family label, e.g. `symmetrized(m_scatter)`.
    pub fn label(&self) -> String {
        match &self.family {
            ScatterFamily::Cov => "cov".into(),
            ScatterFamily::Cov4 => "cov4".into(),
            ScatterFamily::MScatter { .. } => "m_scatter".into(),
            ScatterFamily::TylerShape { .. } => "tyler_shape".into(),
            ScatterFamily::Symmetrized { inner, .. } => format!("symmetrized({})", inner.label()),
            ScatterFamily::Mcd { .. } => "mcd".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.family {
            ScatterFamily::Cov | ScatterFamily::Cov4 => {}
            ScatterFamily::MScatter { weight, tol, max_iter } => {
                weight.validate()?;
                validate_solver(*tol, *max_iter)?;
            }
            ScatterFamily::TylerShape { tol, max_iter } => validate_solver(*tol, *max_iter)?,
            ScatterFamily::Symmetrized { inner, max_differences } => {
                inner.validate()?;
                if *max_differences < 2 {
                    return Err(Error::InvalidInput("max_differences must be at least 2".into()));
                }
            }
            ScatterFamily::Mcd { alpha, starts, .. } => {
                if !(*alpha > 0.0 && *alpha <= 1.0) {
                    return Err(Error::InvalidInput(format!("mcd alpha must lie in (0, 1], got {alpha}")));
                }
                if *starts == 0 {
                    return Err(Error::InvalidInput("mcd needs at least one start".into()));
                }
            }
        }
        match &self.calibration {
            Some(Calibration::Uniform(c)) if !(*c > 0.0 && c.is_finite()) => {
                Err(Error::InvalidInput(format!("calibration must be positive, got {c}")))
            }
            Some(Calibration::PerDimension(map)) if map.iter().any(|(p, c)| *p == 0 || !(*c > 0.0 && c.is_finite())) => {
                Err(Error::InvalidInput("per-dimension calibration constants must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    /// Closed-form calibration where one exists.
    pub fn analytic_calibration(&self, p: usize) -> Option<f64> {
        match &self.family {
            ScatterFamily::Cov => Some(1.0),
            ScatterFamily::Cov4 => Some(p as f64 + 2.0),
            ScatterFamily::Symmetrized { .. } => Some(2.0),
            // trace-p normalization already returns I_p at sphericity
            ScatterFamily::TylerShape { .. } => Some(1.0),
            ScatterFamily::MScatter { .. } | ScatterFamily::Mcd { .. } => None,
        }
    }

    /// Divisor applied to the raw value in dimension `p`.
    pub fn calibration_for(&self, p: usize) -> f64 {
        let fallback = || self.analytic_calibration(p).unwrap_or(1.0);
        match &self.calibration {
            Some(Calibration::Uniform(c)) => *c,
            Some(Calibration::PerDimension(map)) => map.get(&p).copied().unwrap_or_else(fallback),
            None => fallback(),
        }
    }

    /// Standardized value `S(x)`.
    pub fn estimate(&self, s: &Sample) -> Result<ScatterEstimate> {
        self.finish(s.p(), self.raw_value(s, Centering::SampleMean)?, self.calibration_for(s.p()), true)
    }

    /// Value before division by the calibration constant.
    pub fn estimate_raw(&self, s: &Sample) -> Result<ScatterEstimate> {
        self.finish(s.p(), self.raw_value(s, Centering::SampleMean)?, 1.0, true)
    }

    /// Like [`ScatterSpec::estimate`] but admits a singular value. Only the
    /// covariance extends to semidefinite values (rank-deficient images); every
    /// other family still requires definiteness.
    pub fn estimate_semidefinite(&self, s: &Sample) -> Result<ScatterEstimate> {
        match self.family {
            ScatterFamily::Cov => {
                let raw = RawValue::direct(second_moment(&s.centered()));
                self.finish(s.p(), raw, self.calibration_for(s.p()), false)
            }
            _ => self.estimate(s),
        }
    }

    fn finish(&self, p: usize, raw: RawValue, divisor: f64, definite: bool) -> Result<ScatterEstimate> {
        let m = raw.matrix / divisor;
        let matrix = if definite {
            SpdMatrix::new_definite(m).map_err(|e| Error::SingularScatter(format!("{}: {e}", self.label())))?
        } else {
            SpdMatrix::new(m)?
        };
        debug_assert_eq!(matrix.dim(), p);
        Ok(ScatterEstimate { matrix, iterations: raw.iterations, converged: raw.converged, functional: self.clone() })
    }

    fn raw_value(&self, s: &Sample, centering: Centering) -> Result<RawValue> {
        self.validate()?;
        let x = match centering {
            Centering::SampleMean => s.centered(),
            Centering::None => s.data().clone(),
        };
        match &self.family {
            ScatterFamily::Cov => {
                require_rows(s, 2)?;
                Ok(RawValue::direct(definite_second_moment(&x)?))
            }
            ScatterFamily::Cov4 => {
                require_rows(s, 2)?;
                Ok(RawValue::direct(cov4_raw(&x)?))
            }
            ScatterFamily::MScatter { weight, tol, max_iter } => {
                require_rows(s, s.p() + 1)?;
                m_iterate(&x, weight, *tol, *max_iter)
            }
            ScatterFamily::TylerShape { tol, max_iter } => {
                require_rows(s, s.p() + 1)?;
                tyler_iterate(&x, *tol, *max_iter)
            }
            ScatterFamily::Symmetrized { inner, max_differences } => {
                let diffs = Sample::new(difference_rows(s.data(), *max_differences))?;
                let v = inner.raw_value(&diffs, Centering::None)?;
                let c = inner.calibration_for(s.p());
                Ok(RawValue { matrix: v.matrix / c, iterations: v.iterations, converged: v.converged })
            }
            ScatterFamily::Mcd { alpha, starts, seed } => {
                let fit = mcd_fit(s, *alpha, *starts, *seed)?;
                Ok(RawValue::direct(fit.raw))
            }
        }
    }

    /// Whitened change produced by one more fixed-point step from `estimate`
    /// (zero for the non-iterative families).
    pub fn fixed_point_residual(&self, s: &Sample, estimate: &ScatterEstimate) -> Result<f64> {
        let c = self.calibration_for(s.p());
        let v = estimate.matrix.matrix() * c;
        let x = s.centered();
        match &self.family {
            ScatterFamily::MScatter { weight, .. } => {
                let next = m_step(&x, &v, weight)?;
                whitened_change(&v, &next)
            }
            ScatterFamily::TylerShape { .. } => {
                let next = tyler_step(&x, &v)?;
                whitened_change(&v, &next)
            }
            _ => Ok(0.0),
        }
    }
}

fn validate_solver(tol: f64, max_iter: usize) -> Result<()> {
    if !(tol > 0.0 && tol.is_finite()) || max_iter == 0 {
        return Err(Error::InvalidInput(format!("solver needs tol > 0 and max_iter > 0, got {tol}, {max_iter}")));
    }
    Ok(())
}

fn require_rows(s: &Sample, min: usize) -> Result<()> {
    if s.n() < min {
        return Err(Error::InvalidInput(format!("need at least {min} rows, got {}", s.n())));
    }
    Ok(())
}

fn definite(m: DMatrix<f64>, what: &str) -> Result<SpdMatrix> {
    SpdMatrix::new_definite(m).map_err(|e| Error::SingularScatter(format!("{what}: {e}")))
}

fn definite_second_moment(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = second_moment(x);
    definite(m.clone(), "covariance")?;
    Ok(m)
}

fn cov4_raw(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let c = definite(second_moment(x), "covariance")?;
    let d = whitened_norms(x, &cholesky_factor(&c)?);
    Ok(weighted_scatter(x, &d))
}

/// `‖L⁻¹ (next − current) L⁻ᵀ‖_F` with `current = L Lᵀ`; invariant under
/// `current, next ↦ A · A ᵀ` for invertible `A`.
fn whitened_change(current: &DMatrix<f64>, next: &DMatrix<f64>) -> Result<f64> {
    let chol = cholesky_factor(&definite(current.clone(), "fixed-point iterate")?)?;
    let l = chol.l_dirty();
    let mut half = next - current;
    l.solve_lower_triangular_mut(&mut half);
    let mut full = half.transpose();
    l.solve_lower_triangular_mut(&mut full);
    Ok(full.norm())
}

fn m_step(x: &DMatrix<f64>, v: &DMatrix<f64>, weight: &WeightSpec) -> Result<DMatrix<f64>> {
    let p = x.ncols();
    let chol = cholesky_factor(&definite(v.clone(), "m_scatter iterate")?)?;
    let w: Vec<f64> = whitened_norms(x, &chol).into_iter().map(|d| weight.weight(d, p)).collect();
    Ok(weighted_scatter(x, &w))
}

fn m_iterate(x: &DMatrix<f64>, weight: &WeightSpec, tol: f64, max_iter: usize) -> Result<RawValue> {
    let mut v = definite_second_moment(x)?;
    for it in 1..=max_iter {
        let next = m_step(x, &v, weight)?;
        let change = whitened_change(&v, &next)?;
        v = next;
        if change <= tol {
            return Ok(RawValue { matrix: v, iterations: it, converged: true });
        }
    }
    Ok(RawValue { matrix: v, iterations: max_iter, converged: false })
}

fn trace_normalize(m: DMatrix<f64>) -> DMatrix<f64> {
    let p = m.nrows() as f64;
    let tr = m.trace();
    m * (p / tr)
}

fn tyler_step(x: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = x.ncols() as f64;
    let chol = cholesky_factor(&definite(v.clone(), "tyler iterate")?)?;
    let w: Vec<f64> = whitened_norms(x, &chol).into_iter().map(|d| p / d).collect();
    Ok(trace_normalize(weighted_scatter(x, &w)))
}

fn tyler_iterate(x: &DMatrix<f64>, tol: f64, max_iter: usize) -> Result<RawValue> {
    let norms: Vec<f64> = x.row_iter().map(|r| r.norm()).collect();
    let scale = norms.iter().copied().fold(0.0, f64::max);
    if let Some(row) = norms.iter().position(|&r| r <= 1e-12 * scale.max(f64::MIN_POSITIVE)) {
        return Err(Error::ZeroVector { row });
    }
    let mut v = trace_normalize(definite_second_moment(x)?);
    for it in 1..=max_iter {
        let next = tyler_step(x, &v)?;
        let change = whitened_change(&v, &next)?;
        v = next;
        if change <= tol {
            return Ok(RawValue { matrix: v, iterations: it, converged: true });
        }
    }
    Ok(RawValue { matrix: v, iterations: max_iter, converged: false })
}

/// Difference sample used by symmetrized functionals.
///
/// When `n² ≤ max_differences` this is the full law of `x₁ − x₂` under the
/// empirical measure: all `n²` ordered pairs, including the `n` zero rows
/// `i = j`. Larger samples use the balanced cyclic design
/// `±(xᵢ − x_{(i+k) mod n})`, `k = 1..K`, in which every observation appears
/// equally often and both signs are present.
pub fn difference_rows(x: &DMatrix<f64>, max_differences: usize) -> DMatrix<f64> {
    let n = x.nrows();
    let p = x.ncols();
    if n.saturating_mul(n) <= max_differences {
        let mut out = DMatrix::zeros(n * n, p);
        for i in 0..n {
            for j in 0..n {
                let r = i * n + j;
                for c in 0..p {
                    out[(r, c)] = x[(i, c)] - x[(j, c)];
                }
            }
        }
        out
    } else {
        let shifts = (max_differences / (2 * n)).clamp(1, n - 1);
        let mut out = DMatrix::zeros(2 * n * shifts, p);
        let mut r = 0;
        for k in 1..=shifts {
            for i in 0..n {
                let j = (i + k) % n;
                for c in 0..p {
                    let d = x[(i, c)] - x[(j, c)];
                    out[(r, c)] = d;
                    out[(r + 1, c)] = -d;
                }
                r += 2;
            }
        }
        out
    }
}

/// Best subset found by the MCD search.
#[derive(Debug, Clone, PartialEq)]
pub struct McdFit {
    /// Sorted row indices of the selected subset.
    pub subset: Vec<usize>,
    pub determinant: f64,
    /// Covariance of the subset (divisor h), before calibration.
    pub raw: DMatrix<f64>,
    pub exhaustive: bool,
}

/// Subset size `h = ⌈α n⌉`.
pub fn mcd_subset_size(alpha: f64, n: usize) -> usize {
    // guard against α·n landing a hair above an integer
    ((alpha * n as f64) - 1e-9).ceil().max(1.0) as usize
}

fn subset_cov(x: &DMatrix<f64>, subset: &[usize]) -> (DVector<f64>, DMatrix<f64>) {
    let p = x.ncols();
    let h = subset.len() as f64;
    let mut mean = DVector::zeros(p);
    for &i in subset {
        mean += x.row(i).transpose();
    }
    mean /= h;
    let mut c = DMatrix::zeros(p, p);
    for &i in subset {
        let d = x.row(i).transpose() - &mean;
        c += &d * d.transpose();
    }
    c /= h;
    (mean, (&c + c.transpose()) * 0.5)
}

/// Advances `idx` to the next h-combination of `0..n` in lexicographic order.
fn next_combination(idx: &mut [usize], n: usize) -> bool {
    let h = idx.len();
    let mut i = h;
    while i > 0 {
        i -= 1;
        if idx[i] < n - h + i {
            idx[i] += 1;
            for j in (i + 1)..h {
                idx[j] = idx[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

fn mcd_exhaustive(x: &DMatrix<f64>, h: usize) -> (Vec<usize>, f64) {
    let n = x.nrows();
    let mut idx: Vec<usize> = (0..h).collect();
    let mut best = (idx.clone(), f64::INFINITY);
    loop {
        let det = subset_cov(x, &idx).1.determinant();
        if det < best.1 {
            best = (idx.clone(), det);
        }
        if !next_combination(&mut idx, n) {
            break;
        }
    }
    best
}

/// Runs C-steps from one starting subset until the subset stops changing.
fn c_steps(x: &DMatrix<f64>, start: &[usize]) -> (Vec<usize>, f64) {
    let n = x.nrows();
    let h = start.len();
    let mut subset: Vec<usize> = start.to_vec();
    subset.sort_unstable();
    for _ in 0..MCD_MAX_CSTEPS {
        let (mean, c) = subset_cov(x, &subset);
        let det = c.determinant();
        let Some(chol) = SpdMatrix::new_definite(c).ok().and_then(|m| cholesky_factor(&m).ok()) else {
            return (subset, det.max(0.0));
        };
        let mut centered = x.clone();
        let mt = mean.transpose();
        for mut row in centered.row_iter_mut() {
            row -= &mt;
        }
        let d = whitened_norms(&centered, &chol);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
        let mut next: Vec<usize> = order[..h].to_vec();
        next.sort_unstable();
        if next == subset {
            return (subset, det);
        }
        subset = next;
    }
    let det = subset_cov(x, &subset).1.determinant();
    (subset, det)
}

/// C-step search from the given starting subsets; ties in determinant go to
/// the lowest start index.
pub fn mcd_from_starts(s: &Sample, starts: &[Vec<usize>]) -> Result<McdFit> {
    let x = s.data();
    let h = starts.first().map_or(0, Vec::len);
    if h <= s.p() || starts.iter().any(|st| st.len() != h || st.iter().any(|&i| i >= s.n())) {
        return Err(Error::InvalidInput("mcd starts must be subsets of equal size h > p".into()));
    }
    let results: Vec<(Vec<usize>, f64)> = map_indexed(starts.len(), |k| c_steps(x, &starts[k]));
    let (subset, det) = results
        .into_iter()
        .reduce(|best, cand| if cand.1 < best.1 { cand } else { best })
        .expect("at least one start");
    finish_mcd(x, subset, det, false)
}

fn finish_mcd(x: &DMatrix<f64>, subset: Vec<usize>, determinant: f64, exhaustive: bool) -> Result<McdFit> {
    let raw = subset_cov(x, &subset).1;
    definite(raw.clone(), "mcd subset covariance")?;
    Ok(McdFit { subset, determinant, raw, exhaustive })
}

/// Minimum covariance determinant search: exhaustive for `n ≤ 25`, otherwise
/// C-steps from `starts` seeded random subsets.
pub fn mcd_fit(s: &Sample, alpha: f64, starts: usize, seed: Seed) -> Result<McdFit> {
    let n = s.n();
    let h = mcd_subset_size(alpha, n);
    if h <= s.p() || h > n {
        return Err(Error::InvalidInput(format!("mcd subset size h = {h} must satisfy p < h <= n")));
    }
    if n <= MCD_EXHAUSTIVE_MAX_N {
        let (subset, det) = mcd_exhaustive(s.data(), h);
        return finish_mcd(s.data(), subset, det, true);
    }
    let starts: Vec<Vec<usize>> = (0..starts)
        .map(|k| {
            let mut rng = seed.child(k as u64).rng();
            rand::seq::index::sample(&mut rng, n, h).into_vec()
        })
        .collect();
    mcd_from_starts(s, &starts)
}

/// Runs `f(0..count)` and returns the results in index order.
pub(crate) fn map_indexed<T: Send>(count: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..count).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..count).map(f).collect()
    }
}

/// Sample covariance with divisor `n`.
pub fn cov(s: &Sample) -> Result<ScatterEstimate> {
    ScatterSpec::cov().estimate(s)
}

/// `(1/n) Σ xᵢxᵢᵀ (xᵢᵀ Cov⁻¹ xᵢ) / (p + 2)` on centered data.
pub fn cov4(s: &Sample) -> Result<ScatterEstimate> {
    ScatterSpec::cov4().estimate(s)
}

/// Uncalibrated M-functional fixed point.
pub fn m_scatter(s: &Sample, weight: &WeightSpec, tol: f64, max_iter: usize) -> Result<ScatterEstimate> {
    ScatterSpec::new(ScatterFamily::MScatter { weight: weight.clone(), tol, max_iter }).estimate(s)
}

/// Tyler's shape matrix normalized to trace `p`.
pub fn tyler_shape(s: &Sample, tol: f64, max_iter: usize) -> Result<ScatterEstimate> {
    ScatterSpec::new(ScatterFamily::TylerShape { tol, max_iter }).estimate(s)
}

/// `S*(x) = S(x₁ − x₂)`, evaluated on pairwise differences.
pub fn symmetrize(inner: &ScatterSpec, s: &Sample) -> Result<ScatterEstimate> {
    ScatterSpec::symmetrized(inner.clone()).estimate(s)
}

pub fn mcd(s: &Sample, alpha: f64, starts: usize, seed: Seed) -> Result<ScatterEstimate> {
    ScatterSpec::mcd(alpha, starts, seed).estimate(s)
}

/// Result of a Gaussian calibration run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianCalibration {
    /// Median over replicates of `trace(S_raw(z)) / p`.
    pub constant: f64,
    /// Monte Carlo standard error of the replicate values.
    pub standard_error: f64,
    pub replicate_values: Vec<f64>,
}

/// Estimates the constant `c` for which `S_raw(z) / c ≈ I_p` at `z ~ N(0, I_p)`.
pub fn calibrate_gaussian(
    spec: &ScatterSpec,
    p: usize,
    n_cal: usize,
    replicates: usize,
    seed: Seed,
) -> Result<GaussianCalibration> {
    if n_cal < 1000 || replicates < 3 || p == 0 {
        return Err(Error::InvalidInput(format!(
            "calibration needs p >= 1, n_cal >= 1000 and replicates >= 3 (got {p}, {n_cal}, {replicates})"
        )));
    }
    spec.validate()?;
    let dist = DistributionSpec::standard_normal(p);
    let values = map_indexed(replicates, |r| -> Result<f64> {
        let z = sample(&dist, n_cal, seed.child(r as u64))?;
        let est = spec.estimate_raw(&z)?;
        Ok(est.matrix.trace() / p as f64)
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    let mut sorted = values.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let constant = if sorted.len() % 2 == 1 { sorted[mid] } else { 0.5 * (sorted[mid - 1] + sorted[mid]) };
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
    Ok(GaussianCalibration { constant, standard_error: (var / values.len() as f64).sqrt(), replicate_values: values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::frobenius_distance;

    fn cross4() -> Sample {
        Sample::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]]).unwrap()
    }

    #[test]
    fn cov_of_cross() {
        let c = cov(&cross4()).unwrap();
        assert_eq!(c.matrix.matrix(), &(DMatrix::<f64>::identity(2, 2) * 0.5));
    }

    #[test]
    fn cov_rejects_rank_deficient() {
        let s = Sample::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]]).unwrap();
        assert!(matches!(cov(&s), Err(Error::SingularScatter(_))));
        assert!(ScatterSpec::cov().estimate_semidefinite(&s).is_ok());
    }

    #[test]
    fn t_m_fixed_point_on_cross() {
        for nu in [1.0, 3.0, 10.0] {
            let e = m_scatter(&cross4(), &WeightSpec::StudentT { nu }, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
            assert!(e.converged);
            let d = (e.matrix.matrix() - DMatrix::<f64>::identity(2, 2) * 0.5).amax();
            assert!(d <= 1e-12, "nu = {nu}: {d}");
        }
    }

    #[test]
    fn tyler_on_cross_is_identity() {
        let e = tyler_shape(&cross4(), DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!((e.matrix.matrix() - DMatrix::<f64>::identity(2, 2)).amax() <= 1e-12);
    }

    #[test]
    fn tyler_zero_row() {
        let s = Sample::from_rows(&[
            vec![1.0, 0.0],
            vec![-1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, -1.0],
            vec![0.0, 0.0],
        ])
        .unwrap();
        assert!(matches!(tyler_shape(&s, DEFAULT_TOL, DEFAULT_MAX_ITER), Err(Error::ZeroVector { row: 4 })));
    }

    #[test]
    fn tyler_scale_invariance() {
        let s = sample(&DistributionSpec::laplace_product(3, 1.0), 200, Seed(4)).unwrap();
        let a = tyler_shape(&s, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let scaled = s.affine(&(DMatrix::identity(3, 3) * 7.5), &DVector::zeros(3)).unwrap();
        let b = tyler_shape(&scaled, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!(frobenius_distance(&a.matrix, &b.matrix).unwrap() <= 1e-10);
    }

    #[test]
    fn no_convergence_is_reported() {
        let s = sample(&DistributionSpec::laplace_product(2, 1.0), 100, Seed(1)).unwrap();
        let e = m_scatter(&s, &WeightSpec::StudentT { nu: 1.0 }, 1e-15, 2).unwrap();
        assert!(!e.converged);
        assert_eq!(e.iterations, 2);
        assert!(matches!(e.require_converged(), Err(Error::NoConvergence { .. })));
    }

    #[test]
    fn symmetrized_cov_equals_cov() {
        let s = sample(&DistributionSpec::laplace_product(3, 1.0), 40, Seed(8)).unwrap();
        let a = cov(&s).unwrap();
        let b = symmetrize(&ScatterSpec::cov(), &s).unwrap();
        assert!(frobenius_distance(&a.matrix, &b.matrix).unwrap() <= 1e-10);
    }

    #[test]
    fn symmetrize_two_points_is_singular() {
        let s = Sample::from_rows(&[vec![0.0, 1.0], vec![2.0, -1.0]]).unwrap();
        assert!(matches!(symmetrize(&ScatterSpec::cov(), &s), Err(Error::SingularScatter(_))));
    }

    #[test]
    fn difference_rows_cyclic_design_is_balanced() {
        let x = DMatrix::from_fn(10, 2, |i, j| (i * 3 + j) as f64);
        let d = difference_rows(&x, 60);
        assert_eq!(d.nrows(), 60);
        let sum: f64 = d.iter().sum();
        assert_eq!(sum, 0.0);
    }

    #[test]
    fn subset_size_rounding() {
        assert_eq!(mcd_subset_size(2.0 / 3.0, 6), 4);
        assert_eq!(mcd_subset_size(0.5, 10_000), 5_000);
        assert_eq!(mcd_subset_size(0.75, 10), 8);
    }

    #[test]
    fn mcd_outlier1d() {
        let s = Sample::from_rows(&[vec![0.0], vec![0.1], vec![0.2], vec![0.3], vec![100.0], vec![-50.0]]).unwrap();
        let fit = mcd_fit(&s, 2.0 / 3.0, 1, Seed(0)).unwrap();
        assert!(fit.exhaustive);
        assert_eq!(fit.subset, vec![0, 1, 2, 3]);
        assert!((fit.raw[(0, 0)] - 0.0125).abs() < 1e-15);
    }

    #[test]
    fn mcd_rejects_small_h() {
        let s = Sample::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![2.0, 2.0], vec![3.0, 1.0]]).unwrap();
        assert!(mcd_fit(&s, 0.5, 1, Seed(0)).is_err());
    }

    #[test]
    fn exhaustive_matches_csteps_from_all_subsets() {
        let s = sample(&DistributionSpec::laplace_product(2, 1.0), 9, Seed(21)).unwrap();
        let h = 6;
        let exhaustive = mcd_fit(&s, h as f64 / 9.0, 1, Seed(0)).unwrap();
        let mut starts = Vec::new();
        let mut idx: Vec<usize> = (0..h).collect();
        loop {
            starts.push(idx.clone());
            if !next_combination(&mut idx, 9) {
                break;
            }
        }
        assert_eq!(starts.len(), 84);
        let csteps = mcd_from_starts(&s, &starts).unwrap();
        assert_eq!(exhaustive.subset, csteps.subset);
        assert_eq!(exhaustive.raw, csteps.raw);
    }

    #[test]
    fn calibration_preconditions() {
        assert!(calibrate_gaussian(&ScatterSpec::cov(), 2, 999, 3, Seed(0)).is_err());
        assert!(calibrate_gaussian(&ScatterSpec::cov(), 2, 1000, 2, Seed(0)).is_err());
    }

    #[test]
    fn calibration_lookup() {
        assert_eq!(ScatterSpec::cov4().calibration_for(3), 5.0);
        assert_eq!(ScatterSpec::symmetrized(ScatterSpec::cov()).calibration_for(4), 2.0);
        assert_eq!(ScatterSpec::t_m(3.0).calibration_for(2), 1.0);
        let spec = ScatterSpec::t_m(3.0).with_dimension_calibration(2, 1.2).with_dimension_calibration(3, 1.3);
        assert_eq!(spec.calibration_for(2), 1.2);
        assert_eq!(spec.calibration_for(3), 1.3);
        assert_eq!(spec.calibration_for(1), 1.0);
        assert_eq!(ScatterSpec::cov4().with_calibration(Calibration::Uniform(2.5)).calibration_for(3), 2.5);
    }

    #[test]
    fn weight_function_shape() {
        for w in [WeightSpec::StudentT { nu: 3.0 }, WeightSpec::Huber { threshold: 4.0 }] {
            let mut prev = 0.0;
            for i in 0..200 {
                let d = i as f64 * 0.25;
                let wd = w.weight(d, 3);
                assert!(wd > 0.0);
                assert!(d * wd >= prev - 1e-12);
                prev = d * wd;
            }
            assert!(prev <= 6.0 + 1e-9);
        }
    }

    #[test]
    fn json_layout() {
        let json = serde_json::json!({"family": "m_scatter", "weight": {"kind": "student_t", "nu": 3.0}, "calibration": 1.0});
        let spec: ScatterSpec = serde_json::from_value(json).unwrap();
        assert_eq!(spec.family, ScatterFamily::MScatter { weight: WeightSpec::StudentT { nu: 3.0 }, tol: DEFAULT_TOL, max_iter: DEFAULT_MAX_ITER });
        assert_eq!(spec.calibration, Some(Calibration::Uniform(1.0)));
        let back: ScatterSpec = serde_json::from_value(serde_json::to_value(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);

        let nested = serde_json::json!({"family": "symmetrized", "inner": {"family": "cov"}, "calibration": {"2": 2.0}});
        let spec: ScatterSpec = serde_json::from_value(nested).unwrap();
        assert_eq!(spec.label(), "symmetrized(cov)");
        assert_eq!(spec.calibration_for(2), 2.0);

        for bad in [
            serde_json::json!({"family": "cov", "weight": {"kind": "student_t", "nu": 3.0}}),
            serde_json::json!({"family": "m_scatter"}),
            serde_json::json!({"family": "cov", "bogus": 1}),
            serde_json::json!({"family": "mcd", "alpha": 1.5}),
        ] {
            assert!(serde_json::from_value::<ScatterSpec>(bad.clone()).is_err(), "{bad}");
        }
    }
}
