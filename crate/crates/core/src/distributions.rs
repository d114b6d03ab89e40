//! A small algebra of zero-mean p-variate distributions: coordinate products of
//! univariate marginals, affine images, independent sums, elliptical families
//! and standardized sums `(1/√n) Σ xᵢ`. Every variant has a closed-form
//! covariance and a deterministic seeded sampler.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, Exp, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Sample, SpdMatrix};

/// A 64-bit seed with a deterministic child-stream derivation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Seed(pub u64);

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Seed {
    /// Child seed for replicate `index`. The finalizer is a bijection and the
    /// pre-images `seed + (index + 1)·γ` are distinct for distinct indices, so
    /// children of one parent never collide.
    pub fn child(self, index: u64) -> Seed {
        Seed(splitmix64(self.0.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA))))
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

impl From<u64> for Seed {
    fn from(v: u64) -> Self {
        Seed(v)
    }
}

/// Zero-mean univariate law with finite variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MarginalSpec {
    StandardNormal,
    Laplace { scale: f64 },
    Uniform { halfwidth: f64 },
    CenteredExponential { rate: f64 },
    StudentT { df: f64 },
}

impl MarginalSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            MarginalSpec::StandardNormal => true,
            MarginalSpec::Laplace { scale } => scale > 0.0 && scale.is_finite(),
            MarginalSpec::Uniform { halfwidth } => halfwidth > 0.0 && halfwidth.is_finite(),
            MarginalSpec::CenteredExponential { rate } => rate > 0.0 && rate.is_finite(),
            MarginalSpec::StudentT { df } => df > 2.0 && df.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid marginal parameters: {self:?}")))
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            MarginalSpec::StandardNormal => 1.0,
            MarginalSpec::Laplace { scale } => 2.0 * scale * scale,
            MarginalSpec::Uniform { halfwidth } => halfwidth * halfwidth / 3.0,
            MarginalSpec::CenteredExponential { rate } => 1.0 / (rate * rate),
            MarginalSpec::StudentT { df } => df / (df - 2.0),
        }
    }

    fn draw_column(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match *self {
            MarginalSpec::StandardNormal => (0..n).map(|_| rng.sample(StandardNormal)).collect(),
            MarginalSpec::Laplace { scale } => (0..n)
                .map(|_| {
                    let u: f64 = rng.random::<f64>() - 0.5;
                    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
                })
                .collect(),
            MarginalSpec::Uniform { halfwidth } => {
                (0..n).map(|_| halfwidth * (2.0 * rng.random::<f64>() - 1.0)).collect()
            }
            MarginalSpec::CenteredExponential { rate } => {
                let exp = Exp::new(rate).expect("validated rate");
                (0..n).map(|_| exp.sample(rng) - 1.0 / rate).collect()
            }
            MarginalSpec::StudentT { df } => {
                let t = StudentT::new(df).expect("validated df");
                (0..n).map(|_| t.sample(rng)).collect()
            }
        }
    }
}

/// Law of the radius `r` in the elliptical representation `x = L r u`, with
/// `u` uniform on the unit sphere and `Σ = L Lᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RadialSpec {
    /// `r² ~ χ²_p`; yields `N(0, Σ)`.
    Gaussian,
    /// Multivariate t with `df > 2` degrees of freedom.
    StudentT { df: f64 },
    /// Uniform on the unit ball.
    UniformBall,
    /// Uniform on the unit sphere (`r = 1`).
    UniformSphere,
}

impl RadialSpec {
    /// `E r²` in dimension `p`.
    pub fn second_moment(&self, p: usize) -> f64 {
        let p = p as f64;
        match *self {
            RadialSpec::Gaussian => p,
            RadialSpec::StudentT { df } => p * df / (df - 2.0),
            RadialSpec::UniformBall => p / (p + 2.0),
            RadialSpec::UniformSphere => 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            RadialSpec::StudentT { df } if !(df > 2.0 && df.is_finite()) => {
                Err(Error::InvalidInput(format!("elliptical t needs df > 2, got {df}")))
            }
            _ => Ok(()),
        }
    }
}

/// A composable zero-mean p-variate distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DistributionSpec {
    StandardNormal {
        p: usize,
    },
    /// Independent coordinates with the listed marginals.
    Product {
        marginals: Vec<MarginalSpec>,
    },
    /// `A x + b` with `A` of shape k×ℓ and `x` the inner ℓ-variate law.
    Affine {
        #[serde(rename = "A")]
        a: Vec<Vec<f64>>,
        b: Vec<f64>,
        inner: Box<DistributionSpec>,
    },
    /// `x + y` for independent `x`, `y` of equal dimension.
    IndependentSum {
        left: Box<DistributionSpec>,
        right: Box<DistributionSpec>,
    },
    Elliptical {
        sigma: Vec<Vec<f64>>,
        radial: RadialSpec,
    },
    /// `(1/√terms) Σ xᵢ` over `terms` independent copies of `inner`.
    StandardizedSum {
        inner: Box<DistributionSpec>,
        terms: usize,
    },
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let k = rows.len();
    let l = rows.first().map_or(0, Vec::len);
    if k == 0 || l == 0 {
        return Err(Error::InvalidInput(format!("{what} must be non-empty")));
    }
    if let Some(r) = rows.iter().find(|r| r.len() != l) {
        return Err(Error::DimensionMismatch { expected: l, found: r.len() });
    }
    let m = DMatrix::from_fn(k, l, |i, j| rows[i][j]);
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("{what} has non-finite entries")));
    }
    Ok(m)
}

fn rows_from_matrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Symmetric square root factor `L` with `L Lᵀ = Σ`, via eigendecomposition so
/// that semidefinite `Σ` is accepted.
fn root_factor(sigma: &SpdMatrix) -> DMatrix<f64> {
    let eig = nalgebra::SymmetricEigen::new(sigma.matrix().clone());
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

impl DistributionSpec {
    pub fn standard_normal(p: usize) -> Self {
        DistributionSpec::StandardNormal { p }
    }

    pub fn product(marginals: Vec<MarginalSpec>) -> Self {
        DistributionSpec::Product { marginals }
    }

    /// `p` independent Laplace coordinates with the given scale.
    pub fn laplace_product(p: usize, scale: f64) -> Self {
        DistributionSpec::Product { marginals: vec![MarginalSpec::Laplace { scale }; p] }
    }

    pub fn affine(a: &DMatrix<f64>, b: &DVector<f64>, inner: DistributionSpec) -> Self {
        DistributionSpec::Affine {
            a: rows_from_matrix(a),
            b: b.iter().copied().collect(),
            inner: Box::new(inner),
        }
    }

    /// `N(0, Σ)` realized as `L z` with `L` the symmetric root of `Σ`.
    pub fn gaussian(sigma: &SpdMatrix) -> Self {
        let p = sigma.dim();
        Self::affine(&root_factor(sigma), &DVector::zeros(p), DistributionSpec::StandardNormal { p })
    }

    pub fn independent_sum(left: DistributionSpec, right: DistributionSpec) -> Self {
        DistributionSpec::IndependentSum { left: Box::new(left), right: Box::new(right) }
    }

    pub fn elliptical(sigma: &SpdMatrix, radial: RadialSpec) -> Self {
        DistributionSpec::Elliptical { sigma: rows_from_matrix(sigma.matrix()), radial }
    }

    /// Validates the whole tree and returns its dimension.
    pub fn validate(&self) -> Result<usize> {
        match self {
            DistributionSpec::StandardNormal { p } => {
                if *p == 0 {
                    return Err(Error::InvalidInput("standard normal needs p >= 1".into()));
                }
                Ok(*p)
            }
            DistributionSpec::Product { marginals } => {
                if marginals.is_empty() {
                    return Err(Error::InvalidInput("product needs at least one marginal".into()));
                }
                marginals.iter().try_for_each(MarginalSpec::validate)?;
                Ok(marginals.len())
            }
            DistributionSpec::Affine { a, b, inner } => {
                let inner_dim = inner.validate()?;
                let m = matrix_from_rows(a, "affine matrix")?;
                if m.ncols() != inner_dim {
                    return Err(Error::DimensionMismatch { expected: inner_dim, found: m.ncols() });
                }
                if b.len() != m.nrows() {
                    return Err(Error::DimensionMismatch { expected: m.nrows(), found: b.len() });
                }
                if b.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidInput("affine offset has non-finite entries".into()));
                }
                Ok(m.nrows())
            }
            DistributionSpec::IndependentSum { left, right } => {
                let l = left.validate()?;
                let r = right.validate()?;
                if l != r {
                    return Err(Error::DimensionMismatch { expected: l, found: r });
                }
                Ok(l)
            }
            DistributionSpec::Elliptical { sigma, radial } => {
                radial.validate()?;
                let m = matrix_from_rows(sigma, "elliptical sigma")?;
                SpdMatrix::new(m).map(|s| s.dim())
            }
            DistributionSpec::StandardizedSum { inner, terms } => {
                if *terms == 0 {
                    return Err(Error::InvalidInput("standardized sum needs at least one term".into()));
                }
                inner.validate()
            }
        }
    }

    pub fn dim(&self) -> Result<usize> {
        self.validate()
    }

    /// Population covariance, computed recursively from the closed forms.
    pub fn true_covariance(&self) -> Result<SpdMatrix> {
        self.validate()?;
        self.covariance_unchecked()
    }

    fn covariance_unchecked(&self) -> Result<SpdMatrix> {
        match self {
            DistributionSpec::StandardNormal { p } => Ok(SpdMatrix::identity(*p)),
            DistributionSpec::Product { marginals } => {
                SpdMatrix::from_diagonal(&marginals.iter().map(MarginalSpec::variance).collect::<Vec<_>>())
            }
            DistributionSpec::Affine { a, inner, .. } => {
                let m = matrix_from_rows(a, "affine matrix")?;
                inner.covariance_unchecked()?.congruence(&m)
            }
            DistributionSpec::IndependentSum { left, right } => {
                SpdMatrix::new(left.covariance_unchecked()?.matrix() + right.covariance_unchecked()?.matrix())
            }
            DistributionSpec::Elliptical { sigma, radial } => {
                let s = SpdMatrix::new(matrix_from_rows(sigma, "elliptical sigma")?)?;
                let p = s.dim();
                s.scaled(radial.second_moment(p) / p as f64)
            }
            DistributionSpec::StandardizedSum { inner, .. } => inner.covariance_unchecked(),
        }
    }

    /// Labels each coordinate with a block id; coordinates in different blocks
    /// are certified mutually independent.
    pub fn independence_blocks(&self) -> Result<Vec<usize>> {
        self.validate()?;
        Ok(self.blocks_unchecked())
    }

    fn blocks_unchecked(&self) -> Vec<usize> {
        match self {
            DistributionSpec::StandardNormal { p } => (0..*p).collect(),
            DistributionSpec::Product { marginals } => (0..marginals.len()).collect(),
            DistributionSpec::Affine { a, inner, .. } => {
                let inner_blocks = inner.blocks_unchecked();
                let k = a.len();
                let mut uf = UnionFind::new(k);
                // rows sharing any inner block are merged
                let mut owner: std::collections::BTreeMap<usize, usize> = Default::default();
                for (row_idx, row) in a.iter().enumerate() {
                    for (col, v) in row.iter().enumerate() {
                        if *v != 0.0 {
                            let blk = inner_blocks[col];
                            match owner.get(&blk) {
                                Some(&other) => uf.union(row_idx, other),
                                None => {
                                    owner.insert(blk, row_idx);
                                }
                            }
                        }
                    }
                }
                uf.labels()
            }
            DistributionSpec::IndependentSum { left, right } => {
                let lb = left.blocks_unchecked();
                let rb = right.blocks_unchecked();
                let p = lb.len();
                let mut uf = UnionFind::new(p);
                for i in 0..p {
                    for j in (i + 1)..p {
                        if lb[i] == lb[j] || rb[i] == rb[j] {
                            uf.union(i, j);
                        }
                    }
                }
                uf.labels()
            }
            DistributionSpec::Elliptical { sigma, radial } => {
                let p = sigma.len();
                let diagonal = sigma
                    .iter()
                    .enumerate()
                    .all(|(i, r)| r.iter().enumerate().all(|(j, v)| i == j || *v == 0.0));
                if *radial == RadialSpec::Gaussian && diagonal {
                    (0..p).collect()
                } else {
                    vec![0; p]
                }
            }
            DistributionSpec::StandardizedSum { inner, .. } => inner.blocks_unchecked(),
        }
    }

    /// Whether coordinates `j` and `k` are certified independent.
    pub fn certifies_independent(&self, j: usize, k: usize) -> Result<bool> {
        let blocks = self.independence_blocks()?;
        if j >= blocks.len() || k >= blocks.len() {
            return Err(Error::InvalidInput(format!("component index out of range for p = {}", blocks.len())));
        }
        Ok(j != k && blocks[j] != blocks[k])
    }

    /// Whether all coordinates are certified mutually independent.
    pub fn is_fully_independent(&self) -> Result<bool> {
        let blocks = self.independence_blocks()?;
        let mut seen = blocks.clone();
        seen.sort_unstable();
        seen.dedup();
        Ok(seen.len() == blocks.len())
    }

    fn draw(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Sample> {
        match self {
            DistributionSpec::StandardNormal { p } => {
                Sample::new(DMatrix::from_fn(n, *p, |_, _| rng.sample(StandardNormal)))
            }
            DistributionSpec::Product { marginals } => {
                let mut data = DMatrix::zeros(n, marginals.len());
                for (j, m) in marginals.iter().enumerate() {
                    let col = m.draw_column(n, rng);
                    data.set_column(j, &DVector::from_vec(col));
                }
                Sample::new(data)
            }
            DistributionSpec::Affine { a, b, inner } => {
                let base = inner.draw(n, rng)?;
                base.affine(&matrix_from_rows(a, "affine matrix")?, &DVector::from_column_slice(b))
            }
            DistributionSpec::IndependentSum { left, right } => {
                let l = left.draw(n, rng)?;
                let r = right.draw(n, rng)?;
                l.add(&r)
            }
            DistributionSpec::Elliptical { sigma, radial } => {
                let s = SpdMatrix::new(matrix_from_rows(sigma, "elliptical sigma")?)?;
                let p = s.dim();
                let root = root_factor(&s);
                let mut data = DMatrix::zeros(n, p);
                for i in 0..n {
                    let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
                    let v = match *radial {
                        RadialSpec::Gaussian => z,
                        RadialSpec::StudentT { df } => {
                            let w = ChiSquared::new(df).expect("validated df").sample(rng);
                            z / (w / df).sqrt()
                        }
                        RadialSpec::UniformBall => {
                            let r = rng.random::<f64>().powf(1.0 / p as f64);
                            let norm = z.norm();
                            z * (r / norm)
                        }
                        RadialSpec::UniformSphere => {
                            let norm = z.norm();
                            z / norm
                        }
                    };
                    data.set_row(i, &(&root * v).transpose());
                }
                Sample::new(data)
            }
            DistributionSpec::StandardizedSum { inner, terms } => {
                let mut acc = inner.draw(n, rng)?.into_inner();
                for _ in 1..*terms {
                    acc += inner.draw(n, rng)?.data();
                }
                Sample::new(acc * (1.0 / (*terms as f64).sqrt()))
            }
        }
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }

    fn labels(&mut self) -> Vec<usize> {
        (0..self.parent.len()).map(|i| self.find(i)).collect()
    }
}

/// `n` i.i.d. rows from `spec`, deterministic in `(spec, n, seed)`.
pub fn sample(spec: &DistributionSpec, n: usize, seed: Seed) -> Result<Sample> {
    if n == 0 {
        return Err(Error::InvalidInput("sample size must be positive".into()));
    }
    spec.validate()?;
    let mut rng = seed.rng();
    spec.draw(n, &mut rng)
}

pub fn true_covariance(spec: &DistributionSpec) -> Result<SpdMatrix> {
    spec.true_covariance()
}

/// Law of `(1/√n) Σᵢ xᵢ` for `n` independent copies of `spec`.
pub fn standardized_sum_spec(spec: &DistributionSpec, n: usize) -> DistributionSpec {
    DistributionSpec::StandardizedSum { inner: Box::new(spec.clone()), terms: n }
}
