//! Dense symmetric linear algebra and the two value types every other module
//! passes around: [`Sample`] (an n×p data matrix, rows are observations) and
//! [`SpdMatrix`] (a symmetric positive semidefinite p×p matrix).

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative slack used for symmetry and definiteness checks.
pub const RELATIVE_SPD_TOLERANCE: f64 = 1e-9;

/// An n×p matrix of finite observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    data: DMatrix<f64>,
}

impl Sample {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::InvalidInput(format!(
                "sample must have at least one row and one column, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("sample contains non-finite entry {bad}")));
        }
        Ok(Self { data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let p = rows.first().map_or(0, Vec::len);
        if let Some(row) = rows.iter().find(|r| r.len() != p) {
            return Err(Error::DimensionMismatch { expected: p, found: row.len() });
        }
        Self::new(DMatrix::from_fn(n, p, |i, j| rows[i][j]))
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn p(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> DVector<f64> {
        self.data.row(i).transpose()
    }

    pub fn mean(&self) -> DVector<f64> {
        self.data.row_mean().transpose()
    }

    /// Rows minus the column means.
    pub fn centered(&self) -> DMatrix<f64> {
        let mean = self.data.row_mean();
        let mut out = self.data.clone();
        for mut row in out.row_iter_mut() {
            row -= &mean;
        }
        out
    }

    /// Row-wise image `x ↦ A x + b` for `A` of shape k×p; `k` may differ from `p`.
    pub fn affine(&self, a: &DMatrix<f64>, b: &DVector<f64>) -> Result<Sample> {
        if a.ncols() != self.p() {
            return Err(Error::DimensionMismatch { expected: self.p(), found: a.ncols() });
        }
        if b.len() != a.nrows() {
            return Err(Error::DimensionMismatch { expected: a.nrows(), found: b.len() });
        }
        let mut out = &self.data * a.transpose();
        let bt = b.transpose();
        for mut row in out.row_iter_mut() {
            row += &bt;
        }
        Sample::new(out)
    }

    /// Row-wise sum with another sample of the same shape.
    pub fn add(&self, other: &Sample) -> Result<Sample> {
        if self.n() != other.n() {
            return Err(Error::DimensionMismatch { expected: self.n(), found: other.n() });
        }
        if self.p() != other.p() {
            return Err(Error::DimensionMismatch { expected: self.p(), found: other.p() });
        }
        Sample::new(&self.data + &other.data)
    }

    /// Sub-sample keeping the listed columns, in the given order.
    pub fn columns(&self, cols: &[usize]) -> Result<Sample> {
        if let Some(&bad) = cols.iter().find(|&&c| c >= self.p()) {
            return Err(Error::InvalidInput(format!("column {bad} out of range for p = {}", self.p())));
        }
        Sample::new(DMatrix::from_fn(self.n(), cols.len(), |i, j| self.data[(i, cols[j])]))
    }

    /// Sub-sample keeping the listed rows, in the given order.
    pub fn rows(&self, rows: &[usize]) -> Result<Sample> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.n()) {
            return Err(Error::InvalidInput(format!("row {bad} out of range for n = {}", self.n())));
        }
        Sample::new(DMatrix::from_fn(rows.len(), self.p(), |i, j| self.data[(rows[i], j)]))
    }

    /// Concatenates the columns of two samples with equal row count.
    pub fn hstack(&self, other: &Sample) -> Result<Sample> {
        if self.n() != other.n() {
            return Err(Error::DimensionMismatch { expected: self.n(), found: other.n() });
        }
        let p = self.p();
        Sample::new(DMatrix::from_fn(self.n(), p + other.p(), |i, j| {
            if j < p {
                self.data[(i, j)]
            } else {
                other.data[(i, j - p)]
            }
        }))
    }
}

/// A symmetric positive semidefinite matrix together with the slack used to
/// validate it.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    entries: DMatrix<f64>,
    tolerance: f64,
}

fn scale_tolerance(m: &DMatrix<f64>) -> f64 {
    RELATIVE_SPD_TOLERANCE * m.amax()
}

fn symmetrized(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

impl SpdMatrix {
    /// Validates symmetry and positive semidefiniteness, then re-symmetrizes.
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        if !entries.is_square() {
            return Err(Error::DimensionMismatch { expected: entries.nrows(), found: entries.ncols() });
        }
        if entries.nrows() == 0 {
            return Err(Error::InvalidInput("empty matrix".into()));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NotSpd("non-finite entry".into()));
        }
        let tolerance = scale_tolerance(&entries);
        let asym = (&entries - entries.transpose()).amax();
        if asym > tolerance {
            return Err(Error::NotSpd(format!("asymmetry {asym:e} exceeds {tolerance:e}")));
        }
        let entries = symmetrized(&entries);
        let min = min_eigenvalue_of(&entries);
        if min < -tolerance {
            return Err(Error::NotSpd(format!("smallest eigenvalue {min:e} below -{tolerance:e}")));
        }
        Ok(Self { entries, tolerance })
    }

    /// Like [`SpdMatrix::new`] but additionally requires strict definiteness.
    pub fn new_definite(entries: DMatrix<f64>) -> Result<Self> {
        let m = Self::new(entries)?;
        let min = m.min_eigenvalue();
        if min <= m.tolerance {
            return Err(Error::SingularMatrix { min_eigenvalue: min, tolerance: m.tolerance });
        }
        Ok(m)
    }

    pub fn identity(p: usize) -> Self {
        Self { entries: DMatrix::identity(p, p), tolerance: RELATIVE_SPD_TOLERANCE }
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn from_row_slice(p: usize, entries: &[f64]) -> Result<Self> {
        if entries.len() != p * p {
            return Err(Error::DimensionMismatch { expected: p * p, found: entries.len() });
        }
        Self::new(DMatrix::from_row_slice(p, p, entries))
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.entries
    }

    pub fn tolerance(&self) -> f64 {
        self.tolerance
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }

    pub fn trace(&self) -> f64 {
        self.entries.trace()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        min_eigenvalue_of(&self.entries)
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut v: Vec<f64> = SymmetricEigen::new(self.entries.clone()).eigenvalues.iter().copied().collect();
        v.sort_by(f64::total_cmp);
        v
    }

    pub fn is_positive_definite(&self) -> bool {
        self.min_eigenvalue() > self.tolerance
    }

    pub fn determinant(&self) -> f64 {
        self.entries.determinant()
    }

    /// `A M Aᵀ` for `A` of shape k×p. Rank-deficient `A` yields a semidefinite result.
    pub fn congruence(&self, a: &DMatrix<f64>) -> Result<SpdMatrix> {
        if a.ncols() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: a.ncols() });
        }
        SpdMatrix::new(a * &self.entries * a.transpose())
    }

    pub fn scaled(&self, c: f64) -> Result<SpdMatrix> {
        SpdMatrix::new(&self.entries * c)
    }

    /// Representative of the proportionality class with trace equal to the dimension.
    pub fn trace_normalized(&self) -> Result<SpdMatrix> {
        let tr = self.trace();
        if tr <= 0.0 {
            return Err(Error::SingularScatter("zero trace cannot be normalized".into()));
        }
        self.scaled(self.dim() as f64 / tr)
    }

    /// Principal sub-matrix on the listed indices.
    pub fn submatrix(&self, idx: &[usize]) -> SpdMatrix {
        let m = DMatrix::from_fn(idx.len(), idx.len(), |i, j| self.entries[(idx[i], idx[j])]);
        SpdMatrix { tolerance: scale_tolerance(&m), entries: m }
    }

    pub fn max_abs_off_diagonal(&self) -> f64 {
        let p = self.dim();
        let mut worst = 0.0f64;
        for i in 0..p {
            for j in 0..p {
                if i != j {
                    worst = worst.max(self.entries[(i, j)].abs());
                }
            }
        }
        worst
    }
}

fn min_eigenvalue_of(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

fn cholesky_of(m: &SpdMatrix) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    let min = m.min_eigenvalue();
    if min <= m.tolerance {
        return Err(Error::SingularMatrix { min_eigenvalue: min, tolerance: m.tolerance });
    }
    Cholesky::new(m.entries.clone()).ok_or(Error::SingularMatrix { min_eigenvalue: min, tolerance: m.tolerance })
}

/// Inverse of a strictly positive definite matrix through its Cholesky factor.
pub fn spd_inverse(m: &SpdMatrix) -> Result<SpdMatrix> {
    let inv = cholesky_of(m)?.inverse();
    let inv = symmetrized(&inv);
    Ok(SpdMatrix { tolerance: scale_tolerance(&inv), entries: inv })
}

/// Squared Mahalanobis distances `xᵢᵀ M⁻¹ xᵢ` of the (uncentered) rows.
pub fn mahalanobis_distances(s: &Sample, m: &SpdMatrix) -> Result<Vec<f64>> {
    if s.p() != m.dim() {
        return Err(Error::DimensionMismatch { expected: m.dim(), found: s.p() });
    }
    let chol = cholesky_of(m)?;
    Ok(whitened_norms(s.data(), &chol))
}

/// `‖L⁻¹ xᵢ‖²` for every row, with `M = L Lᵀ`.
pub(crate) fn whitened_norms(x: &DMatrix<f64>, chol: &Cholesky<f64, nalgebra::Dyn>) -> Vec<f64> {
    let l = chol.l_dirty();
    let mut xt = x.transpose();
    l.solve_lower_triangular_mut(&mut xt);
    xt.column_iter().map(|c| c.norm_squared()).collect()
}

pub(crate) fn cholesky_factor(m: &SpdMatrix) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    cholesky_of(m)
}

pub fn frobenius_distance(a: &SpdMatrix, b: &SpdMatrix) -> Result<f64> {
    frobenius_distance_raw(a.matrix(), b.matrix())
}

pub fn frobenius_distance_raw(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch { expected: a.nrows(), found: b.nrows() });
    }
    Ok((a - b).norm())
}

/// Weighted scatter `(1/n) Σ wᵢ xᵢ xᵢᵀ` of the rows of `x`.
pub(crate) fn weighted_scatter(x: &DMatrix<f64>, weights: &[f64]) -> DMatrix<f64> {
    let n = x.nrows();
    let mut xw = x.clone();
    for (mut row, w) in xw.row_iter_mut().zip(weights) {
        row *= *w;
    }
    let s = xw.transpose() * x / n as f64;
    symmetrized(&s)
}

/// `(1/n) Σ xᵢ xᵢᵀ` of the rows of `x`.
pub(crate) fn second_moment(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    symmetrized(&(x.transpose() * x / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_spd(p: usize, seed: u64) -> SpdMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::from_fn(p, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        SpdMatrix::new(&g * g.transpose() + DMatrix::identity(p, p)).unwrap()
    }

    fn random_orthogonal(p: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::from_fn(p, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        g.qr().q()
    }

    #[test]
    fn inverse_of_identity() {
        let inv = spd_inverse(&SpdMatrix::identity(3)).unwrap();
        assert_eq!(inv.matrix(), &DMatrix::<f64>::identity(3, 3));
    }

    #[test]
    fn inverse_of_diagonal() {
        let inv = spd_inverse(&SpdMatrix::from_diagonal(&[2.0, 4.0]).unwrap()).unwrap();
        assert!((inv.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((inv.get(1, 1) - 0.25).abs() < 1e-15);
        assert_eq!(inv.get(0, 1), 0.0);
    }

    #[test]
    fn inverse_residual_random() {
        let m = random_spd(4, 7);
        let inv = spd_inverse(&m).unwrap();
        let resid = (m.matrix() * inv.matrix() - DMatrix::<f64>::identity(4, 4)).amax();
        assert!(resid <= 1e-10, "residual {resid}");
        assert_eq!(inv.matrix(), &inv.matrix().transpose());
    }

    #[test]
    fn inverse_rejects_singular() {
        let m = SpdMatrix::from_diagonal(&[1.0, 0.0]).unwrap();
        assert!(matches!(spd_inverse(&m), Err(Error::SingularMatrix { .. })));
    }

    #[test]
    fn rejects_asymmetric_and_indefinite() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(SpdMatrix::new(asym), Err(Error::NotSpd(_))));
        let indef = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(SpdMatrix::new(indef), Err(Error::NotSpd(_))));
    }

    #[test]
    fn mahalanobis_basics() {
        let s = Sample::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let d = mahalanobis_distances(&s, &SpdMatrix::identity(2)).unwrap();
        assert!((d[0] - 1.0).abs() < 1e-15 && (d[1] - 1.0).abs() < 1e-15);

        let s = Sample::from_rows(&[vec![2.0, 0.0]]).unwrap();
        let d = mahalanobis_distances(&s, &SpdMatrix::from_diagonal(&[4.0, 1.0]).unwrap()).unwrap();
        assert!((d[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mahalanobis_dimension_mismatch() {
        let s = Sample::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(
            mahalanobis_distances(&s, &SpdMatrix::identity(2)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn mahalanobis_rotation_invariant() {
        let m = random_spd(3, 11);
        let u = random_orthogonal(3, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let s = Sample::new(DMatrix::from_fn(50, 3, |_, _| rng.sample::<f64, _>(StandardNormal))).unwrap();
        let d1 = mahalanobis_distances(&s, &m).unwrap();
        let rotated = s.affine(&u, &DVector::zeros(3)).unwrap();
        let d2 = mahalanobis_distances(&rotated, &m.congruence(&u).unwrap()).unwrap();
        let worst = d1.iter().zip(&d2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst <= 1e-10, "{worst}");
    }

    #[test]
    fn frobenius_examples() {
        let i2 = SpdMatrix::identity(2);
        assert_eq!(frobenius_distance(&i2, &i2).unwrap(), 0.0);
        let z = SpdMatrix::from_diagonal(&[0.0, 0.0]).unwrap();
        assert!((frobenius_distance(&i2, &z).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        let m = random_spd(3, 5);
        let mut bumped = m.matrix().clone();
        bumped[(0, 0)] += 0.125;
        let d = frobenius_distance(&m, &SpdMatrix::new(bumped).unwrap()).unwrap();
        assert!((d - 0.125).abs() < 1e-12);
        assert!(frobenius_distance(&i2, &SpdMatrix::identity(3)).is_err());
    }

    #[test]
    fn sample_rejects_non_finite() {
        assert!(Sample::from_rows(&[vec![1.0, f64::NAN]]).is_err());
        assert!(Sample::from_rows(&[]).is_err());
        assert!(Sample::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn inverse_is_an_involution(seed in any::<u64>(), p in 1usize..6, log_cond in 0.0f64..6.0) {
                // eigenvalues spread over [10^-log_cond, 1]
                let u = random_orthogonal(p, seed);
                let eig: Vec<f64> = (0..p)
                    .map(|i| if p == 1 { 1.0 } else { 10f64.powf(-log_cond * i as f64 / (p - 1) as f64) })
                    .collect();
                let m = SpdMatrix::new(&u * DMatrix::from_diagonal(&DVector::from_vec(eig)) * u.transpose()).unwrap();
                let back = spd_inverse(&spd_inverse(&m).unwrap()).unwrap();
                prop_assert!(frobenius_distance(&back, &m).unwrap() <= 1e-8);
            }

            #[test]
            fn frobenius_triangle(seed in any::<u64>(), p in 1usize..5) {
                let a = random_spd(p, seed);
                let b = random_spd(p, seed.wrapping_add(1));
                let c = random_spd(p, seed.wrapping_add(2));
                let ab = frobenius_distance(&a, &b).unwrap();
                let bc = frobenius_distance(&b, &c).unwrap();
                let ac = frobenius_distance(&a, &c).unwrap();
                prop_assert!(ac <= ab + bc + 1e-12);
            }
        }
    }
}
