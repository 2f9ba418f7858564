//! Symmetric positive semidefinite matrix algebra.
//!
//! Layer covariances live in the family `S_{d,floor}` of symmetric PSD
//! matrices `q` such that `q - floor * 1` is also PSD, where `1` is the
//! all-ones matrix. Every covariance carries its spectral decomposition and
//! its unique PSD square root, computed once at construction.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::value::RateValue;

/// Tolerance for deciding that two matrices coincide (Frobenius norm).
pub const TOL_EQ: f64 = 1e-9;

/// Relative tolerance of the range-membership test in [`min_norm_preimage`].
pub const TOL_RANGE: f64 = 1e-9;

/// Eigenvalue nonnegativity tolerance for a matrix of Frobenius norm `frob`.
pub fn tol_psd(frob: f64) -> f64 {
    1e-10 * (1.0 + frob)
}

/// A real symmetric matrix. Entries are stored symmetrized, so
/// `m[(i, j)] == m[(j, i)]` holds bit for bit.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Symmetrizes a square matrix as `(m + m^T) / 2`.
    pub fn from_matrix(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch {
                what: "square matrix columns",
                expected: m.nrows(),
                found: m.ncols(),
            });
        }
        if m.nrows() == 0 {
            return Err(Error::InvalidConfig("empty matrix".into()));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("matrix has non-finite entries".into()));
        }
        let t = m.transpose();
        Ok(SymMatrix((m + t) * 0.5))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::DimensionMismatch {
                what: "matrix row length",
                expected: d,
                found: bad.len(),
            });
        }
        Self::from_matrix(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
    }

    pub fn zeros(d: usize) -> Self {
        SymMatrix(DMatrix::zeros(d, d))
    }

    pub fn identity(d: usize) -> Self {
        SymMatrix(DMatrix::identity(d, d))
    }

    /// The all-ones matrix.
    pub fn ones(d: usize) -> Self {
        SymMatrix(DMatrix::from_element(d, d, 1.0))
    }

    pub fn scalar(v: f64) -> Self {
        SymMatrix(DMatrix::from_element(1, 1, v))
    }

    pub fn diagonal(values: &[f64]) -> Self {
        SymMatrix(DMatrix::from_diagonal(&DVector::from_column_slice(values)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn frobenius(&self) -> f64 {
        self.0.norm()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim())
            .map(|i| (0..self.dim()).map(|j| self.0[(i, j)]).collect())
            .collect()
    }

    /// `shift * 1 + scale * self`, with `1` the all-ones matrix.
    pub fn affine(&self, shift: f64, scale: f64) -> SymMatrix {
        SymMatrix(self.0.map(|v| shift + scale * v))
    }

    pub fn scaled(&self, c: f64) -> SymMatrix {
        SymMatrix(&self.0 * c)
    }

    /// Frobenius inner product `sum_ij a_ij b_ij`.
    pub fn dot(&self, other: &SymMatrix) -> f64 {
        self.0.dot(&other.0)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.0
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs_diff(&self, other: &SymMatrix) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Serialize for SymMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for SymMatrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        SymMatrix::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// Eigen-decomposition with eigenvalues clipped at zero.
#[derive(Clone, Debug)]
struct Spectrum {
    values: DVector<f64>,
    vectors: DMatrix<f64>,
    tol: f64,
}

impl Spectrum {
    fn of(q: &SymMatrix) -> Result<Self> {
        let tol = tol_psd(q.frobenius());
        let eig = SymmetricEigen::new(q.0.clone());
        let min = eig
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if min < -tol {
            return Err(Error::NotPsd {
                min_eigenvalue: min,
                tol,
            });
        }
        Ok(Spectrum {
            values: eig.eigenvalues.map(|v| v.max(0.0)),
            vectors: eig.eigenvectors,
            tol,
        })
    }

    fn compose(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let d = self.values.len();
        let mut scaled = self.vectors.clone();
        for k in 0..d {
            let fk = f(self.values[k]);
            scaled.column_mut(k).scale_mut(fk);
        }
        &scaled * self.vectors.transpose()
    }
}

/// Unique symmetric PSD square root. Eigenvalues in `[-tol_psd, 0)` are
/// clipped to zero first.
pub fn sqrt_psd(q: &SymMatrix) -> Result<SymMatrix> {
    let spec = Spectrum::of(q)?;
    SymMatrix::from_matrix(spec.compose(f64::sqrt))
}

/// Membership of `q` in `S_{d,floor}`: `q` and `q - floor * 1` both PSD.
pub fn in_family(q: &SymMatrix, floor: f64) -> bool {
    let tol = tol_psd(q.frobenius());
    if q.min_eigenvalue() < -tol {
        return false;
    }
    q.affine(-floor, 1.0).min_eigenvalue() >= -tol
}

/// A member of `S_{d,floor}` with its cached PSD square root.
#[derive(Clone, Debug)]
pub struct CovMatrix {
    base: SymMatrix,
    floor: f64,
    spectrum: Spectrum,
    sqrt: SymMatrix,
}

impl CovMatrix {
    pub fn new(base: SymMatrix, floor: f64) -> Result<Self> {
        if !(floor >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "covariance floor {floor} < 0"
            )));
        }
        let spectrum = Spectrum::of(&base)?;
        let tol = tol_psd(base.frobenius());
        let shifted_min = base.affine(-floor, 1.0).min_eigenvalue();
        if shifted_min < -tol {
            return Err(Error::NotInFamily {
                floor,
                min_eigenvalue: shifted_min,
            });
        }
        let sqrt = SymMatrix::from_matrix(spectrum.compose(f64::sqrt))?;
        Ok(CovMatrix {
            base,
            floor,
            spectrum,
            sqrt,
        })
    }

    /// A PSD matrix with floor zero.
    pub fn psd(base: SymMatrix) -> Result<Self> {
        Self::new(base, 0.0)
    }

    pub fn scalar(v: f64, floor: f64) -> Result<Self> {
        Self::new(SymMatrix::scalar(v), floor)
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn base(&self) -> &SymMatrix {
        &self.base
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    /// The PSD square root `q^#`.
    pub fn sqrt(&self) -> &SymMatrix {
        &self.sqrt
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.base.get(i, j)
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.spectrum.values
    }

    /// Moore-Penrose pseudo-inverse, dropping eigenvalues `<= tol_psd`.
    pub fn pseudo_inverse(&self) -> DMatrix<f64> {
        let tol = self.spectrum.tol;
        self.spectrum
            .compose(|v| if v > tol { 1.0 / v } else { 0.0 })
    }

    /// Pseudo-inverse of the square root.
    pub fn sqrt_pseudo_inverse(&self) -> DMatrix<f64> {
        let tol = self.spectrum.tol;
        self.spectrum
            .compose(|v| if v > tol { 1.0 / v.sqrt() } else { 0.0 })
    }

    /// Orthogonal projector onto the eigenspaces with eigenvalue `> tol_psd`.
    pub fn range_projector(&self) -> DMatrix<f64> {
        let tol = self.spectrum.tol;
        self.spectrum.compose(|v| if v > tol { 1.0 } else { 0.0 })
    }
}

impl PartialEq for CovMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.base == other.base && self.floor == other.floor
    }
}

impl Serialize for CovMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.base.serialize(s)
    }
}

/// `inf { |r|^2 / 2 : g^# r = z }` over `r` with the shape of `z`.
///
/// Returns `+inf` (and no certificate) when some column of `z` leaves the
/// range of `g^#`; otherwise the value `1/2 sum_h z_h^T g^+ z_h` together
/// with the minimizer `r = (g^#)^+ z`.
pub fn min_norm_preimage(
    g: &CovMatrix,
    z: &DMatrix<f64>,
) -> Result<(RateValue, Option<DMatrix<f64>>)> {
    if z.nrows() != g.dim() {
        return Err(Error::DimensionMismatch {
            what: "rows of z",
            expected: g.dim(),
            found: z.nrows(),
        });
    }
    let proj = g.range_projector();
    for h in 0..z.ncols() {
        let col = z.column(h);
        let residual = col - &proj * col;
        if residual.norm() > TOL_RANGE * (1.0 + col.norm()) {
            return Ok((RateValue::INFINITY, None));
        }
    }
    let r = g.sqrt_pseudo_inverse() * z;
    let value = 0.5 * r.norm_squared();
    Ok((RateValue::new(value), Some(r)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn mat(rows: &[&[f64]]) -> SymMatrix {
        SymMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn sqrt_of_identity_and_diagonal() {
        let r = sqrt_psd(&SymMatrix::identity(2)).unwrap();
        assert!(r.max_abs_diff(&SymMatrix::identity(2)) < 1e-15);
        let r = sqrt_psd(&SymMatrix::diagonal(&[4.0, 9.0])).unwrap();
        assert!(r.max_abs_diff(&SymMatrix::diagonal(&[2.0, 3.0])) < 1e-14);
    }

    #[test]
    fn sqrt_squares_back() {
        let q = mat(&[&[2.0, 1.0], &[1.0, 2.0]]);
        let r = sqrt_psd(&q).unwrap();
        let err = (r.as_matrix() * r.as_matrix() - q.as_matrix()).norm();
        assert!(err <= 1e-10, "err {err}");
    }

    #[test]
    fn sqrt_rejects_indefinite() {
        let q = mat(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert!(matches!(sqrt_psd(&q), Err(Error::NotPsd { .. })));
    }

    #[test]
    fn tiny_negative_eigenvalues_are_clipped() {
        let q = mat(&[&[1.0, 1.0], &[1.0, 1.0 - 1e-13]]);
        let r = sqrt_psd(&q).unwrap();
        assert!(r.min_eigenvalue() >= -1e-12);
    }

    #[test]
    fn family_membership() {
        assert!(in_family(&SymMatrix::identity(2), 0.0));
        // diag(1,1) - 1 = [[0,-1],[-1,0]] has eigenvalue -1.
        assert!(!in_family(&SymMatrix::identity(2), 1.0));
        assert!(in_family(&SymMatrix::ones(2).scaled(2.0), 1.0));
    }

    #[test]
    fn cov_matrix_checks_floor() {
        assert!(matches!(
            CovMatrix::new(SymMatrix::identity(2), 1.0),
            Err(Error::NotInFamily { .. })
        ));
        let c = CovMatrix::new(mat(&[&[2.0, 1.0], &[1.0, 2.0]]), 1.0).unwrap();
        let s = c.sqrt().as_matrix();
        assert!((s * s - c.base().as_matrix()).norm() < 1e-12);
    }

    #[test]
    fn min_norm_examples() {
        let g = CovMatrix::psd(SymMatrix::identity(2).scaled(2.0)).unwrap();
        let z = DMatrix::from_column_slice(2, 1, &[2.0, 0.0]);
        let (v, r) = min_norm_preimage(&g, &z).unwrap();
        assert_abs_diff_eq!(v.value(), 1.0, epsilon = 1e-14);
        let r = r.unwrap();
        assert_abs_diff_eq!(r[(0, 0)], 2f64.sqrt(), epsilon = 1e-14);

        let (v, r) = min_norm_preimage(&g, &DMatrix::zeros(2, 1)).unwrap();
        assert_eq!(v, RateValue::ZERO);
        assert_eq!(r.unwrap().norm(), 0.0);

        let g = CovMatrix::psd(SymMatrix::ones(2)).unwrap();
        let z = DMatrix::from_column_slice(2, 1, &[1.0, -1.0]);
        let (v, r) = min_norm_preimage(&g, &z).unwrap();
        assert!(v.is_infinite());
        assert!(r.is_none());

        // In range of the rank-one root: finite.
        let z = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        let (v, _) = min_norm_preimage(&g, &z).unwrap();
        // g^+ = 1/4 * ones, so 1/2 * z^T g^+ z = 1/2.
        assert_abs_diff_eq!(v.value(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn min_norm_rejects_bad_shape() {
        let g = CovMatrix::psd(SymMatrix::identity(2)).unwrap();
        assert!(min_norm_preimage(&g, &DMatrix::zeros(3, 1)).is_err());
    }

    fn random_psd(d: usize, k: usize, entries: &[f64]) -> SymMatrix {
        let a = DMatrix::from_fn(k, d, |i, j| entries[(i * d + j) % entries.len()]);
        SymMatrix::from_matrix(a.transpose() * a).unwrap()
    }

    proptest! {
        #[test]
        fn sqrt_roundtrip(d in 1usize..=6, k in 1usize..=7,
                          entries in prop::collection::vec(-3.0f64..3.0, 42)) {
            let q = random_psd(d, k, &entries);
            let r = sqrt_psd(&q).unwrap();
            let err = (r.as_matrix() * r.as_matrix() - q.as_matrix()).norm();
            prop_assert!(err <= 1e-10 * (1.0 + q.frobenius()));
            prop_assert!(r.min_eigenvalue() >= -1e-10);
        }

        #[test]
        fn min_norm_matches_direct_inverse(entries in prop::collection::vec(-2.0f64..2.0, 42),
                                           zs in prop::collection::vec(-2.0f64..2.0, 6)) {
            let q = random_psd(3, 5, &entries);
            prop_assume!(q.min_eigenvalue() > 1e-3);
            let g = CovMatrix::psd(q.clone()).unwrap();
            let z = DMatrix::from_column_slice(3, 2, &zs);
            let (v, _) = min_norm_preimage(&g, &z).unwrap();
            let inv = q.as_matrix().clone().try_inverse().unwrap();
            let direct = 0.5 * (z.transpose() * inv * &z).trace();
            prop_assert!((v.value() - direct).abs() <= 1e-9 * (1.0 + direct.abs()));
        }

        #[test]
        fn min_norm_is_quadratic_in_z(entries in prop::collection::vec(-2.0f64..2.0, 42),
                                      zs in prop::collection::vec(-2.0f64..2.0, 3),
                                      c in -4.0f64..4.0) {
            let g = CovMatrix::psd(random_psd(3, 4, &entries)).unwrap();
            let z = DMatrix::from_column_slice(3, 1, &zs);
            let (v1, _) = min_norm_preimage(&g, &z).unwrap();
            let (vc, _) = min_norm_preimage(&g, &(&z * c)).unwrap();
            if v1.is_finite() && vc.is_finite() {
                prop_assert!((vc.value() - c * c * v1.value()).abs() <= 1e-8 * (1.0 + vc.value()));
            }
        }
    }
}
