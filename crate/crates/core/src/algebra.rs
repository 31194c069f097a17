//! Dense complex operator algebra on `C^n`.
//!
//! Matrices are `nalgebra` dynamic matrices of `Complex64`. Superoperators act
//! on `n x n` matrices through their column-stacked vectorization:
//! `vec(X)[i + n j] = X[(i, j)]`, so that `vec(A X B) = (B^T ⊗ A) vec(X)`.
//! This matches the column-major storage of `DMatrix`, which makes `vec` a
//! plain copy of the storage.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type OperatorMatrix = DMatrix<C64>;
pub type StateVector = DVector<C64>;
/// Hermitian positive semidefinite matrix whose trace may differ from one.
pub type DensityLike = DMatrix<C64>;

pub const TOL_HERM: f64 = 1e-10;
pub const TOL_PSD: f64 = 1e-10;

pub const I: C64 = C64::new(0.0, 1.0);

#[inline]
pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

pub fn identity(n: usize) -> OperatorMatrix {
    DMatrix::identity(n, n)
}

pub fn pauli_x() -> OperatorMatrix {
    DMatrix::from_row_slice(2, 2, &[c(0., 0.), c(1., 0.), c(1., 0.), c(0., 0.)])
}

pub fn pauli_y() -> OperatorMatrix {
    DMatrix::from_row_slice(2, 2, &[c(0., 0.), c(0., -1.), c(0., 1.), c(0., 0.)])
}

pub fn pauli_z() -> OperatorMatrix {
    DMatrix::from_row_slice(2, 2, &[c(1., 0.), c(0., 0.), c(0., 0.), c(-1., 0.)])
}

/// Lowering operator `|0><1|`; `|0>` is the upper level.
pub fn sigma_minus() -> OperatorMatrix {
    DMatrix::from_row_slice(2, 2, &[c(0., 0.), c(1., 0.), c(0., 0.), c(0., 0.)])
}

pub fn basis_state(n: usize, k: usize) -> StateVector {
    let mut v = DVector::zeros(n);
    v[k] = c(1.0, 0.0);
    v
}

pub fn projector(psi: &StateVector) -> DensityLike {
    psi * psi.adjoint()
}

pub fn ensure_square(a: &OperatorMatrix) -> Result<usize> {
    if a.nrows() != a.ncols() {
        return Err(Error::NotSquare {
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    Ok(a.nrows())
}

pub fn ensure_same_dim(a: &OperatorMatrix, b: &OperatorMatrix) -> Result<usize> {
    let n = ensure_square(a)?;
    let m = ensure_square(b)?;
    if n != m {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: m,
        });
    }
    Ok(n)
}

pub fn is_finite(a: &DMatrix<C64>) -> bool {
    a.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

pub fn is_finite_vec(v: &StateVector) -> bool {
    v.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

/// `ab - ba`.
pub fn commutator(a: &OperatorMatrix, b: &OperatorMatrix) -> Result<OperatorMatrix> {
    ensure_same_dim(a, b)?;
    Ok(a * b - b * a)
}

pub fn anticommutator(a: &OperatorMatrix, b: &OperatorMatrix) -> Result<OperatorMatrix> {
    ensure_same_dim(a, b)?;
    Ok(a * b + b * a)
}

/// `l rho l* - 1/2 {l* l, rho}`.
pub fn dissipator(l: &OperatorMatrix, rho: &DensityLike) -> Result<DensityLike> {
    ensure_same_dim(l, rho)?;
    let ldag = l.adjoint();
    let ldl = &ldag * l;
    Ok(l * rho * &ldag - (&ldl * rho + rho * &ldl) * c(0.5, 0.0))
}

/// Largest entrywise modulus of `a - a*`.
pub fn hermiticity_defect(a: &OperatorMatrix) -> f64 {
    max_abs(&(a - a.adjoint()))
}

pub fn max_abs(a: &DMatrix<C64>) -> f64 {
    a.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// `(a + a*)/2`; the result is Hermitian bit-for-bit.
pub fn hermitian_part(a: &OperatorMatrix) -> OperatorMatrix {
    (a + a.adjoint()) * c(0.5, 0.0)
}

/// `(a - a*)/2`.
pub fn anti_hermitian_part(a: &OperatorMatrix) -> OperatorMatrix {
    (a - a.adjoint()) * c(0.5, 0.0)
}

/// Accepts a matrix that is Hermitian within `tol` and returns its exact
/// Hermitian part; rejects anything further off.
pub fn symmetrize_hermitian(
    a: &OperatorMatrix,
    tol: f64,
    what: &'static str,
) -> Result<OperatorMatrix> {
    ensure_square(a)?;
    if !is_finite(a) {
        return Err(Error::NonFinite(what));
    }
    let defect = hermiticity_defect(a);
    if defect > tol {
        return Err(Error::NotHermitian { what, defect });
    }
    Ok(hermitian_part(a))
}

/// Spectral norm (largest singular value).
pub fn operator_norm(a: &OperatorMatrix) -> f64 {
    a.clone()
        .singular_values()
        .iter()
        .copied()
        .fold(0.0, f64::max)
}

/// Induced 1-norm (maximum absolute column sum).
pub fn one_norm(a: &DMatrix<C64>) -> f64 {
    a.column_iter()
        .map(|col| col.iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Ratio of the largest to the smallest singular value; infinite when singular.
pub fn condition_number(a: &OperatorMatrix) -> f64 {
    let sv = a.clone().singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Eigenvalues of the Hermitian part, ascending.
pub fn hermitian_eigenvalues(a: &OperatorMatrix) -> Vec<f64> {
    let mut ev: Vec<f64> = hermitian_part(a)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .collect();
    ev.sort_by(|x, y| x.total_cmp(y));
    ev
}

/// Column-stacking vectorization.
pub fn vectorize(x: &DMatrix<C64>) -> DVector<C64> {
    DVector::from_column_slice(x.as_slice())
}

pub fn devectorize(v: &DVector<C64>, n: usize) -> Result<DMatrix<C64>> {
    if v.len() != n * n {
        return Err(Error::DimensionMismatch {
            expected: n * n,
            found: v.len(),
        });
    }
    Ok(DMatrix::from_column_slice(n, n, v.as_slice()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityReport {
    pub hermiticity_defect: f64,
    pub min_eigenvalue: f64,
    pub trace: C64,
    pub pass: bool,
}

/// Hermiticity defect, smallest eigenvalue and trace of `rho`; passes when
/// both the defect and the negative part stay within `tol`.
pub fn check_density(rho: &DensityLike, tol: f64) -> DensityReport {
    let hermiticity_defect = hermiticity_defect(rho);
    let min_eigenvalue = hermitian_eigenvalues(rho)
        .first()
        .copied()
        .unwrap_or(0.0);
    let trace = rho.trace();
    let pass = hermiticity_defect <= tol && min_eigenvalue >= -tol && trace.im.abs() <= tol;
    DensityReport {
        hermiticity_defect,
        min_eigenvalue,
        trace,
        pass,
    }
}

/// Linear map on `n x n` matrices stored as its `n^2 x n^2` matrix in the
/// column-stacking convention.
#[derive(Debug, Clone, PartialEq)]
pub struct Superoperator {
    dim: usize,
    matrix: DMatrix<C64>,
}

impl Superoperator {
    pub fn from_matrix(dim: usize, matrix: DMatrix<C64>) -> Result<Self> {
        let n2 = dim * dim;
        if matrix.nrows() != n2 || matrix.ncols() != n2 {
            return Err(Error::DimensionMismatch {
                expected: n2,
                found: matrix.nrows().max(matrix.ncols()),
            });
        }
        Ok(Self { dim, matrix })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            dim,
            matrix: DMatrix::identity(dim * dim, dim * dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            matrix: DMatrix::zeros(dim * dim, dim * dim),
        }
    }

    /// `X -> left X right`.
    pub fn from_form(left: &OperatorMatrix, right: &OperatorMatrix) -> Result<Self> {
        let dim = ensure_same_dim(left, right)?;
        Ok(Self {
            dim,
            matrix: right.transpose().kronecker(left),
        })
    }

    /// `X -> a X - X a`.
    pub fn commutator_with(a: &OperatorMatrix) -> Result<Self> {
        let n = ensure_square(a)?;
        let id = identity(n);
        Ok(Self {
            dim: n,
            matrix: id.kronecker(a) - a.transpose().kronecker(&id),
        })
    }

    /// `X -> l X l* - 1/2 {l* l, X}`.
    pub fn dissipator_of(l: &OperatorMatrix) -> Result<Self> {
        let n = ensure_square(l)?;
        let id = identity(n);
        let ldl = l.adjoint() * l;
        let jump = Self::from_form(l, &l.adjoint())?;
        let anti = Self::from_form(&ldl, &id)?.add(&Self::from_form(&id, &ldl)?)?;
        jump.add(&anti.scale(c(-0.5, 0.0)))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.matrix
    }

    pub fn apply(&self, x: &DMatrix<C64>) -> Result<DMatrix<C64>> {
        if x.nrows() != self.dim || x.ncols() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: x.nrows().max(x.ncols()),
            });
        }
        let v = &self.matrix * vectorize(x);
        devectorize(&v, self.dim)
    }

    /// `self ∘ other`, i.e. `other` acts first.
    pub fn compose(&self, other: &Self) -> Result<Self> {
        self.check_dim(other)?;
        Ok(Self {
            dim: self.dim,
            matrix: &self.matrix * &other.matrix,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_dim(other)?;
        Ok(Self {
            dim: self.dim,
            matrix: &self.matrix + &other.matrix,
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_dim(other)?;
        Ok(Self {
            dim: self.dim,
            matrix: &self.matrix - &other.matrix,
        })
    }

    pub fn scale(&self, factor: C64) -> Self {
        Self {
            dim: self.dim,
            matrix: &self.matrix * factor,
        }
    }

    /// `self - shift * id`.
    pub fn shifted(&self, shift: f64) -> Self {
        let mut matrix = self.matrix.clone();
        for k in 0..matrix.nrows() {
            matrix[(k, k)] -= c(shift, 0.0);
        }
        Self {
            dim: self.dim,
            matrix,
        }
    }

    /// Largest `|Tr S[E_ij]|` over matrix units; zero for trace-annihilating maps.
    pub fn trace_defect(&self) -> f64 {
        // Tr S[X] = sum_i (S vec X)[i + n i], so the trace functional is the
        // sum of the "diagonal" rows.
        let n = self.dim;
        (0..n * n)
            .map(|col| {
                (0..n)
                    .map(|i| self.matrix[(i + n * i, col)])
                    .sum::<C64>()
                    .norm()
            })
            .fold(0.0, f64::max)
    }

    pub fn operator_norm(&self) -> f64 {
        operator_norm(&self.matrix)
    }

    fn check_dim(&self, other: &Self) -> Result<()> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: other.dim,
            });
        }
        Ok(())
    }
}

pub fn superop_from_form(left: &OperatorMatrix, right: &OperatorMatrix) -> Result<Superoperator> {
    Superoperator::from_form(left, right)
}

/// `e^{s t}` by scaling and squaring a truncated Taylor series.
pub fn superop_exp(s: &Superoperator, t: f64) -> Result<Superoperator> {
    if !t.is_finite() || t < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "exponential time must be finite and nonnegative, got {t}"
        )));
    }
    if !is_finite(&s.matrix) {
        return Err(Error::NonFinite("superoperator"));
    }
    Ok(Superoperator {
        dim: s.dim,
        matrix: expm(&(&s.matrix * c(t, 0.0))),
    })
}

/// Matrix exponential of a finite square matrix.
pub fn expm(a: &DMatrix<C64>) -> DMatrix<C64> {
    let m = a.nrows();
    let norm = one_norm(a);
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let scaled = a * c(0.5f64.powi(squarings), 0.0);

    let mut result = DMatrix::<C64>::identity(m, m);
    let mut term = DMatrix::<C64>::identity(m, m);
    for k in 1..=30 {
        term = &term * &scaled * c(1.0 / k as f64, 0.0);
        result += &term;
        if one_norm(&term) <= f64::EPSILON * one_norm(&result) * 1e-3 {
            break;
        }
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(n: usize, rng: &mut ChaCha8Rng) -> OperatorMatrix {
        DMatrix::from_fn(n, n, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
    }

    fn random_density(n: usize, rng: &mut ChaCha8Rng) -> DensityLike {
        let g = random_matrix(n, rng);
        let rho = &g * g.adjoint();
        let tr = rho.trace();
        rho / tr
    }

    fn assert_close(a: &DMatrix<C64>, b: &DMatrix<C64>, tol: f64) {
        let d = max_abs(&(a - b));
        assert!(d <= tol, "matrices differ by {d:e}\n{a}\n{b}");
    }

    #[test]
    fn pauli_commutators() {
        let z = pauli_z();
        let x = pauli_x();
        let y = pauli_y();
        assert_close(&commutator(&z, &x).unwrap(), &(&y * c(0., 2.)), 0.0);
        assert_close(&commutator(&x, &y).unwrap(), &(&z * c(0., 2.)), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_matrix(3, &mut rng);
        assert_close(&commutator(&identity(3), &a).unwrap(), &DMatrix::zeros(3, 3), 0.0);
    }

    #[test]
    fn commutator_rejects_mismatch() {
        let err = commutator(&identity(2), &identity(3)).unwrap_err();
        assert_eq!(err, Error::DimensionMismatch { expected: 2, found: 3 });
    }

    #[test]
    fn dissipator_examples() {
        let rho = projector(&basis_state(2, 1));
        let expected = projector(&basis_state(2, 0)) - projector(&basis_state(2, 1));
        assert_close(&dissipator(&sigma_minus(), &rho).unwrap(), &expected, 1e-15);

        // σz ρ σz - ρ for ρ = σx gives -2σx
        assert_close(&dissipator(&pauli_z(), &pauli_x()).unwrap(), &(pauli_x() * c(-2., 0.)), 1e-15);

        // commuting Hermitian l and rho
        let rho = DMatrix::from_diagonal(&DVector::from_vec(vec![c(0.3, 0.), c(0.7, 0.)]));
        assert_close(&dissipator(&pauli_z(), &rho).unwrap(), &DMatrix::zeros(2, 2), 1e-15);
    }

    #[test]
    fn from_form_examples() {
        let id = superop_from_form(&identity(2), &identity(2)).unwrap();
        assert_eq!(id, Superoperator::identity(2));
        let s = superop_from_form(&pauli_x(), &identity(2)).unwrap();
        let out = s.apply(&projector(&basis_state(2, 0))).unwrap();
        let mut expected = DMatrix::zeros(2, 2);
        expected[(1, 0)] = c(1., 0.);
        assert_close(&out, &expected, 0.0);
    }

    #[test]
    fn from_form_matches_direct_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [2, 3, 4] {
            let l = random_matrix(n, &mut rng);
            let r = random_matrix(n, &mut rng);
            let s = superop_from_form(&l, &r).unwrap();
            for _ in 0..10 {
                let x = random_matrix(n, &mut rng);
                assert_close(&s.apply(&x).unwrap(), &(&l * &x * &r), 1e-12);
            }
        }
    }

    #[test]
    fn commutator_and_dissipator_superoperators_match_direct_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_matrix(3, &mut rng);
        let x = random_matrix(3, &mut rng);
        let cs = Superoperator::commutator_with(&a).unwrap();
        assert_close(&cs.apply(&x).unwrap(), &commutator(&a, &x).unwrap(), 1e-12);
        let ds = Superoperator::dissipator_of(&a).unwrap();
        assert_close(&ds.apply(&x).unwrap(), &dissipator(&a, &x).unwrap(), 1e-12);
        assert!(ds.trace_defect() < 1e-12);
    }

    #[test]
    fn exp_at_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = Superoperator::from_matrix(2, random_matrix(4, &mut rng)).unwrap();
        assert_eq!(superop_exp(&s, 0.0).unwrap(), Superoperator::identity(2));
    }

    #[test]
    fn exp_of_nilpotent_is_linear() {
        let mut m = DMatrix::zeros(4, 4);
        m[(0, 3)] = c(2.5, -1.0);
        m[(1, 2)] = c(0.0, 0.7);
        let s = Superoperator::from_matrix(2, m.clone()).unwrap();
        let e = superop_exp(&s, 1.3).unwrap();
        let expected = DMatrix::identity(4, 4) + m * c(1.3, 0.);
        assert_close(e.matrix(), &expected, 1e-15);
    }

    #[test]
    fn exp_dephasing_decays_coherences() {
        // -1/2 [λσz, [λσz, ·]] kills |0><1| at rate 2λ²
        let lambda = 0.7;
        let l = pauli_z() * c(lambda, 0.);
        let cl = Superoperator::commutator_with(&l).unwrap();
        let gen = cl.compose(&cl).unwrap().scale(c(-0.5, 0.));
        let t = 1.7;
        let e = superop_exp(&gen, t).unwrap();
        let rho = DMatrix::from_row_slice(2, 2, &[c(0.4, 0.), c(0.1, 0.2), c(0.1, -0.2), c(0.6, 0.)]);
        let out = e.apply(&rho).unwrap();
        let f = (-2.0 * lambda * lambda * t).exp();
        assert_abs_diff_eq!(out[(0, 0)].re, 0.4, epsilon = 1e-13);
        assert_abs_diff_eq!(out[(1, 1)].re, 0.6, epsilon = 1e-13);
        assert_abs_diff_eq!((out[(0, 1)] - rho[(0, 1)] * f).norm(), 0.0, epsilon = 1e-13);
    }

    #[test]
    fn exp_matches_nalgebra_exponential() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_matrix(4, &mut rng) * c(3.0, 0.0);
        let ours = expm(&a);
        let reference = a.clone().exp();
        assert_close(&ours, &reference, 1e-11 * one_norm(&reference));
    }

    #[test]
    fn exp_semigroup() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = hermitian_part(&random_matrix(2, &mut rng));
        let l = random_matrix(2, &mut rng);
        let gen = Superoperator::commutator_with(&h)
            .unwrap()
            .scale(-I)
            .add(&Superoperator::dissipator_of(&l).unwrap())
            .unwrap();
        let a = superop_exp(&gen, 0.4).unwrap();
        let b = superop_exp(&gen, 1.1).unwrap();
        let ab = superop_exp(&gen, 1.5).unwrap();
        assert_close(a.compose(&b).unwrap().matrix(), ab.matrix(), 1e-10);
    }

    #[test]
    fn lindblad_exponential_keeps_trace_and_positivity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let h = hermitian_part(&random_matrix(3, &mut rng));
            let l = random_matrix(3, &mut rng);
            let gen = Superoperator::commutator_with(&h)
                .unwrap()
                .scale(-I)
                .add(&Superoperator::dissipator_of(&l).unwrap())
                .unwrap();
            let rho = random_density(3, &mut rng);
            let out = superop_exp(&gen, 2.0).unwrap().apply(&rho).unwrap();
            let report = check_density(&out, TOL_PSD);
            assert!((report.trace - c(1.0, 0.0)).norm() < 1e-10);
            assert!(report.min_eigenvalue >= -TOL_PSD, "{report:?}");
        }
    }

    #[test]
    fn exp_rejects_non_finite() {
        let mut m = DMatrix::zeros(4, 4);
        m[(0, 0)] = c(f64::NAN, 0.0);
        let s = Superoperator::from_matrix(2, m).unwrap();
        assert_eq!(superop_exp(&s, 1.0).unwrap_err(), Error::NonFinite("superoperator"));
    }

    #[test]
    fn density_checks() {
        let mixed = identity(3) / c(3.0, 0.0);
        assert!(check_density(&mixed, TOL_PSD).pass);
        let bad = check_density(&pauli_x(), TOL_PSD);
        assert!(!bad.pass);
        assert_abs_diff_eq!(bad.min_eigenvalue, -1.0, epsilon = 1e-14);
        assert!(check_density(&projector(&basis_state(2, 0)), TOL_PSD).pass);
    }

    #[test]
    fn symmetrize_accepts_small_defects_only() {
        let mut h = pauli_x();
        h[(0, 1)] += c(1e-12, 0.0);
        let s = symmetrize_hermitian(&h, TOL_HERM, "h").unwrap();
        assert_eq!(hermiticity_defect(&s), 0.0);
        h[(0, 1)] += c(1e-3, 0.0);
        assert!(matches!(
            symmetrize_hermitian(&h, TOL_HERM, "h"),
            Err(Error::NotHermitian { .. })
        ));
    }

    fn arb_matrix(n: usize) -> impl Strategy<Value = OperatorMatrix> {
        proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), n * n)
            .prop_map(move |v| DMatrix::from_iterator(n, n, v.into_iter().map(|(r, i)| c(r, i))))
    }

    proptest! {
        #[test]
        fn commutator_is_antisymmetric_and_bilinear(
            a in arb_matrix(3), b in arb_matrix(3), d in arb_matrix(3), s in -2.0f64..2.0
        ) {
            let ab = commutator(&a, &b).unwrap();
            let ba = commutator(&b, &a).unwrap();
            prop_assert!(max_abs(&(&ab + &ba)) <= 1e-12);
            let lhs = commutator(&(&a * c(s, 0.) + &d), &b).unwrap();
            let rhs = ab * c(s, 0.) + commutator(&d, &b).unwrap();
            prop_assert!(max_abs(&(lhs - rhs)) <= 1e-12);
        }

        #[test]
        fn dissipator_is_hermitian_and_traceless(l in arb_matrix(3), g in arb_matrix(3)) {
            let rho = &g * g.adjoint();
            let out = dissipator(&l, &rho).unwrap();
            prop_assert!(hermiticity_defect(&out) <= 1e-12);
            prop_assert!(out.trace().norm() <= 1e-12);
        }

        #[test]
        fn vectorization_round_trips_exactly(x in arb_matrix(4)) {
            prop_assert_eq!(devectorize(&vectorize(&x), 4).unwrap(), x);
        }
    }
}
