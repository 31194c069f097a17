//! Random coefficient processes `H(t)`, `R_j(t)` and the drift `K(t)`.
//!
//! A coefficient process is evaluated on a [`PathPrefix`], so it can only see
//! noise samples up to the current grid time. Two models are provided: a
//! constant (Markovian) one, and the random Hamiltonian driven by an
//! Ornstein-Uhlenbeck path, `H(t) = H0 - gamma X(t) L`, `R = -i L`.

use crate::algebra::{
    self, c, ensure_same_dim, ensure_square, hermiticity_defect, operator_norm,
    symmetrize_hermitian, OperatorMatrix, StateVector, I, TOL_HERM,
};
use crate::error::{Error, Result};
use crate::noise::{ou_path, wiener_increments, NoisePath, OuMode, PathPrefix, RandomStream, TimeGrid};

/// Absolute tolerance on operator norms for the norm-preservation conditions.
pub const TOL_NORM_CONDITION: f64 = 1e-10;

/// Coefficients at one grid time.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    pub h: OperatorMatrix,
    pub rs: Vec<OperatorMatrix>,
    pub k: OperatorMatrix,
}

pub trait CoefficientProcess: Send + Sync {
    fn dim(&self) -> usize;

    fn channels(&self) -> usize;

    /// The squared norm of the linear solution is pathwise constant.
    fn is_norm_preserving(&self) -> bool;

    fn is_random(&self) -> bool;

    /// Rate of the OU path the coefficients read, if any.
    fn ou_gamma(&self) -> Option<f64> {
        None
    }

    fn evaluate(&self, at: PathPrefix<'_>) -> Coefficients;
}

/// Driving noise suited to `model`: an OU path when it reads one, plain
/// Wiener increments otherwise.
pub fn sample_noise(
    model: &dyn CoefficientProcess,
    grid: &TimeGrid,
    stream: RandomStream,
    mode: OuMode,
) -> Result<NoisePath> {
    match model.ou_gamma() {
        Some(gamma) => ou_path(grid, gamma, stream, mode),
        None => wiener_increments(grid, model.channels(), stream),
    }
}

/// `K = -i H - 1/2 sum_j R_j* R_j`.
pub fn drift_k(h: &OperatorMatrix, rs: &[OperatorMatrix]) -> Result<OperatorMatrix> {
    let n = ensure_square(h)?;
    let defect = hermiticity_defect(h);
    if defect > TOL_HERM {
        return Err(Error::NotHermitian { what: "H", defect });
    }
    let mut k = h * (-I);
    for r in rs {
        ensure_same_dim(h, r)?;
        k -= r.adjoint() * r * c(0.5, 0.0);
    }
    debug_assert_eq!(k.nrows(), n);
    Ok(k)
}

/// Constant coefficients; ignores the noise path.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovianModel {
    coefficients: Coefficients,
}

pub fn markovian_model(h0: &OperatorMatrix, ls: &[OperatorMatrix]) -> Result<MarkovianModel> {
    let h = symmetrize_hermitian(h0, TOL_HERM, "H")?;
    for l in ls {
        ensure_same_dim(&h, l)?;
        if !algebra::is_finite(l) {
            return Err(Error::NonFinite("R"));
        }
    }
    let k = drift_k(&h, ls)?;
    Ok(MarkovianModel {
        coefficients: Coefficients {
            h,
            rs: ls.to_vec(),
            k,
        },
    })
}

impl MarkovianModel {
    pub fn coefficients(&self) -> &Coefficients {
        &self.coefficients
    }
}

impl CoefficientProcess for MarkovianModel {
    fn dim(&self) -> usize {
        self.coefficients.h.nrows()
    }

    fn channels(&self) -> usize {
        self.coefficients.rs.len()
    }

    fn is_norm_preserving(&self) -> bool {
        self.coefficients
            .rs
            .iter()
            .all(|r| algebra::max_abs(&(r + r.adjoint())) <= TOL_NORM_CONDITION)
    }

    fn is_random(&self) -> bool {
        false
    }

    fn evaluate(&self, _at: PathPrefix<'_>) -> Coefficients {
        self.coefficients.clone()
    }
}

/// Parameters of the OU random-Hamiltonian model.
#[derive(Debug, Clone, PartialEq)]
pub struct OUModel {
    h0: OperatorMatrix,
    l: OperatorMatrix,
    gamma: f64,
}

impl OUModel {
    pub fn new(h0: &OperatorMatrix, l: &OperatorMatrix, gamma: f64) -> Result<Self> {
        ensure_same_dim(h0, l)?;
        let h0 = symmetrize_hermitian(h0, TOL_HERM, "H0")?;
        let l = symmetrize_hermitian(l, TOL_HERM, "L")?;
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
        }
        Ok(Self { h0, l, gamma })
    }

    pub fn h0(&self) -> &OperatorMatrix {
        &self.h0
    }

    pub fn l(&self) -> &OperatorMatrix {
        &self.l
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn dim(&self) -> usize {
        self.h0.nrows()
    }

    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        Self::new(&self.h0, &self.l, gamma)
    }
}

/// `H(t) = H0 - gamma X(t) L`, `R = -i L`, `K(t) = -i H(t) - L^2 / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct OuHamiltonianModel {
    params: OUModel,
    r: OperatorMatrix,
    half_l2: OperatorMatrix,
}

pub fn ou_random_hamiltonian_model(m: &OUModel) -> Result<OuHamiltonianModel> {
    // re-run the checks in case the caller built the struct by cloning foreign data
    let params = OUModel::new(&m.h0, &m.l, m.gamma)?;
    let r = &params.l * (-I);
    let half_l2 = &params.l * &params.l * c(0.5, 0.0);
    Ok(OuHamiltonianModel { params, r, half_l2 })
}

impl OuHamiltonianModel {
    pub fn params(&self) -> &OUModel {
        &self.params
    }

    pub fn hamiltonian(&self, x: f64) -> OperatorMatrix {
        &self.params.h0 - &self.params.l * c(self.params.gamma * x, 0.0)
    }

    /// `||H0|| + gamma ||L|| max_k |X_k|`, an upper bound for `sup_k ||H(t_k)||` on this path.
    pub fn hamiltonian_norm_bound(&self, path: &NoisePath) -> f64 {
        let xmax = path
            .ou_samples()
            .map(|x| x.iter().fold(0.0f64, |m, v| m.max(v.abs())))
            .unwrap_or(0.0);
        operator_norm(&self.params.h0) + self.params.gamma * operator_norm(&self.params.l) * xmax
    }
}

impl CoefficientProcess for OuHamiltonianModel {
    fn dim(&self) -> usize {
        self.params.dim()
    }

    fn channels(&self) -> usize {
        1
    }

    fn is_norm_preserving(&self) -> bool {
        true
    }

    fn is_random(&self) -> bool {
        true
    }

    fn ou_gamma(&self) -> Option<f64> {
        Some(self.params.gamma)
    }

    fn evaluate(&self, at: PathPrefix<'_>) -> Coefficients {
        let x = at
            .x_now()
            .expect("OU random-Hamiltonian model evaluated on a path without OU samples");
        let h = self.hamiltonian(x);
        let k = &h * (-I) - &self.half_l2;
        Coefficients {
            h,
            rs: vec![self.r.clone()],
            k,
        }
    }
}

/// `(H0, L)` with `B = -i L` and `A = -i H0 - L^2 / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormPreservingParts {
    pub h0: OperatorMatrix,
    pub l: OperatorMatrix,
}

/// Checks that `d psi = A psi dt + B psi dX` has a martingale squared norm
/// for every OU sample (`B + B* = 0` and `A + A* + B*B = 0`) and recovers the
/// unique Hermitian pair `(H0, L)`.
pub fn validate_norm_preserving(a: &OperatorMatrix, b: &OperatorMatrix) -> Result<NormPreservingParts> {
    ensure_same_dim(a, b)?;
    let skew = operator_norm(&(b + b.adjoint()));
    if skew > TOL_NORM_CONDITION {
        return Err(Error::NotSkewAdjoint { defect: skew });
    }
    let drift = operator_norm(&(a + a.adjoint() + b.adjoint() * b));
    if drift > TOL_NORM_CONDITION {
        return Err(Error::DriftConditionViolated { defect: drift });
    }
    let l = symmetrize_hermitian(&(b * I), TOL_HERM, "L")?;
    let h0 = symmetrize_hermitian(&((a + &l * &l * c(0.5, 0.0)) * I), TOL_HERM, "H0")?;
    Ok(NormPreservingParts { h0, l })
}

/// `m_j = 2 Re <psi_hat | R_j psi_hat>` for a normalized state.
pub fn m_coefficients(psi_hat: &StateVector, rs: &[OperatorMatrix]) -> Result<Vec<f64>> {
    let norm = psi_hat.norm();
    if (norm - 1.0).abs() > 1e-8 {
        return Err(Error::NotNormalized { norm });
    }
    rs.iter()
        .map(|r| {
            if r.ncols() != psi_hat.len() {
                return Err(Error::DimensionMismatch {
                    expected: psi_hat.len(),
                    found: r.ncols(),
                });
            }
            Ok(2.0 * psi_hat.dotc(&(r * psi_hat)).re)
        })
        .collect()
}
