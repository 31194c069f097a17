//! Euler-Maruyama steppers for the linear and nonlinear stochastic
//! Schrödinger and master equations, the martingale weights, the Girsanov
//! shift and the one-step propagator table.

use nalgebra::DMatrix;

use crate::algebra::{
    self, c, dissipator, hermitian_part, is_finite, is_finite_vec, projector, DensityLike, OperatorMatrix,
    StateVector, I,
};
use crate::coefficients::{CoefficientProcess, Coefficients};
use crate::error::{Error, Result};
use crate::noise::{NoisePath, TimeGrid};

/// Squared norms below this mark a trajectory as dead.
pub const DEAD_NORM_SQUARED: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scheme {
    #[default]
    EulerMaruyama,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RenormPolicy {
    #[default]
    None,
    /// Rescale to the initial norm after every step; norm-preserving models only.
    Projective,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchemeInfo {
    pub dt: f64,
    pub scheme: Scheme,
    pub renorm: RenormPolicy,
}

/// `I + K dt + sum_j R_j dW_j`.
pub fn step_matrix(k: &OperatorMatrix, rs: &[OperatorMatrix], dt: f64, dw: &[f64]) -> OperatorMatrix {
    let n = k.nrows();
    let mut g = DMatrix::identity(n, n) + k * c(dt, 0.0);
    for (r, w) in rs.iter().zip(dw) {
        g += r * c(*w, 0.0);
    }
    g
}

/// One Euler-Maruyama step of `d psi = K psi dt + sum_j R_j psi dW_j`.
pub fn lsse_step(
    psi: &StateVector,
    k: &OperatorMatrix,
    rs: &[OperatorMatrix],
    dt: f64,
    dw: &[f64],
) -> Result<StateVector> {
    check_channels(rs, dw)?;
    let out = step_matrix(k, rs, dt, dw) * psi;
    if !is_finite_vec(&out) {
        return Err(Error::NonFinite("state after lSSE step"));
    }
    Ok(out)
}

fn check_channels(rs: &[OperatorMatrix], dw: &[f64]) -> Result<()> {
    if rs.len() != dw.len() {
        return Err(Error::DimensionMismatch {
            expected: rs.len(),
            found: dw.len(),
        });
    }
    Ok(())
}

/// `p = ||psi||^2`.
pub fn weight_direct(psi: &StateVector) -> f64 {
    psi.norm_squared()
}

/// `p0 exp{ sum_k sum_j (m_j dW_j - m_j^2 dt / 2) }` over the given `(m, dW)` steps.
pub fn weight_exponential<'a, I>(p0: f64, steps: I, dt: f64) -> f64
where
    I: IntoIterator<Item = (&'a [f64], &'a [f64])>,
{
    let exponent: f64 = steps
        .into_iter()
        .map(|(m, dw)| m.iter().zip(dw).map(|(m, w)| m * w - 0.5 * m * m * dt).sum::<f64>())
        .sum();
    p0 * exponent.exp()
}

/// `dW_hat = dW - m dt`.
pub fn girsanov_shift(dw: f64, m: f64, dt: f64) -> f64 {
    dw - m * dt
}

/// One Euler step of the nonlinear SSE driven by the physical increments `dwhat`.
pub fn nlsse_step(
    psi_hat: &StateVector,
    k: &OperatorMatrix,
    rs: &[OperatorMatrix],
    dt: f64,
    dwhat: &[f64],
    renorm: bool,
) -> Result<StateVector> {
    check_channels(rs, dwhat)?;
    let norm = psi_hat.norm();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(Error::NotNormalized { norm });
    }
    let mut out = psi_hat + (k * psi_hat) * c(dt, 0.0);
    for (r, w) in rs.iter().zip(dwhat) {
        let r_psi = r * psi_hat;
        let re_n = psi_hat.dotc(&r_psi).re;
        // drift: (Re n) R - (Re n)^2 / 2; diffusion: R - Re n
        out += &r_psi * c(re_n * dt + w, 0.0) - psi_hat * c(0.5 * re_n * re_n * dt + re_n * w, 0.0);
    }
    if !is_finite_vec(&out) {
        return Err(Error::NonFinite("state after SSE step"));
    }
    if renorm {
        let n2 = out.norm_squared();
        if n2 < DEAD_NORM_SQUARED {
            return Err(Error::VanishingNorm { step: 0 });
        }
        out /= c(n2.sqrt(), 0.0);
    }
    Ok(out)
}

/// `-i [H, rho] + sum_j (R_j rho R_j* - 1/2 {R_j* R_j, rho})`.
pub fn liouvillian(h: &OperatorMatrix, rs: &[OperatorMatrix], rho: &DensityLike) -> Result<DensityLike> {
    let mut out = algebra::commutator(h, rho)? * (-I);
    for r in rs {
        out += dissipator(r, rho)?;
    }
    Ok(out)
}

/// `rho -> R rho + rho R*`.
pub fn r_map(r: &OperatorMatrix, rho: &DensityLike) -> DensityLike {
    r * rho + rho * r.adjoint()
}

/// One Euler step of the linear stochastic master equation for `sigma`.
pub fn lsme_step(
    sigma: &DensityLike,
    h: &OperatorMatrix,
    rs: &[OperatorMatrix],
    dt: f64,
    dw: &[f64],
) -> Result<DensityLike> {
    check_channels(rs, dw)?;
    let mut out = sigma + liouvillian(h, rs, sigma)? * c(dt, 0.0);
    for (r, w) in rs.iter().zip(dw) {
        out += r_map(r, sigma) * c(*w, 0.0);
    }
    let out = hermitian_part(&out);
    if !is_finite(&out) {
        return Err(Error::NonFinite("matrix after lSME step"));
    }
    Ok(out)
}

/// One Euler step of the nonlinear master equation, renormalized to unit trace.
pub fn nlsme_step(
    varrho: &DensityLike,
    h: &OperatorMatrix,
    rs: &[OperatorMatrix],
    dt: f64,
    dwhat: &[f64],
) -> Result<DensityLike> {
    check_channels(rs, dwhat)?;
    let mut out = varrho + liouvillian(h, rs, varrho)? * c(dt, 0.0);
    for (r, w) in rs.iter().zip(dwhat) {
        let v = ((r + r.adjoint()) * varrho).trace().re;
        out += (r_map(r, varrho) - varrho * c(v, 0.0)) * c(*w, 0.0);
    }
    let out = hermitian_part(&out);
    if !is_finite(&out) {
        return Err(Error::NonFinite("matrix after SME step"));
    }
    let tr = out.trace().re;
    if tr.is_nan() || tr <= 0.0 {
        return Err(Error::VanishingNorm { step: 0 });
    }
    Ok(out / c(tr, 0.0))
}

/// Result of integrating one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub states: Vec<StateVector>,
    pub weights: Vec<f64>,
    /// `m_j(t_k)` for every grid point.
    pub m: Vec<Vec<f64>>,
    pub sigma: Option<Vec<DensityLike>>,
    pub scheme: SchemeInfo,
    /// First grid index where the squared norm fell below [`DEAD_NORM_SQUARED`].
    pub dead_at: Option<usize>,
}

impl Trajectory {
    pub fn is_dead(&self) -> bool {
        self.dead_at.is_some()
    }

    /// Normalized state `psi / ||psi||` (zero vector once dead).
    pub fn normalized(&self, k: usize) -> StateVector {
        let n = self.states[k].norm();
        if n > 0.0 {
            &self.states[k] / c(n, 0.0)
        } else {
            self.states[k].clone()
        }
    }

    pub fn max_norm_deviation(&self) -> f64 {
        let p0 = self.weights[0];
        self.weights.iter().map(|p| (p - p0).abs()).fold(0.0, f64::max)
    }
}

fn trajectory_index(path: &NoisePath) -> usize {
    path.stream().map(|s| s.index as usize).unwrap_or(0)
}

fn check_inputs(model: &dyn CoefficientProcess, path: &NoisePath, psi0: &StateVector) -> Result<()> {
    if psi0.len() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            found: psi0.len(),
        });
    }
    if path.channels() != model.channels() {
        return Err(Error::DimensionMismatch {
            expected: model.channels(),
            found: path.channels(),
        });
    }
    if model.ou_gamma().is_some() && path.ou_samples().is_none() {
        return Err(Error::InvalidArgument("model reads an OU path but the noise has none".into()));
    }
    if !is_finite_vec(psi0) {
        return Err(Error::NonFinite("initial state"));
    }
    Ok(())
}

/// Integrates the linear SSE along `path`, calling `visit(k, psi_k, coeff_k)`
/// for every grid point. Returns the death index, if any.
pub(crate) fn drive_linear<F>(
    model: &dyn CoefficientProcess,
    path: &NoisePath,
    psi0: &StateVector,
    renorm: RenormPolicy,
    mut visit: F,
) -> Result<Option<usize>>
where
    F: FnMut(usize, &StateVector, &Coefficients),
{
    check_inputs(model, path, psi0)?;
    if renorm == RenormPolicy::Projective && !model.is_norm_preserving() {
        return Err(Error::InvalidArgument(
            "projective renormalization needs a norm-preserving model".into(),
        ));
    }
    let grid = *path.grid();
    let target = psi0.norm();
    let mut psi = psi0.clone();
    let mut dead_at = None;
    if psi.norm_squared() < DEAD_NORM_SQUARED {
        dead_at = Some(0);
        psi.fill(c(0.0, 0.0));
    }
    for k in 0..=grid.steps() {
        let coeff = model.evaluate(path.prefix(k));
        visit(k, &psi, &coeff);
        if k == grid.steps() {
            break;
        }
        if dead_at.is_some() {
            continue;
        }
        psi = lsse_step(&psi, &coeff.k, &coeff.rs, grid.dt(), path.dw(k)).map_err(|_| Error::BlowUp {
            trajectory: trajectory_index(path),
            step: k + 1,
        })?;
        if renorm == RenormPolicy::Projective {
            let n = psi.norm();
            psi *= c(target / n, 0.0);
        }
        if psi.norm_squared() < DEAD_NORM_SQUARED {
            dead_at = Some(k + 1);
            psi.fill(c(0.0, 0.0));
        }
    }
    Ok(dead_at)
}

/// Linear SSE trajectory with direct weights `p = ||psi||^2` and the `m_j`
/// history. Dead trajectories are continued as the zero vector.
pub fn simulate_linear(
    model: &dyn CoefficientProcess,
    path: &NoisePath,
    psi0: &StateVector,
    renorm: RenormPolicy,
    record_sigma: bool,
) -> Result<Trajectory> {
    let grid = *path.grid();
    let mut states = Vec::with_capacity(grid.len());
    let mut weights = Vec::with_capacity(grid.len());
    let mut m = Vec::with_capacity(grid.len());
    let mut sigma = record_sigma.then(|| Vec::with_capacity(grid.len()));
    let dead_at = drive_linear(model, path, psi0, renorm, |_, psi, coeff| {
        let p = weight_direct(psi);
        let mk = if p > 0.0 {
            let hat = psi / c(p.sqrt(), 0.0);
            coeff.rs.iter().map(|r| 2.0 * hat.dotc(&(r * &hat)).re).collect()
        } else {
            vec![0.0; coeff.rs.len()]
        };
        if let Some(s) = sigma.as_mut() {
            s.push(projector(psi));
        }
        states.push(psi.clone());
        weights.push(p);
        m.push(mk);
    })?;
    Ok(Trajectory {
        grid,
        states,
        weights,
        m,
        sigma,
        scheme: SchemeInfo {
            dt: grid.dt(),
            scheme: Scheme::EulerMaruyama,
            renorm,
        },
        dead_at,
    })
}

/// Integrates the nonlinear SSE along `path`, whose increments are read as
/// the physical Wiener increments `dW_hat`.
pub(crate) fn drive_physical<F>(
    model: &dyn CoefficientProcess,
    path: &NoisePath,
    psi0: &StateVector,
    mut visit: F,
) -> Result<()>
where
    F: FnMut(usize, &StateVector, &Coefficients),
{
    check_inputs(model, path, psi0)?;
    let n = psi0.norm();
    if n == 0.0 {
        return Err(Error::VanishingNorm { step: 0 });
    }
    let grid = *path.grid();
    let mut psi = psi0 / c(n, 0.0);
    for k in 0..=grid.steps() {
        let coeff = model.evaluate(path.prefix(k));
        visit(k, &psi, &coeff);
        if k == grid.steps() {
            break;
        }
        psi = nlsse_step(&psi, &coeff.k, &coeff.rs, grid.dt(), path.dw(k), true).map_err(|e| match e {
            Error::VanishingNorm { .. } => Error::VanishingNorm { step: k + 1 },
            _ => Error::BlowUp {
                trajectory: trajectory_index(path),
                step: k + 1,
            },
        })?;
    }
    Ok(())
}

/// Nonlinear SSE trajectory; weights are identically one and `m` is the
/// history of `2 Re <psi_hat|R_j psi_hat>`.
pub fn simulate_physical(
    model: &dyn CoefficientProcess,
    path: &NoisePath,
    psi0: &StateVector,
) -> Result<Trajectory> {
    let grid = *path.grid();
    let mut states = Vec::with_capacity(grid.len());
    let mut m = Vec::with_capacity(grid.len());
    drive_physical(model, path, psi0, |_, psi, coeff| {
        m.push(coeff.rs.iter().map(|r| 2.0 * psi.dotc(&(r * psi)).re).collect());
        states.push(psi.clone());
    })?;
    Ok(Trajectory {
        grid,
        weights: vec![1.0; states.len()],
        states,
        m,
        sigma: None,
        scheme: SchemeInfo {
            dt: grid.dt(),
            scheme: Scheme::EulerMaruyama,
            renorm: RenormPolicy::Projective,
        },
        dead_at: None,
    })
}

/// Linear stochastic master equation along `path`.
pub fn simulate_lsme(
    model: &dyn CoefficientProcess,
    path: &NoisePath,
    sigma0: &DensityLike,
) -> Result<Vec<DensityLike>> {
    let grid = *path.grid();
    let mut out = Vec::with_capacity(grid.len());
    out.push(sigma0.clone());
    for k in 0..grid.steps() {
        let coeff = model.evaluate(path.prefix(k));
        let next = lsme_step(&out[k], &coeff.h, &coeff.rs, grid.dt(), path.dw(k))?;
        out.push(next);
    }
    Ok(out)
}

/// Nonlinear master equation along `path` read as physical increments.
pub fn simulate_nlsme(
    model: &dyn CoefficientProcess,
    path: &NoisePath,
    rho0: &DensityLike,
) -> Result<Vec<DensityLike>> {
    let grid = *path.grid();
    let mut out = Vec::with_capacity(grid.len());
    out.push(rho0 / c(rho0.trace().re, 0.0));
    for k in 0..grid.steps() {
        let coeff = model.evaluate(path.prefix(k));
        let next = nlsme_step(&out[k], &coeff.h, &coeff.rs, grid.dt(), path.dw(k))?;
        out.push(next);
    }
    Ok(out)
}

/// One-step Euler factors `G_k` of the linear SSE along a fixed path;
/// `A(t_k, t_s) = G_{k-1} ... G_s`.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagatorTable {
    grid: TimeGrid,
    factors: Vec<OperatorMatrix>,
    conditions: Vec<f64>,
}

/// Factors with a condition number at or above this are treated as singular.
pub const SINGULAR_CONDITION: f64 = 1.0 / f64::EPSILON;

pub fn build_propagator(model: &dyn CoefficientProcess, path: &NoisePath) -> Result<PropagatorTable> {
    if path.channels() != model.channels() {
        return Err(Error::DimensionMismatch {
            expected: model.channels(),
            found: path.channels(),
        });
    }
    let grid = *path.grid();
    let mut factors = Vec::with_capacity(grid.steps());
    let mut conditions = Vec::with_capacity(grid.steps());
    for k in 0..grid.steps() {
        let coeff = model.evaluate(path.prefix(k));
        let g = step_matrix(&coeff.k, &coeff.rs, grid.dt(), path.dw(k));
        if !is_finite(&g) {
            return Err(Error::NonFinite("propagator factor"));
        }
        let condition = algebra::condition_number(&g);
        if condition.is_nan() || condition >= SINGULAR_CONDITION {
            return Err(Error::SingularFactor { step: k, condition });
        }
        factors.push(g);
        conditions.push(condition);
    }
    Ok(PropagatorTable {
        grid,
        factors,
        conditions,
    })
}

impl PropagatorTable {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn factors(&self) -> &[OperatorMatrix] {
        &self.factors
    }

    /// Condition number of every one-step factor.
    pub fn conditions(&self) -> &[f64] {
        &self.conditions
    }

    fn dim(&self) -> usize {
        self.factors.first().map(|g| g.nrows()).unwrap_or(0)
    }

    fn check_order(&self, k: usize, s: usize) -> Result<()> {
        if s > k || k > self.grid.steps() {
            return Err(Error::InvalidArgument(format!(
                "propagator needs s <= k <= {}, got s={s}, k={k}",
                self.grid.steps()
            )));
        }
        Ok(())
    }

    /// `A(t_k, t_s)` as a matrix, multiplied out from the latest factor down.
    pub fn product(&self, k: usize, s: usize) -> Result<OperatorMatrix> {
        self.check_order(k, s)?;
        let n = self.dim();
        let mut a = DMatrix::identity(n, n);
        for g in self.factors[s..k].iter().rev() {
            a = &a * g;
        }
        Ok(a)
    }

    /// `A(t_k, t_s) psi`, applying the factors in time order; reproduces the
    /// Euler trajectory bit for bit.
    pub fn apply(&self, k: usize, s: usize, psi: &StateVector) -> Result<StateVector> {
        self.check_order(k, s)?;
        let mut out = psi.clone();
        for g in &self.factors[s..k] {
            out = g * out;
        }
        Ok(out)
    }

    /// `Lambda(t_k, t_s)[tau] = A tau A*`.
    pub fn lift(&self, k: usize, s: usize, tau: &DensityLike) -> Result<DensityLike> {
        let a = self.product(k, s)?;
        Ok(&a * tau * a.adjoint())
    }

    /// Largest entry of `A(t_k, t_s) - A(t_k, t_r) A(t_r, t_s)`.
    pub fn composition_defect(&self, k: usize, r: usize, s: usize) -> Result<f64> {
        self.check_order(k, r)?;
        self.check_order(r, s)?;
        let full = self.product(k, s)?;
        let split = self.product(k, r)? * self.product(r, s)?;
        Ok(algebra::max_abs(&(full - split)))
    }

    pub fn max_condition(&self) -> f64 {
        self.conditions.iter().copied().fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::{basis_state, commutator, identity, max_abs, pauli_x, pauli_z, sigma_minus};
    use crate::coefficients::{markovian_model, ou_random_hamiltonian_model, OUModel};
    use crate::noise::{derive_stream, ou_path, wiener_increments, OuMode};
    use nalgebra::DVector;

    fn plus() -> StateVector {
        DVector::from_vec(vec![c(1.0, 0.), c(1.0, 0.)]) / c(2f64.sqrt(), 0.)
    }

    fn ou_model(h0: OperatorMatrix, l: OperatorMatrix, gamma: f64) -> crate::coefficients::OuHamiltonianModel {
        ou_random_hamiltonian_model(&OUModel::new(&h0, &l, gamma).unwrap()).unwrap()
    }

    #[test]
    fn lsse_step_examples() {
        let h0 = pauli_x();
        let psi = basis_state(2, 1);
        let dt = 0.01;
        let out = lsse_step(&psi, &(&h0 * (-I)), &[], dt, &[]).unwrap();
        let expected = &psi - (&h0 * &psi) * c(0.0, dt);
        assert_eq!(out, expected);

        let out = lsse_step(&plus(), &DMatrix::zeros(2, 2), &[sigma_minus()], dt, &[0.0]).unwrap();
        assert_eq!(out, plus());
    }

    #[test]
    fn lsse_step_flags_blow_up() {
        let k = identity(2) * c(f64::MAX, 0.0);
        let err = lsse_step(&plus(), &k, &[], 10.0, &[]).unwrap_err();
        assert_eq!(err, Error::NonFinite("state after lSSE step"));
        assert!(lsse_step(&plus(), &k, &[sigma_minus()], 0.1, &[]).is_err());
    }

    #[test]
    fn exponential_weight_with_zero_m() {
        let m = vec![vec![0.0]; 10];
        let dw = vec![vec![0.3]; 10];
        let w = weight_exponential(0.7, m.iter().zip(&dw).map(|(a, b)| (a.as_slice(), b.as_slice())), 0.01);
        assert_eq!(w, 0.7);
    }

    #[test]
    fn ou_weights_are_constant() {
        let gamma = 1.0;
        let model = ou_model(pauli_x(), pauli_z(), gamma);
        let grid = TimeGrid::new(1e-3, 500).unwrap();
        let path = ou_path(&grid, gamma, derive_stream(3, 0), OuMode::Euler).unwrap();
        let traj = simulate_linear(&model, &path, &plus(), RenormPolicy::Projective, false).unwrap();
        for (k, p) in traj.weights.iter().enumerate() {
            assert!((p - 1.0).abs() < 1e-12);
            assert!(traj.m[k][0].abs() < 1e-14);
        }
        let steps = (0..grid.steps()).map(|k| (traj.m[k].as_slice(), path.dw(k)));
        let w = weight_exponential(1.0, steps, grid.dt());
        assert!((w - 1.0).abs() < 1e-12);
    }

    #[test]
    fn girsanov_shift_examples() {
        assert_eq!(girsanov_shift(0.3, 0.0, 0.1), 0.3);
        assert!((girsanov_shift(0.3, 1.0, 0.1) - 0.2).abs() < 1e-15);
        let dw = [0.1, -0.2, 0.05];
        let m = [0.5, 1.0, -2.0];
        let dt = 0.01;
        let what: f64 = dw.iter().zip(&m).map(|(w, m)| girsanov_shift(*w, *m, dt)).sum();
        let w_total: f64 = dw.iter().sum();
        let drift: f64 = m.iter().map(|m| m * dt).sum();
        assert!((what - (w_total - drift)).abs() < 1e-15);
    }

    #[test]
    fn nlsse_reduces_to_renormalized_lsse_for_skew_noise() {
        let gamma = 0.7;
        let model = ou_model(pauli_x(), pauli_z(), gamma);
        let grid = TimeGrid::new(1e-2, 50).unwrap();
        let path = ou_path(&grid, gamma, derive_stream(4, 1), OuMode::Euler).unwrap();
        let psi = DVector::from_vec(vec![c(0.6, 0.2), c(-0.3, 0.7)]);
        let psi = &psi / c(psi.norm(), 0.0);
        for k in [0, 10, 49] {
            let coeff = model.evaluate(path.prefix(k));
            let lin = lsse_step(&psi, &coeff.k, &coeff.rs, grid.dt(), path.dw(k)).unwrap();
            let lin = &lin / c(lin.norm(), 0.0);
            let non = nlsse_step(&psi, &coeff.k, &coeff.rs, grid.dt(), path.dw(k), true).unwrap();
            assert!((lin - non).norm() < 1e-14);
        }
    }

    #[test]
    fn nlsse_without_noise_is_hamiltonian_euler() {
        let psi = plus();
        let k = pauli_z() * (-I);
        let out = nlsse_step(&psi, &k, &[], 0.01, &[], false).unwrap();
        assert!((out - (&psi + (&k * &psi) * c(0.01, 0.))).norm() < 1e-16);
        let renormed = nlsse_step(&psi, &k, &[], 0.01, &[], true).unwrap();
        assert!((renormed.norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn nlsse_requires_normalized_input() {
        let psi = plus() * c(1.1, 0.);
        assert!(matches!(
            nlsse_step(&psi, &identity(2), &[], 0.01, &[], true),
            Err(Error::NotNormalized { .. })
        ));
    }

    #[test]
    fn lsme_step_matches_ou_sigma_equation() {
        let gamma = 1.2;
        let h0 = pauli_x() * c(0.4, 0.);
        let l = pauli_z();
        let model = ou_model(h0.clone(), l.clone(), gamma);
        let grid = TimeGrid::new(1e-2, 20).unwrap();
        let path = ou_path(&grid, gamma, derive_stream(8, 0), OuMode::Euler).unwrap();
        let sigma = projector(&DVector::from_vec(vec![c(0.8, 0.), c(0.0, 0.6)]));
        let dt = grid.dt();
        for k in [0, 5, 19] {
            let coeff = model.evaluate(path.prefix(k));
            let x = path.x(k).unwrap();
            let dw = path.dw(k)[0];
            let out = lsme_step(&sigma, &coeff.h, &coeff.rs, dt, path.dw(k)).unwrap();
            let hx = &h0 - &l * c(gamma * x, 0.);
            let ll = commutator(&l, &commutator(&l, &sigma).unwrap()).unwrap();
            let expected = &sigma - commutator(&hx, &sigma).unwrap() * c(0., dt)
                - commutator(&l, &sigma).unwrap() * c(0., dw)
                - ll * c(0.5 * dt, 0.);
            assert!(max_abs(&(&out - &expected)) < 1e-15);
            assert!((out.trace() - sigma.trace()).norm() < 1e-14);
            assert_eq!(algebra::hermiticity_defect(&out), 0.0);
        }
    }

    #[test]
    fn lsme_without_noise_is_liouville_von_neumann() {
        let h = pauli_x();
        let sigma = projector(&basis_state(2, 0));
        let out = lsme_step(&sigma, &h, &[], 0.01, &[]).unwrap();
        let expected = &sigma - commutator(&h, &sigma).unwrap() * c(0., 0.01);
        assert!(max_abs(&(out - expected)) < 1e-16);
    }

    #[test]
    fn lsme_trace_increment_is_pure_noise() {
        let model = markovian_model(&pauli_x(), &[sigma_minus(), pauli_z() * c(0.3, 0.)]).unwrap();
        let grid = TimeGrid::new(1e-2, 10).unwrap();
        let path = wiener_increments(&grid, 2, derive_stream(1, 0)).unwrap();
        let sigma = projector(&plus());
        let coeff = model.evaluate(path.prefix(0));
        let out = lsme_step(&sigma, &coeff.h, &coeff.rs, grid.dt(), path.dw(0)).unwrap();
        let expected: f64 = coeff
            .rs
            .iter()
            .zip(path.dw(0))
            .map(|(r, w)| r_map(r, &sigma).trace().re * w)
            .sum();
        assert!(((out.trace() - sigma.trace()).re - expected).abs() < 1e-15);
    }

    #[test]
    fn nlsme_examples() {
        let sigma = projector(&plus());
        let l = pauli_z();
        let r = &l * (-I);
        let v = ((&r + r.adjoint()) * &sigma).trace().re;
        assert_eq!(v, 0.0);
        let h = pauli_x();
        let out = nlsme_step(&sigma, &h, std::slice::from_ref(&r), 0.01, &[0.05]).unwrap();
        let linear = lsme_step(&sigma, &h, std::slice::from_ref(&r), 0.01, &[0.05]).unwrap();
        let linear = &linear / linear.trace();
        assert!(max_abs(&(out.clone() - linear)) < 1e-15);
        assert!((out.trace().re - 1.0).abs() < 1e-15);

        let out = nlsme_step(&sigma, &h, &[], 0.01, &[]).unwrap();
        assert!((out.trace().re - 1.0).abs() < 1e-15);
    }

    #[test]
    fn nlsme_trace_drift_is_second_order() {
        let model = markovian_model(&pauli_x(), &[sigma_minus()]).unwrap();
        let rho = projector(&plus());
        let coeff = model.evaluate(
            wiener_increments(&TimeGrid::new(0.1, 1).unwrap(), 1, derive_stream(0, 0))
                .unwrap()
                .prefix(0),
        );
        for dt in [1e-2f64, 1e-3] {
            let dw = [dt.sqrt()];
            let mut raw = &rho + liouvillian(&coeff.h, &coeff.rs, &rho).unwrap() * c(dt, 0.);
            let v = ((&coeff.rs[0] + coeff.rs[0].adjoint()) * &rho).trace().re;
            raw += (r_map(&coeff.rs[0], &rho) - &rho * c(v, 0.)) * c(dw[0], 0.);
            assert!((raw.trace().re - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn dead_trajectories_are_flagged() {
        // R = 10 |1><1| drives the |1> amplitude to zero for a large negative increment
        let mut r = DMatrix::zeros(2, 2);
        r[(1, 1)] = c(1.0, 0.0);
        let model = markovian_model(&DMatrix::zeros(2, 2), &[r]).unwrap();
        let grid = TimeGrid::new(0.5, 3).unwrap();
        let path = NoisePath::from_increments(&grid, 1, vec![-0.5, -1.0 + 0.25, 0.0]).unwrap();
        let traj = simulate_linear(&model, &path, &basis_state(2, 1), RenormPolicy::None, false).unwrap();
        assert_eq!(traj.dead_at, Some(2));
        assert!(traj.is_dead());
        assert_eq!(traj.weights[3], 0.0);
    }

    #[test]
    fn projective_policy_needs_norm_preserving_model() {
        let model = markovian_model(&pauli_x(), &[sigma_minus()]).unwrap();
        let grid = TimeGrid::new(0.1, 3).unwrap();
        let path = wiener_increments(&grid, 1, derive_stream(0, 0)).unwrap();
        assert!(simulate_linear(&model, &path, &plus(), RenormPolicy::Projective, false).is_err());
    }

    #[test]
    fn propagator_identities() {
        let gamma = 1.0;
        let model = ou_model(pauli_x(), pauli_z(), gamma);
        let grid = TimeGrid::new(1e-3, 400).unwrap();
        let path = ou_path(&grid, gamma, derive_stream(12, 0), OuMode::Euler).unwrap();
        let table = build_propagator(&model, &path).unwrap();
        assert_eq!(table.product(7, 7).unwrap(), identity(2));
        assert!(table.composition_defect(400, 150, 0).unwrap() <= 1e-12);
        assert!(table.composition_defect(300, 299, 10).unwrap() <= 1e-12);
        assert!(table.max_condition() < 1.01);
        assert!(table.product(3, 5).is_err());

        let psi0 = plus();
        let traj = simulate_linear(&model, &path, &psi0, RenormPolicy::None, false).unwrap();
        for k in [1, 100, 400] {
            assert_eq!(table.apply(k, 0, &psi0).unwrap(), traj.states[k]);
            assert_eq!(table.apply(k, 40.min(k), &traj.states[40.min(k)]).unwrap(), traj.states[k]);
        }
        let lifted = table.lift(400, 0, &projector(&psi0)).unwrap();
        assert!(max_abs(&(lifted - projector(&traj.states[400]))) < 1e-12);
    }

    #[test]
    fn singular_factor_is_reported() {
        // K = -|1><1| / dt makes I + K dt project out |1>
        let dt = 0.5f64;
        let mut r = DMatrix::zeros(2, 2);
        r[(1, 1)] = c(2f64.sqrt() / dt.sqrt(), 0.0);
        let model = markovian_model(&DMatrix::zeros(2, 2), &[r]).unwrap();
        let grid = TimeGrid::new(dt, 2).unwrap();
        let path = NoisePath::from_increments(&grid, 1, vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            build_propagator(&model, &path),
            Err(Error::SingularFactor { step: 0, .. })
        ));
    }
}
