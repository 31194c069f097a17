//! Monte Carlo ensembles of linear and nonlinear SSE trajectories.
//!
//! Trajectory `i` always draws from substream `(master_seed, i)`. Chunks of
//! trajectories accumulate first and second moments, and chunk results are
//! merged in index order, so the statistics are bit-identical for any
//! worker count.

use nalgebra::DMatrix;

use crate::algebra::{self, c, commutator, DensityLike, OperatorMatrix, StateVector, C64, I};
use crate::coefficients::{sample_noise, CoefficientProcess};
use crate::error::{Error, Result};
use crate::exec::{map_chunks, Execution};
use crate::integrators::{drive_linear, drive_physical, RenormPolicy};
use crate::noise::{derive_stream, OuMode, TimeGrid};

/// Stream indices of physical (nonlinear SSE) ensembles start here so they
/// never share draws with the linear ensemble of the same seed.
pub const PHYSICAL_STREAM_BASE: u64 = 1 << 63;

/// Coefficients of the averaged equation
/// `d eta/dt = -i[H0, eta] - 1/2 [L, [L, eta]] + i gamma [L, E[X sigma]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanEquation {
    pub h0: OperatorMatrix,
    pub l: OperatorMatrix,
    /// Zero for the Markovian limit, where the memory term is absent.
    pub gamma: f64,
}

impl MeanEquation {
    fn local_part(&self, eta: &OperatorMatrix) -> OperatorMatrix {
        let h = commutator(&self.h0, eta).expect("dims checked");
        let l1 = commutator(&self.l, eta).expect("dims checked");
        let l2 = commutator(&self.l, &l1).expect("dims checked");
        h * I + l2 * c(0.5, 0.0)
    }

    fn memory_part(&self, xsigma: &OperatorMatrix) -> OperatorMatrix {
        commutator(&self.l, xsigma).expect("dims checked") * c(0.0, -self.gamma)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RecordSpec {
    /// Named observables `a`; the track is `E_Q[<psi|a psi>]` (real part).
    pub observables: Vec<(String, OperatorMatrix)>,
    /// Estimate `E_Q[X(t) sigma(t)]`.
    pub xsigma: bool,
    /// Accumulate per-trajectory residuals of this mean equation.
    pub mean_equation: Option<MeanEquation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleConfig {
    pub psi0: StateVector,
    pub renorm: RenormPolicy,
    pub ou_mode: OuMode,
    pub record: RecordSpec,
}

impl EnsembleConfig {
    pub fn new(psi0: StateVector) -> Self {
        Self {
            psi0,
            renorm: RenormPolicy::None,
            ou_mode: OuMode::Euler,
            record: RecordSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservableTrack {
    pub name: String,
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
}

/// Mean and standard error of a per-trajectory residual at every grid index;
/// endpoints are left at zero with NaN error.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMoments {
    pub mean: Vec<OperatorMatrix>,
    pub se: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    pub grid: TimeGrid,
    pub n: usize,
    pub eta: Vec<DensityLike>,
    /// Entrywise standard error `sqrt((Var Re + Var Im) / N)`.
    pub eta_se: Vec<DMatrix<f64>>,
    /// Largest entry of `eta_se`.
    pub se_eta: Vec<f64>,
    pub mean_weight: Vec<f64>,
    pub se_weight: Vec<f64>,
    pub xsigma: Option<Vec<OperatorMatrix>>,
    pub se_xsigma: Option<Vec<f64>>,
    pub observables: Vec<ObservableTrack>,
    pub residual: Option<ResidualMoments>,
    /// Indices of trajectories whose norm vanished.
    pub dead: Vec<usize>,
}

// ---- moment accumulators -------------------------------------------------

/// Running mean and sum of squared deviations of one scalar; merged with the
/// pairwise update so identical samples give exactly zero spread.
#[derive(Debug, Clone, Copy, Default)]
struct Moment {
    count: f64,
    mean: f64,
    m2: f64,
}

impl Moment {
    fn push(&mut self, v: f64) {
        self.count += 1.0;
        let delta = v - self.mean;
        self.mean += delta / self.count;
        self.m2 += delta * (v - self.mean);
    }

    fn merge(&mut self, other: &Self) {
        if other.count == 0.0 {
            return;
        }
        if self.count == 0.0 {
            *self = *other;
            return;
        }
        let count = self.count + other.count;
        let delta = other.mean - self.mean;
        self.mean += delta * other.count / count;
        self.m2 += other.m2 + delta * delta * self.count * other.count / count;
        self.count = count;
    }

    /// Standard error of the mean; NaN for fewer than two samples.
    fn standard_error(&self) -> f64 {
        if self.count < 2.0 {
            return f64::NAN;
        }
        (self.m2 / (self.count - 1.0) / self.count).sqrt()
    }
}

#[derive(Debug, Clone)]
struct RealMoments(Vec<Moment>);

impl RealMoments {
    fn new(len: usize) -> Self {
        Self(vec![Moment::default(); len])
    }

    fn push(&mut self, i: usize, v: f64) {
        self.0[i].push(v);
    }

    fn merge(&mut self, other: &Self) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.merge(b);
        }
    }

    fn finish(&self) -> (Vec<f64>, Vec<f64>) {
        (
            self.0.iter().map(|m| m.mean).collect(),
            self.0.iter().map(Moment::standard_error).collect(),
        )
    }
}

/// Moments of a matrix-valued series, real and imaginary parts of each entry
/// tracked separately, entries column-major per time.
#[derive(Debug, Clone)]
struct MatrixMoments {
    dim: usize,
    re: Vec<Moment>,
    im: Vec<Moment>,
}

impl MatrixMoments {
    fn new(len: usize, dim: usize) -> Self {
        let m = len * dim * dim;
        Self {
            dim,
            re: vec![Moment::default(); m],
            im: vec![Moment::default(); m],
        }
    }

    fn push(&mut self, t: usize, value: &DMatrix<C64>) {
        let base = t * self.dim * self.dim;
        for (i, z) in value.as_slice().iter().enumerate() {
            self.re[base + i].push(z.re);
            self.im[base + i].push(z.im);
        }
    }

    fn merge(&mut self, other: &Self) {
        for (a, b) in self.re.iter_mut().zip(&other.re) {
            a.merge(b);
        }
        for (a, b) in self.im.iter_mut().zip(&other.im) {
            a.merge(b);
        }
    }

    fn finish(&self) -> (Vec<DMatrix<C64>>, Vec<DMatrix<f64>>) {
        let d2 = self.dim * self.dim;
        let len = self.re.len() / d2;
        let mut means = Vec::with_capacity(len);
        let mut ses = Vec::with_capacity(len);
        for t in 0..len {
            let r = t * d2..(t + 1) * d2;
            means.push(DMatrix::from_iterator(
                self.dim,
                self.dim,
                r.clone().map(|i| C64::new(self.re[i].mean, self.im[i].mean)),
            ));
            ses.push(DMatrix::from_iterator(
                self.dim,
                self.dim,
                r.map(|i| self.re[i].standard_error().hypot(self.im[i].standard_error())),
            ));
        }
        (means, ses)
    }
}

/// Largest entry, NaN if any entry is NaN.
fn max_entry(m: &DMatrix<f64>) -> f64 {
    m.iter()
        .copied()
        .fold(0.0, |a, b| if a.is_nan() || b.is_nan() { f64::NAN } else { a.max(b) })
}

// ---- linear ensemble -------------------------------------------------------

struct LinearAccumulator {
    sigma: MatrixMoments,
    weight: RealMoments,
    xsigma: Option<MatrixMoments>,
    observables: Vec<RealMoments>,
    residual: Option<MatrixMoments>,
    dead: Vec<usize>,
}

impl LinearAccumulator {
    fn new(len: usize, dim: usize, record: &RecordSpec) -> Self {
        Self {
            sigma: MatrixMoments::new(len, dim),
            weight: RealMoments::new(len),
            xsigma: record.xsigma.then(|| MatrixMoments::new(len, dim)),
            observables: record.observables.iter().map(|_| RealMoments::new(len)).collect(),
            residual: record.mean_equation.as_ref().map(|_| MatrixMoments::new(len, dim)),
            dead: Vec::new(),
        }
    }

    fn merge(&mut self, other: Self) {
        self.sigma.merge(&other.sigma);
        self.weight.merge(&other.weight);
        if let (Some(a), Some(b)) = (self.xsigma.as_mut(), other.xsigma.as_ref()) {
            a.merge(b);
        }
        for (a, b) in self.observables.iter_mut().zip(&other.observables) {
            a.merge(b);
        }
        if let (Some(a), Some(b)) = (self.residual.as_mut(), other.residual.as_ref()) {
            a.merge(b);
        }
        self.dead.extend(other.dead);
    }
}

fn validate_config(model: &dyn CoefficientProcess, config: &EnsembleConfig) -> Result<()> {
    let n = model.dim();
    if config.psi0.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: config.psi0.len(),
        });
    }
    for (_, a) in &config.record.observables {
        if a.nrows() != n || a.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: a.nrows(),
            });
        }
    }
    if (config.record.xsigma || config.record.mean_equation.as_ref().is_some_and(|e| e.gamma != 0.0))
        && model.ou_gamma().is_none()
    {
        return Err(Error::InvalidArgument(
            "E[X sigma] needs a model driven by an OU path".into(),
        ));
    }
    if let Some(eq) = &config.record.mean_equation {
        algebra::ensure_same_dim(&eq.h0, &eq.l)?;
        if eq.h0.nrows() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: eq.h0.nrows(),
            });
        }
    }
    Ok(())
}

/// Runs `n` linear SSE trajectories and estimates the a priori state
/// `eta(t) = E_Q[|psi><psi|]` together with the requested tracks.
pub fn run_ensemble(
    model: &dyn CoefficientProcess,
    grid: &TimeGrid,
    n: usize,
    master_seed: u64,
    config: &EnsembleConfig,
    exec: Execution,
) -> Result<EnsembleStats> {
    if n == 0 {
        return Err(Error::InvalidArgument("ensemble needs at least one trajectory".into()));
    }
    validate_config(model, config)?;
    let dim = model.dim();
    let len = grid.len();
    let record = &config.record;

    let chunks = map_chunks(n, exec, |start, end| {
        let mut acc = LinearAccumulator::new(len, dim, record);
        let mut sigmas: Vec<DensityLike> = Vec::new();
        let mut xs: Vec<f64> = Vec::new();
        for i in start..end {
            let stream = derive_stream(master_seed, i as u64);
            let path = sample_noise(model, grid, stream, config.ou_mode)?;
            sigmas.clear();
            xs.clear();
            let dead_at = drive_linear(model, &path, &config.psi0, config.renorm, |k, psi, _| {
                let sigma = algebra::projector(psi);
                acc.sigma.push(k, &sigma);
                acc.weight.push(k, psi.norm_squared());
                let x = path.x(k).unwrap_or(0.0);
                if let Some(xsig) = acc.xsigma.as_mut() {
                    xsig.push(k, &(&sigma * c(x, 0.0)));
                }
                for (moments, (_, a)) in acc.observables.iter_mut().zip(&record.observables) {
                    moments.push(k, psi.dotc(&(a * psi)).re);
                }
                if record.mean_equation.is_some() {
                    sigmas.push(sigma);
                    xs.push(x);
                }
            })
            .map_err(|e| match e {
                Error::BlowUp { step, .. } => Error::BlowUp { trajectory: i, step },
                other => other,
            })?;
            if dead_at.is_some() {
                acc.dead.push(i);
            }
            if let (Some(eq), Some(res)) = (record.mean_equation.as_ref(), acc.residual.as_mut()) {
                let inv = 1.0 / (2.0 * grid.dt());
                for k in 1..grid.steps() {
                    let deriv = (&sigmas[k + 1] - &sigmas[k - 1]) * c(inv, 0.0);
                    let mut r = deriv + eq.local_part(&sigmas[k]);
                    if eq.gamma != 0.0 {
                        r += eq.memory_part(&(&sigmas[k] * c(xs[k], 0.0)));
                    }
                    res.push(k, &r);
                }
            }
        }
        Ok(acc)
    })?;

    let mut total = LinearAccumulator::new(len, dim, record);
    for chunk in chunks {
        total.merge(chunk);
    }

    let (eta, eta_se) = total.sigma.finish();
    let se_eta = eta_se.iter().map(max_entry).collect();
    let (mean_weight, se_weight) = total.weight.finish();
    let (xsigma, se_xsigma) = match total.xsigma {
        Some(m) => {
            let (mean, se) = m.finish();
            (Some(mean), Some(se.iter().map(max_entry).collect()))
        }
        None => (None, None),
    };
    let observables = record
        .observables
        .iter()
        .zip(&total.observables)
        .map(|((name, _), m)| {
            let (mean, se) = m.finish();
            ObservableTrack {
                name: name.clone(),
                mean,
                se,
            }
        })
        .collect();
    let residual = total.residual.map(|m| {
        let (mut mean, se) = m.finish();
        let mut se: Vec<f64> = se.iter().map(max_entry).collect();
        for k in [0, grid.steps()] {
            mean[k].fill(c(0.0, 0.0));
            se[k] = f64::NAN;
        }
        ResidualMoments { mean, se }
    });

    Ok(EnsembleStats {
        grid: *grid,
        n,
        eta,
        eta_se,
        se_eta,
        mean_weight,
        se_weight,
        xsigma,
        se_xsigma,
        observables,
        residual,
        dead: total.dead,
    })
}

// ---- physical ensemble -----------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct PhysicalStats {
    pub grid: TimeGrid,
    pub n: usize,
    /// `E_P[|psi_hat><psi_hat|]`.
    pub rho: Vec<DensityLike>,
    pub se_rho: Vec<f64>,
    /// Tracks of `E_P[<psi_hat|a psi_hat>]`.
    pub observables: Vec<ObservableTrack>,
}

/// Runs `n` nonlinear SSE trajectories under the physical law, with the
/// physical increments drawn directly as standard Wiener increments.
pub fn run_physical_ensemble(
    model: &dyn CoefficientProcess,
    grid: &TimeGrid,
    n: usize,
    master_seed: u64,
    config: &EnsembleConfig,
    exec: Execution,
) -> Result<PhysicalStats> {
    if n == 0 {
        return Err(Error::InvalidArgument("ensemble needs at least one trajectory".into()));
    }
    validate_config(model, config)?;
    let dim = model.dim();
    let len = grid.len();
    let observables = &config.record.observables;

    let chunks = map_chunks(n, exec, |start, end| {
        let mut rho = MatrixMoments::new(len, dim);
        let mut obs: Vec<RealMoments> = observables.iter().map(|_| RealMoments::new(len)).collect();
        for i in start..end {
            let stream = derive_stream(master_seed, PHYSICAL_STREAM_BASE | i as u64);
            let path = sample_noise(model, grid, stream, config.ou_mode)?;
            drive_physical(model, &path, &config.psi0, |k, psi, _| {
                rho.push(k, &algebra::projector(psi));
                for (moments, (_, a)) in obs.iter_mut().zip(observables) {
                    moments.push(k, psi.dotc(&(a * psi)).re);
                }
            })
            .map_err(|e| match e {
                Error::BlowUp { step, .. } => Error::BlowUp { trajectory: i, step },
                other => other,
            })?;
        }
        Ok((rho, obs))
    })?;

    let mut rho_total = MatrixMoments::new(len, dim);
    let mut obs_total: Vec<RealMoments> = observables.iter().map(|_| RealMoments::new(len)).collect();
    for (rho, obs) in chunks {
        rho_total.merge(&rho);
        for (a, b) in obs_total.iter_mut().zip(&obs) {
            a.merge(b);
        }
    }
    let (rho, rho_se) = rho_total.finish();
    Ok(PhysicalStats {
        grid: *grid,
        n,
        rho,
        se_rho: rho_se.iter().map(max_entry).collect(),
        observables: observables
            .iter()
            .zip(&obs_total)
            .map(|((name, _), m)| {
                let (mean, se) = m.finish();
                ObservableTrack {
                    name: name.clone(),
                    mean,
                    se,
                }
            })
            .collect(),
    })
}

// ---- reports ----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct MartingaleReport {
    /// `(mean_weight - 1) / SE`; `None` where the standard error is undefined.
    pub z: Vec<Option<f64>>,
    pub max_abs_z: Option<f64>,
}

pub fn martingale_report(stats: &EnsembleStats) -> MartingaleReport {
    let z: Vec<Option<f64>> = stats
        .mean_weight
        .iter()
        .zip(&stats.se_weight)
        .map(|(m, se)| {
            let dev = m - 1.0;
            if se.is_nan() {
                None
            } else if *se == 0.0 {
                Some(if dev == 0.0 { 0.0 } else { dev.signum() * f64::INFINITY })
            } else {
                Some(dev / se)
            }
        })
        .collect();
    let max_abs_z = z
        .iter()
        .flatten()
        .map(|v| v.abs())
        .reduce(f64::max);
    MartingaleReport { z, max_abs_z }
}

/// `d eta / dt` by second-order central differences, one-sided second-order
/// stencils at the endpoints.
pub fn eta_derivative(stats: &EnsembleStats) -> Vec<OperatorMatrix> {
    let eta = &stats.eta;
    let k_max = stats.grid.steps();
    let h = stats.grid.dt();
    (0..=k_max)
        .map(|k| {
            if k_max < 2 {
                let (a, b) = if k == 0 { (0, 1) } else { (k - 1, k) };
                (&eta[b] - &eta[a]) * c(1.0 / h, 0.0)
            } else if k == 0 {
                (&eta[0] * c(-3.0, 0.0) + &eta[1] * c(4.0, 0.0) - &eta[2]) * c(0.5 / h, 0.0)
            } else if k == k_max {
                (&eta[k] * c(3.0, 0.0) - &eta[k - 1] * c(4.0, 0.0) + &eta[k - 2]) * c(0.5 / h, 0.0)
            } else {
                (&eta[k + 1] - &eta[k - 1]) * c(0.5 / h, 0.0)
            }
        })
        .collect()
}

/// Residual of the mean equation at interior grid points.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSeries {
    pub indices: Vec<usize>,
    pub times: Vec<f64>,
    pub residual: Vec<OperatorMatrix>,
    /// Largest entry modulus of each residual.
    pub norm: Vec<f64>,
    /// Standard error from per-trajectory residuals, when recorded.
    pub se: Option<Vec<f64>>,
}

pub fn mean_eq_residual(stats: &EnsembleStats, eq: &MeanEquation) -> Result<ResidualSeries> {
    let n = stats.eta[0].nrows();
    algebra::ensure_same_dim(&eq.h0, &eq.l)?;
    if eq.h0.nrows() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: eq.h0.nrows(),
        });
    }
    if stats.grid.steps() < 2 {
        return Err(Error::InvalidArgument("residual needs at least two steps".into()));
    }
    let xsigma = match (&stats.xsigma, eq.gamma != 0.0) {
        (Some(x), _) => Some(x),
        (None, false) => None,
        (None, true) => {
            return Err(Error::InvalidArgument(
                "memory term needs E[X sigma]; record it in the ensemble".into(),
            ))
        }
    };
    let deriv = eta_derivative(stats);
    let indices: Vec<usize> = (1..stats.grid.steps()).collect();
    let residual: Vec<OperatorMatrix> = indices
        .iter()
        .map(|&k| {
            let mut r = &deriv[k] + eq.local_part(&stats.eta[k]);
            if let (Some(xs), true) = (xsigma, eq.gamma != 0.0) {
                r += eq.memory_part(&xs[k]);
            }
            r
        })
        .collect();
    Ok(ResidualSeries {
        times: indices.iter().map(|&k| stats.grid.time(k)).collect(),
        norm: residual.iter().map(algebra::max_abs).collect(),
        se: stats
            .residual
            .as_ref()
            .map(|r| indices.iter().map(|&k| r.se[k]).collect()),
        indices,
        residual,
    })
}

/// `Re Tr{a eta(t)}` at every grid point.
pub fn physical_expectation(stats: &EnsembleStats, a: &OperatorMatrix) -> Result<Vec<f64>> {
    let n = stats.eta[0].nrows();
    if a.nrows() != n || a.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: a.nrows(),
        });
    }
    Ok(stats.eta.iter().map(|eta| (a * eta).trace().re).collect())
}

impl EnsembleStats {
    /// `|eta_ij(t)|` and its entry standard error.
    pub fn coherence(&self, i: usize, j: usize) -> (Vec<f64>, Vec<f64>) {
        (
            self.eta.iter().map(|e| e[(i, j)].norm()).collect(),
            self.eta_se.iter().map(|s| s[(i, j)]).collect(),
        )
    }

    pub fn observable(&self, name: &str) -> Option<&ObservableTrack> {
        self.observables.iter().find(|o| o.name == name)
    }
}

impl PhysicalStats {
    pub fn observable(&self, name: &str) -> Option<&ObservableTrack> {
        self.observables.iter().find(|o| o.name == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::{basis_state, max_abs, pauli_x, pauli_z, projector, sigma_minus};
    use crate::coefficients::{markovian_model, ou_random_hamiltonian_model, OUModel};
    use crate::integrators::simulate_linear;
    use crate::noise::ou_path;
    use nalgebra::DVector;

    fn plus() -> StateVector {
        DVector::from_vec(vec![c(1.0, 0.), c(1.0, 0.)]) / c(2f64.sqrt(), 0.)
    }

    #[test]
    fn deterministic_ensemble_is_unitary_evolution() {
        let h0 = pauli_x() * c(0.7, 0.0);
        let model = markovian_model(&h0, &[]).unwrap();
        let grid = TimeGrid::new(0.01, 100).unwrap();
        let psi0 = basis_state(2, 0);
        let stats = run_ensemble(&model, &grid, 8, 1, &EnsembleConfig::new(psi0.clone()), Execution::Sequential)
            .unwrap();
        // zero-variance ensemble
        assert!(stats.se_eta.iter().all(|s| *s < 1e-12));
        // forward Euler deviates from exact conjugation at O(dt)
        let u = (h0.clone() * c(0.0, -1.0)).exp();
        let exact = &u * projector(&psi0) * u.adjoint();
        assert!(max_abs(&(&stats.eta[100] - &exact)) < 2e-2);
    }

    #[test]
    fn single_trajectory_ensemble_equals_its_path() {
        let gamma = 1.0;
        let model = ou_random_hamiltonian_model(&OUModel::new(&pauli_x(), &pauli_z(), gamma).unwrap()).unwrap();
        let grid = TimeGrid::new(0.01, 50).unwrap();
        let stats = run_ensemble(&model, &grid, 1, 9, &EnsembleConfig::new(plus()), Execution::Sequential).unwrap();
        let path = ou_path(&grid, gamma, derive_stream(9, 0), OuMode::Euler).unwrap();
        let traj = simulate_linear(&model, &path, &plus(), RenormPolicy::None, false).unwrap();
        for k in 0..=50 {
            assert_eq!(stats.eta[k], projector(&traj.states[k]));
        }
        assert!(stats.se_eta[3].is_nan());
        let report = martingale_report(&stats);
        assert!(report.z.iter().all(Option::is_none));
        assert_eq!(report.max_abs_z, None);
    }

    #[test]
    fn trace_equals_mean_weight() {
        let model = markovian_model(&pauli_x(), &[sigma_minus()]).unwrap();
        let grid = TimeGrid::new(0.01, 40).unwrap();
        let stats = run_ensemble(&model, &grid, 300, 2, &EnsembleConfig::new(basis_state(2, 1)), Execution::Sequential)
            .unwrap();
        for k in 0..=40 {
            assert!((stats.eta[k].trace().re - stats.mean_weight[k]).abs() < 1e-12);
            assert!(algebra::hermiticity_defect(&stats.eta[k]) < 1e-12);
        }
        let id = physical_expectation(&stats, &algebra::identity(2)).unwrap();
        for (v, w) in id.iter().zip(&stats.mean_weight) {
            assert!((v - w).abs() < 1e-12);
        }
    }

    #[test]
    fn ou_martingale_is_exact_with_projection() {
        let model = ou_random_hamiltonian_model(&OUModel::new(&pauli_x(), &pauli_z(), 1.0).unwrap()).unwrap();
        let grid = TimeGrid::new(0.01, 50).unwrap();
        let mut config = EnsembleConfig::new(plus());
        config.renorm = RenormPolicy::Projective;
        let stats = run_ensemble(&model, &grid, 200, 4, &config, Execution::Sequential).unwrap();
        for k in 0..=50 {
            assert!((stats.mean_weight[k] - 1.0).abs() < 1e-12);
            assert!(stats.se_weight[k] < 1e-12);
        }
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let model = ou_random_hamiltonian_model(&OUModel::new(&pauli_x(), &pauli_z(), 1.0).unwrap()).unwrap();
        let grid = TimeGrid::new(0.01, 30).unwrap();
        let mut config = EnsembleConfig::new(plus());
        config.record.xsigma = true;
        config.record.observables.push(("z".into(), pauli_z()));
        let reference = run_ensemble(&model, &grid, 700, 3, &config, Execution::Sequential).unwrap();
        for workers in [2, 8] {
            let other = run_ensemble(&model, &grid, 700, 3, &config, Execution::Parallel { workers }).unwrap();
            assert_eq!(reference, other);
        }
    }

    #[test]
    fn residual_needs_xsigma_for_memory_term() {
        let model = ou_random_hamiltonian_model(&OUModel::new(&pauli_x(), &pauli_z(), 1.0).unwrap()).unwrap();
        let grid = TimeGrid::new(0.01, 10).unwrap();
        let stats = run_ensemble(&model, &grid, 4, 3, &EnsembleConfig::new(plus()), Execution::Sequential).unwrap();
        let eq = MeanEquation {
            h0: pauli_x(),
            l: pauli_z(),
            gamma: 1.0,
        };
        assert!(mean_eq_residual(&stats, &eq).is_err());
    }

    #[test]
    fn residual_mean_matches_per_trajectory_mean() {
        let gamma = 1.0;
        let model = ou_random_hamiltonian_model(&OUModel::new(&pauli_x(), &pauli_z(), gamma).unwrap()).unwrap();
        let grid = TimeGrid::new(0.01, 20).unwrap();
        let eq = MeanEquation {
            h0: pauli_x(),
            l: pauli_z(),
            gamma,
        };
        let mut config = EnsembleConfig::new(plus());
        config.record.xsigma = true;
        config.record.mean_equation = Some(eq.clone());
        let stats = run_ensemble(&model, &grid, 50, 3, &config, Execution::Sequential).unwrap();
        let series = mean_eq_residual(&stats, &eq).unwrap();
        let recorded = stats.residual.as_ref().unwrap();
        for (i, &k) in series.indices.iter().enumerate() {
            assert!(max_abs(&(&series.residual[i] - &recorded.mean[k])) < 1e-10);
        }
        assert!(series.se.unwrap().iter().all(|s| s.is_finite()));
    }

    #[test]
    fn derivative_is_exact_for_quadratics() {
        let grid = TimeGrid::new(0.1, 5).unwrap();
        let eta: Vec<DensityLike> = grid
            .times()
            .map(|t| algebra::identity(2) * c(t * t + 2.0 * t, 0.0))
            .collect();
        let stats = EnsembleStats {
            grid,
            n: 1,
            eta_se: vec![DMatrix::zeros(2, 2); 6],
            se_eta: vec![0.0; 6],
            mean_weight: vec![0.0; 6],
            se_weight: vec![0.0; 6],
            xsigma: None,
            se_xsigma: None,
            observables: vec![],
            residual: None,
            dead: vec![],
            eta,
        };
        for (k, d) in eta_derivative(&stats).iter().enumerate() {
            let t = grid.time(k);
            assert!((d[(0, 0)].re - (2.0 * t + 2.0)).abs() < 1e-12);
        }
    }
}
