//! Deterministic mean dynamics: the Lindblad limit, the approximate master
//! equation with exponential memory kernel, and the exact dephasing solution.
//!
//! The memory equation is
//! `d eta/dt = L_M[eta] + w (gamma/2) int_0^t [L, e^{(L_M - gamma)(t-s)}[[L, eta(s)]]] ds`
//! with `w = 1` for the physical equation. Because the kernel is exponential,
//! the convolution `Y(t)` obeys the local equation
//! `dY/dt = (L_M - gamma)[Y] + [L, eta]`, `Y(0) = 0`.

use std::io::{self, Write};

use crate::algebra::{
    c, check_density, commutator, hermiticity_defect, symmetrize_hermitian, superop_exp, DensityLike,
    OperatorMatrix, Superoperator, TOL_HERM, TOL_PSD,
};
use crate::coefficients::OUModel;
use crate::error::{Error, Result};
use crate::noise::TimeGrid;
use crate::table::format_real;

/// `L_M = -i[H0, .] - 1/2 [L, [L, .]]`.
pub fn mean_liouvillian(h0: &OperatorMatrix, l: &OperatorMatrix) -> Result<Superoperator> {
    let h0 = symmetrize_hermitian(h0, TOL_HERM, "H0")?;
    let l = symmetrize_hermitian(l, TOL_HERM, "L")?;
    let ad_h = Superoperator::commutator_with(&h0)?;
    let ad_l = Superoperator::commutator_with(&l)?;
    if ad_h.dim() != ad_l.dim() {
        return Err(Error::DimensionMismatch {
            expected: ad_h.dim(),
            found: ad_l.dim(),
        });
    }
    let double = ad_l.compose(&ad_l)?;
    ad_h.scale(c(0.0, -1.0)).add(&double.scale(c(-0.5, 0.0)))
}

/// `K1(tau) = (gamma/2) R ∘ e^{(L_M - gamma) tau} ∘ R` with `R = -i[L, .]`.
///
/// In the approximate equation the kernel and the noise correlation term
/// combine to `-K1`, which is the `+ (gamma/2) [L, ...]` form above.
pub fn kernel_k1(model: &OUModel, tau: f64) -> Result<Superoperator> {
    let l_m = mean_liouvillian(model.h0(), model.l())?;
    let r = Superoperator::commutator_with(model.l())?.scale(c(0.0, -1.0));
    let prop = superop_exp(&l_m.shifted(model.gamma()), tau)?;
    Ok(r.compose(&prop)?.compose(&r)?.scale(c(model.gamma() / 2.0, 0.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MemoryMethod {
    /// RK4 on the equivalent local system for `(eta, Y)`.
    #[default]
    AuxOde,
    /// Heun steps for `eta` with the convolution advanced by the trapezoid rule.
    Quadrature,
}

/// Snapshot of the memory equation: `y` is the running convolution
/// `int_0^t e^{(L_M - gamma)(t-s)}[[L, eta(s)]] ds`.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryMEState {
    pub eta: DensityLike,
    pub y: OperatorMatrix,
    pub t: f64,
}

/// A solved density-matrix series with the diagnostics we log.
#[derive(Debug, Clone, PartialEq)]
pub struct MasterSolution {
    pub grid: TimeGrid,
    pub eta: Vec<DensityLike>,
    /// Convolution variable, empty for memoryless solves.
    pub y: Vec<OperatorMatrix>,
    pub min_eigenvalue: Vec<f64>,
    /// `|Tr eta(t) - Tr eta(0)|`.
    pub trace_defect: Vec<f64>,
}

impl MasterSolution {
    fn new(grid: TimeGrid, eta: Vec<DensityLike>, y: Vec<OperatorMatrix>) -> Result<Self> {
        let tr0 = eta[0].trace();
        let mut min_eigenvalue = Vec::with_capacity(eta.len());
        let mut trace_defect = Vec::with_capacity(eta.len());
        for (k, e) in eta.iter().enumerate() {
            if !crate::algebra::is_finite(e) {
                return Err(Error::BlowUp { trajectory: 0, step: k });
            }
            min_eigenvalue.push(check_density(e, TOL_PSD).min_eigenvalue);
            trace_defect.push((e.trace() - tr0).norm());
        }
        Ok(Self {
            grid,
            eta,
            y,
            min_eigenvalue,
            trace_defect,
        })
    }

    pub fn state(&self, k: usize) -> Option<MemoryMEState> {
        Some(MemoryMEState {
            eta: self.eta.get(k)?.clone(),
            y: self.y.get(k)?.clone(),
            t: self.grid.time(k),
        })
    }

    pub fn at_time(&self, t: f64) -> &DensityLike {
        &self.eta[self.grid.index_of(t)]
    }

    pub fn max_trace_defect(&self) -> f64 {
        self.trace_defect.iter().copied().fold(0.0, f64::max)
    }

    pub fn min_eigenvalue_overall(&self) -> f64 {
        self.min_eigenvalue.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Largest entry modulus of `eta_self(t) - eta_other(t)` over the grid.
    pub fn sup_distance(&self, other: &Self) -> Result<f64> {
        if self.eta.len() != other.eta.len() {
            return Err(Error::DimensionMismatch {
                expected: self.eta.len(),
                found: other.eta.len(),
            });
        }
        Ok(self
            .eta
            .iter()
            .zip(&other.eta)
            .map(|(a, b)| crate::algebra::max_abs(&(a - b)))
            .fold(0.0, f64::max))
    }

    /// Columns: `t`, real and imaginary parts of every entry, minimum
    /// eigenvalue, trace defect.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let n = self.eta[0].nrows();
        let mut header = vec!["t".to_string()];
        for i in 0..n {
            for j in 0..n {
                header.push(format!("eta_{i}{j}_re"));
                header.push(format!("eta_{i}{j}_im"));
            }
        }
        header.push("min_eigenvalue".into());
        header.push("trace_defect".into());
        writeln!(w, "{}", header.join(","))?;
        for (k, e) in self.eta.iter().enumerate() {
            let mut row = vec![format_real(self.grid.time(k))];
            for i in 0..n {
                for j in 0..n {
                    row.push(format_real(e[(i, j)].re));
                    row.push(format_real(e[(i, j)].im));
                }
            }
            row.push(format_real(self.min_eigenvalue[k]));
            row.push(format_real(self.trace_defect[k]));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

fn check_rho0(rho0: &DensityLike, dim: usize) -> Result<DensityLike> {
    if rho0.nrows() != dim || rho0.ncols() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: rho0.nrows().max(rho0.ncols()),
        });
    }
    symmetrize_hermitian(rho0, TOL_HERM, "rho0")
}

/// Exact flow `eta_{k+1} = e^{L dt} eta_k`.
pub fn lindblad_evolve(l_m: &Superoperator, rho0: &DensityLike, grid: &TimeGrid) -> Result<MasterSolution> {
    let rho0 = check_rho0(rho0, l_m.dim())?;
    let step = superop_exp(l_m, grid.dt())?;
    let mut eta = Vec::with_capacity(grid.len());
    eta.push(rho0);
    for k in 0..grid.steps() {
        let next = step.apply(&eta[k])?;
        eta.push(next);
    }
    MasterSolution::new(*grid, eta, Vec::new())
}

/// Solves the approximate memory master equation for a deterministic
/// initial state.
pub fn memory_me_evolve(
    model: &OUModel,
    rho0: &DensityLike,
    grid: &TimeGrid,
    method: MemoryMethod,
) -> Result<MasterSolution> {
    memory_me_evolve_weighted(model, rho0, grid, method, 1.0)
}

/// As [`memory_me_evolve`] with the memory term multiplied by `weight`;
/// `weight = 0` reduces to the Lindblad equation generated by `L_M`.
pub fn memory_me_evolve_weighted(
    model: &OUModel,
    rho0: &DensityLike,
    grid: &TimeGrid,
    method: MemoryMethod,
    weight: f64,
) -> Result<MasterSolution> {
    let gamma = model.gamma();
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
    }
    if !weight.is_finite() {
        return Err(Error::NonFinite("memory weight"));
    }
    let rho0 = check_rho0(rho0, model.dim())?;
    let sys = MemorySystem {
        l_m: mean_liouvillian(model.h0(), model.l())?,
        l: model.l().clone(),
        gamma,
        coupling: c(weight * gamma / 2.0, 0.0),
    };
    let (eta, y) = match method {
        MemoryMethod::AuxOde => sys.rk4(rho0, grid)?,
        MemoryMethod::Quadrature => sys.quadrature(rho0, grid)?,
    };
    MasterSolution::new(*grid, eta, y)
}

struct MemorySystem {
    l_m: Superoperator,
    l: OperatorMatrix,
    gamma: f64,
    coupling: crate::algebra::C64,
}

impl MemorySystem {
    fn bracket(&self, x: &OperatorMatrix) -> OperatorMatrix {
        commutator(&self.l, x).expect("dims checked")
    }

    fn eta_rate(&self, eta: &DensityLike, y: &OperatorMatrix) -> Result<DensityLike> {
        Ok(self.l_m.apply(eta)? + self.bracket(y) * self.coupling)
    }

    fn y_rate(&self, eta: &DensityLike, y: &OperatorMatrix) -> Result<OperatorMatrix> {
        Ok(self.l_m.apply(y)? - y * c(self.gamma, 0.0) + self.bracket(eta))
    }

    fn rk4(&self, rho0: DensityLike, grid: &TimeGrid) -> Result<(Vec<DensityLike>, Vec<OperatorMatrix>)> {
        let h = grid.dt();
        let half = c(h / 2.0, 0.0);
        let full = c(h, 0.0);
        let sixth = c(h / 6.0, 0.0);
        let two = c(2.0, 0.0);
        let n = rho0.nrows();
        let mut etas = vec![rho0];
        let mut ys = vec![OperatorMatrix::zeros(n, n)];
        for k in 0..grid.steps() {
            let (e, y) = (&etas[k], &ys[k]);
            let k1e = self.eta_rate(e, y)?;
            let k1y = self.y_rate(e, y)?;
            let (e2, y2) = (e + &k1e * half, y + &k1y * half);
            let k2e = self.eta_rate(&e2, &y2)?;
            let k2y = self.y_rate(&e2, &y2)?;
            let (e3, y3) = (e + &k2e * half, y + &k2y * half);
            let k3e = self.eta_rate(&e3, &y3)?;
            let k3y = self.y_rate(&e3, &y3)?;
            let (e4, y4) = (e + &k3e * full, y + &k3y * full);
            let k4e = self.eta_rate(&e4, &y4)?;
            let k4y = self.y_rate(&e4, &y4)?;
            let next_e = e + (k1e + &k2e * two + &k3e * two + k4e) * sixth;
            let next_y = y + (k1y + &k2y * two + &k3y * two + k4y) * sixth;
            etas.push(next_e);
            ys.push(next_y);
        }
        Ok((etas, ys))
    }

    fn quadrature(&self, rho0: DensityLike, grid: &TimeGrid) -> Result<(Vec<DensityLike>, Vec<OperatorMatrix>)> {
        let h = grid.dt();
        let half = c(h / 2.0, 0.0);
        let decay = superop_exp(&self.l_m.shifted(self.gamma), h)?;
        let n = rho0.nrows();
        let mut etas = vec![rho0];
        let mut convs = vec![OperatorMatrix::zeros(n, n)];
        for k in 0..grid.steps() {
            let (e, conv) = (&etas[k], &convs[k]);
            // part of the trapezoid sum known at t_k, carried to t_{k+1}
            let carried = decay.apply(&(conv + self.bracket(e) * half))?;
            let rate = self.eta_rate(e, conv)?;
            let pred = e + &rate * c(h, 0.0);
            let conv_pred = &carried + self.bracket(&pred) * half;
            let next = e + (rate + self.eta_rate(&pred, &conv_pred)?) * half;
            let next_conv = carried + self.bracket(&next) * half;
            etas.push(next);
            convs.push(next_conv);
        }
        Ok((etas, convs))
    }
}

/// Diagonal of `a`, which must be real diagonal within `TOL_HERM`.
pub fn real_diagonal(a: &OperatorMatrix, what: &'static str) -> Result<Vec<f64>> {
    crate::algebra::ensure_square(a)?;
    let mut off = 0.0f64;
    for ((i, j), z) in a.iter().enumerate().map(|(idx, z)| ((idx % a.nrows(), idx / a.nrows()), z)) {
        if i != j {
            off = off.max(z.norm());
        } else {
            off = off.max(z.im.abs());
        }
    }
    if off > TOL_HERM {
        return Err(Error::InvalidArgument(format!(
            "{what} must be real diagonal in the computational basis (defect {off:e})"
        )));
    }
    Ok((0..a.nrows()).map(|i| a[(i, i)].re).collect())
}

/// Exact a priori state when `H0 = diag(omega)` and `L = diag(l)`:
/// `eta_jk(t) = rho0_jk e^{-i(omega_j - omega_k) t} exp{-(l_j - l_k)^2 (1 - e^{-gamma t}) / (2 gamma)}`.
pub fn dephasing_oracle(omega: &[f64], l: &[f64], gamma: f64, rho0: &DensityLike, t: f64) -> Result<DensityLike> {
    let n = omega.len();
    if l.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: l.len(),
        });
    }
    if rho0.nrows() != n || rho0.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: rho0.nrows(),
        });
    }
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
    }
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::InvalidArgument(format!("time must be nonnegative, got {t}")));
    }
    let phase_var = -(-gamma * t).exp_m1() / gamma;
    Ok(DensityLike::from_fn(n, n, |j, k| {
        let dl = l[j] - l[k];
        let rot = C64Ext::cis(-(omega[j] - omega[k]) * t);
        rho0[(j, k)] * rot * (-dl * dl * phase_var / 2.0).exp()
    }))
}

/// Oracle for an [`OUModel`] whose `H0` and `L` are both diagonal.
pub fn dephasing_oracle_for(model: &OUModel, rho0: &DensityLike, t: f64) -> Result<DensityLike> {
    let omega = real_diagonal(model.h0(), "H0")?;
    let l = real_diagonal(model.l(), "L")?;
    dephasing_oracle(&omega, &l, model.gamma(), rho0, t)
}

struct C64Ext;

impl C64Ext {
    fn cis(theta: f64) -> crate::algebra::C64 {
        crate::algebra::C64::from_polar(1.0, theta)
    }
}

/// Largest Hermiticity defect along a solution.
pub fn max_hermiticity_defect(sol: &MasterSolution) -> f64 {
    sol.eta.iter().map(hermiticity_defect).fold(0.0, f64::max)
}
