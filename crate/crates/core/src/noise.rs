//! Wiener increments and Ornstein-Uhlenbeck paths on a uniform grid.
//!
//! Every path is a pure function of `(master_seed, trajectory_index, grid,
//! gamma, mode)`. Streams are ChaCha20 keyed by the master seed, with the
//! trajectory index selecting one of its 2^64 disjoint streams, so paths can
//! be generated in any order on any number of workers.

use std::io::{self, Write};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::table::format_real;

/// Uniform grid `t_k = k dt`, `k = 0..=steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    dt: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(dt: f64, steps: usize) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
        }
        if steps == 0 {
            return Err(Error::InvalidArgument("grid needs at least one step".into()));
        }
        Ok(Self { dt, steps })
    }

    /// Grid covering `[0, horizon]`; the horizon must be a whole number of steps.
    pub fn with_horizon(dt: f64, horizon: f64) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
        }
        if !(horizon.is_finite() && horizon >= dt) {
            return Err(Error::InvalidArgument(format!(
                "horizon {horizon} must be at least one step {dt}"
            )));
        }
        let steps = (horizon / dt).round() as usize;
        if ((steps as f64) * dt - horizon).abs() > 1e-9 * horizon {
            return Err(Error::InvalidArgument(format!(
                "horizon {horizon} is not a multiple of dt {dt}"
            )));
        }
        Self::new(dt, steps)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    pub fn horizon(&self) -> f64 {
        self.time(self.steps)
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.steps).map(|k| self.time(k))
    }

    /// Index of the grid point closest to `t`, clamped to the grid.
    pub fn index_of(&self, t: f64) -> usize {
        ((t / self.dt).round().max(0.0) as usize).min(self.steps)
    }

    /// Grid with `factor` times the step and the same horizon.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.steps.is_multiple_of(factor) {
            return Err(Error::InvalidArgument(format!(
                "cannot coarsen {} steps by {factor}",
                self.steps
            )));
        }
        Self::new(self.dt * factor as f64, self.steps / factor)
    }
}

/// Reproducible substream: `(master_seed, index)` fully determines the draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RandomStream {
    pub master_seed: u64,
    pub index: u64,
}

impl RandomStream {
    pub fn rng(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.index);
        rng
    }
}

pub fn derive_stream(master_seed: u64, trajectory_index: u64) -> RandomStream {
    RandomStream {
        master_seed,
        index: trajectory_index,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OuMode {
    /// `X_{k+1} = X_k - gamma X_k dt + dW_k` with the returned increments.
    #[default]
    Euler,
    /// `(dW_k, X_{k+1})` drawn from their exact joint law given `X_k`.
    ExactBridge,
}

/// Driving noise of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePath {
    grid: TimeGrid,
    channels: usize,
    /// Step-major: `dw[k * channels + j]` is the increment of channel `j` over `[t_k, t_{k+1}]`.
    dw: Vec<f64>,
    /// OU samples at every grid point, channel 0 only.
    x: Option<Vec<f64>>,
    gamma: Option<f64>,
    mode: Option<OuMode>,
    stream: Option<RandomStream>,
}

pub fn wiener_increments(grid: &TimeGrid, channels: usize, stream: RandomStream) -> Result<NoisePath> {
    if grid.dt().is_nan() || grid.dt() <= 0.0 {
        return Err(Error::InvalidArgument("dt must be positive".into()));
    }
    let mut rng = stream.rng();
    let sd = grid.dt().sqrt();
    let dw = (0..grid.steps() * channels)
        .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok(NoisePath {
        grid: *grid,
        channels,
        dw,
        x: None,
        gamma: None,
        mode: None,
        stream: Some(stream),
    })
}

/// Stationary OU path with `X(0) ~ N(0, 1/(2 gamma))`.
pub fn ou_path(grid: &TimeGrid, gamma: f64, stream: RandomStream, mode: OuMode) -> Result<NoisePath> {
    ou_path_inner(grid, gamma, stream, mode, None)
}

/// OU path started from a fixed `x0`; the increments are the same draws as
/// for [`ou_path`] with the same stream.
pub fn ou_path_with_start(
    grid: &TimeGrid,
    gamma: f64,
    stream: RandomStream,
    mode: OuMode,
    x0: f64,
) -> Result<NoisePath> {
    ou_path_inner(grid, gamma, stream, mode, Some(x0))
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
    }
    Ok(())
}

fn ou_path_inner(
    grid: &TimeGrid,
    gamma: f64,
    stream: RandomStream,
    mode: OuMode,
    x0: Option<f64>,
) -> Result<NoisePath> {
    check_gamma(gamma)?;
    let mut rng = stream.rng();
    let z: f64 = rng.sample(StandardNormal);
    let start = x0.unwrap_or(z / (2.0 * gamma).sqrt());
    let dt = grid.dt();
    let steps = grid.steps();
    let mut x = Vec::with_capacity(steps + 1);
    let mut dw = Vec::with_capacity(steps);
    x.push(start);
    match mode {
        OuMode::Euler => {
            let sd = dt.sqrt();
            for k in 0..steps {
                let inc = sd * rng.sample::<f64, _>(StandardNormal);
                dw.push(inc);
                x.push(x[k] - gamma * x[k] * dt + inc);
            }
        }
        OuMode::ExactBridge => {
            let decay = (-gamma * dt).exp();
            let var_w = dt;
            let var_i = -(-2.0 * gamma * dt).exp_m1() / (2.0 * gamma);
            let cov = -(-gamma * dt).exp_m1() / gamma;
            let a = cov / var_w.sqrt();
            let b = (var_i - a * a).max(0.0).sqrt();
            for k in 0..steps {
                let z1: f64 = rng.sample(StandardNormal);
                let z2: f64 = rng.sample(StandardNormal);
                dw.push(var_w.sqrt() * z1);
                x.push(decay * x[k] + a * z1 + b * z2);
            }
        }
    }
    Ok(NoisePath {
        grid: *grid,
        channels: 1,
        dw,
        x: Some(x),
        gamma: Some(gamma),
        mode: Some(mode),
        stream: Some(stream),
    })
}

pub fn ou_autocorrelation(gamma: f64, s: f64, t: f64) -> f64 {
    (-gamma * (t - s).abs()).exp() / (2.0 * gamma)
}

impl NoisePath {
    /// Path from explicit increments, without an OU component.
    pub fn from_increments(grid: &TimeGrid, channels: usize, dw: Vec<f64>) -> Result<Self> {
        if dw.len() != grid.steps() * channels {
            return Err(Error::DimensionMismatch {
                expected: grid.steps() * channels,
                found: dw.len(),
            });
        }
        if dw.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Wiener increments"));
        }
        Ok(Self {
            grid: *grid,
            channels,
            dw,
            x: None,
            gamma: None,
            mode: None,
            stream: None,
        })
    }

    /// Euler OU path driven by the given single-channel increments.
    pub fn ou_from_increments(grid: &TimeGrid, gamma: f64, x0: f64, dw: Vec<f64>) -> Result<Self> {
        check_gamma(gamma)?;
        let mut path = Self::from_increments(grid, 1, dw)?;
        path.x = Some(euler_ou(x0, gamma, grid.dt(), &path.dw));
        path.gamma = Some(gamma);
        path.mode = Some(OuMode::Euler);
        Ok(path)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn gamma(&self) -> Option<f64> {
        self.gamma
    }

    pub fn mode(&self) -> Option<OuMode> {
        self.mode
    }

    pub fn stream(&self) -> Option<RandomStream> {
        self.stream
    }

    /// Increments of all channels over `[t_k, t_{k+1}]`.
    pub fn dw(&self, k: usize) -> &[f64] {
        &self.dw[k * self.channels..(k + 1) * self.channels]
    }

    pub fn increments(&self) -> &[f64] {
        &self.dw
    }

    pub fn x(&self, k: usize) -> Option<f64> {
        self.x.as_ref().map(|x| x[k])
    }

    pub fn ou_samples(&self) -> Option<&[f64]> {
        self.x.as_deref()
    }

    /// View of the path up to grid index `k`: OU samples at `t_0..=t_k` and
    /// the increments before `t_k`.
    pub fn prefix(&self, k: usize) -> PathPrefix<'_> {
        assert!(k <= self.grid.steps(), "prefix index {k} beyond grid");
        PathPrefix { path: self, k }
    }

    /// Same Brownian path on a grid `factor` times coarser: increments are
    /// summed; Euler OU samples are recomputed from the summed increments
    /// starting at the same `X(0)`, exact OU samples are subsampled.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        let grid = self.grid.coarsen(factor)?;
        let d = self.channels;
        let mut dw = vec![0.0; grid.steps() * d];
        for k in 0..grid.steps() {
            for sub in 0..factor {
                let fine = self.dw(k * factor + sub);
                for j in 0..d {
                    dw[k * d + j] += fine[j];
                }
            }
        }
        let x = match (&self.x, self.mode, self.gamma) {
            (Some(x), Some(OuMode::Euler), Some(gamma)) => Some(euler_ou(x[0], gamma, grid.dt(), &dw)),
            (Some(x), _, _) => Some(x.iter().step_by(factor).copied().collect()),
            (None, _, _) => None,
        };
        Ok(Self {
            grid,
            channels: d,
            dw,
            x,
            gamma: self.gamma,
            mode: self.mode,
            stream: self.stream,
        })
    }

    /// Copy with the increments of step `k` and later replaced; used to probe predictability.
    pub fn with_future_replaced(&self, k: usize, dw_value: f64, x_value: f64) -> Self {
        let mut out = self.clone();
        for v in out.dw.iter_mut().skip(k * self.channels) {
            *v = dw_value;
        }
        if let Some(x) = out.x.as_mut() {
            for v in x.iter_mut().skip(k + 1) {
                *v = x_value;
            }
        }
        out
    }

    /// CSV dump with columns `t, X, dW_1..dW_d` (`X` only for OU paths). The
    /// last row has no increment.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let mut header = vec!["t".to_string()];
        if self.x.is_some() {
            header.push("X".into());
        }
        header.extend((1..=self.channels).map(|j| format!("dW_{j}")));
        writeln!(w, "{}", header.join(","))?;
        for k in 0..=self.grid.steps() {
            let mut row = vec![format_real(self.grid.time(k))];
            if let Some(x) = &self.x {
                row.push(format_real(x[k]));
            }
            for j in 0..self.channels {
                if k < self.grid.steps() {
                    row.push(format_real(self.dw(k)[j]));
                } else {
                    row.push(String::new());
                }
            }
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

fn euler_ou(x0: f64, gamma: f64, dt: f64, dw: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(dw.len() + 1);
    x.push(x0);
    for (k, inc) in dw.iter().enumerate() {
        x.push(x[k] - gamma * x[k] * dt + inc);
    }
    x
}

/// Non-anticipating view of a [`NoisePath`] at grid index `k`.
#[derive(Debug, Clone, Copy)]
pub struct PathPrefix<'a> {
    path: &'a NoisePath,
    k: usize,
}

impl PathPrefix<'_> {
    pub fn index(&self) -> usize {
        self.k
    }

    pub fn time(&self) -> f64 {
        self.path.grid.time(self.k)
    }

    /// `X(t_k)`, the latest OU sample.
    pub fn x_now(&self) -> Option<f64> {
        self.path.x(self.k)
    }

    pub fn x_at(&self, i: usize) -> Option<f64> {
        assert!(i <= self.k, "sample {i} lies in the future of {}", self.k);
        self.path.x(i)
    }

    pub fn dw_at(&self, i: usize) -> &[f64] {
        assert!(i < self.k, "increment {i} lies in the future of {}", self.k);
        self.path.dw(i)
    }
}
