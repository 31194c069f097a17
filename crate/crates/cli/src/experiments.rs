//! The named experiments. Each one turns a validated configuration into a
//! [`Report`] of summary scalars, checks and result tables.

use colored_sse::algebra::{max_abs, projector};
use colored_sse::coefficients::{sample_noise, CoefficientProcess, OUModel};
use colored_sse::ensemble::{
    martingale_report, mean_eq_residual, run_ensemble, run_physical_ensemble, EnsembleConfig, MeanEquation,
};
use colored_sse::exec::map_chunks;
use colored_sse::integrators::{build_propagator, simulate_linear, RenormPolicy, SINGULAR_CONDITION};
use colored_sse::memory::{
    dephasing_oracle_for, lindblad_evolve, mean_liouvillian, memory_me_evolve, memory_me_evolve_weighted,
    real_diagonal, MemoryMethod,
};
use colored_sse::noise::{derive_stream, ou_autocorrelation, ou_path, NoisePath, TimeGrid};
use colored_sse::table::format_real;
use colored_sse::Execution;

use crate::config::{ConfigError, Experiment, Validated};
use crate::output::{Check, OutputFile, Report, Table};
use crate::RunError;

/// Trajectories written by `--dump-trajectories`.
pub const DUMP_LIMIT: usize = 10;

pub struct Context<'a> {
    pub cfg: &'a Validated,
    pub exec: Execution,
    pub dump_trajectories: bool,
}

pub fn run(ctx: &Context<'_>) -> Result<Report, RunError> {
    match ctx.cfg.raw.experiment {
        Experiment::OuStats => ou_stats(ctx),
        Experiment::Martingale => martingale(ctx),
        Experiment::NormPreservation => norm_preservation(ctx),
        Experiment::DephasingCompare => dephasing_compare(ctx),
        Experiment::MeaneqResidual => meaneq_residual(ctx),
        Experiment::MemoryMe => memory_me(ctx),
        Experiment::GirsanovCheck => girsanov_check(ctx),
        Experiment::PropagatorCheck => propagator_check(ctx),
    }
}

fn need_ou<'a>(ctx: &'a Context<'_>) -> Result<&'a OUModel, RunError> {
    ctx.cfg.model.ou().ok_or_else(|| {
        RunError::Config(ConfigError {
            path: "model.kind".into(),
            message: format!("experiment {} needs an OU model", ctx.cfg.raw.experiment.name()),
        })
    })
}

fn need_diagonal(model: &OUModel) -> Result<(Vec<f64>, Vec<f64>), RunError> {
    let diag = |m, what, path: &str| {
        real_diagonal(m, what).map_err(|e| {
            RunError::Config(ConfigError {
                path: path.into(),
                message: e.to_string(),
            })
        })
    };
    Ok((diag(model.h0(), "H0", "model.h0")?, diag(model.l(), "L", "model.l")?))
}

fn ensemble_config(cfg: &Validated) -> EnsembleConfig {
    let mut e = EnsembleConfig::new(cfg.psi0.clone());
    e.renorm = cfg.renorm();
    e.ou_mode = cfg.ou_mode();
    e
}

fn checkpoints_or(cfg: &Validated, defaults: &[f64]) -> Vec<f64> {
    if cfg.numerics().checkpoints.is_empty() {
        defaults
            .iter()
            .copied()
            .filter(|t| *t <= cfg.grid.horizon() + 1e-12)
            .collect()
    } else {
        cfg.numerics().checkpoints.clone()
    }
}

/// Refinement grids from coarsest to finest, finest step equal to `dt`.
fn refinement_factors(cfg: &Validated) -> Result<Vec<usize>, RunError> {
    let levels = cfg.numerics().levels;
    let coarsest = 1usize << (levels - 1);
    if !cfg.grid.steps().is_multiple_of(coarsest) {
        return Err(RunError::Config(ConfigError {
            path: "numerics.t".into(),
            message: format!(
                "{} steps cannot be coarsened by {coarsest} for {levels} refinement levels",
                cfg.grid.steps()
            ),
        }));
    }
    Ok((0..levels).rev().map(|j| 1usize << j).collect())
}

fn trajectory_csv(path: &NoisePath, traj: &colored_sse::integrators::Trajectory) -> Vec<u8> {
    let n = traj.states[0].len();
    let mut header = vec!["t".to_string()];
    if path.ou_samples().is_some() {
        header.push("X".into());
    }
    header.extend((1..=path.channels()).map(|j| format!("dW_{j}")));
    header.push("weight".into());
    for j in 0..n {
        header.push(format!("psi_{j}_re"));
        header.push(format!("psi_{j}_im"));
    }
    let mut out = header.join(",");
    out.push('\n');
    for k in 0..traj.states.len() {
        let mut row = vec![format_real(path.grid().time(k))];
        if let Some(x) = path.ou_samples() {
            row.push(format_real(x[k]));
        }
        for j in 0..path.channels() {
            row.push(if k < path.grid().steps() {
                format_real(path.dw(k)[j])
            } else {
                String::new()
            });
        }
        row.push(format_real(traj.weights[k]));
        for z in traj.states[k].iter() {
            row.push(format_real(z.re));
            row.push(format_real(z.im));
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out.into_bytes()
}

/// Re-integrates the first trajectories of a linear ensemble, drawing from
/// the same substreams the ensemble used.
fn dump_linear(ctx: &Context<'_>, model: &dyn CoefficientProcess, report: &mut Report) -> Result<(), RunError> {
    if !ctx.dump_trajectories {
        return Ok(());
    }
    let cfg = ctx.cfg;
    for i in 0..cfg.numerics().n.min(DUMP_LIMIT) {
        let stream = derive_stream(cfg.numerics().master_seed, i as u64);
        let path = sample_noise(model, &cfg.grid, stream, cfg.ou_mode())?;
        let traj = simulate_linear(model, &path, &cfg.psi0, cfg.renorm(), false)?;
        report.file(OutputFile {
            name: format!("trajectories/trajectory_{i:05}.csv"),
            contents: trajectory_csv(&path, &traj),
        });
    }
    Ok(())
}

// ---- ou-stats -----------------------------------------------------------------

fn ou_stats(ctx: &Context<'_>) -> Result<Report, RunError> {
    let cfg = ctx.cfg;
    let gamma = need_ou(ctx)?.gamma();
    let grid = cfg.grid;
    let len = grid.len();
    let n = cfg.numerics().n;
    let seed = cfg.numerics().master_seed;
    let mode = cfg.ou_mode();

    // per-time sums of X, X^2 and X(0) X(t)
    let chunks = map_chunks(n, ctx.exec, |a, b| {
        let mut s = vec![[0.0f64; 3]; len];
        for i in a..b {
            let path = ou_path(&grid, gamma, derive_stream(seed, i as u64), mode)?;
            let x = path.ou_samples().expect("OU path");
            for k in 0..len {
                s[k][0] += x[k];
                s[k][1] += x[k] * x[k];
                s[k][2] += x[0] * x[k];
            }
        }
        Ok(s)
    })?;
    let mut sums = vec![[0.0f64; 3]; len];
    for chunk in chunks {
        for (acc, v) in sums.iter_mut().zip(chunk) {
            for j in 0..3 {
                acc[j] += v[j];
            }
        }
    }

    let nf = n as f64;
    let exact_var = 1.0 / (2.0 * gamma);
    let mut table = Table::new([
        "t",
        "mean",
        "variance",
        "autocovariance",
        "exact_variance",
        "exact_autocovariance",
    ]);
    let mut variances = Vec::with_capacity(len);
    let mut autocov = Vec::with_capacity(len);
    for (k, s) in sums.iter().enumerate() {
        let mean = s[0] / nf;
        let var = if n > 1 { (s[1] - nf * mean * mean) / (nf - 1.0) } else { f64::NAN };
        let cov = s[2] / nf;
        variances.push(var);
        autocov.push(cov);
        let t = grid.time(k);
        table.push(vec![t, mean, var, cov, exact_var, ou_autocorrelation(gamma, 0.0, t)]);
    }

    let lag = checkpoints_or(cfg, &[1.0]).first().copied().unwrap_or(grid.horizon());
    let lag_k = grid.index_of(lag);
    let stationary = variances.iter().sum::<f64>() / len as f64;
    let exact_cov = ou_autocorrelation(gamma, 0.0, grid.time(lag_k));

    let mut report = Report::default();
    report.scalar("gamma", gamma);
    report.scalar("paths", nf);
    report.scalar("stationary_variance", stationary);
    report.scalar("exact_stationary_variance", exact_var);
    report.scalar("lag", grid.time(lag_k));
    report.scalar("autocovariance_at_lag", autocov[lag_k]);
    report.scalar("exact_autocovariance_at_lag", exact_cov);
    report.check(Check::at_most(
        "stationary_variance_relative_error",
        (stationary - exact_var).abs() / exact_var,
        0.05,
    ));
    report.check(Check::at_most(
        "lag_autocovariance_relative_error",
        (autocov[lag_k] - exact_cov).abs() / exact_cov,
        0.05,
    ));
    report.file(OutputFile::csv("ou_stats.csv", &table));

    if ctx.dump_trajectories {
        for i in 0..n.min(DUMP_LIMIT) {
            let path = ou_path(&grid, gamma, derive_stream(seed, i as u64), mode)?;
            let mut buf = Vec::new();
            path.write_csv(&mut buf)?;
            report.file(OutputFile {
                name: format!("trajectories/path_{i:05}.csv"),
                contents: buf,
            });
        }
    }
    Ok(report)
}

// ---- martingale -----------------------------------------------------------------

fn martingale(ctx: &Context<'_>) -> Result<Report, RunError> {
    let cfg = ctx.cfg;
    let model = cfg.model.process()?;
    let n = cfg.numerics().n;
    let stats = run_ensemble(
        model.as_ref(),
        &cfg.grid,
        n,
        cfg.numerics().master_seed,
        &ensemble_config(cfg),
        ctx.exec,
    )?;
    let mr = martingale_report(&stats);

    let mut table = Table::new(["t", "mean_weight", "se_weight", "z"]);
    for k in 0..cfg.grid.len() {
        table.push(vec![
            cfg.grid.time(k),
            stats.mean_weight[k],
            stats.se_weight[k],
            mr.z[k].unwrap_or(f64::NAN),
        ]);
    }
    let last = cfg.grid.steps();
    let z_final = mr.z[last].map(f64::abs).unwrap_or(f64::NAN);

    let mut report = Report::default();
    report.scalar("trajectories", n as f64);
    report.scalar("mean_weight_final", stats.mean_weight[last]);
    report.scalar("se_weight_final", stats.se_weight[last]);
    report.scalar("max_abs_z", mr.max_abs_z.unwrap_or(f64::NAN));
    report.scalar("dead_trajectories", stats.dead.len() as f64);
    report.check(Check::at_most("final_mean_weight_abs_z", z_final, 4.0));
    report.file(OutputFile::csv("martingale.csv", &table));
    dump_linear(ctx, model.as_ref(), &mut report)?;
    Ok(report)
}

// ---- norm-preservation ------------------------------------------------------------

/// Machine-precision bound for the squared norm under projective renormalization.
pub const PROJECTIVE_NORM_TOLERANCE: f64 = 1e-14;

fn norm_preservation(ctx: &Context<'_>) -> Result<Report, RunError> {
    let cfg = ctx.cfg;
    let model = cfg.model.process()?;
    if !model.is_norm_preserving() {
        return Err(RunError::Config(ConfigError {
            path: "model".into(),
            message: "norm-preservation needs a norm-preserving model (H Hermitian, R = -i L with L Hermitian)".into(),
        }));
    }
    let factors = refinement_factors(cfg)?;
    let levels = factors.len();
    let n = cfg.numerics().n;
    let seed = cfg.numerics().master_seed;

    // per level: sum of max deviation, its square, sum of final deviation; then projective max
    let chunks = map_chunks(n, ctx.exec, |a, b| {
        let mut s = vec![[0.0f64; 3]; levels];
        let mut projective = 0.0f64;
        for i in a..b {
            let fine = sample_noise(model.as_ref(), &cfg.grid, derive_stream(seed, i as u64), cfg.ou_mode())?;
            for (slot, &f) in factors.iter().enumerate() {
                let path = if f == 1 { fine.clone() } else { fine.coarsen(f)? };
                let t = simulate_linear(model.as_ref(), &path, &cfg.psi0, RenormPolicy::None, false)?;
                let dev = t.max_norm_deviation();
                s[slot][0] += dev;
                s[slot][1] += dev * dev;
                s[slot][2] += t.weights.last().copied().unwrap_or(f64::NAN) - t.weights[0];
            }
            let t = simulate_linear(model.as_ref(), &fine, &cfg.psi0, RenormPolicy::Projective, false)?;
            projective = projective.max(t.weights.iter().map(|p| (p - 1.0).abs()).fold(0.0, f64::max));
        }
        Ok((s, projective))
    })?;
    let mut sums = vec![[0.0f64; 3]; levels];
    let mut projective = 0.0f64;
    for (s, p) in chunks {
        for (acc, v) in sums.iter_mut().zip(s) {
            for j in 0..3 {
                acc[j] += v[j];
            }
        }
        projective = projective.max(p);
    }

    let nf = n as f64;
    let mut table = Table::new(["dt", "mean_max_deviation", "se_max_deviation", "mean_final_deviation"]);
    let mut means = Vec::with_capacity(levels);
    for (slot, &f) in factors.iter().enumerate() {
        let mean = sums[slot][0] / nf;
        let se = if n > 1 {
            ((sums[slot][1] - nf * mean * mean) / (nf - 1.0) / nf).max(0.0).sqrt()
        } else {
            f64::NAN
        };
        means.push(mean);
        table.push(vec![cfg.grid.dt() * f as f64, mean, se, sums[slot][2] / nf]);
    }

    let mut report = Report::default();
    report.scalar("paths", nf);
    for (slot, &f) in factors.iter().enumerate() {
        report.scalar(format!("mean_max_deviation_dt={}", cfg.grid.dt() * f as f64), means[slot]);
    }
    report.scalar("projective_max_deviation", projective);
    for (i, w) in means.windows(2).enumerate() {
        report.check(Check::within(format!("deviation_ratio_{}", i + 1), w[0] / w[1], 1.5, 3.0));
    }
    report.check(Check::at_most("projective_max_deviation", projective, PROJECTIVE_NORM_TOLERANCE));
    report.file(OutputFile::csv("norm_preservation.csv", &table));
    dump_linear(ctx, model.as_ref(), &mut report)?;
    Ok(report)
}

// ---- dephasing-compare --------------------------------------------------------------

fn dephasing_compare(ctx: &Context<'_>) -> Result<Report, RunError> {
    let cfg = ctx.cfg;
    let params = need_ou(ctx)?;
    let (_, l_diag) = need_diagonal(params)?;
    if params.dim() < 2 {
        return Err(RunError::Config(ConfigError {
            path: "model.l".into(),
            message: "dephasing-compare needs at least two levels".into(),
        }));
    }
    let model = cfg.model.process()?;
    let n = cfg.numerics().n;
    let stats = run_ensemble(
        model.as_ref(),
        &cfg.grid,
        n,
        cfg.numerics().master_seed,
        &ensemble_config(cfg),
        ctx.exec,
    )?;
    let rho0 = projector(&cfg.psi0);
    let memory = memory_me_evolve(params, &rho0, &cfg.grid, cfg.memory_method())?;
    let (coh, se) = stats.coherence(0, 1);

    let mut table = Table::new(["t", "ensemble_abs", "ensemble_se", "memory_me_abs", "oracle_abs"]);
    let mut memory_err = 0.0f64;
    let mut oracle_abs = Vec::with_capacity(cfg.grid.len());
    for k in 0..cfg.grid.len() {
        let t = cfg.grid.time(k);
        let o = dephasing_oracle_for(params, &rho0, t)?[(0, 1)].norm();
        let m = memory.eta[k][(0, 1)].norm();
        memory_err = memory_err.max((m - o).abs());
        oracle_abs.push(o);
        table.push(vec![t, coh[k], se[k], m, o]);
    }

    let mut report = Report::default();
    report.scalar("trajectories", n as f64);
    report.scalar("memory_me_max_abs_error", memory_err);
    report.scalar("memory_me_min_eigenvalue", memory.min_eigenvalue_overall());
    for t in checkpoints_or(cfg, &[0.25, 0.5, 1.0, 2.0]) {
        let k = cfg.grid.index_of(t);
        let z = (coh[k] - oracle_abs[k]).abs() / se[k];
        report.scalar(format!("ensemble_abs_t={t}"), coh[k]);
        report.scalar(format!("oracle_abs_t={t}"), oracle_abs[k]);
        report.check(Check::at_most(format!("coherence_t={t}_se_units"), z, 3.0));
    }
    let plateau_t = 5.0;
    if cfg.grid.horizon() >= plateau_t - 1e-12 {
        // coherence surviving after the noise decorrelates, relative to the initial coherence
        let k = cfg.grid.index_of(plateau_t);
        let c0 = rho0[(0, 1)].norm();
        let dl = l_diag[0] - l_diag[1];
        let plateau = (-dl * dl / (2.0 * params.gamma())).exp();
        let z = (coh[k] / c0 - plateau).abs() / (se[k] / c0);
        report.scalar("plateau_normalized_coherence", coh[k] / c0);
        report.scalar("plateau_exact", plateau);
        report.check(Check::at_most(format!("plateau_t={plateau_t}_se_units"), z, 3.0));
    }
    report.file(OutputFile::csv("dephasing_compare.csv", &table));
    dump_linear(ctx, model.as_ref(), &mut report)?;
    Ok(report)
}

// ---- meaneq-residual -------------------------------------------------------------------

fn meaneq_residual(ctx: &Context<'_>) -> Result<Report, RunError> {
    let cfg = ctx.cfg;
    let params = need_ou(ctx)?;
    let model = cfg.model.process()?;
    if !cfg.grid.steps().is_multiple_of(2) || cfg.grid.steps() < 4 {
        return Err(RunError::Config(ConfigError {
            path: "numerics.t".into(),
            message: "meaneq-residual needs an even number of at least four steps".into(),
        }));
    }
    let eq = MeanEquation {
        h0: params.h0().clone(),
        l: params.l().clone(),
        gamma: params.gamma(),
    };
    let mut econf = ensemble_config(cfg);
    econf.record.xsigma = true;
    econf.record.mean_equation = Some(eq.clone());
    let n = cfg.numerics().n;
    let seed = cfg.numerics().master_seed;
    let coarse_grid = cfg.grid.coarsen(2)?;

    let fine = run_ensemble(model.as_ref(), &cfg.grid, n, seed, &econf, ctx.exec)?;
    let coarse = run_ensemble(model.as_ref(), &coarse_grid, n, seed, &econf, ctx.exec)?;
    let rf = mean_eq_residual(&fine, &eq)?;
    let rc = mean_eq_residual(&coarse, &eq)?;

    // bias constant from one refinement: |R_2dt - R_dt| ~ C dt at shared interior times
    let dt = cfg.grid.dt();
    let mut gap = 0.0f64;
    for (j, &kc) in rc.indices.iter().enumerate() {
        let pos = rf.indices.iter().position(|&k| k == 2 * kc).expect("shared time");
        gap = gap.max(max_abs(&(&rc.residual[j] - &rf.residual[pos])));
    }
    let c_bias = gap / dt;

    let se = rf.se.clone().expect("residual recorded");
    let mut table = Table::new(["t", "residual_norm", "residual_se", "bound"]);
    let mut worst = 0.0f64;
    for (i, &t) in rf.times.iter().enumerate() {
        let bound = 4.0 * (se[i] + c_bias * dt);
        let ratio = rf.norm[i] / bound;
        worst = if ratio.is_nan() || worst.is_nan() { f64::NAN } else { worst.max(ratio) };
        table.push(vec![t, rf.norm[i], se[i], bound]);
    }

    let mut report = Report::default();
    report.scalar("trajectories", n as f64);
    report.scalar("bias_constant", c_bias);
    report.scalar("max_residual_norm", rf.norm.iter().copied().fold(0.0, f64::max));
    report.scalar("max_residual_se", se.iter().copied().fold(0.0, f64::max));
    report.check(Check::at_most("residual_over_bound", worst, 1.0));
    report.file(OutputFile::csv("meaneq_residual.csv", &table));
    dump_linear(ctx, model.as_ref(), &mut report)?;
    Ok(report)
}

// ---- memory-me ----------------------------------------------------------------------------

/// Tolerance for the memory-free solve against the exact Lindblad flow.
pub const ZERO_MEMORY_TOLERANCE: f64 = 1e-8;
pub const TRACE_TOLERANCE: f64 = 1e-8;

fn memory_me(ctx: &Context<'_>) -> Result<Report, RunError> {
    let cfg = ctx.cfg;
    let params = need_ou(ctx)?;
    let rho0 = projector(&cfg.psi0);
    let horizon = cfg.grid.horizon();
    let mut report = Report::default();

    let sol = memory_me_evolve(params, &rho0, &cfg.grid, cfg.memory_method())?;
    let mut buf = Vec::new();
    sol.write_csv(&mut buf)?;
    report.file(OutputFile {
        name: "memory_me.csv".into(),
        contents: buf,
    });
    report.scalar("min_eigenvalue", sol.min_eigenvalue_overall());
    report.scalar("max_trace_defect", sol.max_trace_defect());
    report.check(Check::at_most("trace_defect", sol.max_trace_defect(), TRACE_TOLERANCE));

    // aux-ODE against quadrature under step refinement
    let factors = refinement_factors(cfg)?;
    let mut cross = Table::new(["dt", "sup_distance"]);
    let mut gaps = Vec::with_capacity(factors.len());
    for &f in &factors {
        let grid = cfg.grid.coarsen(f)?;
        let a = memory_me_evolve(params, &rho0, &grid, MemoryMethod::AuxOde)?;
        let q = memory_me_evolve(params, &rho0, &grid, MemoryMethod::Quadrature)?;
        let d = a.sup_distance(&q)?;
        gaps.push(d);
        cross.push(vec![grid.dt(), d]);
    }
    for (i, w) in gaps.windows(2).enumerate() {
        report.check(Check::within(format!("solver_cross_check_ratio_{}", i + 1), w[0] / w[1], 3.0, 5.0));
    }
    report.file(OutputFile::csv("solver_cross_check.csv", &cross));

    // memory term switched off reproduces the exact Lindblad flow
    let lindblad = lindblad_evolve(&mean_liouvillian(params.h0(), params.l())?, &rho0, &cfg.grid)?;
    let off = memory_me_evolve_weighted(params, &rho0, &cfg.grid, MemoryMethod::AuxOde, 0.0)?;
    let d = off.sup_distance(&lindblad)?;
    report.scalar("zero_memory_vs_lindblad", d);
    report.check(Check::at_most("zero_memory_matches_lindblad", d, ZERO_MEMORY_TOLERANCE));

    let sweep = &cfg.numerics().gamma_sweep;
    if !sweep.is_empty() {
        need_diagonal(params)?;
        let mut table = Table::new(["gamma", "error_at_horizon"]);
        let mut errs = Vec::with_capacity(sweep.len());
        for &g in sweep {
            let m = params.with_gamma(g)?;
            let s = memory_me_evolve(&m, &rho0, &cfg.grid, MemoryMethod::AuxOde)?;
            let e = max_abs(&(&s.eta[cfg.grid.steps()] - dephasing_oracle_for(&m, &rho0, horizon)?));
            report.scalar(format!("oracle_error_gamma={g}"), e);
            errs.push(e);
            table.push(vec![g, e]);
        }
        for (i, w) in errs.windows(2).enumerate() {
            report.check(Check::within(format!("gamma_scaling_ratio_{}", i + 1), w[0] / w[1], 1.5, 3.0));
        }
        report.file(OutputFile::csv("gamma_sweep.csv", &table));
    }
    Ok(report)
}

// ---- girsanov-check ---------------------------------------------------------------------------

fn girsanov_check(ctx: &Context<'_>) -> Result<Report, RunError> {
    let cfg = ctx.cfg;
    let model = cfg.model.process()?;
    let n = cfg.numerics().n;
    let seed = cfg.numerics().master_seed;
    let mut econf = ensemble_config(cfg);
    econf.renorm = RenormPolicy::None;
    econf.record.observables.push(("observable".into(), cfg.observable.clone()));
    let lin = run_ensemble(model.as_ref(), &cfg.grid, n, seed, &econf, ctx.exec)?;
    let phys = run_physical_ensemble(model.as_ref(), &cfg.grid, n, seed, &econf, ctx.exec)?;
    let a = lin.observable("observable").expect("recorded");
    let b = phys.observable("observable").expect("recorded");

    let mut table = Table::new(["t", "linear_weighted", "linear_se", "nonlinear", "nonlinear_se"]);
    for k in 0..cfg.grid.len() {
        table.push(vec![cfg.grid.time(k), a.mean[k], a.se[k], b.mean[k], b.se[k]]);
    }
    let h = cfg.grid.horizon();
    let defaults: Vec<f64> = (1..=5).map(|i| h * i as f64 / 5.0).collect();
    let mut report = Report::default();
    report.scalar("trajectories", n as f64);
    for t in checkpoints_or(cfg, &defaults) {
        let k = cfg.grid.index_of(t);
        let se = a.se[k].hypot(b.se[k]);
        let z = (a.mean[k] - b.mean[k]).abs() / se;
        report.scalar(format!("difference_t={t}"), a.mean[k] - b.mean[k]);
        report.check(Check::at_most(format!("agreement_t={t}_se_units"), z, 4.0));
    }
    report.file(OutputFile::csv("girsanov.csv", &table));
    dump_linear(ctx, model.as_ref(), &mut report)?;
    Ok(report)
}

// ---- propagator-check ----------------------------------------------------------------------------

pub const COMPOSITION_TOLERANCE: f64 = 1e-12;

fn propagator_check(ctx: &Context<'_>) -> Result<Report, RunError> {
    let cfg = ctx.cfg;
    let model = cfg.model.process()?;
    let grid: TimeGrid = cfg.grid;
    let path = sample_noise(model.as_ref(), &grid, derive_stream(cfg.numerics().master_seed, 0), cfg.ou_mode())?;
    let table = build_propagator(model.as_ref(), &path)?;
    let m = grid.steps();

    let mut triples = vec![
        (m, m / 2, 0),
        (m, m / 4, 0),
        (3 * m / 4, m / 2, m / 4),
        (m, 1, 0),
        (m, m - 1, 0),
        (m, 2 * m / 3, m / 3),
        (m, m, 0),
        (m, 0, 0),
    ];
    triples.sort_unstable();
    triples.dedup();
    let mut defect = 0.0f64;
    for &(k, r, s) in &triples {
        defect = defect.max(table.composition_defect(k, r, s)?);
    }

    let traj = simulate_linear(model.as_ref(), &path, &cfg.psi0, RenormPolicy::None, false)?;
    let mut mismatch = 0.0f64;
    let mut out = Table::new(["t", "condition_number", "norm_squared"]);
    let conds = table.conditions();
    for k in 0..=m {
        let psi = table.apply(k, 0, &cfg.psi0)?;
        mismatch = mismatch.max((&psi - &traj.states[k]).iter().map(|z| z.norm()).fold(0.0, f64::max));
        out.push(vec![
            grid.time(k),
            conds.get(k).copied().unwrap_or(f64::NAN),
            psi.norm_squared(),
        ]);
    }
    let lift_defect = {
        let rho = table.lift(m, 0, &projector(&cfg.psi0))?;
        max_abs(&(rho - projector(&traj.states[m])))
    };

    let mut report = Report::default();
    report.scalar("steps", m as f64);
    report.scalar("max_composition_defect", defect);
    report.scalar("max_condition_number", table.max_condition());
    report.scalar("trajectory_mismatch", mismatch);
    report.scalar("lift_defect", lift_defect);
    report.check(Check::at_most("composition_defect", defect, COMPOSITION_TOLERANCE));
    report.check(Check::new(
        "factors_invertible",
        table.max_condition() < SINGULAR_CONDITION,
        table.max_condition(),
        format!("< {SINGULAR_CONDITION:e}"),
    ));
    report.check(Check::at_most("propagator_reproduces_trajectory", mismatch, 0.0));
    report.file(OutputFile::csv("propagator.csv", &out));
    if ctx.dump_trajectories {
        let mut buf = Vec::new();
        path.write_csv(&mut buf)?;
        report.file(OutputFile {
            name: "trajectories/path_00000.csv".into(),
            contents: buf,
        });
    }
    Ok(report)
}
