//! Run configuration: one TOML document per experiment.
//!
//! ```toml
//! experiment = "dephasing-compare"
//!
//! [model]
//! kind = "ou"
//! h0 = [[[0.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [0.0, 0.0]]]
//! l = [[[1.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [-1.0, 0.0]]]
//! gamma = 1.0
//! psi0 = [[0.7071067811865476, 0.0], [0.7071067811865476, 0.0]]
//!
//! [numerics]
//! dt = 1e-3
//! t = 5.0
//! n = 10000
//!
//! [output]
//! directory = "results/dephasing"
//! ```
//!
//! Complex entries are `[re, im]` pairs and matrices are lists of rows.

use std::fmt;

use colored_sse::algebra::{c, hermiticity_defect, OperatorMatrix, StateVector, TOL_HERM};
use colored_sse::coefficients::{markovian_model, ou_random_hamiltonian_model, CoefficientProcess, OUModel};
use colored_sse::integrators::RenormPolicy;
use colored_sse::memory::MemoryMethod;
use colored_sse::noise::{OuMode, TimeGrid};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub const DEFAULT_DT: f64 = 1e-3;
pub const DEFAULT_HORIZON: f64 = 1.0;
pub const DEFAULT_N: usize = 10_000;
pub const DEFAULT_SEED: u64 = 0;
pub const DEFAULT_OUTPUT_DIR: &str = "results";

/// A schema or validation failure, located by its dotted field path.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    OuStats,
    Martingale,
    NormPreservation,
    DephasingCompare,
    MeaneqResidual,
    MemoryMe,
    GirsanovCheck,
    PropagatorCheck,
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::OuStats => "ou-stats",
            Experiment::Martingale => "martingale",
            Experiment::NormPreservation => "norm-preservation",
            Experiment::DephasingCompare => "dephasing-compare",
            Experiment::MeaneqResidual => "meaneq-residual",
            Experiment::MemoryMe => "memory-me",
            Experiment::GirsanovCheck => "girsanov-check",
            Experiment::PropagatorCheck => "propagator-check",
        }
    }
}

pub type RawComplex = [f64; 2];
pub type RawMatrix = Vec<Vec<RawComplex>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSpec {
    /// `H = H0 - gamma X L`, `R = -i L`, with `X` the stationary OU process.
    Ou {
        h0: RawMatrix,
        l: RawMatrix,
        gamma: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        psi0: Option<Vec<RawComplex>>,
    },
    /// Constant Hamiltonian `h` and diffusion coefficients `r`.
    Markovian {
        h: RawMatrix,
        #[serde(default)]
        r: Vec<RawMatrix>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        psi0: Option<Vec<RawComplex>>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeName {
    #[default]
    EulerMaruyama,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RenormName {
    #[default]
    None,
    Projective,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OuModeName {
    #[default]
    Euler,
    ExactBridge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemoryMethodName {
    #[default]
    AuxOde,
    Quadrature,
}

fn default_dt() -> f64 {
    DEFAULT_DT
}
fn default_horizon() -> f64 {
    DEFAULT_HORIZON
}
fn default_n() -> usize {
    DEFAULT_N
}
fn default_levels() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Numerics {
    /// Step size; for refinement studies this is the finest step.
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Horizon `T`.
    #[serde(default = "default_horizon")]
    pub t: f64,
    /// Trajectories (or paths) per ensemble.
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub scheme: SchemeName,
    #[serde(default)]
    pub renorm: RenormName,
    #[serde(default)]
    pub ou_mode: OuModeName,
    #[serde(default)]
    pub memory_method: MemoryMethodName,
    /// Step sizes `dt * 2^(levels-1), ..., dt` in refinement studies.
    #[serde(default = "default_levels")]
    pub levels: usize,
    /// Comparison times; experiments pick their own when empty.
    #[serde(default)]
    pub checkpoints: Vec<f64>,
    /// OU rates of the gamma sweep in `memory-me`.
    #[serde(default)]
    pub gamma_sweep: Vec<f64>,
    /// Observable for `girsanov-check`; `sigma_z` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observable: Option<RawMatrix>,
}

impl Default for Numerics {
    fn default() -> Self {
        Self {
            dt: DEFAULT_DT,
            t: DEFAULT_HORIZON,
            n: DEFAULT_N,
            master_seed: DEFAULT_SEED,
            scheme: SchemeName::default(),
            renorm: RenormName::default(),
            ou_mode: OuModeName::default(),
            memory_method: MemoryMethodName::default(),
            levels: default_levels(),
            checkpoints: Vec::new(),
            gamma_sweep: Vec::new(),
            observable: None,
        }
    }
}

fn default_formats() -> Vec<String> {
    vec!["csv".into()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub directory: Option<String>,
    #[serde(default = "default_formats")]
    pub formats: Vec<String>,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            directory: None,
            formats: default_formats(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub model: ModelSpec,
    #[serde(default)]
    pub numerics: Numerics,
    #[serde(default)]
    pub output: OutputSpec,
}

/// Model matrices after validation.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Ou(OUModel),
    Markovian { h: OperatorMatrix, r: Vec<OperatorMatrix> },
}

impl Model {
    pub fn dim(&self) -> usize {
        match self {
            Model::Ou(m) => m.dim(),
            Model::Markovian { h, .. } => h.nrows(),
        }
    }

    pub fn process(&self) -> colored_sse::Result<Box<dyn CoefficientProcess>> {
        Ok(match self {
            Model::Ou(m) => Box::new(ou_random_hamiltonian_model(m)?),
            Model::Markovian { h, r } => Box::new(markovian_model(h, r)?),
        })
    }

    pub fn ou(&self) -> Option<&OUModel> {
        match self {
            Model::Ou(m) => Some(m),
            Model::Markovian { .. } => None,
        }
    }
}

/// A configuration with every matrix parsed and every invariant checked.
#[derive(Debug, Clone, PartialEq)]
pub struct Validated {
    pub raw: RunConfig,
    pub model: Model,
    pub psi0: StateVector,
    pub grid: TimeGrid,
    pub observable: OperatorMatrix,
}

impl Validated {
    pub fn renorm(&self) -> RenormPolicy {
        match self.raw.numerics.renorm {
            RenormName::None => RenormPolicy::None,
            RenormName::Projective => RenormPolicy::Projective,
        }
    }

    pub fn ou_mode(&self) -> OuMode {
        match self.raw.numerics.ou_mode {
            OuModeName::Euler => OuMode::Euler,
            OuModeName::ExactBridge => OuMode::ExactBridge,
        }
    }

    pub fn memory_method(&self) -> MemoryMethod {
        match self.raw.numerics.memory_method {
            MemoryMethodName::AuxOde => MemoryMethod::AuxOde,
            MemoryMethodName::Quadrature => MemoryMethod::Quadrature,
        }
    }

    pub fn numerics(&self) -> &Numerics {
        &self.raw.numerics
    }
}

pub fn parse_config(text: &str) -> Result<Validated, ConfigError> {
    let raw: RunConfig = toml::from_str(text).map_err(|e| {
        let message = e.message().to_string();
        ConfigError::new(span_path(text, e.span()), message)
    })?;
    validate(raw)
}

/// Best-effort dotted path of the key at a parse error location.
fn span_path(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    let Some(span) = span else { return String::new() };
    let before = &text[..span.start.min(text.len())];
    let table = before
        .lines()
        .rev()
        .find_map(|line| {
            let line = line.trim();
            (line.starts_with('[') && line.ends_with(']')).then(|| line.trim_matches(['[', ']']).to_string())
        })
        .unwrap_or_default();
    let line_start = before.rfind('\n').map(|i| i + 1).unwrap_or(0);
    let line_end = text[line_start..].find('\n').map(|i| line_start + i).unwrap_or(text.len());
    let key = text[line_start..line_end]
        .split('=')
        .next()
        .map(str::trim)
        .filter(|k| !k.is_empty() && !k.starts_with('['))
        .unwrap_or("");
    match (table.is_empty(), key.is_empty()) {
        (true, _) => key.to_string(),
        (false, true) => table,
        (false, false) => format!("{table}.{key}"),
    }
}

pub fn validate(raw: RunConfig) -> Result<Validated, ConfigError> {
    let n = &raw.numerics;
    if !(n.dt.is_finite() && n.dt > 0.0) {
        return Err(ConfigError::new("numerics.dt", format!("must be positive, got {}", n.dt)));
    }
    if !(n.t.is_finite() && n.t >= n.dt) {
        return Err(ConfigError::new("numerics.t", format!("must be at least dt, got {}", n.t)));
    }
    if n.n < 1 {
        return Err(ConfigError::new("numerics.n", "needs at least one trajectory"));
    }
    if n.levels < 2 {
        return Err(ConfigError::new("numerics.levels", "refinement needs at least two levels"));
    }
    if n.levels > 12 {
        return Err(ConfigError::new("numerics.levels", "at most 12 levels"));
    }
    let grid = TimeGrid::with_horizon(n.dt, n.t).map_err(|e| ConfigError::new("numerics.t", e.to_string()))?;
    for (i, t) in n.checkpoints.iter().enumerate() {
        if !(t.is_finite() && *t > 0.0 && *t <= grid.horizon() + 1e-12) {
            return Err(ConfigError::new(
                format!("numerics.checkpoints[{i}]"),
                format!("must lie in (0, {}], got {t}", grid.horizon()),
            ));
        }
    }
    for (i, g) in n.gamma_sweep.iter().enumerate() {
        if !(g.is_finite() && *g > 0.0) {
            return Err(ConfigError::new(format!("numerics.gamma_sweep[{i}]"), format!("must be positive, got {g}")));
        }
    }
    for (i, f) in raw.output.formats.iter().enumerate() {
        if f != "csv" {
            return Err(ConfigError::new(
                format!("output.formats[{i}]"),
                format!("unsupported format {f:?}; only \"csv\" is available"),
            ));
        }
    }

    let (model, psi0_raw) = match &raw.model {
        ModelSpec::Ou { h0, l, gamma, psi0 } => {
            let h0 = hermitian("model.h0", h0)?;
            let l = hermitian("model.l", l)?;
            same_dim("model.l", &h0, &l)?;
            if !(gamma.is_finite() && *gamma > 0.0) {
                return Err(ConfigError::new("model.gamma", format!("must be positive, got {gamma}")));
            }
            let m = OUModel::new(&h0, &l, *gamma).map_err(|e| ConfigError::new("model", e.to_string()))?;
            (Model::Ou(m), psi0)
        }
        ModelSpec::Markovian { h, r, psi0 } => {
            let h = hermitian("model.h", h)?;
            let mut rs = Vec::with_capacity(r.len());
            for (i, m) in r.iter().enumerate() {
                let path = format!("model.r[{i}]");
                let m = matrix(&path, m)?;
                same_dim(&path, &h, &m)?;
                rs.push(m);
            }
            (Model::Markovian { h, r: rs }, psi0)
        }
    };
    let dim = model.dim();
    let psi0 = match psi0_raw {
        Some(v) => {
            if v.len() != dim {
                return Err(ConfigError::new(
                    "model.psi0",
                    format!("has {} entries but the model dimension is {dim}", v.len()),
                ));
            }
            let psi = DVector::from_iterator(dim, v.iter().map(|z| c(z[0], z[1])));
            let norm = psi.norm();
            if !norm.is_finite() || (norm - 1.0).abs() > 1e-8 {
                return Err(ConfigError::new("model.psi0", format!("must be normalized, norm is {norm}")));
            }
            psi
        }
        None => colored_sse::algebra::basis_state(dim, 0),
    };
    let observable = match &n.observable {
        Some(m) => {
            let a = hermitian("numerics.observable", m)?;
            if a.nrows() != dim {
                return Err(ConfigError::new(
                    "numerics.observable",
                    format!("is {}x{} but the model dimension is {dim}", a.nrows(), a.ncols()),
                ));
            }
            a
        }
        None if dim == 2 => colored_sse::algebra::pauli_z(),
        None => DMatrix::from_fn(dim, dim, |i, j| if i == j && i == 0 { c(1.0, 0.0) } else { c(0.0, 0.0) }),
    };
    Ok(Validated {
        raw,
        model,
        psi0,
        grid,
        observable,
    })
}

fn matrix(path: &str, raw: &RawMatrix) -> Result<OperatorMatrix, ConfigError> {
    let rows = raw.len();
    if rows == 0 {
        return Err(ConfigError::new(path, "matrix is empty"));
    }
    for (i, row) in raw.iter().enumerate() {
        if row.len() != rows {
            return Err(ConfigError::new(
                format!("{path}[{i}]"),
                format!("matrix must be square: row has {} entries, expected {rows}", row.len()),
            ));
        }
        if row.iter().any(|z| !(z[0].is_finite() && z[1].is_finite())) {
            return Err(ConfigError::new(format!("{path}[{i}]"), "non-finite entry"));
        }
    }
    Ok(DMatrix::from_fn(rows, rows, |i, j| c(raw[i][j][0], raw[i][j][1])))
}

fn hermitian(path: &str, raw: &RawMatrix) -> Result<OperatorMatrix, ConfigError> {
    let m = matrix(path, raw)?;
    let defect = hermiticity_defect(&m);
    if defect > TOL_HERM {
        return Err(ConfigError::new(path, format!("must be Hermitian (defect {defect:.3e})")));
    }
    Ok(m)
}

fn same_dim(path: &str, a: &OperatorMatrix, b: &OperatorMatrix) -> Result<(), ConfigError> {
    if a.nrows() != b.nrows() {
        return Err(ConfigError::new(
            path,
            format!("dimension {} does not match the Hamiltonian dimension {}", b.nrows(), a.nrows()),
        ));
    }
    Ok(())
}

/// TOML spelling of a complex matrix, for generated configs.
pub fn raw_matrix(m: &OperatorMatrix) -> RawMatrix {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| [m[(i, j)].re, m[(i, j)].im]).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const DEPHASING: &str = r#"
experiment = "dephasing-compare"

[model]
kind = "ou"
h0 = [[[0.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [0.0, 0.0]]]
l = [[[1.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [-1.0, 0.0]]]
gamma = 1.0
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let v = parse_config(DEPHASING).unwrap();
        assert_eq!(v.raw.experiment, Experiment::DephasingCompare);
        assert_eq!(v.numerics().dt, 1e-3);
        assert_eq!(v.numerics().n, 10_000);
        assert_eq!(v.numerics().master_seed, 0);
        assert_eq!(v.grid.steps(), 1000);
        assert_eq!(v.psi0, colored_sse::algebra::basis_state(2, 0));
        assert_eq!(v.raw.output.formats, vec!["csv".to_string()]);
    }

    #[test]
    fn negative_gamma_is_rejected() {
        let err = parse_config(&DEPHASING.replace("gamma = 1.0", "gamma = -1.0")).unwrap_err();
        assert_eq!(err.path, "model.gamma");
    }

    #[test]
    fn non_square_matrix_is_rejected() {
        let text = DEPHASING.replace(
            "l = [[[1.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [-1.0, 0.0]]]",
            "l = [[[1.0, 0.0], [0.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [-1.0, 0.0], [0.0, 0.0]]]",
        );
        let err = parse_config(&text).unwrap_err();
        assert_eq!(err.path, "model.l[0]");
        assert!(err.message.contains("square"));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let text = DEPHASING.replace(
            "h0 = [[[0.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [0.0, 0.0]]]",
            "h0 = [[[0.0, 0.0]]]",
        );
        assert_eq!(parse_config(&text).unwrap_err().path, "model.l");
    }

    #[test]
    fn non_hermitian_matrix_is_rejected() {
        let text = DEPHASING.replace(
            "l = [[[1.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [-1.0, 0.0]]]",
            "l = [[[1.0, 0.0], [1.0, 0.0]], [[0.0, 0.0], [-1.0, 0.0]]]",
        );
        let err = parse_config(&text).unwrap_err();
        assert_eq!(err.path, "model.l");
        assert!(err.message.contains("Hermitian"));
    }

    #[test]
    fn schema_errors_carry_a_path() {
        let err = parse_config(&format!("{DEPHASING}\n[numerics]\ndt = \"small\"\n")).unwrap_err();
        assert_eq!(err.path, "numerics.dt");
        let err = parse_config(&format!("{DEPHASING}\n[numerics]\nbogus = 1\n")).unwrap_err();
        assert!(err.message.contains("bogus"), "{err}");
        let err = parse_config(&DEPHASING.replace("dephasing-compare", "nope")).unwrap_err();
        assert_eq!(err.path, "experiment");
    }

    #[test]
    fn numerics_are_checked() {
        let err = parse_config(&format!("{DEPHASING}\n[numerics]\ndt = 0.0\n")).unwrap_err();
        assert_eq!(err.path, "numerics.dt");
        let err = parse_config(&format!("{DEPHASING}\n[numerics]\ndt = 0.1\nt = 0.05\n")).unwrap_err();
        assert_eq!(err.path, "numerics.t");
        let err = parse_config(&format!("{DEPHASING}\n[numerics]\nn = 0\n")).unwrap_err();
        assert_eq!(err.path, "numerics.n");
        let err = parse_config(&format!("{DEPHASING}\n[output]\nformats = [\"parquet\"]\n")).unwrap_err();
        assert_eq!(err.path, "output.formats[0]");
    }

    #[test]
    fn psi0_must_be_normalized() {
        let text = DEPHASING.replace("gamma = 1.0", "gamma = 1.0\npsi0 = [[1.0, 0.0], [1.0, 0.0]]");
        assert_eq!(parse_config(&text).unwrap_err().path, "model.psi0");
    }

    #[test]
    fn markovian_model_parses() {
        let text = r#"
experiment = "martingale"
[model]
kind = "markovian"
h = [[[0.0, 0.0], [1.0, 0.0]], [[1.0, 0.0], [0.0, 0.0]]]
r = [[[[0.0, 0.0], [1.0, 0.0]], [[0.0, 0.0], [0.0, 0.0]]]]
psi0 = [[0.0, 0.0], [1.0, 0.0]]
"#;
        let v = parse_config(text).unwrap();
        match &v.model {
            Model::Markovian { r, .. } => assert_eq!(r[0], colored_sse::algebra::sigma_minus()),
            _ => panic!("wrong model"),
        }
        assert!(v.model.process().is_ok());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let v = parse_config(DEPHASING).unwrap();
        let text = toml::to_string(&v.raw).unwrap();
        assert_eq!(parse_config(&text).unwrap(), v);
    }
}
