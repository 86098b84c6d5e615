//! TOML descriptions of networks, model sets and experiments.
//!
//! Node and excitation indices are one-based in every file; lags are
//! zero-based.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use diffnet_core::netmodel::{ContinuousNetwork, DiscreteModel};
use diffnet_core::pipeline::{IdentifyOptions, LinearEquality, ModelSetSpec};
use diffnet_core::structured::{ParamRef, RefineOptions};
use diffnet_core::PolyMatrix;
use nalgebra::DMatrix;
use serde::Deserialize;

use crate::error::{HarnessError, Result};

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_toml<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| HarnessError::config(path, e.to_string()))
}

/// Covariance given as a variance (times identity) or a full matrix.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum CovarianceEntry {
    Scalar(f64),
    Matrix(Vec<Vec<f64>>),
}

/// Noise filter lags `1..`: scalars multiply the identity.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum FilterEntry {
    Scaled(Vec<f64>),
    Matrices(Vec<Vec<Vec<f64>>>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct CouplingEntry {
    nodes: [usize; 2],
    coeffs: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkFile {
    #[serde(rename = "L")]
    nodes: Option<usize>,
    #[serde(rename = "K")]
    excitations: Option<usize>,
    #[serde(rename = "Ts")]
    ts: f64,
    nx: Option<usize>,
    ny: Option<usize>,
    x: Vec<Vec<f64>>,
    #[serde(default)]
    y: Vec<CouplingEntry>,
    #[serde(rename = "B")]
    b: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "C")]
    c: Option<FilterEntry>,
    #[serde(rename = "Lambda")]
    lambda: Option<CovarianceEntry>,
}

/// Physical network with sampling interval and noise description.
#[derive(Debug, Clone)]
pub struct NetworkConfig {
    pub network: ContinuousNetwork,
    pub ts: f64,
    pub c: PolyMatrix,
    pub lambda: DMatrix<f64>,
}

impl NetworkConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read(path)?, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let f: NetworkFile = parse_toml(path, text)?;
        let bad = |m: String| HarnessError::config(path, m);
        let l = f.x.len();
        if let Some(n) = f.nodes {
            if n != l {
                return Err(bad(format!("L = {n} but x has {l} rows")));
            }
        }
        if let Some(nx) = f.nx {
            if f.x.iter().any(|row| row.len() != nx + 1) {
                return Err(bad(format!("every x row needs nx + 1 = {} entries", nx + 1)));
            }
        }
        let mut y = BTreeMap::new();
        for entry in &f.y {
            let [j, k] = entry.nodes;
            if j == 0 || k == 0 || j > l || k > l || j == k {
                return Err(bad(format!("coupling nodes {:?} out of range", entry.nodes)));
            }
            if let Some(ny) = f.ny {
                if entry.coeffs.len() != ny + 1 {
                    return Err(bad(format!("coupling {:?} needs ny + 1 = {} entries", entry.nodes, ny + 1)));
                }
            }
            let key = (j.min(k) - 1, j.max(k) - 1);
            if y.insert(key, entry.coeffs.clone()).is_some() {
                return Err(bad(format!("coupling {:?} given twice", entry.nodes)));
            }
        }
        let b = matrices(&f.b, l, f.excitations, "B").map_err(bad)?;
        let b = PolyMatrix::new(b)?;
        let network = ContinuousNetwork::new(f.x, y, b)?;
        let c = match &f.c {
            None => PolyMatrix::identity(l),
            Some(FilterEntry::Scaled(s)) => {
                let mut coeffs = vec![DMatrix::identity(l, l)];
                coeffs.extend(s.iter().map(|v| DMatrix::identity(l, l) * *v));
                PolyMatrix::new(coeffs)?
            }
            Some(FilterEntry::Matrices(m)) => {
                let mut coeffs = vec![DMatrix::identity(l, l)];
                coeffs.extend(matrices(m, l, Some(l), "C").map_err(bad)?);
                PolyMatrix::new(coeffs)?
            }
        };
        let lambda = match &f.lambda {
            None => DMatrix::zeros(l, l),
            Some(cov) => covariance(cov, l).map_err(bad)?,
        };
        Ok(Self {
            network,
            ts: f.ts,
            c,
            lambda,
        })
    }

    pub fn nodes(&self) -> usize {
        self.network.nodes()
    }

    pub fn excitations(&self) -> usize {
        self.network.excitations()
    }

    /// Discretized model with the configured noise.
    pub fn model(&self) -> Result<DiscreteModel> {
        Ok(DiscreteModel::from_network(
            &self.network,
            self.ts,
            self.c.clone(),
            self.lambda.clone(),
        )?)
    }
}

fn matrix(rows: &[Vec<f64>], l: usize, k: Option<usize>, what: &str) -> std::result::Result<DMatrix<f64>, String> {
    if rows.len() != l {
        return Err(format!("{what} needs {l} rows, found {}", rows.len()));
    }
    let cols = k.unwrap_or_else(|| rows.first().map_or(0, Vec::len));
    if rows.iter().any(|r| r.len() != cols) {
        return Err(format!("{what} rows must all have {cols} entries"));
    }
    Ok(DMatrix::from_fn(l, cols, |i, j| rows[i][j]))
}

fn matrices(m: &[Vec<Vec<f64>>], l: usize, k: Option<usize>, what: &str) -> std::result::Result<Vec<DMatrix<f64>>, String> {
    if m.is_empty() {
        return Err(format!("{what} needs at least one coefficient"));
    }
    let first = matrix(&m[0], l, k, what)?;
    let cols = first.ncols();
    let mut out = vec![first];
    for rows in &m[1..] {
        out.push(matrix(rows, l, Some(cols), what)?);
    }
    Ok(out)
}

pub(crate) fn covariance(c: &CovarianceEntry, l: usize) -> std::result::Result<DMatrix<f64>, String> {
    match c {
        CovarianceEntry::Scalar(v) => Ok(DMatrix::identity(l, l) * *v),
        CovarianceEntry::Matrix(rows) => matrix(rows, l, Some(l), "Lambda"),
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecFile {
    #[serde(rename = "L")]
    nodes: usize,
    #[serde(rename = "K")]
    excitations: usize,
    na: usize,
    #[serde(default)]
    nb: usize,
    #[serde(default)]
    nc: usize,
    #[serde(default)]
    zero: Vec<String>,
    #[serde(default)]
    free: Vec<String>,
    #[serde(default)]
    constraints: Vec<String>,
}

/// Loads a model set. `zero` entries fix parameters to zero and `free`
/// entries release them again; both accept `*` for any index and a trailing
/// `offdiag` or `diag` qualifier, e.g. `a[*][*][2] offdiag`. Constraints are
/// `fix <path> = <value>` or linear equalities such as
/// `a[1][1][0] - 2*b[1][1][0] = 3`.
pub fn load_spec(path: &Path) -> Result<ModelSetSpec> {
    parse_spec(&read(path)?, path)
}

pub fn parse_spec(text: &str, path: &Path) -> Result<ModelSetSpec> {
    let f: SpecFile = parse_toml(path, text)?;
    let bad = |m: String| HarnessError::config(path, m);
    let mut spec = ModelSetSpec::new(f.nodes, f.excitations, f.na, f.nb, f.nc)?;
    for pattern in &f.zero {
        for p in expand_pattern(pattern, &spec).map_err(bad)? {
            spec.fix(p, 0.0)?;
        }
    }
    for pattern in &f.free {
        for p in expand_pattern(pattern, &spec).map_err(bad)? {
            spec.free(p)?;
        }
    }
    for c in &f.constraints {
        match parse_constraint(c).map_err(bad)? {
            ParsedConstraint::Fix(p, v) => spec.fix(p, v)?,
            ParsedConstraint::Equality(eq) => spec.add_equality(eq)?,
        }
    }
    Ok(spec)
}

/// Expands a parameter pattern against the ranges of `spec`.
pub fn expand_pattern(pattern: &str, spec: &ModelSetSpec) -> std::result::Result<Vec<ParamRef>, String> {
    let layout = spec.layout();
    let mut words = pattern.split_whitespace();
    let path = words.next().ok_or_else(|| format!("empty pattern '{pattern}'"))?;
    let qualifier = words.next();
    if words.next().is_some() || !matches!(qualifier, None | Some("offdiag") | Some("diag")) {
        return Err(format!("malformed pattern '{pattern}'"));
    }
    let open = path.find('[').ok_or_else(|| format!("malformed pattern '{pattern}'"))?;
    let name = &path[..open];
    let idx: Vec<&str> = path[open..]
        .split(']')
        .filter(|s| !s.is_empty())
        .map(|s| s.trim_start_matches('['))
        .collect();
    if idx.len() != 3 {
        return Err(format!("malformed pattern '{pattern}'"));
    }
    let (rows, cols, lags) = match name {
        "a" => (1..=layout.nodes, 1..=layout.nodes, 0..=layout.na),
        "b" => (1..=layout.nodes, 1..=layout.excitations, 0..=layout.nb),
        "cbar" => (1..=layout.nodes, 1..=layout.nodes, 1..=layout.nc),
        _ => return Err(format!("unknown parameter '{name}' in '{pattern}'")),
    };
    let range = |tok: &str, all: std::ops::RangeInclusive<usize>| -> std::result::Result<Vec<usize>, String> {
        if tok.trim() == "*" {
            Ok(all.collect())
        } else {
            let v: usize = tok
                .trim()
                .parse()
                .map_err(|_| format!("bad index '{tok}' in '{pattern}'"))?;
            if !all.contains(&v) {
                return Err(format!("index {v} out of range in '{pattern}'"));
            }
            Ok(vec![v])
        }
    };
    let mut out = Vec::new();
    for i in range(idx[0], rows)? {
        for j in range(idx[1], cols.clone())? {
            match qualifier {
                Some("offdiag") if i == j => continue,
                Some("diag") if i != j => continue,
                _ => {}
            }
            for lag in range(idx[2], lags.clone())? {
                let p: ParamRef = format!("{name}[{i}][{j}][{lag}]")
                    .parse()
                    .map_err(|e: diffnet_core::Error| e.to_string())?;
                out.push(p);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParsedConstraint {
    Fix(ParamRef, f64),
    Equality(LinearEquality),
}

/// Parses `fix <path> = <value>` or `sum_k [c_k *] path_k = rhs`.
pub fn parse_constraint(s: &str) -> std::result::Result<ParsedConstraint, String> {
    let (lhs, rhs) = s
        .split_once('=')
        .ok_or_else(|| format!("constraint '{s}' has no '='"))?;
    let rhs: f64 = rhs
        .trim()
        .parse()
        .map_err(|_| format!("bad right-hand side in '{s}'"))?;
    let lhs = lhs.trim();
    if let Some(path) = lhs.strip_prefix("fix ") {
        let p: ParamRef = path.parse().map_err(|e: diffnet_core::Error| e.to_string())?;
        return Ok(ParsedConstraint::Fix(p, rhs));
    }
    let mut terms = Vec::new();
    for (sign, term) in split_terms(lhs) {
        let term = term.trim();
        if term.is_empty() {
            return Err(format!("empty term in '{s}'"));
        }
        let (coef, path) = match term.split_once('*') {
            Some((c, p)) => (
                c.trim().parse::<f64>().map_err(|_| format!("bad coefficient '{c}' in '{s}'"))?,
                p,
            ),
            None => (1.0, term),
        };
        let p: ParamRef = path.parse().map_err(|e: diffnet_core::Error| e.to_string())?;
        terms.push((p, sign * coef));
    }
    if terms.is_empty() {
        return Err(format!("constraint '{s}' has no terms"));
    }
    Ok(ParsedConstraint::Equality(LinearEquality { terms, rhs }))
}

/// Splits at `+`/`-` separators that are not part of a number exponent.
fn split_terms(s: &str) -> Vec<(f64, &str)> {
    let bytes = s.as_bytes();
    let mut out = Vec::new();
    let mut sign = 1.0;
    let mut start = 0;
    for (i, &c) in bytes.iter().enumerate() {
        if c != b'+' && c != b'-' {
            continue;
        }
        let exponent = i > 0 && matches!(bytes[i - 1], b'e' | b'E') && i > 1 && bytes[i - 2].is_ascii_digit();
        if exponent {
            continue;
        }
        if !s[start..i].trim().is_empty() {
            out.push((sign, &s[start..i]));
        }
        sign = if c == b'-' { -1.0 } else { 1.0 };
        start = i + 1;
    }
    out.push((sign, &s[start..]));
    out
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentFile {
    network: PathBuf,
    spec: PathBuf,
    #[serde(default = "default_seed")]
    seed: u64,
    runs: usize,
    /// `(n, N)` pairs.
    schedule: Vec<[usize; 2]>,
    #[serde(default = "one")]
    excitation_variance: f64,
    noise_variance: Option<f64>,
    #[serde(default)]
    options: OptionsEntry,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptionsEntry {
    #[serde(default = "yes")]
    weighting: bool,
    #[serde(default = "default_max_iter")]
    max_iter: usize,
    #[serde(default = "default_tol")]
    tol: f64,
    #[serde(default = "default_threshold")]
    topology_threshold: f64,
}

impl Default for OptionsEntry {
    fn default() -> Self {
        Self {
            weighting: true,
            max_iter: default_max_iter(),
            tol: default_tol(),
            topology_threshold: default_threshold(),
        }
    }
}

fn default_seed() -> u64 {
    1
}
fn one() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}
fn default_max_iter() -> usize {
    RefineOptions::default().max_iter
}
fn default_tol() -> f64 {
    RefineOptions::default().tol
}
fn default_threshold() -> f64 {
    diffnet_core::pipeline::TOPOLOGY_THRESHOLD
}

/// Monte-Carlo experiment: data-generating network, model set and schedule.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub network: NetworkConfig,
    pub spec: ModelSetSpec,
    pub seed: u64,
    pub runs: usize,
    /// `(n, N)` pairs.
    pub schedule: Vec<(usize, usize)>,
    pub excitation_variance: f64,
    pub options: IdentifyOptions,
}

impl ExperimentConfig {
    /// Loads an experiment; `network` and `spec` paths are relative to the
    /// experiment file.
    pub fn load(path: &Path) -> Result<Self> {
        let f: ExperimentFile = parse_toml(path, &read(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut network = NetworkConfig::load(&base.join(&f.network))?;
        if let Some(v) = f.noise_variance {
            network.lambda = DMatrix::identity(network.nodes(), network.nodes()) * v;
        }
        let spec = load_spec(&base.join(&f.spec))?;
        let cfg = Self {
            network,
            spec,
            seed: f.seed,
            runs: f.runs,
            schedule: f.schedule.iter().map(|p| (p[0], p[1])).collect(),
            excitation_variance: f.excitation_variance,
            options: IdentifyOptions {
                use_weighting: f.options.weighting,
                refine: RefineOptions {
                    max_iter: f.options.max_iter,
                    tol: f.options.tol,
                },
                topology_threshold: f.options.topology_threshold,
                ..IdentifyOptions::default()
            },
        };
        cfg.validate().map_err(|m| HarnessError::config(path, m))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.runs == 0 {
            return Err("runs must be at least 1".into());
        }
        if self.schedule.is_empty() {
            return Err("empty schedule".into());
        }
        if let Some((n, len)) = self.schedule.iter().find(|(n, len)| *len == 0 || *n == 0) {
            return Err(format!("schedule entry ({n}, {len}) needs n > 0 and N > 0"));
        }
        if !(self.excitation_variance > 0.0) {
            return Err("excitation variance must be positive".into());
        }
        let layout = self.spec.layout();
        if layout.nodes != self.network.nodes() || layout.excitations != self.network.excitations() {
            return Err(format!(
                "model set has {} nodes / {} excitations, network {} / {}",
                layout.nodes,
                layout.excitations,
                self.network.nodes(),
                self.network.excitations()
            ));
        }
        Ok(())
    }
}
