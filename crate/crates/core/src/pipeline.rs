//! End-to-end identification: pre-checks, the six estimation steps and
//! topology extraction.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::arx::{self, ArxEstimate};
use crate::error::{Error, Result};
use crate::netmodel::{self, ContinuousNetwork, NodePair, RankReport};
use crate::polymat::{PolyMatrix, StabilityReport, STABILITY_TOL};
use crate::simulate::{autocorrelation, Dataset};
use crate::structured::{
    self, Constraint, ParamLayout, ParamRef, RefineOptions, StructuredEstimate,
};

/// Lags used for the residual whiteness statistic.
pub const WHITENESS_LAGS: usize = 20;
/// Default relative threshold for [`topology`].
pub const TOPOLOGY_THRESHOLD: f64 = 0.05;
/// Relative eigenvalue floor of the excitation autocovariance.
pub const INFORMATIVITY_TOL: f64 = 1e-6;

/// `sum_k coef_k * p_k = rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearEquality {
    pub terms: Vec<(ParamRef, f64)>,
    pub rhs: f64,
}

/// Model set: orders, fixed parameters and linear equality constraints.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSetSpec {
    layout: ParamLayout,
    /// Fixed parameters keyed by position in `vartheta`; symmetric `a`
    /// entries share a key.
    fixed: BTreeMap<usize, f64>,
    equalities: Vec<LinearEquality>,
}

impl ModelSetSpec {
    pub fn new(nodes: usize, excitations: usize, na: usize, nb: usize, nc: usize) -> Result<Self> {
        Ok(Self {
            layout: ParamLayout::new(nodes, excitations, na, nb, nc)?,
            fixed: BTreeMap::new(),
            equalities: Vec::new(),
        })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    /// Fixes a parameter (and its symmetric twin) to `value`.
    pub fn fix(&mut self, p: ParamRef, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::InvalidArgument(format!("{p} fixed to {value}")));
        }
        let idx = self.layout.index_of(p)?;
        self.fixed.insert(idx, value);
        Ok(())
    }

    /// Removes a fixed value, making the parameter free again.
    pub fn free(&mut self, p: ParamRef) -> Result<()> {
        let idx = self.layout.index_of(p)?;
        self.fixed.remove(&idx);
        Ok(())
    }

    pub fn add_equality(&mut self, eq: LinearEquality) -> Result<()> {
        if eq.terms.is_empty() {
            return Err(Error::InvalidArgument("empty constraint".into()));
        }
        for (p, c) in &eq.terms {
            self.layout.index_of(*p)?;
            if !c.is_finite() {
                return Err(Error::InvalidArgument(format!("coefficient of {p} is {c}")));
            }
        }
        if !eq.rhs.is_finite() {
            return Err(Error::InvalidArgument("non-finite right-hand side".into()));
        }
        self.equalities.push(eq);
        Ok(())
    }

    pub fn fixed(&self) -> impl Iterator<Item = (ParamRef, f64)> + '_ {
        self.fixed
            .iter()
            .map(|(idx, v)| (self.layout.param_at(*idx).expect("stored index is valid"), *v))
    }

    pub fn equalities(&self) -> &[LinearEquality] {
        &self.equalities
    }

    pub fn fixed_value(&self, p: ParamRef) -> Option<f64> {
        self.layout
            .index_of(p)
            .ok()
            .and_then(|idx| self.fixed.get(&idx).copied())
    }

    fn is_fixed_zero(&self, p: ParamRef) -> bool {
        self.fixed_value(p) == Some(0.0)
    }

    /// `Gamma vartheta = gamma`: one unit row per fixed parameter, then the
    /// equality constraints.
    pub fn constraint(&self) -> Result<Constraint> {
        let d = self.layout.dim();
        let m = self.fixed.len() + self.equalities.len();
        let mut g = DMatrix::zeros(m, d);
        let mut gamma = DVector::zeros(m);
        for (row, (idx, v)) in self.fixed.iter().enumerate() {
            g[(row, *idx)] = 1.0;
            gamma[row] = *v;
        }
        for (k, eq) in self.equalities.iter().enumerate() {
            let row = self.fixed.len() + k;
            for (p, c) in &eq.terms {
                g[(row, self.layout.index_of(*p)?)] += c;
            }
            gamma[row] = eq.rhs;
        }
        Constraint::new(g, gamma)
    }

    /// Node pairs whose coupling is not fixed to zero at every lag.
    pub fn allowed_pairs(&self) -> Vec<NodePair> {
        let l = self.layout.nodes;
        let mut out = Vec::new();
        for j in 0..l {
            for k in (j + 1)..l {
                let all_zero = (0..=self.layout.na)
                    .all(|lag| self.is_fixed_zero(ParamRef::A { i: j, j: k, lag }));
                if !all_zero {
                    out.push((j, k));
                }
            }
        }
        out
    }
}

/// Outcome of a single condition check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CheckStatus {
    Pass(String),
    Fail(String),
    NotChecked(String),
}

impl CheckStatus {
    pub fn passed(&self) -> bool {
        matches!(self, CheckStatus::Pass(_))
    }

    pub fn failed(&self) -> bool {
        matches!(self, CheckStatus::Fail(_))
    }

    pub fn label(&self) -> &'static str {
        match self {
            CheckStatus::Pass(_) => "PASS",
            CheckStatus::Fail(_) => "FAIL",
            CheckStatus::NotChecked(_) => "NOT CHECKED",
        }
    }

    pub fn detail(&self) -> &str {
        match self {
            CheckStatus::Pass(s) | CheckStatus::Fail(s) | CheckStatus::NotChecked(s) => s,
        }
    }
}

impl fmt::Display for CheckStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", self.label(), self.detail())
    }
}

/// Global identifiability conditions of a model set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdentifiabilityReport {
    /// Left coprimeness of `[A B C]`.
    pub coprime: CheckStatus,
    /// A diagonal full-rank coefficient matrix in the parametrized set.
    pub diagonal_full_rank: CheckStatus,
    /// At least one excitation.
    pub excited: CheckStatus,
    /// A normalizing constraint with nonzero right-hand side.
    pub scaling: CheckStatus,
}

impl IdentifiabilityReport {
    /// True when no checked condition failed.
    pub fn pass(&self) -> bool {
        !(self.diagonal_full_rank.failed() || self.excited.failed() || self.scaling.failed())
    }

    /// `(number, status)` in condition order.
    pub fn conditions(&self) -> [(u8, &CheckStatus); 4] {
        [
            (1, &self.coprime),
            (2, &self.diagonal_full_rank),
            (3, &self.excited),
            (4, &self.scaling),
        ]
    }
}

/// Structural identifiability checks on the model set (coprimeness is not
/// verified numerically).
pub fn check_identifiability(spec: &ModelSetSpec) -> IdentifiabilityReport {
    let lay = spec.layout;
    let l = lay.nodes;

    let diag_ok = |zero: &dyn Fn(usize, usize) -> bool| -> bool {
        (0..l).all(|i| (0..l).all(|j| if i == j { !zero(i, i) } else { zero(i, j) }))
    };
    let mut found = None;
    for lag in 0..=lay.na {
        if diag_ok(&|i, j| spec.is_fixed_zero(ParamRef::A { i, j, lag })) {
            found = Some(format!("A_{lag} is diagonal"));
            break;
        }
    }
    if found.is_none() && lay.excitations == l {
        for lag in 0..=lay.nb {
            if diag_ok(&|i, j| spec.is_fixed_zero(ParamRef::B { i, j, lag })) {
                found = Some(format!("B_{lag} is diagonal"));
                break;
            }
        }
    }
    let diagonal_full_rank = match found {
        Some(s) => CheckStatus::Pass(s),
        None => CheckStatus::Fail("no coefficient of A or B is parametrized diagonal with nonzero diagonal".into()),
    };

    let excited = if lay.excitations >= 1 {
        CheckStatus::Pass(format!("K = {}", lay.excitations))
    } else {
        CheckStatus::Fail("no excitation signal (K = 0)".into())
    };

    let is_ab = |p: &ParamRef| matches!(p, ParamRef::A { .. } | ParamRef::B { .. });
    let fixed_hit = spec.fixed().find(|(p, v)| is_ab(p) && *v != 0.0);
    let eq_hit = spec
        .equalities()
        .iter()
        .find(|eq| eq.rhs != 0.0 && eq.terms.iter().any(|(p, c)| is_ab(p) && *c != 0.0));
    let scaling = match (fixed_hit, eq_hit) {
        (Some((p, v)), _) => CheckStatus::Pass(format!("{p} = {v}")),
        (None, Some(_)) => CheckStatus::Pass("linear constraint with nonzero right-hand side".into()),
        (None, None) => CheckStatus::Fail("no constraint on A or B with nonzero right-hand side".into()),
    };

    IdentifiabilityReport {
        coprime: CheckStatus::NotChecked("left coprimeness is not verified numerically".into()),
        diagonal_full_rank,
        excited,
        scaling,
    }
}

/// Persistency of excitation of `r` up to a lag depth.
#[derive(Debug, Clone, PartialEq)]
pub struct InformativityReport {
    pub pass: bool,
    pub depth: usize,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
}

/// Builds the autocovariance of the stacked lagged excitation
/// `[r(t); r(t-1); ...; r(t-depth+1)]` and requires its smallest eigenvalue to
/// exceed `INFORMATIVITY_TOL` times the largest.
pub fn check_informativity(r: &DMatrix<f64>, depth: usize) -> InformativityReport {
    let (k, n) = r.shape();
    let fail = InformativityReport {
        pass: false,
        depth,
        min_eigenvalue: 0.0,
        max_eigenvalue: 0.0,
    };
    if k == 0 || depth == 0 || n < depth {
        return fail;
    }
    let rows = n - depth + 1;
    let mut phi = DMatrix::zeros(rows, k * depth);
    for s in 0..rows {
        let t = s + depth - 1;
        for lag in 0..depth {
            for ch in 0..k {
                phi[(s, lag * k + ch)] = r[(ch, t - lag)];
            }
        }
    }
    let gram = phi.transpose() * &phi / rows as f64;
    let eig = gram.symmetric_eigen().eigenvalues;
    let (min, max) = (eig.min(), eig.max());
    InformativityReport {
        pass: max > 0.0 && min > INFORMATIVITY_TOL * max,
        depth,
        min_eigenvalue: min,
        max_eigenvalue: max,
    }
}

/// Node pairs `{j, k}` with `max_l |ybar_{jk,l}|` above `threshold` times the
/// largest off-diagonal magnitude of `ybar`.
pub fn topology(ybar: &PolyMatrix, threshold: f64) -> Vec<NodePair> {
    let l = ybar.rows();
    let peak = |j: usize, k: usize| {
        (0..=ybar.degree())
            .map(|lag| ybar.entry(j, k, lag).abs())
            .fold(0.0, f64::max)
    };
    let mut global = 0.0f64;
    for j in 0..l {
        for k in (j + 1)..l {
            global = global.max(peak(j, k));
        }
    }
    let mut edges = Vec::new();
    if global == 0.0 {
        return edges;
    }
    for j in 0..l {
        for k in (j + 1)..l {
            if peak(j, k) > threshold * global {
                edges.push((j, k));
            }
        }
    }
    edges
}

/// Options for [`identify`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentifyOptions {
    /// Weight Step 2 with the Step-1 information matrix.
    pub use_weighting: bool,
    pub refine: RefineOptions,
    /// Run even when identifiability or informativity checks fail.
    pub force: bool,
    pub topology_threshold: f64,
    /// Lag depth of the informativity check; defaults to the per-row ARX
    /// parameter count.
    pub informativity_depth: Option<usize>,
}

impl Default for IdentifyOptions {
    fn default() -> Self {
        Self {
            use_weighting: true,
            refine: RefineOptions::default(),
            force: false,
            topology_threshold: TOPOLOGY_THRESHOLD,
            informativity_depth: None,
        }
    }
}

/// Diagnostics attached to an identification result.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    /// `max |Gamma vartheta - gamma|`.
    pub feasibility: f64,
    pub a0_rank: RankReport,
    pub a_stability: StabilityReport,
    pub c_stability: Option<StabilityReport>,
    /// Largest absolute residual autocorrelation over lags `1..=20`.
    pub whiteness_max: f64,
    /// `3 / sqrt(N_eff)`.
    pub whiteness_bound: f64,
    /// Negative continuous components (reported, not clamped).
    pub sign_violations: Vec<String>,
    pub identifiability: IdentifiabilityReport,
    pub informativity: InformativityReport,
    pub warnings: Vec<String>,
}

/// Everything produced by the six steps.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentResult {
    pub layout: ParamLayout,
    pub arx: ArxEstimate,
    pub step2: StructuredEstimate,
    pub structured: StructuredEstimate,
    pub a: PolyMatrix,
    pub b: PolyMatrix,
    pub c: PolyMatrix,
    pub lambda: DMatrix<f64>,
    pub xbar: PolyMatrix,
    pub ybar: PolyMatrix,
    pub continuous: ContinuousNetwork,
    pub ts: f64,
    pub topology: Vec<NodePair>,
    pub diagnostics: Diagnostics,
}

/// Runs the full estimator on `data` with ARX order `n`.
pub fn identify(
    data: &Dataset,
    spec: &ModelSetSpec,
    n: usize,
    opts: &IdentifyOptions,
) -> Result<IdentResult> {
    let layout = *spec.layout();
    if data.nodes() != layout.nodes || data.excitations() != layout.excitations {
        return Err(Error::Dimension(format!(
            "data has {} nodes / {} excitations, model set {} / {}",
            data.nodes(),
            data.excitations(),
            layout.nodes,
            layout.excitations
        )));
    }
    let identifiability = check_identifiability(spec);
    let depth = opts
        .informativity_depth
        .unwrap_or_else(|| arx::row_dim(layout.nodes, layout.excitations, n));
    let informativity = check_informativity(&data.r, depth);
    if !opts.force {
        if !identifiability.pass() {
            let failed: Vec<String> = identifiability
                .conditions()
                .iter()
                .filter(|(_, s)| s.failed())
                .map(|(k, s)| format!("condition {k}: {}", s.detail()))
                .collect();
            return Err(Error::CheckFailed(failed.join("; ")));
        }
        if !informativity.pass {
            return Err(Error::CheckFailed(format!(
                "excitation not persistently exciting at depth {depth} (eigenvalue ratio {:e})",
                if informativity.max_eigenvalue > 0.0 {
                    informativity.min_eigenvalue / informativity.max_eigenvalue
                } else {
                    0.0
                }
            )));
        }
    }
    let constraint = spec.constraint()?;

    let arx = arx::estimate(data, n).map_err(Error::at_step(1))?;
    let step2 = structured::step2(&arx, data, &layout, &constraint, opts.use_weighting)
        .map_err(Error::at_step(2))?;
    let est = structured::step3(&arx, &step2, data, &layout, &constraint, opts.refine)
        .map_err(Error::at_step(3))?;

    let a = layout.unpack_a(&est.theta).map_err(Error::at_step(3))?;
    let b = layout.unpack_b(&est.theta).map_err(Error::at_step(3))?;
    let a0_rank = netmodel::verify_rank_a0(a.coeff(0));
    if !a0_rank.full_rank {
        return Err(Error::at_step(3)(Error::Singular("estimated A_0".into())));
    }
    let (c, lambda) = structured::recover_noise(&est.theta, &est.lambda_bar, &layout)
        .map_err(Error::at_step(4))?;
    let (xbar, ybar) = netmodel::split_a(&a).map_err(Error::at_step(5))?;
    let continuous =
        netmodel::undiscretize(&xbar, &ybar, &b, data.ts).map_err(Error::at_step(6))?;

    let a_stability = a.inverse_stability(STABILITY_TOL).map_err(Error::at_step(3))?;
    let c_stability = c.inverse_stability(STABILITY_TOL).ok();
    let residuals = structured::structured_residuals(&est.theta, &layout, data, n)
        .map_err(Error::at_step(3))?;
    let whiteness_max = autocorrelation(&residuals, WHITENESS_LAGS).amax();
    let mut warnings = step2.warnings.clone();
    warnings.extend(est.warnings.iter().cloned());
    if !a_stability.stable {
        warnings.push(format!(
            "estimated A^-1 is unstable (pole modulus {:.6})",
            a_stability.max_modulus
        ));
    }
    let topology = topology(&ybar, opts.topology_threshold);
    let diagnostics = Diagnostics {
        feasibility: constraint.violation(&est.theta),
        a0_rank,
        a_stability,
        c_stability,
        whiteness_max,
        whiteness_bound: 3.0 / (residuals.ncols() as f64).sqrt(),
        sign_violations: continuous.sign_violations(),
        identifiability,
        informativity,
        warnings,
    };
    Ok(IdentResult {
        layout,
        arx,
        step2,
        structured: est,
        a,
        b,
        c,
        lambda,
        xbar,
        ybar,
        continuous,
        ts: data.ts,
        topology,
        diagnostics,
    })
}
