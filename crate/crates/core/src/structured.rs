//! Structured network model fit from the high-order ARX expansion.
//!
//! The parameter vector is `vartheta = [theta_a; theta_b; eta_c]`:
//! * `theta_a`: upper-triangular node pairs `(i, j)`, `i <= j`, row-major,
//!   each with lags `0..=na` (the lower triangle mirrors it);
//! * `theta_b`: rows `i`, inputs `j`, lags `0..=nb`;
//! * `eta_c`: rows `i`, columns `j`, lags `1..=nc` of `Cbar = C A_0`
//!   (`Cbar_0` is tied to `A_0`).
//!
//! `Q(zeta) vartheta` stacks, in `zeta` ordering, the coefficients of
//! `Cbar A_breve - A` at lags `1..=n` and `Cbar B_breve - B` at lags `0..=n`.
//! The true parameters lie in its null space when `zeta` holds the exact
//! expansion of `Cbar^-1 A`, `Cbar^-1 B`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::arx::{zeta_a_index, zeta_b_index, zeta_dim, ArxEstimate};
use crate::error::{Error, Result};
use crate::polymat::PolyMatrix;
use crate::simulate::{cost_det, Dataset};

/// Relative pivot threshold for the bordered KKT system.
pub const KKT_PIVOT_TOL: f64 = 1e-13;
/// Relative rank threshold for constraint and reduced least-squares factors.
pub const LS_RANK_TOL: f64 = 1e-11;
/// Residual-to-signal power ratio below which data count as noiseless.
pub const NOISELESS_RATIO: f64 = 1e-12;
/// Consecutive cost increases that end the refinement iterations.
pub const DIVERGENCE_RUN: usize = 5;

/// Index maps for `vartheta`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub nodes: usize,
    pub excitations: usize,
    pub na: usize,
    pub nb: usize,
    pub nc: usize,
}

/// A single named parameter; node indices are zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamRef {
    A { i: usize, j: usize, lag: usize },
    B { i: usize, j: usize, lag: usize },
    Cbar { i: usize, j: usize, lag: usize },
}

impl fmt::Display for ParamRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (name, i, j, lag) = match *self {
            ParamRef::A { i, j, lag } => ("a", i, j, lag),
            ParamRef::B { i, j, lag } => ("b", i, j, lag),
            ParamRef::Cbar { i, j, lag } => ("cbar", i, j, lag),
        };
        write!(f, "{name}[{}][{}][{lag}]", i + 1, j + 1)
    }
}

impl FromStr for ParamRef {
    type Err = Error;

    /// Parses `a[i][j][l]`, `b[i][j][l]` or `cbar[i][j][l]` with one-based
    /// node indices and zero-based lags.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::InvalidArgument(format!("malformed parameter path '{s}'"));
        let open = s.find('[').ok_or_else(bad)?;
        let name = s[..open].trim();
        let mut idx = Vec::with_capacity(3);
        let mut rest = &s[open..];
        while !rest.is_empty() {
            let body = rest.strip_prefix('[').ok_or_else(bad)?;
            let close = body.find(']').ok_or_else(bad)?;
            idx.push(body[..close].trim().parse::<usize>().map_err(|_| bad())?);
            rest = body[close + 1..].trim_start();
        }
        if idx.len() != 3 || idx[0] == 0 || idx[1] == 0 {
            return Err(bad());
        }
        let (i, j, lag) = (idx[0] - 1, idx[1] - 1, idx[2]);
        match name {
            "a" => Ok(ParamRef::A { i, j, lag }),
            "b" => Ok(ParamRef::B { i, j, lag }),
            "cbar" => Ok(ParamRef::Cbar { i, j, lag }),
            _ => Err(bad()),
        }
    }
}

impl ParamLayout {
    pub fn new(nodes: usize, excitations: usize, na: usize, nb: usize, nc: usize) -> Result<Self> {
        if nodes == 0 {
            return Err(Error::InvalidArgument("layout without nodes".into()));
        }
        Ok(Self {
            nodes,
            excitations,
            na,
            nb,
            nc,
        })
    }

    pub fn dim_a(&self) -> usize {
        self.nodes * (self.nodes + 1) / 2 * (self.na + 1)
    }

    pub fn dim_b(&self) -> usize {
        self.nodes * self.excitations * (self.nb + 1)
    }

    pub fn dim_c(&self) -> usize {
        self.nodes * self.nodes * self.nc
    }

    pub fn dim(&self) -> usize {
        self.dim_a() + self.dim_b() + self.dim_c()
    }

    fn pair_index(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        // Pairs (r, c) with r < i come first: sum_{r<i} (L - r).
        i * self.nodes - i * (i.saturating_sub(1)) / 2 + (j - i)
    }

    /// Index of `a_{ij,l}`; `(i, j)` and `(j, i)` share a parameter.
    pub fn a_index(&self, i: usize, j: usize, lag: usize) -> usize {
        debug_assert!(i < self.nodes && j < self.nodes && lag <= self.na);
        self.pair_index(i, j) * (self.na + 1) + lag
    }

    pub fn b_index(&self, i: usize, j: usize, lag: usize) -> usize {
        debug_assert!(i < self.nodes && j < self.excitations && lag <= self.nb);
        self.dim_a() + (i * self.excitations + j) * (self.nb + 1) + lag
    }

    /// Index of `cbar_{ij,l}`, `1 <= l <= nc`.
    pub fn c_index(&self, i: usize, j: usize, lag: usize) -> usize {
        debug_assert!(i < self.nodes && j < self.nodes && lag >= 1 && lag <= self.nc);
        self.dim_a() + self.dim_b() + (i * self.nodes + j) * self.nc + (lag - 1)
    }

    /// Position of a named parameter, validating its ranges.
    pub fn index_of(&self, p: ParamRef) -> Result<usize> {
        let out = |what: &str| Error::OutOfRange(format!("{p}: {what}"));
        match p {
            ParamRef::A { i, j, lag } => {
                if i >= self.nodes || j >= self.nodes {
                    return Err(out("node index"));
                }
                if lag > self.na {
                    return Err(out("lag exceeds na"));
                }
                Ok(self.a_index(i, j, lag))
            }
            ParamRef::B { i, j, lag } => {
                if i >= self.nodes || j >= self.excitations {
                    return Err(out("node or excitation index"));
                }
                if lag > self.nb {
                    return Err(out("lag exceeds nb"));
                }
                Ok(self.b_index(i, j, lag))
            }
            ParamRef::Cbar { i, j, lag } => {
                if i >= self.nodes || j >= self.nodes {
                    return Err(out("node index"));
                }
                if lag == 0 || lag > self.nc {
                    return Err(out("lag must lie in 1..=nc"));
                }
                Ok(self.c_index(i, j, lag))
            }
        }
    }

    /// Canonical parameter at a given position (`a` uses `i <= j`).
    pub fn param_at(&self, idx: usize) -> Result<ParamRef> {
        if idx >= self.dim() {
            return Err(Error::OutOfRange(format!("parameter {idx} of {}", self.dim())));
        }
        if idx < self.dim_a() {
            let (pair, lag) = (idx / (self.na + 1), idx % (self.na + 1));
            let mut rem = pair;
            for i in 0..self.nodes {
                let row = self.nodes - i;
                if rem < row {
                    return Ok(ParamRef::A { i, j: i + rem, lag });
                }
                rem -= row;
            }
            unreachable!("pair index within dim_a")
        } else if idx < self.dim_a() + self.dim_b() {
            let rel = idx - self.dim_a();
            let (ij, lag) = (rel / (self.nb + 1), rel % (self.nb + 1));
            Ok(ParamRef::B {
                i: ij / self.excitations,
                j: ij % self.excitations,
                lag,
            })
        } else {
            let rel = idx - self.dim_a() - self.dim_b();
            let (ij, lag) = (rel / self.nc, rel % self.nc + 1);
            Ok(ParamRef::Cbar {
                i: ij / self.nodes,
                j: ij % self.nodes,
                lag,
            })
        }
    }

    fn check_len(&self, theta: &DVector<f64>) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "parameter vector of length {} for layout of dimension {}",
                theta.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// `A` (symmetric, degree `na`) from `theta_a`.
    pub fn unpack_a(&self, theta: &DVector<f64>) -> Result<PolyMatrix> {
        self.check_len(theta)?;
        let l = self.nodes;
        let mut a = PolyMatrix::zeros(l, l, self.na);
        for lag in 0..=self.na {
            let c = a.coeff_mut(lag);
            for i in 0..l {
                for j in 0..l {
                    c[(i, j)] = theta[self.a_index(i, j, lag)];
                }
            }
        }
        Ok(a)
    }

    pub fn unpack_b(&self, theta: &DVector<f64>) -> Result<PolyMatrix> {
        self.check_len(theta)?;
        let mut b = PolyMatrix::zeros(self.nodes, self.excitations, self.nb);
        for lag in 0..=self.nb {
            let c = b.coeff_mut(lag);
            for i in 0..self.nodes {
                for j in 0..self.excitations {
                    c[(i, j)] = theta[self.b_index(i, j, lag)];
                }
            }
        }
        Ok(b)
    }

    /// `Cbar` with `Cbar_0 = A_0`.
    pub fn unpack_cbar(&self, theta: &DVector<f64>) -> Result<PolyMatrix> {
        self.check_len(theta)?;
        let l = self.nodes;
        let mut c = PolyMatrix::zeros(l, l, self.nc);
        *c.coeff_mut(0) = self.unpack_a(theta)?.coeff(0).clone();
        for lag in 1..=self.nc {
            let m = c.coeff_mut(lag);
            for i in 0..l {
                for j in 0..l {
                    m[(i, j)] = theta[self.c_index(i, j, lag)];
                }
            }
        }
        Ok(c)
    }

    pub fn unpack(&self, theta: &DVector<f64>) -> Result<(PolyMatrix, PolyMatrix, PolyMatrix)> {
        Ok((self.unpack_a(theta)?, self.unpack_b(theta)?, self.unpack_cbar(theta)?))
    }

    /// Inverse of [`unpack`](Self::unpack). `A` must be symmetric; `Cbar_0` is
    /// not stored.
    pub fn pack(&self, a: &PolyMatrix, b: &PolyMatrix, cbar: &PolyMatrix) -> Result<DVector<f64>> {
        let l = self.nodes;
        if a.rows() != l || !a.is_square() || a.degree() > self.na {
            return Err(Error::Dimension("A does not fit the layout".into()));
        }
        if b.rows() != l || b.cols() != self.excitations || b.degree() > self.nb {
            return Err(Error::Dimension("B does not fit the layout".into()));
        }
        if cbar.rows() != l || !cbar.is_square() || cbar.degree() > self.nc {
            return Err(Error::Dimension("Cbar does not fit the layout".into()));
        }
        if !a.structure(0.0)?.symmetric {
            return Err(Error::Structure("A is not symmetric".into()));
        }
        let mut theta = DVector::zeros(self.dim());
        for lag in 0..=self.na {
            for i in 0..l {
                for j in i..l {
                    theta[self.a_index(i, j, lag)] = a.entry(i, j, lag);
                }
            }
        }
        for lag in 0..=self.nb {
            for i in 0..l {
                for j in 0..self.excitations {
                    theta[self.b_index(i, j, lag)] = b.entry(i, j, lag);
                }
            }
        }
        for lag in 1..=self.nc {
            for i in 0..l {
                for j in 0..l {
                    theta[self.c_index(i, j, lag)] = cbar.entry(i, j, lag);
                }
            }
        }
        Ok(theta)
    }

    fn check_order(&self, n: usize) -> Result<()> {
        if n < self.na.max(self.nb).max(self.nc) {
            return Err(Error::Dimension(format!(
                "ARX order {n} below max(na, nb, nc) = {}",
                self.na.max(self.nb).max(self.nc)
            )));
        }
        Ok(())
    }
}

/// Linear equality constraints `Gamma vartheta = gamma`.
#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub gamma_mat: DMatrix<f64>,
    pub gamma: DVector<f64>,
}

impl Constraint {
    pub fn new(gamma_mat: DMatrix<f64>, gamma: DVector<f64>) -> Result<Self> {
        if gamma_mat.nrows() != gamma.len() {
            return Err(Error::Dimension("Gamma and gamma row counts differ".into()));
        }
        Ok(Self { gamma_mat, gamma })
    }

    pub fn none(dim: usize) -> Self {
        Self {
            gamma_mat: DMatrix::zeros(0, dim),
            gamma: DVector::zeros(0),
        }
    }

    pub fn rows(&self) -> usize {
        self.gamma.len()
    }

    /// `max |Gamma vartheta - gamma|`.
    pub fn violation(&self, theta: &DVector<f64>) -> f64 {
        if self.rows() == 0 {
            return 0.0;
        }
        (&self.gamma_mat * theta - &self.gamma).amax()
    }
}

/// `Q(zeta)` for an ARX expansion of order `n` (`n >= max(na, nb, nc)`).
pub fn build_q(zeta: &DVector<f64>, n: usize, layout: &ParamLayout) -> Result<DMatrix<f64>> {
    let (l, k) = (layout.nodes, layout.excitations);
    layout.check_order(n)?;
    if zeta.len() != zeta_dim(l, k, n) {
        return Err(Error::Dimension(format!(
            "zeta has length {}, expected {}",
            zeta.len(),
            zeta_dim(l, k, n)
        )));
    }
    let a_breve = |m: usize, j: usize, lag: usize| -> f64 {
        if lag == 0 {
            if m == j {
                1.0
            } else {
                0.0
            }
        } else {
            zeta[zeta_a_index(l, n, m, j, lag)]
        }
    };
    let b_breve = |m: usize, j: usize, lag: usize| zeta[zeta_b_index(l, k, n, m, j, lag)];

    let mut q = DMatrix::zeros(zeta.len(), layout.dim());
    for i in 0..l {
        for j in 0..l {
            for lag in 1..=n {
                let row = zeta_a_index(l, n, i, j, lag);
                for m in 0..l {
                    q[(row, layout.a_index(i, m, 0))] += a_breve(m, j, lag);
                }
                if lag <= layout.na {
                    q[(row, layout.a_index(i, j, lag))] -= 1.0;
                }
                for d in 1..=lag.min(layout.nc) {
                    for m in 0..l {
                        q[(row, layout.c_index(i, m, d))] += a_breve(m, j, lag - d);
                    }
                }
            }
        }
        for j in 0..k {
            for lag in 0..=n {
                let row = zeta_b_index(l, k, n, i, j, lag);
                for m in 0..l {
                    q[(row, layout.a_index(i, m, 0))] += b_breve(m, j, lag);
                }
                if lag <= layout.nb {
                    q[(row, layout.b_index(i, j, lag))] -= 1.0;
                }
                for d in 1..=lag.min(layout.nc) {
                    for m in 0..l {
                        q[(row, layout.c_index(i, m, d))] += b_breve(m, j, lag - d);
                    }
                }
            }
        }
    }
    Ok(q)
}

/// `T(vartheta)`: minus the block lower-triangular Toeplitz operator of
/// `Cbar` acting on `zeta`-ordered coefficient vectors.
pub fn build_t(theta: &DVector<f64>, layout: &ParamLayout, n: usize) -> Result<DMatrix<f64>> {
    layout.check_order(n)?;
    let cbar = layout.unpack_cbar(theta)?;
    let (l, k) = (layout.nodes, layout.excitations);
    let dim = zeta_dim(l, k, n);
    let mut t = DMatrix::zeros(dim, dim);
    for i in 0..l {
        for m in 0..l {
            for j in 0..l {
                for lag in 1..=n {
                    for lag2 in 1..=lag {
                        t[(zeta_a_index(l, n, i, j, lag), zeta_a_index(l, n, m, j, lag2))] =
                            -cbar.entry(i, m, lag - lag2);
                    }
                }
            }
            for j in 0..k {
                for lag in 0..=n {
                    for lag2 in 0..=lag {
                        t[(zeta_b_index(l, k, n, i, j, lag), zeta_b_index(l, k, n, m, j, lag2))] =
                            -cbar.entry(i, m, lag - lag2);
                    }
                }
            }
        }
    }
    Ok(t)
}

/// `T(vartheta)^-1 X` for a `zeta`-ordered matrix `X`, by forward
/// substitution with the `Cbar` recursion per column group.
pub fn solve_t(
    theta: &DVector<f64>,
    layout: &ParamLayout,
    n: usize,
    x: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    layout.check_order(n)?;
    let cbar = layout.unpack_cbar(theta)?;
    let (l, k) = (layout.nodes, layout.excitations);
    if x.nrows() != zeta_dim(l, k, n) {
        return Err(Error::Dimension("right-hand side is not zeta-ordered".into()));
    }
    let lu = cbar.coeff(0).clone().lu();
    if !lu.is_invertible() {
        return Err(Error::Singular("T (A_0 block)".into()));
    }
    let mut out = DMatrix::zeros(x.nrows(), x.ncols());
    let mut solve_group = |col: usize, index: &dyn Fn(usize, usize) -> usize, lags: usize| -> Result<()> {
        let sig = DMatrix::from_fn(l, lags, |i, s| x[(index(i, s), col)]);
        let sol = cbar.inverse_filter_signal(&sig)?;
        for i in 0..l {
            for s in 0..lags {
                out[(index(i, s), col)] = -sol[(i, s)];
            }
        }
        Ok(())
    };
    for col in 0..x.ncols() {
        for j in 0..l {
            solve_group(col, &|i, s| zeta_a_index(l, n, i, j, s + 1), n)?;
        }
        for j in 0..k {
            solve_group(col, &|i, s| zeta_b_index(l, k, n, i, j, s), n + 1)?;
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("T".into()));
    }
    Ok(out)
}

/// Minimizer and Lagrange multipliers of an equality-constrained quadratic.
#[derive(Debug, Clone, PartialEq)]
pub struct KktSolution {
    pub theta: DVector<f64>,
    pub multipliers: DVector<f64>,
}

/// Solves `[[H, Gamma^T], [Gamma, 0]] [theta; lambda] = [0; gamma]` with a
/// fully pivoted LU after symmetric diagonal equilibration, followed by one
/// step of iterative refinement.
pub fn solve_kkt(h: &DMatrix<f64>, gamma_mat: &DMatrix<f64>, gamma: &DVector<f64>) -> Result<KktSolution> {
    let d = h.nrows();
    let m = gamma.len();
    if !h.is_square() || gamma_mat.shape() != (m, d) {
        return Err(Error::Dimension("inconsistent KKT blocks".into()));
    }
    let size = d + m;
    let mut kkt = DMatrix::zeros(size, size);
    kkt.view_mut((0, 0), (d, d)).copy_from(h);
    kkt.view_mut((0, d), (d, m)).copy_from(&gamma_mat.transpose());
    kkt.view_mut((d, 0), (m, d)).copy_from(gamma_mat);
    let mut rhs = DVector::zeros(size);
    rhs.rows_mut(d, m).copy_from(gamma);

    let scale = DVector::from_fn(size, |i, _| {
        let norm = kkt.row(i).amax();
        if norm > 0.0 {
            1.0 / norm.sqrt()
        } else {
            1.0
        }
    });
    let sd = DMatrix::from_diagonal(&scale);
    let scaled = &sd * &kkt * &sd;
    let lu = scaled.clone().full_piv_lu();
    let u = lu.u();
    let piv = u.diagonal().abs();
    if size == 0 {
        return Ok(KktSolution {
            theta: DVector::zeros(0),
            multipliers: DVector::zeros(0),
        });
    }
    if !(piv.max() > 0.0) || piv.min() <= KKT_PIVOT_TOL * piv.max() {
        return Err(Error::Identifiability(
            "singular KKT system: constraints do not fix the free parameters".into(),
        ));
    }
    let srhs = rhs.component_mul(&scale);
    let mut y = lu
        .solve(&srhs)
        .ok_or_else(|| Error::Identifiability("singular KKT system".into()))?;
    let res = &srhs - &scaled * &y;
    if let Some(corr) = lu.solve(&res) {
        y += corr;
    }
    let sol = y.component_mul(&scale);
    Ok(KktSolution {
        theta: sol.rows(0, d).into_owned(),
        multipliers: sol.rows(d, m).into_owned(),
    })
}

/// Minimizes `||F theta||^2` subject to `Gamma theta = gamma` without forming
/// `F^T F`: a particular solution from the QR factors of `Gamma^T`, then a
/// least-squares problem on the null space of `Gamma`. Multipliers follow the
/// sign convention of [`solve_kkt`].
pub fn solve_constrained_ls(
    f: &DMatrix<f64>,
    gamma_mat: &DMatrix<f64>,
    gamma: &DVector<f64>,
) -> Result<KktSolution> {
    let d = f.ncols();
    let m = gamma.len();
    if gamma_mat.shape() != (m, d) {
        return Err(Error::Dimension("inconsistent constraint blocks".into()));
    }
    if m > d {
        return Err(Error::Identifiability(format!(
            "{m} constraints for {d} parameters"
        )));
    }
    // Householder QR of [Gamma^T, 0] (square) yields a full orthogonal basis.
    let mut padded = DMatrix::zeros(d, d);
    padded.view_mut((0, 0), (d, m)).copy_from(&gamma_mat.transpose());
    let qr = padded.qr();
    let q = qr.q();
    let r = qr.r();
    let r1 = r.view((0, 0), (m, m)).into_owned();
    if m > 0 {
        let diag = r1.diagonal().abs();
        if diag.min() <= LS_RANK_TOL * diag.max() || !(diag.max() > 0.0) {
            return Err(Error::Identifiability("constraint rows are linearly dependent".into()));
        }
    }
    let q1 = q.columns(0, m).into_owned();
    let z = q.columns(m, d - m).into_owned();
    let theta_p = if m > 0 {
        let y = r1
            .transpose()
            .solve_lower_triangular(gamma)
            .ok_or_else(|| Error::Identifiability("singular constraint factor".into()))?;
        &q1 * y
    } else {
        DVector::zeros(d)
    };

    let mut theta = theta_p.clone();
    if d > m {
        let fz = f * &z;
        if fz.nrows() < fz.ncols() {
            return Err(Error::Identifiability(format!(
                "{} equations for {} free parameters",
                fz.nrows(),
                fz.ncols()
            )));
        }
        let norms = DVector::from_fn(fz.ncols(), |c, _| {
            let n = fz.column(c).norm();
            if n > 0.0 {
                n
            } else {
                1.0
            }
        });
        let mut scaled = fz.clone();
        for (c, n) in norms.iter().enumerate() {
            scaled.column_mut(c).unscale_mut(*n);
        }
        let fzqr = scaled.qr();
        let rr = fzqr.r();
        let diag = rr.diagonal().abs();
        if !(diag.max() > 0.0) || diag.min() <= LS_RANK_TOL * diag.max() {
            return Err(Error::Identifiability(format!(
                "reduced least-squares problem is rank deficient (ratio {:e})",
                if diag.max() > 0.0 { diag.min() / diag.max() } else { 0.0 }
            )));
        }
        let rhs = -(f * &theta_p);
        let mut rhs_m = DMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice());
        fzqr.q_tr_mul(&mut rhs_m);
        let top = rhs_m.rows(0, fz.ncols()).into_owned();
        let u = rr
            .solve_upper_triangular(&top)
            .ok_or_else(|| Error::Identifiability("singular reduced factor".into()))?;
        let u = DVector::from_fn(fz.ncols(), |c, _| u[(c, 0)] / norms[c]);
        theta += &z * u;
    }

    let multipliers = if m > 0 {
        let grad = f.transpose() * (f * &theta);
        let y = q1.transpose() * grad;
        -r1
            .solve_upper_triangular(&y)
            .ok_or_else(|| Error::Identifiability("singular constraint factor".into()))?
    } else {
        DVector::zeros(0)
    };
    Ok(KktSolution { theta, multipliers })
}

/// Structured prediction error `Cbar^-1 (A w - B r)` for `t >= skip`.
pub fn structured_residuals(
    theta: &DVector<f64>,
    layout: &ParamLayout,
    data: &Dataset,
    skip: usize,
) -> Result<DMatrix<f64>> {
    let (a, b, cbar) = layout.unpack(theta)?;
    if data.nodes() != layout.nodes || data.excitations() != layout.excitations {
        return Err(Error::Dimension("data do not match the layout".into()));
    }
    if skip >= data.len() {
        return Err(Error::OutOfRange(format!("skip {skip} of {} samples", data.len())));
    }
    let s = a.filter_signal(&data.w)? - b.filter_signal(&data.r)?;
    let eps = cbar.inverse_filter_signal(&s)?;
    let eps = eps.columns(skip, data.len() - skip).into_owned();
    if eps.iter().any(|v| !v.is_finite()) {
        return Err(Error::Unstable("structured residual diverges (Cbar^-1 unstable)".into()));
    }
    Ok(eps)
}

/// Result of Steps 2 and 3.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredEstimate {
    pub theta: DVector<f64>,
    pub multipliers: DVector<f64>,
    /// Covariance of the structured residuals at `theta`.
    pub lambda_bar: DMatrix<f64>,
    /// Determinant costs: entry 0 is the Step-2 iterate, entry `k` the
    /// `k`-th refinement.
    pub cost_trace: Vec<f64>,
    /// Refinement iterations performed.
    pub iterations: usize,
    /// Index into `cost_trace` of the returned iterate.
    pub selected: usize,
    pub converged: bool,
    pub diverged: bool,
    pub noiseless: bool,
    pub weighted: bool,
    pub warnings: Vec<String>,
}

fn residual_stats(
    theta: &DVector<f64>,
    layout: &ParamLayout,
    data: &Dataset,
    skip: usize,
) -> Result<(DMatrix<f64>, f64)> {
    let eps = structured_residuals(theta, layout, data, skip)?;
    let cov = &eps * eps.transpose() / eps.ncols() as f64;
    let cost = cost_det(&eps)?;
    Ok((cov, cost.value))
}

/// Whether Step-1 residual power is negligible relative to the node signals.
pub fn is_noiseless(arx: &ArxEstimate, data: &Dataset) -> bool {
    let tail = data.w.columns(arx.n, arx.n_eff);
    let signal = tail.norm_squared() / arx.n_eff as f64;
    arx.lambda_bar.trace() < NOISELESS_RATIO * signal
}

/// Step 2: constrained (optionally `P^-1`-weighted) least squares on
/// `Q(zeta_hat)`, followed by the residual covariance update.
pub fn step2(
    arx: &ArxEstimate,
    data: &Dataset,
    layout: &ParamLayout,
    constraint: &Constraint,
    use_weighting: bool,
) -> Result<StructuredEstimate> {
    if constraint.gamma_mat.ncols() != layout.dim() {
        return Err(Error::Dimension("constraint width differs from the layout".into()));
    }
    let q = build_q(&arx.zeta, arx.n, layout)?;
    let noiseless = is_noiseless(arx, data);
    let mut warnings = Vec::new();
    let weighted = use_weighting && !noiseless;
    let f = if weighted {
        match arx.info_factor(&arx.lambda_bar) {
            Ok(g) => g * &q,
            Err(_) => {
                warnings.push("singular ARX residual covariance; Step 2 unweighted".into());
                q.clone()
            }
        }
    } else {
        q.clone()
    };
    let sol = solve_constrained_ls(&f, &constraint.gamma_mat, &constraint.gamma)?;
    let (lambda_bar, cost) = residual_stats(&sol.theta, layout, data, arx.n)?;
    Ok(StructuredEstimate {
        theta: sol.theta,
        multipliers: sol.multipliers,
        lambda_bar,
        cost_trace: vec![cost],
        iterations: 0,
        selected: 0,
        converged: noiseless,
        diverged: false,
        noiseless,
        weighted,
        warnings,
    })
}

/// Refinement options for Step 3.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineOptions {
    pub max_iter: usize,
    /// Stop when the relative change of the determinant cost drops below.
    pub tol: f64,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            max_iter: 50,
            tol: 1e-9,
        }
    }
}

/// Step 3: iterated weighted least squares with `W = T^-T P^-1 T^-1`
/// evaluated at the previous iterate. Returns the iterate with the lowest
/// determinant cost (the Step-2 iterate included; ties go to the earliest).
pub fn step3(
    arx: &ArxEstimate,
    prev: &StructuredEstimate,
    data: &Dataset,
    layout: &ParamLayout,
    constraint: &Constraint,
    opts: RefineOptions,
) -> Result<StructuredEstimate> {
    if prev.noiseless || opts.max_iter == 0 {
        return Ok(prev.clone());
    }
    let q = build_q(&arx.zeta, arx.n, layout)?;
    let mut out = prev.clone();
    let mut best = (prev.cost_trace[0], prev.theta.clone(), prev.multipliers.clone(), prev.lambda_bar.clone());
    let mut current = (prev.theta.clone(), prev.lambda_bar.clone());
    let mut last_cost = prev.cost_trace[0];
    let mut increases = 0;
    for k in 1..=opts.max_iter {
        let m = solve_t(&current.0, layout, arx.n, &q)?;
        let g = arx.info_factor(&current.1)?;
        let sol = solve_constrained_ls(&(g * m), &constraint.gamma_mat, &constraint.gamma)?;
        out.iterations = k;
        let stats = residual_stats(&sol.theta, layout, data, arx.n);
        let (cov, cost) = match stats {
            Ok(s) if s.1.is_finite() && s.1 > 0.0 => s,
            Ok(_) | Err(_) => {
                out.cost_trace.push(f64::INFINITY);
                out.diverged = true;
                out.warnings
                    .push(format!("iteration {k}: residual covariance degenerate or unbounded"));
                break;
            }
        };
        out.cost_trace.push(cost);
        if cost < best.0 {
            best = (cost, sol.theta.clone(), sol.multipliers.clone(), cov.clone());
            out.selected = k;
        }
        increases = if cost > last_cost { increases + 1 } else { 0 };
        let rel = (cost - last_cost).abs() / last_cost.abs().max(f64::MIN_POSITIVE);
        last_cost = cost;
        current = (sol.theta, cov);
        if rel < opts.tol {
            out.converged = true;
            break;
        }
        if increases >= DIVERGENCE_RUN {
            out.diverged = true;
            out.warnings.push(format!(
                "determinant cost increased {DIVERGENCE_RUN} times in a row; stopped at iteration {k}"
            ));
            break;
        }
    }
    if out.selected == 0 && out.iterations > 0 {
        out.warnings
            .push("refinement did not lower the determinant cost; returning the Step-2 estimate".into());
    }
    out.theta = best.1;
    out.multipliers = best.2;
    out.lambda_bar = best.3;
    out.weighted = true;
    Ok(out)
}

/// Step 4: `C = Cbar A_0^-1` and `Lambda = A_0 Lambda_bar A_0`.
pub fn recover_noise(
    theta: &DVector<f64>,
    lambda_bar: &DMatrix<f64>,
    layout: &ParamLayout,
) -> Result<(PolyMatrix, DMatrix<f64>)> {
    let cbar = layout.unpack_cbar(theta)?;
    let a0 = cbar.coeff(0).clone();
    let inv = a0
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("A_0".into()))?;
    let mut c = cbar.mul_const(&inv)?;
    *c.coeff_mut(0) = DMatrix::identity(layout.nodes, layout.nodes);
    let lambda = &a0 * lambda_bar * a0.transpose();
    Ok((c, lambda))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn layout_examples() {
        let l = ParamLayout::new(4, 1, 2, 0, 1).unwrap();
        assert_eq!((l.dim_a(), l.dim_b(), l.dim_c()), (30, 4, 16));
        assert_eq!(ParamLayout::new(1, 0, 0, 0, 0).unwrap().dim(), 1);
        let l = ParamLayout::new(2, 2, 1, 1, 2).unwrap();
        assert_eq!((l.dim_a(), l.dim_b(), l.dim_c()), (6, 8, 8));
    }

    #[test]
    fn index_maps_are_contiguous_bijections() {
        let l = ParamLayout::new(4, 2, 2, 1, 2).unwrap();
        let mut seen = vec![0; l.dim()];
        let mut expected = 0;
        for i in 0..4 {
            for j in i..4 {
                for lag in 0..=2 {
                    assert_eq!(l.a_index(i, j, lag), expected);
                    assert_eq!(l.a_index(j, i, lag), expected);
                    expected += 1;
                }
            }
        }
        for idx in 0..l.dim() {
            let p = l.param_at(idx).unwrap();
            assert_eq!(l.index_of(p).unwrap(), idx);
            let s = p.to_string();
            assert_eq!(s.parse::<ParamRef>().unwrap(), p);
            seen[idx] += 1;
        }
        assert!(seen.iter().all(|c| *c == 1));
        assert!("a[0][1][0]".parse::<ParamRef>().is_err());
        assert!("x[1][1][0]".parse::<ParamRef>().is_err());
        assert!(l.index_of("cbar[1][1][0]".parse().unwrap()).is_err());
        assert!(l.index_of("b[1][3][0]".parse().unwrap()).is_err());
    }

    #[test]
    fn diagonal_theta_gives_diagonal_a() {
        let l = ParamLayout::new(3, 1, 1, 0, 0).unwrap();
        let mut theta = DVector::zeros(l.dim());
        for i in 0..3 {
            theta[l.a_index(i, i, 0)] = 1.0 + i as f64;
            theta[l.a_index(i, i, 1)] = -0.5;
        }
        assert!(l.unpack_a(&theta).unwrap().structure(0.0).unwrap().diagonal);
    }

    #[test]
    fn q_and_t_dimensions() {
        let l = ParamLayout::new(4, 1, 2, 0, 1).unwrap();
        let zeta = DVector::zeros(zeta_dim(4, 1, 5));
        assert_eq!(build_q(&zeta, 5, &l).unwrap().shape(), (104, 50));
        let theta = DVector::zeros(l.dim());
        assert_eq!(build_t(&theta, &l, 5).unwrap().shape(), (104, 104));
        assert!(build_q(&DVector::zeros(zeta_dim(4, 1, 1)), 1, &l).is_err());
    }

    #[test]
    fn t_of_identity_cbar_is_minus_identity() {
        let l = ParamLayout::new(3, 2, 1, 1, 2).unwrap();
        let mut theta = DVector::zeros(l.dim());
        for i in 0..3 {
            theta[l.a_index(i, i, 0)] = 1.0;
        }
        let t = build_t(&theta, &l, 3).unwrap();
        assert_eq!(t, -DMatrix::identity(t.nrows(), t.ncols()));
    }

    #[test]
    fn kkt_examples() {
        let s = solve_kkt(
            &DMatrix::identity(2, 2),
            &DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            &DVector::from_element(1, 1.0),
        )
        .unwrap();
        assert_relative_eq!(s.theta, DVector::from_vec(vec![1.0, 0.0]), epsilon = 1e-14);
        assert_relative_eq!(s.multipliers[0], -1.0, epsilon = 1e-14);

        let s = solve_kkt(
            &DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0])),
            &DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            &DVector::from_element(1, 2.0),
        )
        .unwrap();
        assert_relative_eq!(s.theta, DVector::from_vec(vec![1.6, 0.4]), epsilon = 1e-14);

        let s = solve_kkt(&DMatrix::identity(3, 3), &DMatrix::zeros(0, 3), &DVector::zeros(0)).unwrap();
        assert_eq!(s.theta, DVector::zeros(3));

        let err = solve_kkt(&DMatrix::zeros(2, 2), &DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), &DVector::from_element(1, 1.0));
        assert!(matches!(err, Err(Error::Identifiability(_))));
    }

    #[test]
    fn factor_form_examples() {
        let s = solve_constrained_ls(
            &DMatrix::identity(2, 2),
            &DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            &DVector::from_element(1, 1.0),
        )
        .unwrap();
        assert_relative_eq!(s.theta, DVector::from_vec(vec![1.0, 0.0]), epsilon = 1e-14);
        assert_relative_eq!(s.multipliers[0], -1.0, epsilon = 1e-14);
        let s = solve_constrained_ls(
            &DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0])),
            &DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            &DVector::from_element(1, 2.0),
        )
        .unwrap();
        assert_relative_eq!(s.theta, DVector::from_vec(vec![1.6, 0.4]), epsilon = 1e-14);
        let s = solve_constrained_ls(&DMatrix::identity(3, 3), &DMatrix::zeros(0, 3), &DVector::zeros(0)).unwrap();
        assert_eq!(s.theta, DVector::zeros(3));
        assert!(solve_constrained_ls(
            &DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            &DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            &DVector::from_element(1, 1.0)
        )
        .is_err());
    }

    #[test]
    fn recover_noise_examples() {
        let l = ParamLayout::new(2, 1, 0, 0, 1).unwrap();
        let mut theta = DVector::zeros(l.dim());
        theta[l.a_index(0, 0, 0)] = 2.0;
        theta[l.a_index(0, 1, 0)] = -1.0;
        theta[l.a_index(1, 1, 0)] = 1.0;
        let lam = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]);
        let (c, big) = recover_noise(&theta, &lam, &l).unwrap();
        assert_eq!(c.coeff(0), &DMatrix::identity(2, 2));
        assert!(c.coeff(1).abs().max() == 0.0);
        let a0 = DMatrix::from_row_slice(2, 2, &[2., -1., -1., 1.]);
        assert_relative_eq!(big, &a0 * &lam * &a0, epsilon = 1e-14);

        let mut theta = DVector::zeros(l.dim());
        theta[l.a_index(0, 0, 0)] = 1.0;
        theta[l.a_index(1, 1, 0)] = 1.0;
        theta[l.c_index(0, 1, 1)] = 0.3;
        let (c, big) = recover_noise(&theta, &lam, &l).unwrap();
        assert_eq!(c, l.unpack_cbar(&theta).unwrap());
        assert_eq!(big, lam);
    }

    fn random_spd(seed: u64, d: usize) -> DMatrix<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let m = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        &m * m.transpose() + DMatrix::identity(d, d) * 0.1
    }

    proptest! {
        #[test]
        fn pack_unpack_round_trip(seed in 0u64..1000, l in 1usize..5, k in 0usize..3,
                                  na in 0usize..3, nb in 0usize..3, nc in 0usize..3) {
            use rand::{Rng, SeedableRng};
            let layout = ParamLayout::new(l, k, na, nb, nc).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let theta = DVector::from_fn(layout.dim(), |_, _| rng.random_range(-2.0..2.0));
            let (a, b, c) = layout.unpack(&theta).unwrap();
            prop_assert!(a.structure(0.0).unwrap().symmetric);
            prop_assert_eq!(c.coeff(0), a.coeff(0));
            prop_assert_eq!(layout.pack(&a, &b, &c).unwrap(), theta);
        }

        #[test]
        fn bordered_and_factor_solutions_agree(seed in 0u64..500, d in 2usize..8, m in 0usize..3) {
            use rand::{Rng, SeedableRng};
            let m = m.min(d - 1);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let f = DMatrix::from_fn(d + 3, d, |_, _| rng.random_range(-1.0..1.0));
            let g = DMatrix::from_fn(m, d, |_, _| rng.random_range(-1.0..1.0));
            let gamma = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
            let h = f.transpose() * &f;
            let a = solve_kkt(&h, &g, &gamma).unwrap();
            let b = solve_constrained_ls(&f, &g, &gamma).unwrap();
            prop_assert!((&a.theta - &b.theta).amax() < 1e-8 * (1.0 + a.theta.amax()));
            prop_assert!((&a.multipliers - &b.multipliers).amax() < 1e-7 * (1.0 + a.multipliers.amax()));
            prop_assert!(b.theta.len() == d);
            if m > 0 {
                prop_assert!((&g * &b.theta - &gamma).amax() < 1e-9);
            }
        }

        #[test]
        fn solve_t_inverts_build_t(seed in 0u64..300, l in 1usize..4, k in 0usize..3, nc in 0usize..3) {
            use rand::{Rng, SeedableRng};
            let layout = ParamLayout::new(l, k, 1, 0, nc).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut theta = DVector::from_fn(layout.dim(), |_, _| rng.random_range(-0.3..0.3));
            let a0 = random_spd(seed, l);
            for i in 0..l { for j in i..l { theta[layout.a_index(i, j, 0)] = a0[(i, j)]; } }
            let n = 3;
            let t = build_t(&theta, &layout, n).unwrap();
            let x = DMatrix::from_fn(t.nrows(), 2, |_, _| rng.random_range(-1.0..1.0));
            let y = solve_t(&theta, &layout, n, &x).unwrap();
            prop_assert!((&t * y - x).amax() < 1e-9);
        }
    }
}
