//! Physical network description, backward-difference discretization and the
//! discrete-time network model `A(q^-1) w = B(q^-1) r + C(q^-1) e`.
//!
//! A continuous network is a set of ground/buffer components `x_jj,l` per node
//! and coupling components `y_jk,l` per unordered node pair. Discretization
//! maps them onto a diagonal polynomial `Xbar` and a Laplacian-structured
//! polynomial `Ybar`, with `A = Xbar + Ybar`.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::polymat::{PolyMatrix, STABILITY_TOL, STRUCTURE_TOL};

/// Relative singular-value threshold used by [`verify_rank_a0`].
pub const RANK_TOL: f64 = 1e-12;

/// Unordered node pair `(min, max)` with zero-based indices.
pub type NodePair = (usize, usize);

pub(crate) fn pair(j: usize, k: usize) -> NodePair {
    if j <= k {
        (j, k)
    } else {
        (k, j)
    }
}

/// Continuous-time physical network.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousNetwork {
    nodes: usize,
    nx: usize,
    ny: usize,
    /// `x[j][l]`: ground/buffer components of node `j`.
    x: Vec<Vec<f64>>,
    /// Coupling components per unordered pair, lags `0..=ny`.
    y: BTreeMap<NodePair, Vec<f64>>,
    /// Excitation dynamics `L x K` in the differential operator.
    b: PolyMatrix,
}

impl ContinuousNetwork {
    /// Builds a physical network and checks component signs, grounding and
    /// connectivity of the coupling graph.
    pub fn new(
        x: Vec<Vec<f64>>,
        y: BTreeMap<NodePair, Vec<f64>>,
        b: PolyMatrix,
    ) -> Result<Self> {
        let net = Self::from_parts(x, y, b)?;
        net.validate()?;
        Ok(net)
    }

    /// Builds a network without physical validation (estimated networks may
    /// carry negative or disconnected components).
    pub fn from_parts(
        x: Vec<Vec<f64>>,
        y: BTreeMap<NodePair, Vec<f64>>,
        b: PolyMatrix,
    ) -> Result<Self> {
        let nodes = x.len();
        if nodes == 0 {
            return Err(Error::InvalidArgument("network without nodes".into()));
        }
        let nx = x[0].len().checked_sub(1).ok_or_else(|| {
            Error::InvalidArgument("ground components need at least one lag".into())
        })?;
        if x.iter().any(|r| r.len() != nx + 1) {
            return Err(Error::Dimension("ragged ground component table".into()));
        }
        let ny = y.values().map(|v| v.len().saturating_sub(1)).max().unwrap_or(0);
        let mut y_norm = BTreeMap::new();
        for (&(j, k), v) in &y {
            if j == k || j >= nodes || k >= nodes {
                return Err(Error::InvalidArgument(format!(
                    "invalid coupling pair ({}, {})",
                    j + 1,
                    k + 1
                )));
            }
            let mut v = v.clone();
            v.resize(ny + 1, 0.0);
            y_norm.insert(pair(j, k), v);
        }
        if b.rows() != nodes {
            return Err(Error::Dimension(format!(
                "B has {} rows for {nodes} nodes",
                b.rows()
            )));
        }
        if x.iter().flatten().chain(y_norm.values().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite component".into()));
        }
        Ok(Self {
            nodes,
            nx,
            ny,
            x,
            y: y_norm,
            b,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(v) = self.sign_violations().first() {
            return Err(Error::Structure(v.clone()));
        }
        if !self.is_grounded() {
            return Err(Error::Structure("no component connects a node to ground".into()));
        }
        if !self.is_connected() {
            return Err(Error::Structure("coupling graph is not connected".into()));
        }
        Ok(())
    }

    /// Negative component values, described one per entry.
    pub fn sign_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (j, row) in self.x.iter().enumerate() {
            for (l, v) in row.iter().enumerate() {
                if *v < 0.0 {
                    out.push(format!("x[{}][{}] = {v:e} < 0", j + 1, l));
                }
            }
        }
        for (&(j, k), row) in &self.y {
            for (l, v) in row.iter().enumerate() {
                if *v < 0.0 {
                    out.push(format!("y[{}][{}][{}] = {v:e} < 0", j + 1, k + 1, l));
                }
            }
        }
        out
    }

    pub fn is_grounded(&self) -> bool {
        self.x.iter().flatten().any(|v| *v > 0.0)
    }

    /// Breadth-first search over pairs with any nonzero coupling component.
    pub fn is_connected(&self) -> bool {
        let mut adj = vec![Vec::new(); self.nodes];
        for (&(j, k), v) in &self.y {
            if v.iter().any(|c| *c != 0.0) {
                adj[j].push(k);
                adj[k].push(j);
            }
        }
        let mut seen = vec![false; self.nodes];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(j) = queue.pop_front() {
            for &k in &adj[j] {
                if !seen[k] {
                    seen[k] = true;
                    queue.push_back(k);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn excitations(&self) -> usize {
        self.b.cols()
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn x(&self) -> &[Vec<f64>] {
        &self.x
    }

    pub fn x_at(&self, j: usize, lag: usize) -> f64 {
        self.x[j].get(lag).copied().unwrap_or(0.0)
    }

    /// Coupling component between `j` and `k` (either order); zero when the
    /// pair is absent.
    pub fn y_at(&self, j: usize, k: usize, lag: usize) -> f64 {
        self.y
            .get(&pair(j, k))
            .and_then(|v| v.get(lag).copied())
            .unwrap_or(0.0)
    }

    pub fn couplings(&self) -> &BTreeMap<NodePair, Vec<f64>> {
        &self.y
    }

    pub fn b(&self) -> &PolyMatrix {
        &self.b
    }

    /// Pairs with any nonzero coupling component.
    pub fn edges(&self) -> Vec<NodePair> {
        self.y
            .iter()
            .filter(|(_, v)| v.iter().any(|c| *c != 0.0))
            .map(|(p, _)| *p)
            .collect()
    }

    /// Diagonal polynomial of ground components in the differential operator.
    pub fn x_poly(&self) -> PolyMatrix {
        let mut p = PolyMatrix::zeros(self.nodes, self.nodes, self.nx);
        for (j, row) in self.x.iter().enumerate() {
            for (l, v) in row.iter().enumerate() {
                p.coeff_mut(l)[(j, j)] = *v;
            }
        }
        p
    }

    /// Laplacian polynomial of coupling components in the differential operator.
    pub fn y_poly(&self) -> PolyMatrix {
        laplacian_from_pairs(self.nodes, self.ny, &self.y)
    }
}

fn laplacian_from_pairs(nodes: usize, deg: usize, y: &BTreeMap<NodePair, Vec<f64>>) -> PolyMatrix {
    let mut p = PolyMatrix::zeros(nodes, nodes, deg);
    for (&(j, k), v) in y {
        for (l, c) in v.iter().enumerate() {
            let m = p.coeff_mut(l);
            m[(j, k)] -= c;
            m[(k, j)] -= c;
            m[(j, j)] += c;
            m[(k, k)] += c;
        }
    }
    p
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Maps continuous coefficients `c_i` (operator `p^i`) to backward-difference
/// coefficients of `q^-l`: `(-1)^l sum_{i>=l} C(i,l) Ts^-i c_i`.
pub fn to_backward_difference(c: &[f64], ts: f64) -> Vec<f64> {
    let n = c.len();
    (0..n)
        .map(|l| {
            let s: f64 = (l..n)
                .map(|i| binomial(i, l) * ts.powi(-(i as i32)) * c[i])
                .sum();
            if l % 2 == 0 {
                s
            } else {
                -s
            }
        })
        .collect()
}

/// Inverse of [`to_backward_difference`]: `(-Ts)^l sum_{i>=l} C(i,l) cbar_i`.
pub fn from_backward_difference(cbar: &[f64], ts: f64) -> Vec<f64> {
    let n = cbar.len();
    (0..n)
        .map(|l| {
            let s: f64 = (l..n).map(|i| binomial(i, l) * cbar[i]).sum();
            (-ts).powi(l as i32) * s
        })
        .collect()
}

fn map_poly(p: &PolyMatrix, ts: f64, f: fn(&[f64], f64) -> Vec<f64>) -> PolyMatrix {
    let mut out = PolyMatrix::zeros(p.rows(), p.cols(), p.degree());
    for i in 0..p.rows() {
        for j in 0..p.cols() {
            for (l, v) in f(&p.entry_poly(i, j), ts).into_iter().enumerate() {
                out.coeff_mut(l)[(i, j)] = v;
            }
        }
    }
    out
}

/// Discrete-time components of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteComponents {
    /// Diagonal ground/buffer polynomial.
    pub xbar: PolyMatrix,
    /// Symmetric zero-row-sum coupling polynomial.
    pub ybar: PolyMatrix,
    /// Excitation polynomial in `q^-1`.
    pub b: PolyMatrix,
}

/// Backward-difference discretization with sampling interval `ts`.
pub fn discretize(net: &ContinuousNetwork, ts: f64) -> Result<DiscreteComponents> {
    if !(ts > 0.0) || !ts.is_finite() {
        return Err(Error::InvalidArgument(format!("sampling interval {ts} <= 0")));
    }
    let deg = net.nx.max(net.ny);
    let l = net.nodes;
    let mut xbar = PolyMatrix::zeros(l, l, deg);
    for (j, row) in net.x.iter().enumerate() {
        for (lag, v) in to_backward_difference(row, ts).into_iter().enumerate() {
            xbar.coeff_mut(lag)[(j, j)] = v;
        }
    }
    let ybar_pairs: BTreeMap<NodePair, Vec<f64>> = net
        .y
        .iter()
        .map(|(p, v)| (*p, to_backward_difference(v, ts)))
        .collect();
    let ybar = laplacian_from_pairs(l, deg, &ybar_pairs);
    let b = map_poly(&net.b, ts, to_backward_difference);
    Ok(DiscreteComponents { xbar, ybar, b })
}

/// Inverse backward-difference map (continuous components from discrete ones).
pub fn undiscretize(
    xbar: &PolyMatrix,
    ybar: &PolyMatrix,
    b: &PolyMatrix,
    ts: f64,
) -> Result<ContinuousNetwork> {
    if !(ts > 0.0) || !ts.is_finite() {
        return Err(Error::InvalidArgument(format!("sampling interval {ts} <= 0")));
    }
    if !xbar.is_square() || xbar.rows() != ybar.rows() || !ybar.is_square() {
        return Err(Error::Dimension("X and Y must be square of equal size".into()));
    }
    let xs = xbar.structure(STRUCTURE_TOL)?;
    if !xs.diagonal {
        return Err(Error::Structure("Xbar is not diagonal".into()));
    }
    let ys = ybar.structure(STRUCTURE_TOL * ybar.max_abs().max(1.0))?;
    if !(ys.symmetric && ys.zero_row_sum) {
        return Err(Error::Structure(
            "Ybar is not symmetric with zero row sums".into(),
        ));
    }
    let l = xbar.rows();
    let deg = xbar.degree().max(ybar.degree());
    let (xbar, ybar) = (xbar.padded(deg), ybar.padded(deg));
    let x = (0..l)
        .map(|j| from_backward_difference(&xbar.entry_poly(j, j), ts))
        .collect();
    let mut y = BTreeMap::new();
    for j in 0..l {
        for k in (j + 1)..l {
            // Laplacian off-diagonals carry the negated component values.
            let comp: Vec<f64> = ybar.entry_poly(j, k).iter().map(|v| -v).collect();
            y.insert((j, k), from_backward_difference(&comp, ts));
        }
    }
    ContinuousNetwork::from_parts(x, y, map_poly(b, ts, from_backward_difference))
}

/// `A = Xbar + Ybar` lag-wise.
pub fn assemble_a(xbar: &PolyMatrix, ybar: &PolyMatrix) -> Result<PolyMatrix> {
    if xbar.rows() != ybar.rows() || xbar.cols() != ybar.cols() || xbar.degree() != ybar.degree()
    {
        return Err(Error::Dimension(
            "Xbar and Ybar must share size and degree".into(),
        ));
    }
    xbar.add(ybar)
}

/// Splits a symmetric `A` into its diagonal part `Xbar` and its zero-row-sum
/// part `Ybar`.
pub fn split_a(a: &PolyMatrix) -> Result<(PolyMatrix, PolyMatrix)> {
    let flags = a.structure(0.0)?;
    if !flags.symmetric {
        return Err(Error::Structure("A is not symmetric".into()));
    }
    let l = a.rows();
    let mut xbar = PolyMatrix::zeros(l, l, a.degree());
    let mut ybar = PolyMatrix::zeros(l, l, a.degree());
    for lag in 0..=a.degree() {
        let c = a.coeff(lag);
        for j in 0..l {
            let mut off = 0.0;
            for i in 0..l {
                if i != j {
                    ybar.coeff_mut(lag)[(i, j)] = c[(i, j)];
                    off += c[(i, j)];
                }
            }
            ybar.coeff_mut(lag)[(j, j)] = -off;
            xbar.coeff_mut(lag)[(j, j)] = c[(j, j)] + off;
        }
    }
    Ok((xbar, ybar))
}

/// Discrete network model `A(q^-1) w = B(q^-1) r + C(q^-1) e`, `cov(e) = Lambda`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteModel {
    pub a: PolyMatrix,
    pub b: PolyMatrix,
    pub c: PolyMatrix,
    pub lambda: DMatrix<f64>,
    pub ts: f64,
}

impl DiscreteModel {
    /// Checks symmetry of `A`, full rank of `A_0`, monic `C` and a symmetric
    /// positive semidefinite `Lambda` (a zero covariance describes noiseless
    /// data).
    pub fn new(
        a: PolyMatrix,
        b: PolyMatrix,
        c: PolyMatrix,
        lambda: DMatrix<f64>,
        ts: f64,
    ) -> Result<Self> {
        let l = a.rows();
        if !a.is_square() || b.rows() != l || c.rows() != l || !c.is_square() {
            return Err(Error::Dimension("A, B, C row counts differ".into()));
        }
        if lambda.shape() != (l, l) {
            return Err(Error::Dimension("Lambda must be L x L".into()));
        }
        if !(ts > 0.0) {
            return Err(Error::InvalidArgument(format!("sampling interval {ts} <= 0")));
        }
        if !a.structure(STRUCTURE_TOL * a.max_abs().max(1.0))?.symmetric {
            return Err(Error::Structure("A is not symmetric".into()));
        }
        if (c.coeff(0) - DMatrix::<f64>::identity(l, l)).abs().max() > STRUCTURE_TOL {
            return Err(Error::Structure("C is not monic".into()));
        }
        check_psd(&lambda, "Lambda")?;
        let model = Self { a, b, c, lambda, ts };
        let rank = model.rank_a0();
        if !rank.full_rank {
            return Err(Error::Singular(format!(
                "A_0 (sigma_min/sigma_max = {:e})",
                rank.sigma_min / rank.sigma_max.max(f64::MIN_POSITIVE)
            )));
        }
        Ok(model)
    }

    /// Model of a physical network discretized at `ts`.
    pub fn from_network(
        net: &ContinuousNetwork,
        ts: f64,
        c: PolyMatrix,
        lambda: DMatrix<f64>,
    ) -> Result<Self> {
        let parts = discretize(net, ts)?;
        let a = assemble_a(&parts.xbar, &parts.ybar)?;
        Self::new(a, parts.b, c, lambda, ts)
    }

    pub fn nodes(&self) -> usize {
        self.a.rows()
    }

    pub fn excitations(&self) -> usize {
        self.b.cols()
    }

    pub fn a0(&self) -> &DMatrix<f64> {
        self.a.coeff(0)
    }

    pub fn rank_a0(&self) -> RankReport {
        verify_rank_a0(self.a0())
    }

    /// Inverse stability of `A` and of `C`.
    pub fn stability(&self) -> Result<(crate::polymat::StabilityReport, crate::polymat::StabilityReport)> {
        Ok((
            self.a.inverse_stability(STABILITY_TOL)?,
            self.c.inverse_stability(STABILITY_TOL)?,
        ))
    }

    /// `max(n_a, n_b, n_c)`, the number of leading samples affected by zero
    /// initial conditions.
    pub fn transient(&self) -> usize {
        self.a.degree().max(self.b.degree()).max(self.c.degree())
    }
}

pub(crate) fn check_psd(m: &DMatrix<f64>, name: &str) -> Result<()> {
    let scale = m.abs().max().max(f64::MIN_POSITIVE);
    if (m - m.transpose()).abs().max() > 1e-12 * scale {
        return Err(Error::Structure(format!("{name} is not symmetric")));
    }
    let eig = m.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|v| *v < -1e-12 * scale) {
        return Err(Error::Structure(format!("{name} is not positive semidefinite")));
    }
    Ok(())
}

/// Singular-value diagnostics of `A_0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankReport {
    pub full_rank: bool,
    pub rank: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub det: f64,
}

/// Full numerical rank of `A_0`: `sigma_min > RANK_TOL * sigma_max`.
pub fn verify_rank_a0(a0: &DMatrix<f64>) -> RankReport {
    let sv = a0.clone().singular_values();
    let sigma_max = sv.max();
    let sigma_min = sv.min();
    let rank = sv.iter().filter(|s| **s > RANK_TOL * sigma_max).count();
    RankReport {
        full_rank: sigma_max > 0.0 && rank == a0.nrows() && a0.is_square(),
        rank,
        sigma_min,
        sigma_max,
        det: if a0.is_square() { a0.determinant() } else { 0.0 },
    }
}

/// Scalar rational transfer function `num(q^-1) / den(q^-1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rational {
    pub num: Vec<f64>,
    pub den: Vec<f64>,
}

impl Rational {
    pub fn is_zero(&self) -> bool {
        self.num.iter().all(|v| *v == 0.0)
    }

    /// Value at `q = 1`.
    pub fn static_gain(&self) -> f64 {
        self.num.iter().sum::<f64>() / self.den.iter().sum::<f64>()
    }
}

/// Directed module form `w = G w + R r`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModuleRepresentation {
    /// `g[j][k]`: transfer from `w_k` to `w_j`; diagonal entries are zero.
    pub g: Vec<Vec<Rational>>,
    /// `r[j][m]`: transfer from `r_m` to `w_j`.
    pub r: Vec<Vec<Rational>>,
}

/// `G_jk = -a_jk / a_jj` and `R_jm = b_jm / a_jj`.
pub fn to_module_representation(a: &PolyMatrix, b: &PolyMatrix) -> Result<ModuleRepresentation> {
    if !a.is_square() || b.rows() != a.rows() {
        return Err(Error::Dimension("A must be square with as many rows as B".into()));
    }
    let l = a.rows();
    let mut g = Vec::with_capacity(l);
    let mut r = Vec::with_capacity(l);
    for j in 0..l {
        let den = a.entry_poly(j, j);
        if den.iter().all(|v| *v == 0.0) {
            return Err(Error::Singular(format!("a_{{{},{}}} is the zero polynomial", j + 1, j + 1)));
        }
        g.push(
            (0..l)
                .map(|k| Rational {
                    num: if k == j {
                        vec![0.0; den.len()]
                    } else {
                        a.entry_poly(j, k).iter().map(|v| -v).collect()
                    },
                    den: den.clone(),
                })
                .collect(),
        );
        r.push(
            (0..b.cols())
                .map(|m| Rational {
                    num: b.entry_poly(j, m),
                    den: den.clone(),
                })
                .collect(),
        );
    }
    Ok(ModuleRepresentation { g, r })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn scalar_net(x: Vec<f64>) -> ContinuousNetwork {
        ContinuousNetwork::new(vec![x], BTreeMap::new(), PolyMatrix::identity(1)).unwrap()
    }

    #[test]
    fn discretize_examples() {
        let d = discretize(&scalar_net(vec![2.0, 0.5]), 0.1).unwrap();
        assert_relative_eq!(d.xbar.entry(0, 0, 0), 7.0, epsilon = 1e-12);
        assert_relative_eq!(d.xbar.entry(0, 0, 1), -5.0, epsilon = 1e-12);

        let d = discretize(&scalar_net(vec![3.5]), 0.37).unwrap();
        assert_eq!(d.xbar.entry(0, 0, 0), 3.5);

        let d = discretize(&scalar_net(vec![1.0, 0.0, 1e-2]), 0.01).unwrap();
        assert_relative_eq!(d.xbar.entry(0, 0, 0), 101.0, epsilon = 1e-9);
        assert_relative_eq!(d.xbar.entry(0, 0, 1), -200.0, epsilon = 1e-9);
        assert_relative_eq!(d.xbar.entry(0, 0, 2), 100.0, epsilon = 1e-9);

        assert!(discretize(&scalar_net(vec![1.0]), 0.0).is_err());
        assert!(discretize(&scalar_net(vec![1.0]), -1.0).is_err());
    }

    #[test]
    fn undiscretize_examples() {
        let xbar = PolyMatrix::scalar(&[7.0, -5.0]);
        let ybar = PolyMatrix::zeros(1, 1, 1);
        let net = undiscretize(&xbar, &ybar, &PolyMatrix::identity(1), 0.1).unwrap();
        assert_relative_eq!(net.x_at(0, 0), 2.0, epsilon = 1e-12);
        assert_relative_eq!(net.x_at(0, 1), 0.5, epsilon = 1e-12);

        let net = undiscretize(
            &PolyMatrix::scalar(&[4.0]),
            &PolyMatrix::zeros(1, 1, 0),
            &PolyMatrix::identity(1),
            0.2,
        )
        .unwrap();
        assert_eq!(net.x_at(0, 0), 4.0);

        let nondiag = PolyMatrix::constant(DMatrix::from_row_slice(2, 2, &[1., 1., 1., 1.]));
        assert!(undiscretize(&nondiag, &PolyMatrix::zeros(2, 2, 0), &PolyMatrix::identity(2), 0.1).is_err());
    }

    #[test]
    fn assemble_and_split_examples() {
        let xbar = PolyMatrix::constant(DMatrix::from_row_slice(2, 2, &[2., 0., 0., 1.]));
        let ybar = PolyMatrix::constant(DMatrix::from_row_slice(2, 2, &[1., -1., -1., 1.]));
        let a = assemble_a(&xbar, &ybar).unwrap();
        assert_eq!(a.coeff(0), &DMatrix::from_row_slice(2, 2, &[3., -1., -1., 2.]));
        let (x2, y2) = split_a(&a).unwrap();
        assert_eq!(x2, xbar);
        assert_eq!(y2, ybar);

        let zero = PolyMatrix::zeros(2, 2, 0);
        assert_eq!(assemble_a(&xbar, &zero).unwrap(), xbar);
        assert_eq!(assemble_a(&zero, &ybar).unwrap(), ybar);

        let (x3, y3) = split_a(&xbar).unwrap();
        assert_eq!(x3, xbar);
        assert_eq!(y3, zero);
        let (x4, y4) = split_a(&ybar).unwrap();
        assert_eq!(x4, zero);
        assert_eq!(y4, ybar);

        let asym = PolyMatrix::constant(DMatrix::from_row_slice(2, 2, &[1., 2., 3., 1.]));
        assert!(matches!(split_a(&asym), Err(Error::Structure(_))));
        assert!(assemble_a(&xbar, &PolyMatrix::zeros(2, 2, 1)).is_err());
    }

    #[test]
    fn rank_examples() {
        let r = verify_rank_a0(&DMatrix::from_row_slice(2, 2, &[2., -1., -1., 1.]));
        assert!(r.full_rank);
        assert_relative_eq!(r.det, 1.0, epsilon = 1e-12);
        assert!(!verify_rank_a0(&DMatrix::from_row_slice(2, 2, &[1., -1., -1., 1.])).full_rank);
        assert!(verify_rank_a0(&DMatrix::identity(3, 3)).full_rank);
    }

    #[test]
    fn module_representation_examples() {
        let a = PolyMatrix::constant(DMatrix::from_row_slice(2, 2, &[2., -1., -1., 1.]));
        let m = to_module_representation(&a, &PolyMatrix::identity(2)).unwrap();
        assert_eq!(m.g[0][1], Rational { num: vec![1.0], den: vec![2.0] });
        assert_relative_eq!(m.g[0][1].static_gain(), 0.5);
        assert_eq!(m.g[1][0], Rational { num: vec![1.0], den: vec![1.0] });
        assert!(m.g[0][0].is_zero());
        assert_eq!(m.r[1][1], Rational { num: vec![1.0], den: vec![1.0] });

        let d = PolyMatrix::constant(DMatrix::from_row_slice(2, 2, &[2., 0., 0., 1.]));
        let m = to_module_representation(&d, &PolyMatrix::identity(2)).unwrap();
        assert!(m.g.iter().flatten().all(Rational::is_zero));

        let bad = PolyMatrix::constant(DMatrix::from_row_slice(2, 2, &[0., 1., 1., 1.]));
        assert!(to_module_representation(&bad, &PolyMatrix::identity(2)).is_err());
    }

    #[test]
    fn network_validation() {
        let b = PolyMatrix::zeros(3, 1, 0);
        let mut y = BTreeMap::new();
        y.insert((0, 1), vec![1.0]);
        // node 3 isolated
        let err = ContinuousNetwork::new(vec![vec![1.0]; 3], y.clone(), b.clone()).unwrap_err();
        assert!(matches!(err, Error::Structure(_)));
        y.insert((1, 2), vec![0.5]);
        assert!(ContinuousNetwork::new(vec![vec![0.0]; 3], y.clone(), b.clone()).is_err());
        assert!(ContinuousNetwork::new(vec![vec![-1.0], vec![1.0], vec![1.0]], y.clone(), b.clone()).is_err());
        let net = ContinuousNetwork::new(vec![vec![1.0], vec![0.0], vec![0.0]], y, b).unwrap();
        assert_eq!(net.edges(), vec![(0, 1), (1, 2)]);
        assert_eq!(net.y_at(2, 1, 0), 0.5);
    }

    #[test]
    fn discrete_model_validation() {
        let a = PolyMatrix::constant(DMatrix::from_row_slice(2, 2, &[1., -1., -1., 1.]));
        let err = DiscreteModel::new(
            a,
            PolyMatrix::identity(2),
            PolyMatrix::identity(2),
            DMatrix::identity(2, 2),
            0.1,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Singular(_)));
        let nonmonic = PolyMatrix::constant(DMatrix::identity(2, 2) * 2.0);
        assert!(DiscreteModel::new(
            PolyMatrix::identity(2),
            PolyMatrix::identity(2),
            nonmonic,
            DMatrix::identity(2, 2),
            0.1
        )
        .is_err());
    }

    /// Random connected, grounded network: a random spanning tree plus extra
    /// edges, positive components, at least one grounded node.
    pub(crate) fn random_network(
        seed: u64,
        nodes: usize,
        nx: usize,
        ny: usize,
    ) -> ContinuousNetwork {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut y = BTreeMap::new();
        let comp = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<f64> {
            (0..=n).map(|_| rng.random_range(0.05..2.0)).collect()
        };
        for k in 1..nodes {
            let j = rng.random_range(0..k);
            y.insert(pair(j, k), comp(&mut rng, ny));
        }
        for j in 0..nodes {
            for k in (j + 1)..nodes {
                if !y.contains_key(&(j, k)) && rng.random_bool(0.3) {
                    y.insert((j, k), comp(&mut rng, ny));
                }
            }
        }
        let grounded = rng.random_range(0..nodes);
        let x = (0..nodes)
            .map(|j| {
                if j == grounded || rng.random_bool(0.5) {
                    comp(&mut rng, nx)
                } else {
                    vec![0.0; nx + 1]
                }
            })
            .collect();
        let b = PolyMatrix::identity(nodes);
        ContinuousNetwork::new(x, y, b).unwrap()
    }

    #[test]
    fn a0_full_rank_on_random_networks() {
        for seed in 0..1000 {
            let nodes = 2 + (seed as usize % 5);
            let net = random_network(seed, nodes, 1 + seed as usize % 3, seed as usize % 3);
            let d = discretize(&net, 0.01 + (seed % 7) as f64 * 0.05).unwrap();
            let a = assemble_a(&d.xbar, &d.ybar).unwrap();
            assert!(verify_rank_a0(a.coeff(0)).full_rank, "seed {seed}");
        }
    }

    proptest! {
        #[test]
        fn discretization_round_trip_and_structure(
            seed in 0u64..10_000,
            nodes in 2usize..6,
            nx in 0usize..5,
            ny in 0usize..5,
            log_ts in -3.0f64..0.0,
        ) {
            let ts = 10f64.powf(log_ts);
            let net = random_network(seed, nodes, nx, ny);
            let d = discretize(&net, ts).unwrap();
            prop_assert_eq!(d.xbar.degree(), nx.max(ny));

            let xf = d.xbar.structure(0.0).unwrap();
            prop_assert!(xf.diagonal);
            let scale = d.ybar.max_abs();
            let yf = d.ybar.structure(1e-12 * scale).unwrap();
            prop_assert!(yf.symmetric && yf.zero_row_sum);
            let y0 = PolyMatrix::constant(d.ybar.coeff(0).clone());
            prop_assert!(y0.structure(1e-12 * scale).unwrap().sign_laplacian);
            prop_assert!(d.xbar.coeff(0).diagonal().iter().all(|v| *v >= 0.0));

            let back = undiscretize(&d.xbar, &d.ybar, &d.b, ts).unwrap();
            let scale = net.x().iter().flatten().chain(net.couplings().values().flatten())
                .fold(0.0f64, |m, v| m.max(v.abs()));
            // The map mixes lags with weights Ts^(l-i); rounding of the large
            // discrete coefficients bounds the attainable accuracy at lag l.
            let deg = nx.max(ny);
            let tol = |l: usize| {
                1e-10 * scale
                    + 1e2 * f64::EPSILON * scale
                        * (0..=deg).map(|i| 4f64.powi(i as i32) * ts.powi(l as i32 - i as i32)).sum::<f64>()
            };
            for j in 0..nodes {
                for l in 0..=nx {
                    prop_assert!((back.x_at(j, l) - net.x_at(j, l)).abs() <= tol(l));
                }
                for k in (j + 1)..nodes {
                    for l in 0..=ny {
                        prop_assert!((back.y_at(j, k, l) - net.y_at(j, k, l)).abs() <= tol(l));
                    }
                }
            }
        }

        #[test]
        fn split_then_assemble_is_identity(vals in proptest::collection::vec(-5.0..5.0f64, 30)) {
            let l = 4;
            let coeffs: Vec<DMatrix<f64>> = vals.chunks(10).map(|ch| {
                let mut m = DMatrix::zeros(l, l);
                let mut k = 0;
                for i in 0..l { for j in i..l { m[(i, j)] = ch[k]; m[(j, i)] = ch[k]; k += 1; } }
                m
            }).collect();
            let a = PolyMatrix::new(coeffs).unwrap();
            let (x, y) = split_a(&a).unwrap();
            prop_assert!(x.structure(0.0).unwrap().diagonal);
            let back = assemble_a(&x, &y).unwrap();
            // Off-diagonals are copied; diagonals recombine as a_jj + s - s.
            for lag in 0..3 {
                for i in 0..l { for j in 0..l {
                    let d = (back.entry(i, j, lag) - a.entry(i, j, lag)).abs();
                    prop_assert!(d <= 4.0 * f64::EPSILON * 20.0);
                }}
            }
        }
    }
}
