//! High-order ARX fit `A_breve(q^-1) w = B_breve(q^-1) r + e_bar` by row-wise
//! least squares.
//!
//! Parameter vector `zeta` layout: first the `A_breve` block over rows `i`,
//! columns `j`, lags `1..=n` (index `i*L*n + j*n + (l-1)`), then the
//! `B_breve` block over rows `i`, inputs `j`, lags `0..=n`
//! (index `L*L*n + i*K*(n+1) + j*(n+1) + l`).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::polymat::PolyMatrix;
use crate::simulate::Dataset;

/// Relative threshold on the diagonal of the regressor QR factor below which
/// the regressor Gram matrix is treated as singular.
pub const GRAM_RANK_TOL: f64 = 1e-10;

/// Step-1 estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct ArxEstimate {
    pub n: usize,
    pub nodes: usize,
    pub excitations: usize,
    pub zeta: DVector<f64>,
    /// Residual covariance `(1/N_eff) sum eps eps^T`.
    pub lambda_bar: DMatrix<f64>,
    /// Samples entering the sums (`N - n`).
    pub n_eff: usize,
    /// Upper-triangular `R / sqrt(N_eff)` of the regressor QR, so that the
    /// normalized Gram matrix is `r_factor^T r_factor`.
    pub r_factor: DMatrix<f64>,
    /// `L x N_eff` residuals for `t = n..N-1`.
    pub residuals: DMatrix<f64>,
}

/// Per-row regressor length `L*n + K*(n+1)`.
pub fn row_dim(l: usize, k: usize, n: usize) -> usize {
    l * n + k * (n + 1)
}

/// Total `dim(zeta) = L*(L*n + K*(n+1))`.
pub fn zeta_dim(l: usize, k: usize, n: usize) -> usize {
    l * row_dim(l, k, n)
}

/// Index of `a_breve_{ij,l}`, `l >= 1`.
pub fn zeta_a_index(l_nodes: usize, n: usize, i: usize, j: usize, lag: usize) -> usize {
    debug_assert!(lag >= 1 && lag <= n);
    i * l_nodes * n + j * n + (lag - 1)
}

/// Index of `b_breve_{ij,l}`, `l >= 0`.
pub fn zeta_b_index(l_nodes: usize, k: usize, n: usize, i: usize, j: usize, lag: usize) -> usize {
    debug_assert!(lag <= n);
    l_nodes * l_nodes * n + i * k * (n + 1) + j * (n + 1) + lag
}

/// Maps a `zeta` index to `(row i, position in the per-row regressor)`.
pub fn zeta_to_row(l_nodes: usize, k: usize, n: usize, idx: usize) -> (usize, usize) {
    let a_len = l_nodes * l_nodes * n;
    if idx < a_len {
        (idx / (l_nodes * n), idx % (l_nodes * n))
    } else {
        let rel = idx - a_len;
        let per = k * (n + 1);
        (rel / per, l_nodes * n + rel % per)
    }
}

/// `phi(t) = [-w_1(t-1..t-n), ..., -w_L(..), r_1(t..t-n), ..., r_K(..)]`
/// for a zero-based sample index `t >= n`.
pub fn build_regressor(data: &Dataset, n: usize, t: usize) -> Result<DVector<f64>> {
    if t < n || t >= data.len() {
        return Err(Error::OutOfRange(format!(
            "regressor at t = {t} needs {n} <= t < {}",
            data.len()
        )));
    }
    let (l, k) = (data.nodes(), data.excitations());
    let mut phi = DVector::zeros(row_dim(l, k, n));
    for j in 0..l {
        for lag in 1..=n {
            phi[j * n + lag - 1] = -data.w[(j, t - lag)];
        }
    }
    for j in 0..k {
        for lag in 0..=n {
            phi[l * n + j * (n + 1) + lag] = data.r[(j, t - lag)];
        }
    }
    Ok(phi)
}

fn regressor_matrix(data: &Dataset, n: usize) -> DMatrix<f64> {
    let (l, k) = (data.nodes(), data.excitations());
    let n_eff = data.len() - n;
    let mut phi = DMatrix::zeros(n_eff, row_dim(l, k, n));
    for j in 0..l {
        for lag in 1..=n {
            let col = j * n + lag - 1;
            for s in 0..n_eff {
                phi[(s, col)] = -data.w[(j, s + n - lag)];
            }
        }
    }
    for j in 0..k {
        for lag in 0..=n {
            let col = l * n + j * (n + 1) + lag;
            for s in 0..n_eff {
                phi[(s, col)] = data.r[(j, s + n - lag)];
            }
        }
    }
    phi
}

/// Least-squares ARX fit of order `n`. A single QR factorization of the
/// shared regressor serves all `L` rows.
pub fn estimate(data: &Dataset, n: usize) -> Result<ArxEstimate> {
    let (l, k) = (data.nodes(), data.excitations());
    let p = row_dim(l, k, n);
    if p == 0 {
        return Err(Error::InvalidArgument("empty regressor".into()));
    }
    let big_n = data.len();
    if big_n <= n || big_n - n <= p {
        return Err(Error::InsufficientExcitation(format!(
            "{big_n} samples for {p} parameters per row at order {n}"
        )));
    }
    let n_eff = big_n - n;
    let phi = regressor_matrix(data, n);
    let y = data.w.columns(n, n_eff).transpose();

    let qr = phi.clone().qr();
    let r = qr.r();
    let diag = r.diagonal().abs();
    let (dmin, dmax) = (diag.min(), diag.max());
    if !(dmax > 0.0) || dmin <= GRAM_RANK_TOL * dmax {
        return Err(Error::InsufficientExcitation(format!(
            "regressor Gram matrix is singular (QR diagonal ratio {:e})",
            if dmax > 0.0 { dmin / dmax } else { 0.0 }
        )));
    }
    let mut qty = y.clone();
    qr.q_tr_mul(&mut qty);
    let rhs = qty.rows(0, p).into_owned();
    let theta = r
        .solve_upper_triangular(&rhs)
        .ok_or_else(|| Error::InsufficientExcitation("singular regressor".into()))?;

    let residuals = (y - &phi * &theta).transpose();
    let lambda_bar = &residuals * residuals.transpose() / n_eff as f64;

    let mut zeta = DVector::zeros(zeta_dim(l, k, n));
    for i in 0..l {
        for q in 0..p {
            let idx = if q < l * n {
                i * l * n + q
            } else {
                l * l * n + i * k * (n + 1) + (q - l * n)
            };
            zeta[idx] = theta[(q, i)];
        }
    }
    Ok(ArxEstimate {
        n,
        nodes: l,
        excitations: k,
        zeta,
        lambda_bar,
        n_eff,
        r_factor: r / (n_eff as f64).sqrt(),
        residuals,
    })
}

impl ArxEstimate {
    pub fn dim(&self) -> usize {
        self.zeta.len()
    }

    /// Normalized regressor Gram matrix `(1/N) sum phi phi^T`.
    pub fn gram(&self) -> DMatrix<f64> {
        self.r_factor.transpose() * &self.r_factor
    }

    /// `A_breve` with `A_breve_0 = I`.
    pub fn a_breve(&self) -> PolyMatrix {
        let (l, n) = (self.nodes, self.n);
        let mut p = PolyMatrix::zeros(l, l, n);
        *p.coeff_mut(0) = DMatrix::identity(l, l);
        for i in 0..l {
            for j in 0..l {
                for lag in 1..=n {
                    p.coeff_mut(lag)[(i, j)] = self.zeta[zeta_a_index(l, n, i, j, lag)];
                }
            }
        }
        p
    }

    pub fn b_breve(&self) -> PolyMatrix {
        let (l, k, n) = (self.nodes, self.excitations, self.n);
        let mut p = PolyMatrix::zeros(l, k, n);
        for i in 0..l {
            for j in 0..k {
                for lag in 0..=n {
                    p.coeff_mut(lag)[(i, j)] = self.zeta[zeta_b_index(l, k, n, i, j, lag)];
                }
            }
        }
        p
    }

    /// Factor `G` with `G^T G = P^-1 = (1/N) sum phi Lambda_bar^-1 phi^T`,
    /// expressed in `zeta` ordering, for the supplied residual covariance.
    pub fn info_factor(&self, lambda_bar: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let l = self.nodes;
        if lambda_bar.shape() != (l, l) {
            return Err(Error::Dimension("residual covariance must be L x L".into()));
        }
        let chol = lambda_bar
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Singular("residual covariance".into()))?;
        // Lambda^-1 = L^-T L^-1, so the factor is L^-1 (x) R.
        let linv = chol
            .l()
            .solve_lower_triangular(&DMatrix::identity(l, l))
            .ok_or_else(|| Error::Singular("residual covariance".into()))?;
        let d = self.dim();
        let rows: Vec<(usize, usize)> = (0..d)
            .map(|idx| zeta_to_row(l, self.excitations, self.n, idx))
            .collect();
        Ok(DMatrix::from_fn(d, d, |a, b| {
            let (i, p) = rows[a];
            let (i2, p2) = rows[b];
            linv[(i, i2)] * self.r_factor[(p, p2)]
        }))
    }

    /// `P^-1` in `zeta` ordering: entry `(i,p),(i',p')` is
    /// `Lambda^-1_{ii'} R_{pp'}`.
    pub fn info(&self, lambda_bar: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let lam_inv = lambda_bar
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Singular("residual covariance".into()))?;
        let gram = self.gram();
        let (l, k, n) = (self.nodes, self.excitations, self.n);
        let d = self.dim();
        let rows: Vec<(usize, usize)> = (0..d).map(|idx| zeta_to_row(l, k, n, idx)).collect();
        Ok(DMatrix::from_fn(d, d, |a, b| {
            let (i, p) = rows[a];
            let (i2, p2) = rows[b];
            lam_inv[(i, i2)] * gram[(p, p2)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::DiscreteModel;
    use crate::simulate::{generate, white_excitation, NoiseSpec};
    use approx::assert_relative_eq;

    #[test]
    fn regressor_examples() {
        let w = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]);
        let r = DMatrix::from_row_slice(1, 3, &[4.0, 5.0, 6.0]);
        let d = Dataset::new(1.0, w, r).unwrap();
        let phi = build_regressor(&d, 1, 2).unwrap();
        assert_eq!(phi.as_slice(), &[-2.0, 6.0, 5.0]);
        assert!(build_regressor(&d, 1, 0).is_err());

        let z = Dataset::new(1.0, DMatrix::zeros(2, 5), DMatrix::zeros(0, 5)).unwrap();
        let phi = build_regressor(&z, 2, 3).unwrap();
        assert_eq!(phi.len(), 4);
        assert!(phi.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn scalar_noiseless_fit() {
        let m = DiscreteModel::new(
            PolyMatrix::scalar(&[1.0, -0.5]),
            PolyMatrix::identity(1),
            PolyMatrix::identity(1),
            DMatrix::zeros(1, 1),
            1.0,
        )
        .unwrap();
        let r = white_excitation(1, 100, 1.0, 7).unwrap();
        let noise = NoiseSpec {
            lambda: DMatrix::zeros(1, 1),
            seed: 0,
        };
        let d = generate(&m, &r, &noise).unwrap();
        let est = estimate(&d, 1).unwrap();
        assert_relative_eq!(est.zeta[0], -0.5, epsilon = 1e-12);
        assert_relative_eq!(est.zeta[1], 1.0, epsilon = 1e-12);
        assert!(est.zeta[2].abs() < 1e-12);
        assert!(est.residuals.abs().max() < 1e-12);

        // Hand-coded normal equations.
        let mut g = DMatrix::<f64>::zeros(3, 3);
        let mut h = DVector::<f64>::zeros(3);
        for t in 1..100 {
            let phi = build_regressor(&d, 1, t).unwrap();
            g += &phi * phi.transpose();
            h += &phi * d.w[(0, t)];
        }
        let oracle = g.lu().solve(&h).unwrap();
        assert_relative_eq!(est.zeta, oracle, epsilon = 1e-10);
    }

    #[test]
    fn degenerate_data_is_rejected() {
        let d = Dataset::new(1.0, DMatrix::zeros(2, 50), DMatrix::zeros(1, 50)).unwrap();
        assert!(matches!(estimate(&d, 2), Err(Error::InsufficientExcitation(_))));
        let short = Dataset::new(1.0, DMatrix::zeros(2, 8), DMatrix::zeros(1, 8)).unwrap();
        assert!(matches!(estimate(&short, 2), Err(Error::InsufficientExcitation(_))));
    }

    #[test]
    fn info_matches_factor_and_triple_product() {
        let a = PolyMatrix::new(vec![
            DMatrix::identity(2, 2),
            DMatrix::from_row_slice(2, 2, &[-0.3, 0.1, 0.1, -0.2]),
        ])
        .unwrap();
        let lam = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]);
        let m = DiscreteModel::new(a, PolyMatrix::identity(2), PolyMatrix::identity(2), lam.clone(), 1.0)
            .unwrap();
        let r = white_excitation(2, 400, 1.0, 1).unwrap();
        let d = generate(&m, &r, &NoiseSpec { lambda: lam, seed: 3 }).unwrap();
        let n = 2;
        let est = estimate(&d, n).unwrap();
        let info = est.info(&est.lambda_bar).unwrap();
        let g = est.info_factor(&est.lambda_bar).unwrap();
        assert_relative_eq!(&g.transpose() * &g, info.clone(), epsilon = 1e-9 * info.abs().max());

        // (1/N) sum_t Phi(t) Lambda^-1 Phi(t)^T with the block regressor
        // Phi(t) (dim(zeta) x L) whose column i holds phi(t) in row i's slots.
        let lam_inv = est.lambda_bar.clone().try_inverse().unwrap();
        let dim = est.dim();
        let mut oracle = DMatrix::<f64>::zeros(dim, dim);
        for t in n..d.len() {
            let phi = build_regressor(&d, n, t).unwrap();
            let mut big = DMatrix::<f64>::zeros(dim, 2);
            for idx in 0..dim {
                let (i, p) = zeta_to_row(2, 2, n, idx);
                big[(idx, i)] = phi[p];
            }
            oracle += &big * &lam_inv * big.transpose();
        }
        oracle /= est.n_eff as f64;
        assert_relative_eq!(info, oracle, epsilon = 1e-9 * est.info(&est.lambda_bar).unwrap().abs().max());
    }

    #[test]
    fn index_maps_are_bijective() {
        let (l, k, n) = (3, 2, 4);
        let mut seen = vec![false; zeta_dim(l, k, n)];
        for i in 0..l {
            for j in 0..l {
                for lag in 1..=n {
                    let idx = zeta_a_index(l, n, i, j, lag);
                    assert_eq!(zeta_to_row(l, k, n, idx), (i, j * n + lag - 1));
                    seen[idx] = true;
                }
            }
            for j in 0..k {
                for lag in 0..=n {
                    let idx = zeta_b_index(l, k, n, i, j, lag);
                    assert_eq!(zeta_to_row(l, k, n, idx), (i, l * n + j * (n + 1) + lag));
                    seen[idx] = true;
                }
            }
        }
        assert!(seen.into_iter().all(|s| s));
    }
}
