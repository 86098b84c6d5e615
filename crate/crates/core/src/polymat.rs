//! Dense matrix polynomials in the backward shift operator.
//!
//! A [`PolyMatrix`] stores the coefficient stack `P_0, P_1, ..., P_n` of
//! `P(q^-1) = sum_l P_l q^-l`. It carries every polynomial object of a network
//! model (`A`, `B`, `C`, the component matrices `X` and `Y`) and provides the
//! structural predicates those objects are checked against.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Default absolute tolerance for [`PolyMatrix::structure`].
pub const STRUCTURE_TOL: f64 = 1e-9;
/// Default modulus slack for [`PolyMatrix::inverse_stability`].
pub const STABILITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct PolyMatrix {
    rows: usize,
    cols: usize,
    coeffs: Vec<DMatrix<f64>>,
}

/// Structural flags of a square matrix polynomial, each holding at every lag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StructureFlags {
    pub symmetric: bool,
    pub diagonal: bool,
    pub zero_row_sum: bool,
    /// Symmetric, zero row sums and non-positive off-diagonal entries.
    pub sign_laplacian: bool,
}

/// Roots of `det(sum_l A_l z^(n-l))` and the resulting stability verdict.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub stable: bool,
    pub roots: Vec<Complex64>,
    pub max_modulus: f64,
}

impl PolyMatrix {
    /// Builds a polynomial from its coefficient stack. At least one coefficient
    /// is required and all of them must share the same shape.
    pub fn new(coeffs: Vec<DMatrix<f64>>) -> Result<Self> {
        let first = coeffs
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty coefficient stack".into()))?;
        let (rows, cols) = first.shape();
        for (l, c) in coeffs.iter().enumerate() {
            if c.shape() != (rows, cols) {
                return Err(Error::Dimension(format!(
                    "coefficient {l} is {}x{}, expected {rows}x{cols}",
                    c.nrows(),
                    c.ncols()
                )));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "coefficient {l} has non-finite entries"
                )));
            }
        }
        Ok(Self { rows, cols, coeffs })
    }

    pub fn zeros(rows: usize, cols: usize, degree: usize) -> Self {
        Self {
            rows,
            cols,
            coeffs: vec![DMatrix::zeros(rows, cols); degree + 1],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::constant(DMatrix::identity(n, n))
    }

    pub fn constant(m: DMatrix<f64>) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            coeffs: vec![m],
        }
    }

    /// 1x1 polynomial with the given coefficients.
    pub fn scalar(coeffs: &[f64]) -> Self {
        let coeffs = if coeffs.is_empty() { &[0.0][..] } else { coeffs };
        Self {
            rows: 1,
            cols: 1,
            coeffs: coeffs
                .iter()
                .map(|&c| DMatrix::from_element(1, 1, c))
                .collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Allocated degree (trailing zero lags are kept).
    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn coeff(&self, lag: usize) -> &DMatrix<f64> {
        &self.coeffs[lag]
    }

    pub fn coeff_mut(&mut self, lag: usize) -> &mut DMatrix<f64> {
        &mut self.coeffs[lag]
    }

    pub fn coeffs(&self) -> &[DMatrix<f64>] {
        &self.coeffs
    }

    /// Entry `(i, j)` at lag `lag`; zero beyond the allocated degree.
    pub fn entry(&self, i: usize, j: usize, lag: usize) -> f64 {
        self.coeffs.get(lag).map_or(0.0, |c| c[(i, j)])
    }

    /// Coefficients of the scalar polynomial at `(i, j)`.
    pub fn entry_poly(&self, i: usize, j: usize) -> Vec<f64> {
        self.coeffs.iter().map(|c| c[(i, j)]).collect()
    }

    /// Returns a copy whose degree is raised to `degree` by zero padding.
    pub fn padded(&self, degree: usize) -> Self {
        let mut out = self.clone();
        while out.coeffs.len() < degree + 1 {
            out.coeffs.push(DMatrix::zeros(self.rows, self.cols));
        }
        out
    }

    pub fn transpose(&self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            coeffs: self.coeffs.iter().map(|c| c.transpose()).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            coeffs: self.coeffs.iter().map(|c| c * s).collect(),
        }
    }

    pub fn add(&self, other: &PolyMatrix) -> Result<PolyMatrix> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::Dimension(format!(
                "cannot add {}x{} and {}x{} polynomials",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let degree = self.degree().max(other.degree());
        let mut out = self.padded(degree);
        for (l, c) in other.coeffs.iter().enumerate() {
            out.coeffs[l] += c;
        }
        Ok(out)
    }

    /// Largest absolute coefficient over all lags.
    pub fn max_abs(&self) -> f64 {
        self.coeffs
            .iter()
            .flat_map(|c| c.iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// `sum_l P_l z^-l`.
    pub fn eval(&self, z: Complex64) -> DMatrix<Complex64> {
        let zinv = if z == Complex64::new(0.0, 0.0) && self.degree() == 0 {
            Complex64::new(0.0, 0.0)
        } else {
            z.inv()
        };
        // Horner in z^-1, highest lag first.
        let mut acc = DMatrix::<Complex64>::zeros(self.rows, self.cols);
        for c in self.coeffs.iter().rev() {
            acc *= zinv;
            acc += c.map(|v| Complex64::new(v, 0.0));
        }
        acc
    }

    /// Polynomial product; lag `l` of the result is `sum_{i+j=l} P_i Q_j`.
    pub fn mul(&self, other: &PolyMatrix) -> Result<PolyMatrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let degree = self.degree() + other.degree();
        let mut coeffs = vec![DMatrix::zeros(self.rows, other.cols); degree + 1];
        for (i, p) in self.coeffs.iter().enumerate() {
            for (j, q) in other.coeffs.iter().enumerate() {
                coeffs[i + j] += p * q;
            }
        }
        Ok(PolyMatrix {
            rows: self.rows,
            cols: other.cols,
            coeffs,
        })
    }

    /// Right multiplication by a constant matrix.
    pub fn mul_const(&self, m: &DMatrix<f64>) -> Result<PolyMatrix> {
        self.mul(&PolyMatrix::constant(m.clone()))
    }

    /// `sum_l P_l s(t - l)` where `s` holds one sample per column.
    pub fn filter(&self, s: &DMatrix<f64>, t: usize) -> Result<DVector<f64>> {
        if s.nrows() != self.cols {
            return Err(Error::Dimension(format!(
                "signal has {} rows, polynomial has {} columns",
                s.nrows(),
                self.cols
            )));
        }
        if t < self.degree() || t >= s.ncols() {
            return Err(Error::OutOfRange(format!(
                "t = {t} outside [{}, {})",
                self.degree(),
                s.ncols()
            )));
        }
        let mut out = DVector::zeros(self.rows);
        for (l, c) in self.coeffs.iter().enumerate() {
            out.gemv(1.0, c, &s.column(t - l), 1.0);
        }
        Ok(out)
    }

    /// Applies `P(q^-1)` to a whole signal with zero initial conditions
    /// (`s(t) = 0` for `t < 0`).
    pub fn filter_signal(&self, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if s.nrows() != self.cols {
            return Err(Error::Dimension(format!(
                "signal has {} rows, polynomial has {} columns",
                s.nrows(),
                self.cols
            )));
        }
        let n = s.ncols();
        let mut out = DMatrix::zeros(self.rows, n);
        for (l, c) in self.coeffs.iter().enumerate() {
            if l >= n || c.iter().all(|v| *v == 0.0) {
                continue;
            }
            let shifted = c * s.columns(0, n - l);
            let mut dst = out.columns_mut(l, n - l);
            dst += shifted;
        }
        Ok(out)
    }

    /// Solves `P(q^-1) x = s` recursively with zero initial conditions.
    /// Requires a square polynomial with invertible leading coefficient.
    pub fn inverse_filter_signal(&self, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if !self.is_square() || s.nrows() != self.rows {
            return Err(Error::Dimension(format!(
                "inverse filter of {}x{} polynomial on {}-row signal",
                self.rows,
                self.cols,
                s.nrows()
            )));
        }
        let lu = self.coeffs[0].clone().lu();
        if !lu.is_invertible() {
            return Err(Error::Singular("leading coefficient".into()));
        }
        let n = s.ncols();
        let mut x = DMatrix::zeros(self.rows, n);
        let mut rhs = DVector::zeros(self.rows);
        for t in 0..n {
            rhs.copy_from(&s.column(t));
            for l in 1..=self.degree().min(t) {
                rhs.gemv(-1.0, &self.coeffs[l], &x.column(t - l), 1.0);
            }
            let xt = lu
                .solve(&rhs)
                .ok_or_else(|| Error::Singular("leading coefficient".into()))?;
            x.set_column(t, &xt);
        }
        Ok(x)
    }

    /// Structural flags within absolute tolerance `tol` at every lag.
    pub fn structure(&self, tol: f64) -> Result<StructureFlags> {
        if !self.is_square() {
            return Err(Error::Dimension(format!(
                "structure of non-square {}x{} polynomial",
                self.rows, self.cols
            )));
        }
        let n = self.rows;
        let mut flags = StructureFlags {
            symmetric: true,
            diagonal: true,
            zero_row_sum: true,
            sign_laplacian: true,
        };
        let mut off_diag_nonpositive = true;
        for c in &self.coeffs {
            for i in 0..n {
                let mut row_sum = 0.0;
                for j in 0..n {
                    let v = c[(i, j)];
                    row_sum += v;
                    if i != j {
                        if (v - c[(j, i)]).abs() > tol {
                            flags.symmetric = false;
                        }
                        if v.abs() > tol {
                            flags.diagonal = false;
                        }
                        if v > tol {
                            off_diag_nonpositive = false;
                        }
                    }
                }
                if row_sum.abs() > tol {
                    flags.zero_row_sum = false;
                }
            }
        }
        flags.sign_laplacian = flags.symmetric && flags.zero_row_sum && off_diag_nonpositive;
        Ok(flags)
    }

    /// Stability of `A^-1(q^-1)`: all roots of `det(sum_l A_l z^(n-l))` inside
    /// `|z| < 1 + tol`. Roots are the eigenvalues of the block companion matrix
    /// of `A_0^-1 A`.
    pub fn inverse_stability(&self, tol: f64) -> Result<StabilityReport> {
        if !self.is_square() {
            return Err(Error::Dimension("stability of non-square polynomial".into()));
        }
        let n = self.rows;
        let deg = self.degree();
        if deg == 0 {
            if !self.coeffs[0].clone().lu().is_invertible() {
                return Err(Error::Singular("A_0".into()));
            }
            return Ok(StabilityReport {
                stable: true,
                roots: Vec::new(),
                max_modulus: 0.0,
            });
        }
        let lu = self.coeffs[0].clone().lu();
        let a0_norm = self.coeffs[0].norm();
        let min_pivot = (0..n)
            .map(|i| lu.u()[(i, i)].abs())
            .fold(f64::INFINITY, f64::min);
        if !lu.is_invertible() || min_pivot <= 1e-14 * a0_norm {
            return Err(Error::Singular("A_0".into()));
        }
        let dim = n * deg;
        let mut companion = DMatrix::zeros(dim, dim);
        for l in 1..=deg {
            let normalized = lu
                .solve(&self.coeffs[l])
                .ok_or_else(|| Error::Singular("A_0".into()))?;
            companion
                .view_mut((0, (l - 1) * n), (n, n))
                .copy_from(&(-normalized));
        }
        for b in 1..deg {
            companion
                .view_mut((b * n, (b - 1) * n), (n, n))
                .fill_with_identity();
        }
        let roots: Vec<Complex64> = companion.complex_eigenvalues().iter().copied().collect();
        let max_modulus = roots.iter().map(|z| z.norm()).fold(0.0_f64, f64::max);
        Ok(StabilityReport {
            stable: max_modulus < 1.0 + tol,
            roots,
            max_modulus,
        })
    }
}

/// Lower-triangular banded Toeplitz matrix of size `rows x cols` whose first
/// column is `x[0..rows]` (missing entries are zero).
pub fn toeplitz(x: &[f64], rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    if rows < cols {
        return Err(Error::InvalidArgument(format!(
            "toeplitz needs rows >= cols, got {rows} < {cols}"
        )));
    }
    Ok(DMatrix::from_fn(rows, cols, |i, j| {
        if i >= j {
            x.get(i - j).copied().unwrap_or(0.0)
        } else {
            0.0
        }
    }))
}
