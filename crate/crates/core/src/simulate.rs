//! Data generation, one-step-ahead prediction and prediction-error costs.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::netmodel::{check_psd, DiscreteModel};
use crate::polymat::{PolyMatrix, STABILITY_TOL};

/// Sampled node signals and excitations, one sample per column.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub ts: f64,
    /// `L x N` node signals.
    pub w: DMatrix<f64>,
    /// `K x N` excitation signals.
    pub r: DMatrix<f64>,
}

impl Dataset {
    pub fn new(ts: f64, w: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        if w.ncols() == 0 {
            return Err(Error::InvalidArgument("dataset without samples".into()));
        }
        if r.ncols() != w.ncols() {
            return Err(Error::Dimension(format!(
                "{} node samples but {} excitation samples",
                w.ncols(),
                r.ncols()
            )));
        }
        if w.iter().chain(r.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite sample".into()));
        }
        if !(ts > 0.0) || !ts.is_finite() {
            return Err(Error::InvalidArgument(format!("sampling interval {ts} <= 0")));
        }
        Ok(Self { ts, w, r })
    }

    pub fn len(&self) -> usize {
        self.w.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.w.ncols() == 0
    }

    pub fn nodes(&self) -> usize {
        self.w.nrows()
    }

    pub fn excitations(&self) -> usize {
        self.r.nrows()
    }

    /// First `n` samples.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(Error::OutOfRange(format!("{n} samples of {}", self.len())));
        }
        Ok(Self {
            ts: self.ts,
            w: self.w.columns(0, n).into_owned(),
            r: self.r.columns(0, n).into_owned(),
        })
    }
}

/// Gaussian process noise: covariance and generator seed.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub lambda: DMatrix<f64>,
    pub seed: u64,
}

/// `rows x n` Gaussian samples with covariance `cov`, drawn column by column
/// from a ChaCha20 stream seeded with `seed`. A positive semidefinite
/// (including zero) covariance is accepted.
pub fn gaussian_signal(cov: &DMatrix<f64>, n: usize, seed: u64) -> Result<DMatrix<f64>> {
    let rows = cov.nrows();
    if !cov.is_square() {
        return Err(Error::Dimension("covariance must be square".into()));
    }
    check_psd(cov, "covariance")?;
    let eig = cov.clone().symmetric_eigen();
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let root = &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let z = DMatrix::from_fn(rows, n, |_, _| StandardNormal.sample(&mut rng));
    Ok(root * z)
}

/// `k x n` white excitation with variance `variance` per channel.
pub fn white_excitation(k: usize, n: usize, variance: f64, seed: u64) -> Result<DMatrix<f64>> {
    if !(variance >= 0.0) {
        return Err(Error::InvalidArgument(format!("variance {variance} < 0")));
    }
    gaussian_signal(&(DMatrix::identity(k, k) * variance), n, seed)
}

/// Simulates `A w = B r + C e` with zero initial conditions; see
/// [`generate_with_noise`].
pub fn generate(model: &DiscreteModel, r: &DMatrix<f64>, noise: &NoiseSpec) -> Result<Dataset> {
    generate_with_noise(model, r, noise).map(|(d, _)| d)
}

/// Simulates the model and also returns the drawn process noise `e`.
pub fn generate_with_noise(
    model: &DiscreteModel,
    r: &DMatrix<f64>,
    noise: &NoiseSpec,
) -> Result<(Dataset, DMatrix<f64>)> {
    let l = model.nodes();
    if r.nrows() != model.excitations() {
        return Err(Error::Dimension(format!(
            "excitation has {} channels, model expects {}",
            r.nrows(),
            model.excitations()
        )));
    }
    if noise.lambda.shape() != (l, l) {
        return Err(Error::Dimension("noise covariance must be L x L".into()));
    }
    let report = model.a.inverse_stability(STABILITY_TOL)?;
    if !report.stable {
        return Err(Error::Unstable(format!(
            "A^-1 has a pole of modulus {:.6}",
            report.max_modulus
        )));
    }
    let n = r.ncols();
    let e = gaussian_signal(&noise.lambda, n, noise.seed)?;
    let v = model.b.filter_signal(r)? + model.c.filter_signal(&e)?;
    let w = model.a.inverse_filter_signal(&v)?;
    if w.iter().any(|x| !x.is_finite()) {
        return Err(Error::Unstable("simulated signal overflowed".into()));
    }
    Ok((Dataset::new(model.ts, w, r.clone())?, e))
}

/// Covariance of the innovation `A_0^-1 e`: `A_0^-1 Lambda A_0^-T`.
pub fn innovation_covariance(a0: &DMatrix<f64>, lambda: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let inv = a0
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("A_0".into()))?;
    Ok(&inv * lambda * inv.transpose())
}

fn check_data(model_l: usize, model_k: usize, data: &Dataset) -> Result<()> {
    if data.nodes() != model_l || data.excitations() != model_k {
        return Err(Error::Dimension(format!(
            "data has {} nodes / {} excitations, model {} / {}",
            data.nodes(),
            data.excitations(),
            model_l,
            model_k
        )));
    }
    Ok(())
}

/// Prediction error `A_0^-1 C^-1 (A w - B r)` with zero initial conditions.
/// The `C^-1` action is the monic recursion, never a truncated series.
pub fn prediction_error(
    a: &PolyMatrix,
    b: &PolyMatrix,
    c: &PolyMatrix,
    data: &Dataset,
) -> Result<DMatrix<f64>> {
    let l = a.rows();
    check_data(l, b.cols(), data)?;
    if (c.coeff(0) - DMatrix::<f64>::identity(l, l)).abs().max() > 1e-12 {
        return Err(Error::Structure("C is not monic".into()));
    }
    let s = a.filter_signal(&data.w)? - b.filter_signal(&data.r)?;
    let x = c.inverse_filter_signal(&s)?;
    let lu = a.coeff(0).clone().lu();
    lu.solve(&x).ok_or_else(|| Error::Singular("A_0".into()))
}

/// [`prediction_error`] for a [`DiscreteModel`].
pub fn model_prediction_error(model: &DiscreteModel, data: &Dataset) -> Result<DMatrix<f64>> {
    prediction_error(&model.a, &model.b, &model.c, data)
}

/// One-step-ahead predictor `w_hat` from `Cbar w_hat = (Cbar - A) w + B r`,
/// `Cbar = C A_0`. `(Cbar - A)_0 = 0`, so the predictor only uses past node
/// signals.
pub fn predictor(model: &DiscreteModel, data: &Dataset) -> Result<DMatrix<f64>> {
    check_data(model.nodes(), model.excitations(), data)?;
    let cbar = model.c.mul_const(model.a0())?;
    let deg = cbar.degree().max(model.a.degree());
    let diff = cbar.padded(deg).add(&model.a.padded(deg).scale(-1.0))?;
    let rhs = diff.filter_signal(&data.w)? + model.b.filter_signal(&data.r)?;
    cbar.inverse_filter_signal(&rhs)
}

/// `(1/N) sum_t eps(t)^T S eps(t)` for symmetric positive definite `S`.
pub fn cost_weighted(eps: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<f64> {
    if s.shape() != (eps.nrows(), eps.nrows()) {
        return Err(Error::Dimension("weight must be L x L".into()));
    }
    if (s - s.transpose()).abs().max() > 1e-12 * s.abs().max() || s.clone().cholesky().is_none() {
        return Err(Error::InvalidArgument("weight is not symmetric positive definite".into()));
    }
    if eps.ncols() == 0 {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    let total: f64 = eps
        .column_iter()
        .map(|c| (c.transpose() * s * c)[(0, 0)])
        .sum();
    Ok(total / eps.ncols() as f64)
}

/// `(1/N) sum_t eps(t) eps(t)^T`.
pub fn sample_covariance(eps: &DMatrix<f64>) -> DMatrix<f64> {
    let n = eps.ncols().max(1) as f64;
    eps * eps.transpose() / n
}

/// Determinant cost together with a flag for a rank-deficient sample
/// covariance (in which case the value is reported as zero).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetCost {
    pub value: f64,
    pub degenerate: bool,
}

/// Relative eigenvalue floor below which a sample covariance counts as
/// rank deficient.
pub const DEGENERATE_TOL: f64 = 1e-12;

/// `det((1/N) sum_t eps(t) eps(t)^T)`.
pub fn cost_det(eps: &DMatrix<f64>) -> Result<DetCost> {
    if eps.ncols() <= eps.nrows() {
        return Err(Error::InvalidArgument(format!(
            "{} samples for {} channels",
            eps.ncols(),
            eps.nrows()
        )));
    }
    let cov = sample_covariance(eps);
    let eig = cov.clone().symmetric_eigen().eigenvalues;
    let max = eig.max();
    if max <= 0.0 || eig.min() <= DEGENERATE_TOL * max {
        return Ok(DetCost {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(DetCost {
        value: eig.iter().product(),
        degenerate: false,
    })
}

/// Sample autocorrelation `rho_i(k)` of each row for lags `1..=max_lag`
/// (`L x max_lag`); rows with zero power give zeros.
pub fn autocorrelation(eps: &DMatrix<f64>, max_lag: usize) -> DMatrix<f64> {
    let n = eps.ncols();
    DMatrix::from_fn(eps.nrows(), max_lag, |i, k| {
        let row = eps.row(i);
        let mean = row.mean();
        let c0: f64 = row.iter().map(|v| (v - mean).powi(2)).sum();
        if c0 == 0.0 || k + 1 >= n {
            return 0.0;
        }
        let lag = k + 1;
        let ck: f64 = (lag..n)
            .map(|t| (row[t] - mean) * (row[t - lag] - mean))
            .sum();
        ck / c0
    })
}
