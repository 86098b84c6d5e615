//! Monte-Carlo experiments over a schedule of `(n, N)` settings.

use std::time::Instant;

use diffnet_core::netmodel::{ContinuousNetwork, DiscreteModel};
use diffnet_core::pipeline::identify;
use diffnet_core::simulate::{generate, white_excitation, NoiseSpec};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};

/// `||truth - est||^2 / ||truth||^2`.
pub fn rmse(est: &[f64], truth: &[f64]) -> Result<f64> {
    if est.len() != truth.len() {
        return Err(HarnessError::Input(format!(
            "estimate has {} entries, truth {}",
            est.len(),
            truth.len()
        )));
    }
    let norm: f64 = truth.iter().map(|v| v * v).sum();
    if norm == 0.0 {
        return Err(HarnessError::Input("zero true parameter vector".into()));
    }
    let err: f64 = est.iter().zip(truth).map(|(e, t)| (t - e).powi(2)).sum();
    Ok(err / norm)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of run `run` in schedule entry `set`.
pub fn derive_seed(master: u64, set: usize, run: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ set as u64) ^ run as u64)
}

/// Excitation and noise seeds of one run.
pub fn signal_seeds(seed: u64) -> (u64, u64) {
    (splitmix64(seed ^ 0x0001), splitmix64(seed ^ 0x0002))
}

/// Continuous parameters: ground components node-major over lags
/// `0..=nx`, then negated couplings over pairs `j < k` and lags `0..=ny`.
pub fn component_vector(net: &ContinuousNetwork, nx: usize, ny: usize) -> Vec<f64> {
    let l = net.nodes();
    let mut v = Vec::with_capacity(l * (nx + 1) + l * (l - 1) / 2 * (ny + 1));
    for j in 0..l {
        for lag in 0..=nx {
            v.push(net.x_at(j, lag));
        }
    }
    for j in 0..l {
        for k in (j + 1)..l {
            for lag in 0..=ny {
                v.push(-net.y_at(j, k, lag));
            }
        }
    }
    v
}

/// Labels matching [`component_vector`].
pub fn component_names(l: usize, nx: usize, ny: usize) -> Vec<String> {
    let mut v = Vec::new();
    for j in 1..=l {
        for lag in 0..=nx {
            v.push(format!("x[{j}][{lag}]"));
        }
    }
    for j in 1..=l {
        for k in (j + 1)..=l {
            for lag in 0..=ny {
                v.push(format!("-y[{j}][{k}][{lag}]"));
            }
        }
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunOutcome {
    pub run: usize,
    pub seed: u64,
    /// Continuous parameter estimates in [`component_vector`] order.
    pub estimate: Option<Vec<f64>>,
    pub rmse: Option<f64>,
    pub topology_correct: Option<bool>,
    pub iterations: Option<usize>,
    pub warnings: Vec<String>,
    /// Failure reason; failed runs are excluded from the statistics.
    pub error: Option<String>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SetReport {
    pub arx_order: usize,
    pub samples: usize,
    /// `n^4 / N`.
    pub rate: f64,
    pub runs: Vec<RunOutcome>,
    pub failures: usize,
    pub mean: Vec<f64>,
    /// Sample standard deviation (`n - 1` denominator).
    pub sd: Vec<f64>,
    pub median_rmse: Option<f64>,
    pub topology_correct: usize,
    pub seconds: f64,
}

impl SetReport {
    pub fn estimates(&self) -> Vec<&[f64]> {
        self.runs.iter().filter_map(|r| r.estimate.as_deref()).collect()
    }

    pub fn rmse_samples(&self) -> Vec<f64> {
        self.runs.iter().filter_map(|r| r.rmse).collect()
    }

    /// `(est - truth) / truth` per successful run, for parameters with
    /// nonzero truth (`None` elsewhere).
    pub fn relative_errors(&self, truth: &[f64]) -> Vec<Option<Vec<f64>>> {
        truth
            .iter()
            .enumerate()
            .map(|(p, t)| {
                (*t != 0.0).then(|| self.estimates().iter().map(|e| (e[p] - t) / t).collect())
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub name: String,
    pub master_seed: u64,
    pub parameter_names: Vec<String>,
    pub truth: Vec<f64>,
    pub true_edges: Vec<[usize; 2]>,
    pub sets: Vec<SetReport>,
    pub seconds: f64,
}

/// Median of a non-empty sample (mean of the middle pair for even sizes).
pub fn median(xs: &[f64]) -> Option<f64> {
    quantile(xs, 0.5)
}

/// Linear-interpolation quantile.
pub fn quantile(xs: &[f64], q: f64) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(s[lo] + (s[hi] - s[lo]) * (pos - lo as f64))
}

fn mean_sd(samples: &[&[f64]], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let m = samples.len() as f64;
    let mut mean = vec![f64::NAN; dim];
    let mut sd = vec![f64::NAN; dim];
    if samples.is_empty() {
        return (mean, sd);
    }
    for p in 0..dim {
        mean[p] = samples.iter().map(|s| s[p]).sum::<f64>() / m;
        if samples.len() > 1 {
            let ss: f64 = samples.iter().map(|s| (s[p] - mean[p]).powi(2)).sum();
            sd[p] = (ss / (m - 1.0)).sqrt();
        }
    }
    (mean, sd)
}

struct Truth {
    vector: Vec<f64>,
    edges: Vec<(usize, usize)>,
    nx: usize,
    ny: usize,
}

fn run_one(
    cfg: &ExperimentConfig,
    model: &DiscreteModel,
    truth: &Truth,
    set: usize,
    run: usize,
    n: usize,
    samples: usize,
) -> RunOutcome {
    let start = Instant::now();
    let seed = derive_seed(cfg.seed, set, run);
    let (r_seed, e_seed) = signal_seeds(seed);
    let result = (|| -> Result<_> {
        let r = white_excitation(model.excitations(), samples, cfg.excitation_variance, r_seed)?;
        let noise = NoiseSpec {
            lambda: model.lambda.clone(),
            seed: e_seed,
        };
        let data = generate(model, &r, &noise)?;
        Ok(identify(&data, &cfg.spec, n, &cfg.options)?)
    })();
    let mut out = RunOutcome {
        run,
        seed,
        estimate: None,
        rmse: None,
        topology_correct: None,
        iterations: None,
        warnings: Vec::new(),
        error: None,
        seconds: 0.0,
    };
    match result {
        Ok(res) => {
            let est = component_vector(&res.continuous, truth.nx, truth.ny);
            if est.iter().all(|v| v.is_finite()) {
                out.rmse = rmse(&est, &truth.vector).ok();
                out.estimate = Some(est);
                out.topology_correct = Some(res.topology == truth.edges);
                out.iterations = Some(res.structured.iterations);
            } else {
                out.error = Some("non-finite estimate".into());
            }
            out.warnings = res.diagnostics.warnings;
        }
        Err(e) => out.error = Some(e.to_string()),
    }
    out.seconds = start.elapsed().as_secs_f64();
    out
}

/// Runs every schedule entry with `cfg.runs` replications. Runs execute in
/// parallel; results are ordered by run index.
pub fn run_schedule(cfg: &ExperimentConfig, name: &str) -> Result<ExperimentReport> {
    cfg.validate().map_err(HarnessError::Input)?;
    let start = Instant::now();
    let model = cfg.network.model()?;
    let net = &cfg.network.network;
    let truth = Truth {
        vector: component_vector(net, net.nx(), net.ny()),
        edges: net.edges(),
        nx: net.nx(),
        ny: net.ny(),
    };
    let mut sets = Vec::with_capacity(cfg.schedule.len());
    for (set, &(n, samples)) in cfg.schedule.iter().enumerate() {
        let set_start = Instant::now();
        let runs: Vec<RunOutcome> = (0..cfg.runs)
            .into_par_iter()
            .map(|run| run_one(cfg, &model, &truth, set, run, n, samples))
            .collect();
        let estimates: Vec<&[f64]> = runs.iter().filter_map(|r| r.estimate.as_deref()).collect();
        let (mean, sd) = mean_sd(&estimates, truth.vector.len());
        let rmses: Vec<f64> = runs.iter().filter_map(|r| r.rmse).collect();
        sets.push(SetReport {
            arx_order: n,
            samples,
            rate: (n as f64).powi(4) / samples as f64,
            failures: runs.iter().filter(|r| r.error.is_some()).count(),
            topology_correct: runs.iter().filter(|r| r.topology_correct == Some(true)).count(),
            median_rmse: median(&rmses),
            mean,
            sd,
            runs,
            seconds: set_start.elapsed().as_secs_f64(),
        });
    }
    Ok(ExperimentReport {
        name: name.to_string(),
        master_seed: cfg.seed,
        parameter_names: component_names(net.nodes(), truth.nx, truth.ny),
        truth: truth.vector,
        true_edges: truth.edges.iter().map(|(j, k)| [j + 1, k + 1]).collect(),
        sets,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// RMSE over a schedule of increasing ARX orders and data lengths.
pub fn run_experiment1(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    run_schedule(cfg, "exp1")
}

/// Parameter means and spreads at a single `(n, N)` setting.
pub fn run_experiment2(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    if cfg.schedule.len() != 1 {
        return Err(HarnessError::Input(format!(
            "exp2 takes a single (n, N) entry, found {}",
            cfg.schedule.len()
        )));
    }
    run_schedule(cfg, "exp2")
}

/// Per-run samples: `set,n,N,run,rmse,<parameters>`; failed runs keep empty
/// fields.
pub fn samples_csv(report: &ExperimentReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["set", "n", "N", "run", "rmse"].iter().map(|s| s.to_string()).collect();
    header.extend(report.parameter_names.iter().cloned());
    w.write_record(&header)?;
    for (s, set) in report.sets.iter().enumerate() {
        for run in &set.runs {
            let mut row = vec![
                (s + 1).to_string(),
                set.arx_order.to_string(),
                set.samples.to_string(),
                run.run.to_string(),
                run.rmse.map(|v| format!("{v:.16e}")).unwrap_or_default(),
            ];
            match &run.estimate {
                Some(e) => row.extend(e.iter().map(|v| format!("{v:.16e}"))),
                None => row.extend(std::iter::repeat_n(String::new(), report.truth.len())),
            }
            w.write_record(&row)?;
        }
    }
    let bytes = w
        .into_inner()
        .map_err(|e| HarnessError::Input(format!("csv buffer: {e}")))?;
    String::from_utf8(bytes).map_err(|e| HarnessError::Input(e.to_string()))
}
