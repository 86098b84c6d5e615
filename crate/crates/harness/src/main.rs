use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use diffnet::config::{load_spec, ExperimentConfig, NetworkConfig};
use diffnet::experiment::{run_experiment1, run_experiment2, samples_csv, signal_seeds};
use diffnet::{csvio, report, HarnessError, Result};
use diffnet_core::arx::row_dim;
use diffnet_core::pipeline::{check_identifiability, check_informativity, identify, IdentifyOptions};
use diffnet_core::simulate::{generate, white_excitation, NoiseSpec};
use diffnet_core::structured::RefineOptions;

#[derive(Parser)]
#[command(name = "diffnet", version, about = "Identify diffusively coupled linear networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate node signals of a network file and write them as CSV.
    Simulate {
        #[arg(long)]
        network: PathBuf,
        #[arg(long)]
        samples: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Excitation signal, currently `white:var=<variance>`.
        #[arg(long, default_value = "white:var=1")]
        excitation: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate a network from a CSV signal file.
    Identify {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long = "arx-order")]
        arx_order: usize,
        /// Solve the first structured fit without covariance weighting.
        #[arg(long)]
        no_weighting: bool,
        #[arg(long, default_value_t = RefineOptions::default().max_iter)]
        max_iter: usize,
        #[arg(long, default_value_t = RefineOptions::default().tol)]
        tol: f64,
        /// Continue when identifiability or informativity checks fail.
        #[arg(long)]
        force: bool,
        /// Write the JSON report here instead of standard output.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Report identifiability of a model set and, with data, informativity.
    Check {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// ARX order used to size the informativity depth.
        #[arg(long = "arx-order", default_value_t = 5)]
        arx_order: usize,
        /// Explicit informativity lag depth.
        #[arg(long)]
        depth: Option<usize>,
    },
    /// Run a Monte-Carlo experiment.
    Experiment {
        kind: ExperimentKind,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Per-run samples for box plots.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ExperimentKind {
    Exp1,
    Exp2,
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_excitation(s: &str) -> Result<f64> {
    let var = s
        .strip_prefix("white:var=")
        .and_then(|v| v.parse::<f64>().ok())
        .filter(|v| *v > 0.0);
    var.ok_or_else(|| HarnessError::Input(format!("unsupported excitation '{s}' (expected white:var=<v>)")))
}

fn simulate(network: &Path, samples: usize, seed: u64, excitation: &str, out: &Path) -> Result<()> {
    let var = parse_excitation(excitation)?;
    let cfg = NetworkConfig::load(network)?;
    let model = cfg.model()?;
    let (r_seed, e_seed) = signal_seeds(seed);
    let r = white_excitation(model.excitations(), samples, var, r_seed)?;
    let data = generate(
        &model,
        &r,
        &NoiseSpec {
            lambda: model.lambda.clone(),
            seed: e_seed,
        },
    )?;
    csvio::save_dataset(out, &data)?;
    eprintln!("wrote {samples} samples of {} nodes to {}", model.nodes(), out.display());
    Ok(())
}

fn check(spec: &Path, data: Option<&Path>, arx_order: usize, depth: Option<usize>) -> Result<bool> {
    let spec = load_spec(spec)?;
    let ident = check_identifiability(&spec);
    for (k, status) in ident.conditions() {
        println!("condition {k}: {status}");
    }
    let mut pass = ident.pass();
    if let Some(path) = data {
        let data = csvio::load_dataset(path)?;
        let layout = spec.layout();
        if data.excitations() != layout.excitations {
            return Err(HarnessError::Input(format!(
                "data has {} excitations, model set {}",
                data.excitations(),
                layout.excitations
            )));
        }
        let depth = depth.unwrap_or_else(|| row_dim(layout.nodes, layout.excitations, arx_order));
        let info = check_informativity(&data.r, depth);
        println!(
            "informativity: {} (depth {}, eigenvalues {:e} .. {:e})",
            if info.pass { "PASS" } else { "FAIL" },
            info.depth,
            info.min_eigenvalue,
            info.max_eigenvalue
        );
        pass &= info.pass;
    }
    Ok(pass)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Simulate {
            network,
            samples,
            seed,
            excitation,
            out,
        } => simulate(&network, samples, seed, &excitation, &out)?,
        Command::Identify {
            data,
            spec,
            arx_order,
            no_weighting,
            max_iter,
            tol,
            force,
            report: out,
        } => {
            let data = csvio::load_dataset(&data)?;
            let spec = load_spec(&spec)?;
            let opts = IdentifyOptions {
                use_weighting: !no_weighting,
                refine: RefineOptions { max_iter, tol },
                force,
                ..IdentifyOptions::default()
            };
            let res = identify(&data, &spec, arx_order, &opts)?;
            for w in &res.diagnostics.warnings {
                eprintln!("warning: {w}");
            }
            let text = serde_json::to_string_pretty(&report::identify(&res))?;
            match out {
                Some(path) => write(&path, &text)?,
                None => println!("{text}"),
            }
        }
        Command::Check {
            spec,
            data,
            arx_order,
            depth,
        } => {
            if !check(&spec, data.as_deref(), arx_order, depth)? {
                return Ok(ExitCode::from(3));
            }
        }
        Command::Experiment {
            kind,
            config,
            runs,
            seed,
            out,
            csv,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(r) = runs {
                cfg.runs = r;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let rep = match kind {
                ExperimentKind::Exp1 => run_experiment1(&cfg)?,
                ExperimentKind::Exp2 => run_experiment2(&cfg)?,
            };
            for set in &rep.sets {
                eprintln!(
                    "n = {:2}, N = {:6}: median RMSE {:.4e}, {} failed, topology correct {}/{}",
                    set.arx_order,
                    set.samples,
                    set.median_rmse.unwrap_or(f64::NAN),
                    set.failures,
                    set.topology_correct,
                    set.runs.len()
                );
            }
            write(&out, &serde_json::to_string_pretty(&rep)?)?;
            if let Some(path) = csv {
                write(&path, &samples_csv(&rep)?)?;
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
