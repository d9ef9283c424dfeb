//! Builds one experiment from a config, runs it and writes its CSV.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use dprgc_core::algorithms::{run_algorithm, CheckpointPlan, RunSpec, StepSizes};
use dprgc_core::manifold::StiefelPoint;
use dprgc_core::metrics::{run_log_csv, RunLog, StopReason};
use dprgc_core::problems::{gen_synthetic, load_mnist_idx, split_rows, PcaProblem};
use dprgc_core::seed::stream_rng;
use dprgc_core::topology::{gen_erdos_renyi, gen_ring, metropolis_weights, MixingMatrix};

use crate::config::{ExperimentConfig, GraphConfig, ProblemConfig};
use crate::error::{HarnessError, Result};

/// Environment key naming the MNIST IDX image file.
pub const MNIST_ENV: &str = "MNIST_IMAGES";

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Problem, mixing matrix and shared initial point of one experiment.
#[derive(Debug, Clone)]
pub struct Instance {
    pub problem: PcaProblem,
    pub w: MixingMatrix,
    pub x0: StiefelPoint,
    pub truth: Option<StiefelPoint>,
}

/// Resolves the MNIST image path from the config, then from `MNIST_IMAGES`.
pub fn mnist_path(configured: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = configured {
        return Ok(p.to_path_buf());
    }
    match std::env::var_os(MNIST_ENV) {
        Some(v) if !v.is_empty() => Ok(PathBuf::from(v)),
        _ => Err(HarnessError::Data(format!(
            "no MNIST image file: set problem.path in the config or the {MNIST_ENV} environment key to an IDX image file"
        ))),
    }
}

pub fn build_problem(problem: &ProblemConfig) -> Result<PcaProblem> {
    match problem {
        ProblemConfig::Synthetic { n, m_per, d, r, xi, seed } => Ok(gen_synthetic(*n, *m_per, *d, *r, *xi, *seed)?),
        ProblemConfig::Mnist { path, n, r, seed } => {
            let path = mnist_path(path.as_deref())?;
            if !path.is_file() {
                return Err(HarnessError::Data(format!(
                    "MNIST image file {} does not exist (set problem.path or {MNIST_ENV})",
                    path.display()
                )));
            }
            let a = load_mnist_idx(&path)?;
            if a.nrows() % n != 0 {
                return Err(HarnessError::Config {
                    key: "problem.n".into(),
                    detail: format!("{} images do not split evenly over {n} agents", a.nrows()),
                });
            }
            let locals = split_rows(&a, *n, *seed)?;
            let unlabeled = PcaProblem::new(locals, *r, None)?;
            let truth = unlabeled.stacked_top_subspace()?;
            Ok(PcaProblem::new(unlabeled.locals().to_vec(), *r, Some(truth))?)
        }
    }
}

pub fn build_mixing(graph: &GraphConfig, n: usize) -> Result<MixingMatrix> {
    let g = match *graph {
        GraphConfig::Ring => gen_ring(n)?,
        GraphConfig::ErdosRenyi { p, seed } => gen_erdos_renyi(n, p, seed)?,
    };
    Ok(metropolis_weights(&g)?)
}

pub fn build_instance(cfg: &ExperimentConfig) -> Result<Instance> {
    let problem = build_problem(&cfg.problem)?;
    let w = build_mixing(&cfg.graph, cfg.problem.agents())?;
    let x0 = StiefelPoint::random(problem.d(), problem.r(), &mut stream_rng(cfg.init_seed, 0))?;
    let truth = problem.ground_truth().cloned();
    Ok(Instance { problem, w, x0, truth })
}

pub fn run_spec(cfg: &ExperimentConfig, inst: &Instance) -> Result<RunSpec> {
    let sizes = StepSizes::from_beta_hat(cfg.beta_hat, inst.problem.locals().len(), inst.problem.total_samples(), cfg.gamma)?;
    let checkpoint = match (&cfg.checkpoint_path, cfg.checkpoint_every) {
        (Some(path), every) if every > 0 => Some(CheckpointPlan { every, path: path.clone() }),
        _ => None,
    };
    Ok(RunSpec {
        algorithm: cfg.algorithm,
        compressor: cfg.compressor,
        sizes,
        iters: cfg.iters,
        stationarity_tol: cfg.stationarity_tol,
        x0: inst.x0.clone(),
        truth: inst.truth.clone(),
        accounting: cfg.accounting,
        checkpoint,
    })
}

/// Runs on a prebuilt instance; no files are written.
pub fn run_on(cfg: &ExperimentConfig, inst: &Instance) -> Result<RunLog> {
    Ok(run_algorithm(&inst.problem, &inst.w, &run_spec(cfg, inst)?)?)
}

/// CSV with `#` header lines (config hash, version, stop reason) before the
/// column header. Contains nothing time-dependent.
pub fn render_csv(cfg: &ExperimentConfig, log: &RunLog) -> String {
    let stop = match log.stop {
        StopReason::Budget => "budget",
        StopReason::Stationary => "stationary",
    };
    format!(
        "# config_hash={}\n# version={VERSION}\n# stop={stop}\n{}",
        cfg.hash(),
        run_log_csv(log)
    )
}

/// Writes the CSV and a `<path>.meta` sidecar holding the start timestamp.
pub fn write_outputs(path: &Path, cfg: &ExperimentConfig, log: &RunLog, started: SystemTime) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    fs::write(path, render_csv(cfg, log)).map_err(|e| HarnessError::io(path, e))?;
    let secs = started.duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let meta = format!(
        "config_hash={}\nversion={VERSION}\nstart_unix_seconds={secs}\nrows={}\n{}",
        cfg.hash(),
        log.rows.len(),
        cfg.canonical_text()
    );
    let meta_path = meta_path(path);
    fs::write(&meta_path, meta).map_err(|e| HarnessError::io(&meta_path, e))
}

pub fn meta_path(csv: &Path) -> PathBuf {
    let mut s = csv.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Builds, runs and, when `out_path` is set, writes the CSV.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunLog> {
    let started = SystemTime::now();
    let inst = build_instance(cfg)?;
    let log = run_on(cfg, &inst)?;
    if let Some(path) = &cfg.out_path {
        write_outputs(path, cfg, &log, started)?;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    fn small(extra: &str) -> ExperimentConfig {
        parse_config(&format!(
            "problem.n = 4\nproblem.m_per = 30\nproblem.d = 6\nproblem.r = 2\nbeta_hat = 20\n{}{extra}",
            if extra.contains("iters") { "" } else { "iters = 15\n" }
        ))
        .unwrap()
    }

    #[test]
    fn zero_iterations_gives_initial_row() {
        let log = run_experiment(&small("iters = 0\n")).unwrap();
        assert_eq!(log.rows.len(), 1);
        let csv = render_csv(&small("iters = 0\n"), &log);
        let body: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(body.len(), 2);
        assert!(body[1].starts_with("0,0,"));
    }

    #[test]
    fn accounting_is_conserved() {
        let log = run_experiment(&small("stationarity_tol = 0\n")).unwrap();
        assert_eq!(log.rows.len(), 16);
        let sum: u64 = log.rows.iter().map(|r| r.entries_this_iter).sum();
        assert_eq!(sum, log.total_entries());
        // 2 messages per agent, ceil(0.4 * 6) = 3 kept entries in each of 2 columns
        assert_eq!(log.rows[1].entries_this_iter, 2 * 4 * 3 * 2);
    }

    #[test]
    fn csv_is_deterministic_and_written() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("a/run.csv");
        let cfg = small(&format!("out_path = {}\n", out.display()));
        run_experiment(&cfg).unwrap();
        let first = fs::read(&out).unwrap();
        run_experiment(&cfg).unwrap();
        assert_eq!(first, fs::read(&out).unwrap());
        let meta = fs::read_to_string(meta_path(&out)).unwrap();
        assert!(meta.contains(&cfg.hash()));
        assert!(String::from_utf8(first).unwrap().starts_with(&format!("# config_hash={}", cfg.hash())));
    }

    #[test]
    fn identity_dprgc_rows_equal_dprgt() {
        let a = run_experiment(&small("algorithm = dprgt\ncompressor = identity\n")).unwrap();
        let b = run_experiment(&small("algorithm = dprgc\ncompressor = identity\n")).unwrap();
        assert_eq!(run_log_csv(&a), run_log_csv(&b));
    }

    #[test]
    fn missing_mnist_names_the_key() {
        let problem = ProblemConfig::Mnist {
            path: Some(PathBuf::from("/nonexistent/t10k-images-idx3-ubyte")),
            n: 8,
            r: 5,
            seed: 0,
        };
        let err = build_problem(&problem).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains(MNIST_ENV));
    }
}
