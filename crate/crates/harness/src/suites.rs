//! Named batches of experiments, each writing a directory of CSVs plus a
//! `manifest.txt`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use dprgc_core::algorithms::Algorithm;
use dprgc_core::compression::CompressorSpec;
use dprgc_core::consensus::ConsensusVariant;
use dprgc_core::manifold::{estimate_constants, ConstantSampling, SmoothnessConstants};
use dprgc_core::metrics::StopReason;

use crate::config::{hex_sha256, parse_config, ExperimentConfig, GraphConfig, ProblemConfig};
use crate::error::{HarnessError, Result};
use crate::experiment::{build_instance, mnist_path, run_on, write_outputs, Instance};
use crate::verify::{consensus_rate_check, ring_mixing};

/// The shipped synthetic configuration.
pub const SYNTHETIC_CONFIG: &str = include_str!("../../../configs/synthetic.conf");
/// The shipped MNIST configuration; the image path comes from `MNIST_IMAGES`.
pub const MNIST_CONFIG: &str = include_str!("../../../configs/mnist.conf");

pub const SUITES: &[&str] = &["figures-synthetic", "figures-mnist", "consensus-rates", "grid-search"];

/// One written file and the hash of the config that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub file: String,
    pub config_hash: String,
    pub sha256: String,
}

fn write_file(dir: &Path, name: &str, contents: &str, config_hash: &str) -> Result<ManifestEntry> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| HarnessError::io(&path, e))?;
    Ok(ManifestEntry {
        file: name.into(),
        config_hash: config_hash.into(),
        sha256: hex_sha256(contents.as_bytes()),
    })
}

fn write_manifest(dir: &Path, suite: &str, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = format!("# suite={suite}\nfile\tconfig_hash\tsha256\n");
    for e in entries {
        writeln!(text, "{}\t{}\t{}", e.file, e.config_hash, e.sha256).expect("writing to a String");
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, text).map_err(|e| HarnessError::io(&path, e))
}

/// Runs suite `name`, writing into `out`. `base` overrides the suite's
/// shipped config where one applies.
pub fn run_suite(name: &str, out: &Path, base: Option<&ExperimentConfig>) -> Result<Vec<ManifestEntry>> {
    if !SUITES.contains(&name) {
        return Err(HarnessError::Config {
            key: "suite".into(),
            detail: format!("unknown suite '{name}'; valid suites: {}", SUITES.join(", ")),
        });
    }
    fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    let entries = match name {
        "figures-synthetic" => {
            let cfg = match base {
                Some(c) => c.clone(),
                None => parse_config(SYNTHETIC_CONFIG)?,
            };
            figures(&cfg, out)?
        }
        "figures-mnist" => {
            let mut cfg = match base {
                Some(c) => c.clone(),
                None => parse_config(MNIST_CONFIG)?,
            };
            match &mut cfg.problem {
                ProblemConfig::Mnist { path, .. } => *path = Some(mnist_path(path.as_deref())?),
                ProblemConfig::Synthetic { .. } => {
                    return Err(HarnessError::Config {
                        key: "problem.kind".into(),
                        detail: "figures-mnist needs problem.kind = mnist".into(),
                    })
                }
            }
            figures(&cfg, out)?
        }
        "consensus-rates" => consensus_rates(out)?,
        _ => {
            let cfg = match base {
                Some(c) => c.clone(),
                None => parse_config(SYNTHETIC_CONFIG)?,
            };
            grid_search(&cfg, out)?.1
        }
    };
    write_manifest(out, name, &entries)?;
    Ok(entries)
}

/// Graphs of the figure set: ER p=0.3, ER p=0.6 (sharing the config's graph
/// seed) and the ring.
pub fn figure_graphs(cfg: &ExperimentConfig) -> Vec<GraphConfig> {
    let seed = match cfg.graph {
        GraphConfig::ErdosRenyi { seed, .. } => seed,
        GraphConfig::Ring => dprgc_core::seed::sub_seed(cfg.master_seed, dprgc_core::seed::streams::GRAPH),
    };
    vec![
        GraphConfig::ErdosRenyi { p: 0.3, seed },
        GraphConfig::ErdosRenyi { p: 0.6, seed },
        GraphConfig::Ring,
    ]
}

/// (algorithm, compressor) cells: the uncompressed baselines use the identity,
/// DPRGC uses the configured compressor.
pub fn figure_cells(cfg: &ExperimentConfig) -> Vec<(Algorithm, CompressorSpec)> {
    Algorithm::ALL
        .iter()
        .map(|&a| match a {
            Algorithm::Dprgc => (a, cfg.compressor),
            _ => (a, CompressorSpec::Identity),
        })
        .collect()
}

fn figures(base: &ExperimentConfig, out: &Path) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    let mut problem_cache: Option<Instance> = None;
    for graph in figure_graphs(base) {
        let mut cfg = base.clone();
        cfg.graph = graph;
        let inst = match problem_cache.take() {
            // The problem and x0 do not depend on the graph; only rebuild W.
            Some(prev) => Instance {
                w: crate::experiment::build_mixing(&graph, cfg.problem.agents())?,
                ..prev
            },
            None => build_instance(&cfg)?,
        };
        for (algorithm, compressor) in figure_cells(base) {
            cfg.algorithm = algorithm;
            cfg.compressor = compressor;
            let started = SystemTime::now();
            let log = run_on(&cfg, &inst)?;
            let name = format!("{}_{}_{}.csv", graph.label(), algorithm, compressor.to_string().replace(':', ""));
            let path = out.join(&name);
            write_outputs(&path, &cfg, &log, started)?;
            let bytes = fs::read(&path).map_err(|e| HarnessError::io(&path, e))?;
            entries.push(ManifestEntry {
                file: name,
                config_hash: cfg.hash(),
                sha256: hex_sha256(&bytes),
            });
        }
        problem_cache = Some(inst);
    }
    Ok(entries)
}

/// Ring-8 consensus trajectories for both variants, with the rate each step
/// is checked against.
fn consensus_rates(out: &Path) -> Result<Vec<ManifestEntry>> {
    let (n, d, r, gamma) = (8, 10, 5, 1.0);
    let w = ring_mixing(n)?;
    let sc = sampled_constants(d, r, n, 2000, 0)?;
    let tag = hex_sha256(format!("consensus-rates n={n} d={d} r={r} gamma={gamma} m1={}", sc.m1).as_bytes());
    let mut entries = Vec::new();
    for variant in [ConsensusVariant::Projected, ConsensusVariant::Riemannian] {
        let check = consensus_rate_check(variant, &w, gamma, &sc, d, r, 200, 1e-12, 1)?;
        let mut csv = format!(
            "# sigma2={:.16e}\n# delta={:.16e}\n# rate_threshold={:.16e}\niteration,consensus_error,rho1,rho2,rate_bound\n",
            check.sigma2, check.delta, check.threshold
        );
        let rates = dprgc_core::consensus::theoretical_rates(&sc, check.sigma2, gamma, check.delta)?;
        for (k, e) in check.errors.iter().enumerate() {
            writeln!(csv, "{k},{e:.16e},{:.16e},{:.16e},{:.16e}", rates.rho1, rates.rho2, check.bounds[k]).expect("writing to a String");
        }
        entries.push(write_file(out, &format!("{}.csv", variant.name()), &csv, &tag)?);
    }
    Ok(entries)
}

/// Sampled smoothness constants for St(d, r) with `agents`-tuples.
pub fn sampled_constants(d: usize, r: usize, agents: usize, samples: usize, seed: u64) -> Result<SmoothnessConstants> {
    Ok(estimate_constants(&ConstantSampling { d, r, agents, samples, seed })?)
}

/// Step-size grid: η on a log grid over [1e-3, 1e1] with 10 points per decade;
/// β̂ = η·Σm/n.
pub fn eta_grid() -> Vec<f64> {
    (0..=40).map(|k| 10f64.powf(-3.0 + k as f64 / 10.0)).collect()
}

/// One grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub beta_hat: f64,
    pub eta: f64,
    /// Iteration at which the stationarity stop fired, if it did.
    pub stopped_at: Option<usize>,
    pub final_stationarity: f64,
    pub final_procrustes: Option<f64>,
}

/// Sweeps the grid for the config's algorithm; the best point stops earliest,
/// ties broken by final stationarity. Returns the points and the best index.
pub fn grid_points(base: &ExperimentConfig) -> Result<(Vec<GridPoint>, usize)> {
    let inst = build_instance(base)?;
    let n = inst.problem.locals().len() as f64;
    let total = inst.problem.total_samples() as f64;
    let mut points = Vec::new();
    for eta in eta_grid() {
        let mut cfg = base.clone();
        cfg.beta_hat = eta * total / n;
        let p = match run_on(&cfg, &inst) {
            Ok(log) => {
                let last = log.last();
                GridPoint {
                    beta_hat: cfg.beta_hat,
                    eta,
                    stopped_at: (log.stop == StopReason::Stationary).then_some(last.iter),
                    final_stationarity: last.diagnostics.stationarity,
                    final_procrustes: last.diagnostics.procrustes_to_truth,
                }
            }
            Err(HarnessError::Core(e)) if e.is_numerical() => GridPoint {
                beta_hat: cfg.beta_hat,
                eta,
                stopped_at: None,
                final_stationarity: f64::NAN,
                final_procrustes: None,
            },
            Err(e) => return Err(e),
        };
        points.push(p);
    }
    let best = select_best(&points);
    Ok((points, best))
}

/// Index of the best grid point. A point is eligible when it and the next
/// larger step both reached the stop, which keeps the choice away from the
/// stability edge where small perturbations (a different compressor, the
/// uncompressed baseline) diverge. Among eligible points the earliest stop
/// wins, ties broken by final stationarity. Without eligible points, the
/// earliest stop or else the smallest final stationarity wins.
pub fn select_best(points: &[GridPoint]) -> usize {
    let stat = |p: &GridPoint| if p.final_stationarity.is_finite() { p.final_stationarity } else { f64::INFINITY };
    let by_stop = |a: &usize, b: &usize| {
        let (pa, pb) = (&points[*a], &points[*b]);
        pa.stopped_at
            .unwrap_or(usize::MAX)
            .cmp(&pb.stopped_at.unwrap_or(usize::MAX))
            .then(stat(pa).total_cmp(&stat(pb)))
    };
    let eligible: Vec<usize> = (0..points.len().saturating_sub(1))
        .filter(|&i| points[i].stopped_at.is_some() && points[i + 1].stopped_at.is_some())
        .collect();
    eligible
        .into_iter()
        .min_by(by_stop)
        .unwrap_or_else(|| (0..points.len()).min_by(by_stop).expect("non-empty grid"))
}

fn grid_search(base: &ExperimentConfig, out: &Path) -> Result<(usize, Vec<ManifestEntry>)> {
    let (points, best) = grid_points(base)?;
    let mut csv = format!("# best_beta_hat={:.16e}\nbeta_hat,eta,stopped_at,final_stationarity,final_procrustes\n", points[best].beta_hat);
    for p in &points {
        writeln!(
            csv,
            "{:.16e},{:.16e},{},{:.16e},{}",
            p.beta_hat,
            p.eta,
            p.stopped_at.map(|k| k.to_string()).unwrap_or_default(),
            p.final_stationarity,
            p.final_procrustes.map(|v| format!("{v:.16e}")).unwrap_or_default()
        )
        .expect("writing to a String");
    }
    let entry = write_file(out, "grid.csv", &csv, &base.hash())?;
    Ok((best, vec![entry]))
}

/// Default output directory for a suite.
pub fn default_out(name: &str) -> PathBuf {
    PathBuf::from("out").join(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_suite_lists_valid_names() {
        let dir = tempfile::tempdir().unwrap();
        let err = run_suite("figures-cifar", dir.path(), None).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let msg = err.to_string();
        for s in SUITES {
            assert!(msg.contains(s), "{msg}");
        }
    }

    #[test]
    fn grid_spans_the_log_range() {
        let g = eta_grid();
        assert_eq!(g.len(), 41);
        assert!((g[0] - 1e-3).abs() < 1e-18 && (g[40] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn selection_keeps_a_stability_margin() {
        let pt = |stopped_at: Option<usize>, stat: f64| GridPoint {
            beta_hat: 1.0,
            eta: 1.0,
            stopped_at,
            final_stationarity: stat,
            final_procrustes: None,
        };
        let points = [pt(None, 1e-3), pt(Some(900), 1e-17), pt(Some(700), 1e-17), pt(Some(600), 1e-18), pt(None, 1e-2)];
        assert_eq!(select_best(&points), 2);
        assert_eq!(select_best(&[pt(None, 1e-3), pt(None, 1e-5)]), 1);
        assert_eq!(select_best(&[pt(None, 1e-3), pt(Some(5), 1e-17)]), 1);
    }

    #[test]
    fn shipped_configs_parse() {
        let s = parse_config(SYNTHETIC_CONFIG).unwrap();
        assert!(matches!(s.problem, ProblemConfig::Synthetic { n: 8, m_per: 1000, d: 10, r: 5, .. }));
        let m = parse_config(MNIST_CONFIG).unwrap();
        assert!(matches!(m.problem, ProblemConfig::Mnist { n: 8, r: 5, .. }));
    }

    #[test]
    fn small_figure_suite_writes_nine_cells() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse_config("problem.n = 4\nproblem.m_per = 20\nproblem.d = 5\nproblem.r = 2\nbeta_hat = 10\niters = 5\n").unwrap();
        let entries = run_suite("figures-synthetic", dir.path(), Some(&cfg)).unwrap();
        assert_eq!(entries.len(), 9);
        let manifest = fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
        assert_eq!(manifest.lines().count(), 2 + 9);
        assert!(entries.iter().any(|e| e.file == "ring_dprgc_topk0.4.csv"));
    }

    #[test]
    fn consensus_suite_writes_both_variants() {
        let dir = tempfile::tempdir().unwrap();
        let entries = run_suite("consensus-rates", dir.path(), None).unwrap();
        let names: Vec<_> = entries.iter().map(|e| e.file.as_str()).collect();
        assert_eq!(names, ["pgd.csv", "rgd.csv"]);
    }
}
