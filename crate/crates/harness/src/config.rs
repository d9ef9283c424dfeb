//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Nested keys are dotted
//! (`problem.kind = synthetic`). Unknown and repeated keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use dprgc_core::algorithms::Algorithm;
use dprgc_core::compression::{CompressorSpec, EntryAccounting};
use dprgc_core::seed::{streams, sub_seed};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum ProblemConfig {
    Synthetic {
        n: usize,
        m_per: usize,
        d: usize,
        r: usize,
        xi: f64,
        seed: u64,
    },
    Mnist {
        /// `None` defers to the MNIST_IMAGES environment key.
        path: Option<PathBuf>,
        n: usize,
        r: usize,
        seed: u64,
    },
}

impl ProblemConfig {
    pub fn agents(&self) -> usize {
        match self {
            ProblemConfig::Synthetic { n, .. } | ProblemConfig::Mnist { n, .. } => *n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GraphConfig {
    Ring,
    ErdosRenyi { p: f64, seed: u64 },
}

impl GraphConfig {
    /// Short label used in file names: `ring`, `er0.3`.
    pub fn label(&self) -> String {
        match self {
            GraphConfig::Ring => "ring".into(),
            GraphConfig::ErdosRenyi { p, .. } => format!("er{p}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub graph: GraphConfig,
    pub algorithm: Algorithm,
    pub compressor: CompressorSpec,
    pub beta_hat: f64,
    pub gamma: f64,
    pub iters: usize,
    /// 0 disables the stationarity stop.
    pub stationarity_tol: f64,
    pub out_path: Option<PathBuf>,
    pub master_seed: u64,
    pub init_seed: u64,
    pub accounting: EntryAccounting,
    pub checkpoint_every: usize,
    pub checkpoint_path: Option<PathBuf>,
}

/// Default stop threshold for both terms of the stationarity pair. Small
/// enough that the subspace error, which lags the gradient norm when the
/// eigengap is small, has also converged when the run stops.
pub const DEFAULT_STATIONARITY_TOL: f64 = 1e-16;

const KEYS: &[&str] = &[
    "problem.kind",
    "problem.n",
    "problem.m_per",
    "problem.d",
    "problem.r",
    "problem.xi",
    "problem.seed",
    "problem.path",
    "graph.kind",
    "graph.p",
    "graph.seed",
    "algorithm",
    "compressor",
    "beta_hat",
    "gamma",
    "iters",
    "stationarity_tol",
    "out_path",
    "master_seed",
    "init.seed",
    "comm.count_indices",
    "checkpoint.every",
    "checkpoint.path",
];

fn bad(key: &str, detail: impl Into<String>) -> HarnessError {
    HarnessError::Config {
        key: key.to_string(),
        detail: detail.into(),
    }
}

struct Fields(BTreeMap<String, String>);

impl Fields {
    fn raw(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .map(|v| v.parse::<T>().map_err(|e| bad(key, format!("cannot parse '{v}': {e}"))))
            .transpose()
    }

    fn get_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.parse(key)?.unwrap_or(default))
    }

    fn require<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.parse(key)?.ok_or_else(|| bad(key, "required key is missing"))
    }
}

fn positive(key: &str, v: usize) -> Result<usize> {
    if v == 0 {
        return Err(bad(key, "must be positive"));
    }
    Ok(v)
}

pub fn parse_config(source: &str) -> Result<ExperimentConfig> {
    let mut map = BTreeMap::new();
    for (lineno, line) in source.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(&format!("line {}", lineno + 1), format!("expected key = value, found '{line}'")))?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(bad(k, "unknown key"));
        }
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(bad(k, "key given more than once"));
        }
    }
    let f = Fields(map);

    let master_seed: u64 = f.get_or("master_seed", 0)?;
    let data_seed = f.get_or("problem.seed", sub_seed(master_seed, streams::DATA))?;
    let problem = match f.raw("problem.kind").unwrap_or("synthetic") {
        "synthetic" => {
            if f.raw("problem.path").is_some() {
                return Err(bad("problem.path", "only valid for problem.kind = mnist"));
            }
            let xi: f64 = f.get_or("problem.xi", 0.8)?;
            if !(xi > 0.0 && xi < 1.0) {
                return Err(bad("problem.xi", format!("must lie in (0, 1), got {xi}")));
            }
            let d = positive("problem.d", f.get_or("problem.d", 10)?)?;
            let r = positive("problem.r", f.get_or("problem.r", 5)?)?;
            if r > d {
                return Err(bad("problem.r", format!("must not exceed problem.d = {d}")));
            }
            ProblemConfig::Synthetic {
                n: positive("problem.n", f.get_or("problem.n", 8)?)?,
                m_per: positive("problem.m_per", f.get_or("problem.m_per", 1000)?)?,
                d,
                r,
                xi,
                seed: data_seed,
            }
        }
        "mnist" => {
            for key in ["problem.m_per", "problem.d", "problem.xi"] {
                if f.raw(key).is_some() {
                    return Err(bad(key, "only valid for problem.kind = synthetic"));
                }
            }
            let r = positive("problem.r", f.get_or("problem.r", 5)?)?;
            if r > 784 {
                return Err(bad("problem.r", "must not exceed 784"));
            }
            ProblemConfig::Mnist {
                path: f.raw("problem.path").map(PathBuf::from),
                n: positive("problem.n", f.get_or("problem.n", 8)?)?,
                r,
                seed: data_seed,
            }
        }
        other => return Err(bad("problem.kind", format!("expected synthetic or mnist, got '{other}'"))),
    };

    let graph = match f.raw("graph.kind").unwrap_or("er") {
        "ring" => {
            for key in ["graph.p", "graph.seed"] {
                if f.raw(key).is_some() {
                    return Err(bad(key, "only valid for graph.kind = er"));
                }
            }
            if problem.agents() < 3 {
                return Err(bad("graph.kind", "a ring needs at least 3 agents"));
            }
            GraphConfig::Ring
        }
        "er" => {
            let p: f64 = f.get_or("graph.p", 0.3)?;
            if !(p > 0.0 && p <= 1.0) {
                return Err(bad("graph.p", format!("must lie in (0, 1], got {p}")));
            }
            GraphConfig::ErdosRenyi {
                p,
                seed: f.get_or("graph.seed", sub_seed(master_seed, streams::GRAPH))?,
            }
        }
        other => return Err(bad("graph.kind", format!("expected ring or er, got '{other}'"))),
    };

    let algorithm = f
        .raw("algorithm")
        .unwrap_or("dprgc")
        .parse::<Algorithm>()
        .map_err(|e| bad("algorithm", e.to_string()))?;
    let compressor = f
        .raw("compressor")
        .unwrap_or("topk:0.4")
        .parse::<CompressorSpec>()
        .map_err(|e| bad("compressor", e.to_string()))?;
    let beta_hat: f64 = f.require("beta_hat")?;
    if !(beta_hat > 0.0 && beta_hat.is_finite()) {
        return Err(bad("beta_hat", format!("must be positive, got {beta_hat}")));
    }
    let gamma: f64 = f.get_or("gamma", 1.0)?;
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(bad("gamma", format!("must lie in (0, 1], got {gamma}")));
    }
    let stationarity_tol: f64 = f.get_or("stationarity_tol", DEFAULT_STATIONARITY_TOL)?;
    if !(stationarity_tol >= 0.0) {
        return Err(bad("stationarity_tol", "must be nonnegative"));
    }
    let checkpoint_every: usize = f.get_or("checkpoint.every", 0)?;
    let checkpoint_path = f.raw("checkpoint.path").map(PathBuf::from);
    if checkpoint_every > 0 && checkpoint_path.is_none() {
        return Err(bad("checkpoint.path", "required when checkpoint.every > 0"));
    }
    Ok(ExperimentConfig {
        problem,
        graph,
        algorithm,
        compressor,
        beta_hat,
        gamma,
        iters: f.get_or("iters", 3000)?,
        stationarity_tol,
        out_path: f.raw("out_path").map(PathBuf::from),
        master_seed,
        init_seed: f.get_or("init.seed", sub_seed(master_seed, streams::INIT))?,
        accounting: if f.get_or("comm.count_indices", false)? {
            EntryAccounting::ValuesAndIndices
        } else {
            EntryAccounting::ValuesOnly
        },
        checkpoint_every,
        checkpoint_path,
    })
}

impl ExperimentConfig {
    /// Every resolved field that affects the numbers, one `key = value` per
    /// line in a fixed order. Output and checkpoint paths are left out.
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            writeln!(out, "{k} = {v}").expect("writing to a String");
        };
        match &self.problem {
            ProblemConfig::Synthetic { n, m_per, d, r, xi, seed } => {
                put("problem.kind", "synthetic".into());
                put("problem.n", n.to_string());
                put("problem.m_per", m_per.to_string());
                put("problem.d", d.to_string());
                put("problem.r", r.to_string());
                put("problem.xi", xi.to_string());
                put("problem.seed", seed.to_string());
            }
            ProblemConfig::Mnist { n, r, seed, .. } => {
                put("problem.kind", "mnist".into());
                put("problem.n", n.to_string());
                put("problem.r", r.to_string());
                put("problem.seed", seed.to_string());
            }
        }
        match self.graph {
            GraphConfig::Ring => put("graph.kind", "ring".into()),
            GraphConfig::ErdosRenyi { p, seed } => {
                put("graph.kind", "er".into());
                put("graph.p", p.to_string());
                put("graph.seed", seed.to_string());
            }
        }
        put("algorithm", self.algorithm.to_string());
        put("compressor", self.compressor.to_string());
        put("beta_hat", self.beta_hat.to_string());
        put("gamma", self.gamma.to_string());
        put("iters", self.iters.to_string());
        put("stationarity_tol", self.stationarity_tol.to_string());
        put("master_seed", self.master_seed.to_string());
        put("init.seed", self.init_seed.to_string());
        put(
            "comm.count_indices",
            (self.accounting == EntryAccounting::ValuesAndIndices).to_string(),
        );
        out
    }

    /// SHA-256 of [`canonical_text`](Self::canonical_text), lowercase hex.
    pub fn hash(&self) -> String {
        hex_sha256(self.canonical_text().as_bytes())
    }
}

pub fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        write!(s, "{b:02x}").expect("writing to a String");
        s
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key_of(e: HarnessError) -> String {
        match e {
            HarnessError::Config { key, .. } => key,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_synthetic_defaults() {
        let cfg = parse_config("beta_hat = 1000\n").unwrap();
        match cfg.problem {
            ProblemConfig::Synthetic { n, m_per, d, r, xi, .. } => {
                assert_eq!((n, m_per, d, r), (8, 1000, 10, 5));
                assert_eq!(xi, 0.8);
            }
            _ => panic!("synthetic expected"),
        }
        assert_eq!(cfg.gamma, 1.0);
        assert_eq!(cfg.compressor, CompressorSpec::top_k(0.4).unwrap());
        assert_eq!(cfg.algorithm, Algorithm::Dprgc);
        assert!(matches!(cfg.graph, GraphConfig::ErdosRenyi { p, .. } if p == 0.3));
    }

    #[test]
    fn invalid_fields_are_named() {
        assert_eq!(key_of(parse_config("beta_hat = 1\ngamma = 1.5\n").unwrap_err()), "gamma");
        assert_eq!(key_of(parse_config("gamma = 1\n").unwrap_err()), "beta_hat");
        assert_eq!(key_of(parse_config("beta_hat = 1\nstep = 2\n").unwrap_err()), "step");
        assert_eq!(key_of(parse_config("beta_hat = 1\nbeta_hat = 2\n").unwrap_err()), "beta_hat");
        assert_eq!(key_of(parse_config("beta_hat = 1\ncompressor = topk:0\n").unwrap_err()), "compressor");
        assert_eq!(key_of(parse_config("beta_hat = 1\nproblem.kind = cifar\n").unwrap_err()), "problem.kind");
        assert_eq!(key_of(parse_config("beta_hat = x\n").unwrap_err()), "beta_hat");
        assert_eq!(key_of(parse_config("beta_hat = 1\ngraph.kind = ring\ngraph.p = 0.3\n").unwrap_err()), "graph.p");
    }

    #[test]
    fn comments_and_spacing() {
        let a = parse_config("# defaults\n\n  beta_hat=2000  \ncompressor = topk:0.4\n").unwrap();
        let b = parse_config("beta_hat = 2000").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn hash_tracks_numeric_fields_only() {
        let a = parse_config("beta_hat = 2000\nout_path = a.csv\n").unwrap();
        let b = parse_config("beta_hat = 2000\nout_path = b.csv\n").unwrap();
        let c = parse_config("beta_hat = 2001\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn seeds_fan_out_from_master() {
        let a = parse_config("beta_hat = 1\nmaster_seed = 5\n").unwrap();
        let b = parse_config("beta_hat = 1\nmaster_seed = 6\n").unwrap();
        assert_ne!(a.problem, b.problem);
        assert_ne!(a.init_seed, b.init_seed);
        let pinned = parse_config("beta_hat = 1\nmaster_seed = 6\nproblem.seed = 3\n").unwrap();
        assert!(matches!(pinned.problem, ProblemConfig::Synthetic { seed: 3, .. }));
    }

    #[test]
    fn mnist_config() {
        let cfg = parse_config("problem.kind = mnist\nproblem.path = /data/t10k\nbeta_hat = 0.5\n").unwrap();
        assert!(matches!(cfg.problem, ProblemConfig::Mnist { n: 8, r: 5, .. }));
        assert_eq!(key_of(parse_config("problem.kind = mnist\nproblem.d = 10\nbeta_hat = 1\n").unwrap_err()), "problem.d");
    }
}
