//! Stationarity, the Ω error quantities, run logs and their CSV form.
//!
//! Stacked quantities follow ‖𝐯‖² = Σᵢ‖vᵢ‖².

use std::fmt::Write as _;

use crate::algorithms::AgentState;
use crate::consensus::induced_mean;
use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::manifold::{procrustes_distance, tangent_component, StiefelPoint, PROXIMAL_RADIUS};
use crate::problems::LocalObjectives;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationDiagnostics {
    /// ‖𝐱 − 𝐱̃‖².
    pub omega1: f64,
    /// ‖𝐝 − 𝐝̃‖².
    pub omega2: f64,
    /// ‖𝐱 − 𝐱̄‖².
    pub omega3: f64,
    /// ‖𝐝 − 𝐝̂‖².
    pub omega4: f64,
    /// ‖𝐝̂‖² = n·‖mean d‖².
    pub omega5: f64,
    /// omega3 / n.
    pub consensus_error_mean: f64,
    /// ‖grad f(x̄)‖².
    pub stationarity: f64,
    pub procrustes_to_truth: Option<f64>,
    /// (1/n)·Σ f_i(x_i).
    pub objective: f64,
    pub cumulative_entries: u64,
    pub agents: usize,
}

impl IterationDiagnostics {
    /// Row recorded when the induced mean left the tube: every metric is NaN.
    pub fn unavailable(agents: usize, cumulative_entries: u64, with_truth: bool) -> Self {
        IterationDiagnostics {
            agents,
            omega1: f64::NAN,
            omega2: f64::NAN,
            omega3: f64::NAN,
            omega4: f64::NAN,
            omega5: f64::NAN,
            consensus_error_mean: f64::NAN,
            stationarity: f64::NAN,
            procrustes_to_truth: with_truth.then_some(f64::NAN),
            objective: f64::NAN,
            cumulative_entries,
        }
    }

    /// ‖ĝ‖² = omega5 / n, the squared norm of the mean tracked gradient.
    pub fn mean_gradient_sq(&self) -> f64 {
        self.omega5 / self.agents as f64
    }
}

/// ((1/n)Σ‖xᵢ − x̄‖², ‖P_{T_x̄}((1/n)Σ∇fᵢ(x̄))‖²).
///
/// The second term uses every agent's data and is a central diagnostic only.
pub fn stationarity_pair<P: LocalObjectives + ?Sized>(points: &[StiefelPoint], problem: &P) -> Result<(f64, f64)> {
    let bar = induced_mean(points)?;
    let n = points.len() as f64;
    let consensus = points.iter().map(|p| (p.as_mat() - bar.as_mat()).norm_squared()).sum::<f64>() / n;
    Ok((consensus, global_gradient(&bar, problem).norm_squared()))
}

/// grad f(x) for f = (1/n)Σ fᵢ.
pub fn global_gradient<P: LocalObjectives + ?Sized>(x: &StiefelPoint, problem: &P) -> Mat {
    let n = problem.num_agents();
    let mut g = Mat::zeros(x.as_mat().nrows(), x.as_mat().ncols());
    for i in 0..n {
        g += problem.euclidean_gradient(i, x);
    }
    g /= n as f64;
    tangent_component(x.as_mat(), &g)
}

pub fn compute_diagnostics<P: LocalObjectives + ?Sized>(
    agents: &[AgentState],
    problem: &P,
    truth: Option<&StiefelPoint>,
    cumulative_entries: u64,
) -> Result<IterationDiagnostics> {
    let n = agents.len();
    let points: Vec<StiefelPoint> = agents.iter().map(|a| a.x.clone()).collect();
    let bar = induced_mean(&points)?;
    let nf = n as f64;
    let omega1 = agents.iter().map(|a| (a.x.as_mat() - &a.x_tilde).norm_squared()).sum();
    let omega2 = agents.iter().map(|a| (&a.d - &a.d_tilde).norm_squared()).sum();
    let omega3: f64 = points.iter().map(|p| (p.as_mat() - bar.as_mat()).norm_squared()).sum();
    let d_hat = linalg::mean(agents.iter().map(|a| &a.d));
    let omega4 = agents.iter().map(|a| (&a.d - &d_hat).norm_squared()).sum();
    let omega5 = nf * d_hat.norm_squared();
    let stationarity = global_gradient(&bar, problem).norm_squared();
    let procrustes_to_truth = truth.map(|t| procrustes_distance(&bar, t)).transpose()?;
    let objective = (0..n).map(|i| problem.value(i, &agents[i].x)).sum::<f64>() / nf;
    Ok(IterationDiagnostics {
        omega1,
        omega2,
        omega3,
        omega4,
        omega5,
        consensus_error_mean: omega3 / nf,
        stationarity,
        procrustes_to_truth,
        objective,
        cumulative_entries,
        agents: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanGapReport {
    /// ‖x̄ − x̂‖.
    pub lhs: f64,
    /// M2·‖𝐱 − 𝐱̄‖²/n.
    pub rhs: f64,
    pub holds: bool,
}

/// Checks ‖x̄ − x̂‖ ≤ M2·‖𝐱 − 𝐱̄‖²/n; requires maxᵢ‖xᵢ − x̄‖ ≤ R/2.
pub fn mean_gap_check(points: &[StiefelPoint], m2: f64) -> Result<MeanGapReport> {
    let bar = induced_mean(points)?;
    let n = points.len() as f64;
    let spread = points.iter().map(|p| (p.as_mat() - bar.as_mat()).norm()).fold(0.0, f64::max);
    if spread > PROXIMAL_RADIUS / 2.0 {
        return Err(Error::OutOfRange(format!(
            "max agent distance to the induced mean is {spread}, above R/2 = {}",
            PROXIMAL_RADIUS / 2.0
        )));
    }
    let hat = linalg::mean(points.iter().map(StiefelPoint::as_mat));
    let lhs = (bar.as_mat() - hat).norm();
    let rhs = m2 * points.iter().map(|p| (p.as_mat() - bar.as_mat()).norm_squared()).sum::<f64>() / n;
    Ok(MeanGapReport {
        lhs,
        rhs,
        holds: lhs <= rhs + 1e-9,
    })
}

/// Per-iteration record of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub iter: usize,
    /// One full local-gradient pass per iteration, so epoch = iter.
    pub epoch: usize,
    pub diagnostics: IterationDiagnostics,
    pub entries_this_iter: u64,
    /// maxᵢ max(‖sᵢ − (W x̃)ᵢ‖, ‖uᵢ − (W d̃)ᵢ‖).
    pub coupling_residual: f64,
    /// ‖mean d − mean grad fᵢ(xᵢ)‖.
    pub tracking_residual: f64,
    /// maxᵢ of the Stiefel residual of xᵢ.
    pub feasibility_residual: f64,
    /// The induced mean left the tube; `diagnostics` is all NaN.
    pub tube_violation: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Budget,
    Stationary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub rows: Vec<RunRow>,
    pub stop: StopReason,
}

impl RunLog {
    pub fn last(&self) -> &RunRow {
        self.rows.last().expect("a run log always holds the initial row")
    }

    pub fn total_entries(&self) -> u64 {
        self.last().diagnostics.cumulative_entries
    }
}

pub const CSV_HEADER: &str = "iter,epoch,objective,consensus_error,stationarity,procrustes,omega1,omega2,omega3,omega4,omega5,entries_this_iter,cumulative_entries";

/// CSV body with one line per row; `consensus_error` is the mean squared
/// deviation (1/n)Σ‖xᵢ − x̄‖² and `procrustes` is empty without a ground truth.
pub fn run_log_csv(log: &RunLog) -> String {
    let mut out = String::with_capacity(256 * (log.rows.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for row in &log.rows {
        let d = &row.diagnostics;
        let procrustes = d.procrustes_to_truth.map(|v| format!("{v:.16e}")).unwrap_or_default();
        writeln!(
            out,
            "{},{},{:.16e},{:.16e},{:.16e},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{},{}",
            row.iter,
            row.epoch,
            d.objective,
            d.consensus_error_mean,
            d.stationarity,
            procrustes,
            d.omega1,
            d.omega2,
            d.omega3,
            d.omega4,
            d.omega5,
            row.entries_this_iter,
            d.cumulative_entries
        )
        .expect("writing to a String");
    }
    out
}

/// For each K, Σ_{k=1..K} ‖ĝₖ‖² = K·(running mean up to K). Bounded growth in K
/// is the O(1/K) decay of the mean.
pub fn rate_decay_check(log: &RunLog, windows: &[usize]) -> Result<Vec<(usize, f64)>> {
    windows
        .iter()
        .map(|&k| {
            if k == 0 || k >= log.rows.len() {
                return Err(Error::OutOfRange(format!(
                    "window K={k} needs iterations 1..={k}, log has {} rows",
                    log.rows.len()
                )));
            }
            let sum = log.rows[1..=k]
                .iter()
                .map(|r| r.diagnostics.mean_gradient_sq())
                .sum::<f64>();
            Ok((k, sum))
        })
        .collect()
}
