//! Compressed gradient tracking with projection (DPRGC), its uncompressed
//! special case (DPRGT), and a retraction-based tracking baseline (DRGTA).
//!
//! Every step reads a snapshot of all agents and writes fresh states, so the
//! result does not depend on the order agents are evaluated in.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::compression::{compress_difference, nnz_transmitted, CompressorSpec, EntryAccounting};
use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::manifold::{polar_project, retract_polar, tangent_component, StiefelPoint};
use crate::metrics::{compute_diagnostics, IterationDiagnostics, RunLog, RunRow, StopReason};
use crate::problems::LocalObjectives;
use crate::topology::MixingMatrix;

/// The six per-agent matrices plus the cached local gradient at x.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub x: StiefelPoint,
    /// Reference copy of x held by the neighbors.
    pub x_tilde: Mat,
    /// Σⱼ Wᵢⱼ x̃ⱼ as accumulated from received messages.
    pub s: Mat,
    /// Tracked gradient.
    pub d: Mat,
    pub d_tilde: Mat,
    /// Σⱼ Wᵢⱼ d̃ⱼ.
    pub u: Mat,
    /// grad fᵢ(x).
    pub grad: Mat,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSizes {
    pub eta: f64,
    pub gamma: f64,
}

impl StepSizes {
    pub fn new(eta: f64, gamma: f64) -> Result<Self> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::InvalidConfig(format!("eta must be positive, got {eta}")));
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::InvalidConfig(format!("gamma must lie in (0, 1], got {gamma}")));
        }
        Ok(StepSizes { eta, gamma })
    }

    /// η = β̂·n / Σᵢ mᵢ.
    pub fn from_beta_hat(beta_hat: f64, agents: usize, total_samples: usize, gamma: f64) -> Result<Self> {
        StepSizes::new(beta_hat * agents as f64 / total_samples as f64, gamma)
    }
}

/// Messages broadcast in one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkRound {
    pub messages_q: Vec<Mat>,
    pub messages_p: Vec<Mat>,
    pub entries_sent: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algorithm {
    Dprgc,
    Dprgt,
    Drgta,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::Dprgt, Algorithm::Dprgc, Algorithm::Drgta];
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Dprgc => "dprgc",
            Algorithm::Dprgt => "dprgt",
            Algorithm::Drgta => "drgta",
        })
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dprgc" => Ok(Algorithm::Dprgc),
            "dprgt" => Ok(Algorithm::Dprgt),
            "drgta" => Ok(Algorithm::Drgta),
            other => Err(Error::InvalidConfig(format!(
                "unknown algorithm '{other}', expected one of dprgc, dprgt, drgta"
            ))),
        }
    }
}

fn check_network<P: LocalObjectives + ?Sized>(problem: &P, w: &MixingMatrix) -> Result<usize> {
    let n = problem.num_agents();
    if w.n() != n {
        return Err(Error::InvalidSize(format!("mixing matrix has {} agents, problem has {n}", w.n())));
    }
    Ok(n)
}

/// Shared start: x = x̃ = x0, s = Wx0 = x0, d = d̃ = grad fᵢ(x0), u = W d̃.
pub fn dprgc_init<P: LocalObjectives + ?Sized>(x0: &StiefelPoint, w: &MixingMatrix, problem: &P) -> Result<Vec<AgentState>> {
    let n = check_network(problem, w)?;
    if x0.dims() != problem.dims() {
        return Err(Error::Dimension {
            context: "initial point",
            expected: problem.dims(),
            found: x0.dims(),
        });
    }
    let grads: Vec<Mat> = (0..n).map(|i| problem.riemannian_gradient(i, x0)).collect();
    let xs = vec![x0.as_mat().clone(); n];
    Ok((0..n)
        .map(|i| AgentState {
            x: x0.clone(),
            x_tilde: x0.as_mat().clone(),
            s: w.mix_row(i, &xs),
            d: grads[i].clone(),
            d_tilde: grads[i].clone(),
            u: w.mix_row(i, &grads),
            grad: grads[i].clone(),
        })
        .collect())
}

/// One iteration of compressed gradient tracking.
///
/// Per agent, from the entry snapshot:
/// x⁺ = P(x + γ(s − x̃) − η·P_{T_x}(d)); q = C(x⁺ − x̃); x̃⁺ = x̃ + q;
/// d⁺ = d + γ(u − d̃) + grad fᵢ(x⁺) − grad fᵢ(x); p = C(d⁺ − d̃); d̃⁺ = d̃ + p;
/// then s⁺ = s + Σⱼ Wᵢⱼ qⱼ and u⁺ = u + Σⱼ Wᵢⱼ pⱼ.
pub fn dprgc_step<P: LocalObjectives + ?Sized>(
    agents: &[AgentState],
    w: &MixingMatrix,
    spec: &CompressorSpec,
    sizes: StepSizes,
    problem: &P,
    accounting: EntryAccounting,
) -> Result<(Vec<AgentState>, NetworkRound)> {
    let n = check_network(problem, w)?;
    let StepSizes { eta, gamma } = sizes;
    let mut next = Vec::with_capacity(n);
    let mut messages_q = Vec::with_capacity(n);
    let mut messages_p = Vec::with_capacity(n);
    for (i, a) in agents.iter().enumerate() {
        let xm = a.x.as_mat();
        let step = xm + (&a.s - &a.x_tilde) * gamma - tangent_component(xm, &a.d) * eta;
        let x = polar_project(&step).map_err(|e| e.at_agent(i, None))?;
        let mut x_tilde = a.x_tilde.clone();
        let q = compress_difference(spec, &mut x_tilde, x.as_mat()).map_err(|e| e.at_agent(i, None))?;
        let grad = problem.riemannian_gradient(i, &x);
        let d = &a.d + (&a.u - &a.d_tilde) * gamma + &grad - &a.grad;
        let mut d_tilde = a.d_tilde.clone();
        let p = compress_difference(spec, &mut d_tilde, &d).map_err(|e| e.at_agent(i, None))?;
        messages_q.push(q);
        messages_p.push(p);
        next.push(AgentState {
            x,
            x_tilde,
            s: a.s.clone(),
            d,
            d_tilde,
            u: a.u.clone(),
            grad,
        });
    }
    for (i, a) in next.iter_mut().enumerate() {
        a.s += w.mix_row(i, &messages_q);
        a.u += w.mix_row(i, &messages_p);
    }
    let (rows, cols) = problem.dims();
    let entries_sent = 2 * n as u64 * nnz_transmitted(spec, rows, cols, accounting) as u64;
    Ok((
        next,
        NetworkRound {
            messages_q,
            messages_p,
            entries_sent,
        },
    ))
}

/// [`dprgc_step`] with the identity compressor.
pub fn dprgt_step<P: LocalObjectives + ?Sized>(
    agents: &[AgentState],
    w: &MixingMatrix,
    sizes: StepSizes,
    problem: &P,
) -> Result<(Vec<AgentState>, NetworkRound)> {
    dprgc_step(agents, w, &CompressorSpec::Identity, sizes, problem, EntryAccounting::ValuesOnly)
}

/// Retraction-based tracking:
/// x⁺ = R_x(γ·P_{T_x}(Σⱼ Wᵢⱼ xⱼ − x) − η·P_{T_x}(d)); d⁺ = Σⱼ Wᵢⱼ dⱼ + grad fᵢ(x⁺) − grad fᵢ(x).
///
/// Each agent broadcasts x and d in full; the reference and aggregate fields are
/// kept equal to what those messages imply (x̃ = x, d̃ = d, s = Wx, u = Wd).
pub fn drgta_step<P: LocalObjectives + ?Sized>(
    agents: &[AgentState],
    w: &MixingMatrix,
    sizes: StepSizes,
    problem: &P,
) -> Result<(Vec<AgentState>, NetworkRound)> {
    let n = check_network(problem, w)?;
    let StepSizes { eta, gamma } = sizes;
    let xs: Vec<Mat> = agents.iter().map(|a| a.x.as_mat().clone()).collect();
    let ds: Vec<Mat> = agents.iter().map(|a| a.d.clone()).collect();
    let mut next = Vec::with_capacity(n);
    for (i, a) in agents.iter().enumerate() {
        let xm = a.x.as_mat();
        let direction = tangent_component(xm, &(w.mix_row(i, &xs) - xm)) * gamma - tangent_component(xm, &a.d) * eta;
        let x = retract_polar(&a.x, &direction).map_err(|e| e.at_agent(i, None))?;
        let grad = problem.riemannian_gradient(i, &x);
        let d = w.mix_row(i, &ds) + &grad - &a.grad;
        next.push(AgentState {
            x_tilde: x.as_mat().clone(),
            x,
            s: Mat::zeros(0, 0),
            d_tilde: d.clone(),
            d,
            u: Mat::zeros(0, 0),
            grad,
        });
    }
    let new_xs: Vec<Mat> = next.iter().map(|a| a.x_tilde.clone()).collect();
    let new_ds: Vec<Mat> = next.iter().map(|a| a.d_tilde.clone()).collect();
    for (i, a) in next.iter_mut().enumerate() {
        a.s = w.mix_row(i, &new_xs);
        a.u = w.mix_row(i, &new_ds);
    }
    let (rows, cols) = problem.dims();
    Ok((
        next,
        NetworkRound {
            messages_q: new_xs,
            messages_p: new_ds,
            entries_sent: 2 * (n * rows * cols) as u64,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointPlan {
    pub every: usize,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub algorithm: Algorithm,
    /// Ignored by DPRGT and DRGTA.
    pub compressor: CompressorSpec,
    pub sizes: StepSizes,
    pub iters: usize,
    /// Stop once both terms of the stationarity pair are ≤ this; 0 disables.
    pub stationarity_tol: f64,
    pub x0: StiefelPoint,
    pub truth: Option<StiefelPoint>,
    pub accounting: EntryAccounting,
    pub checkpoint: Option<CheckpointPlan>,
}

pub fn step<P: LocalObjectives + ?Sized>(
    spec: &RunSpec,
    agents: &[AgentState],
    w: &MixingMatrix,
    problem: &P,
) -> Result<(Vec<AgentState>, NetworkRound)> {
    match spec.algorithm {
        Algorithm::Dprgc => dprgc_step(agents, w, &spec.compressor, spec.sizes, problem, spec.accounting),
        Algorithm::Dprgt => dprgt_step(agents, w, spec.sizes, problem),
        Algorithm::Drgta => drgta_step(agents, w, spec.sizes, problem),
    }
}

/// Init, then steps until the budget is spent or the run is stationary. One
/// row per iteration, starting with the initial state.
pub fn run_algorithm<P: LocalObjectives + ?Sized>(problem: &P, w: &MixingMatrix, spec: &RunSpec) -> Result<RunLog> {
    run_algorithm_with_state(problem, w, spec).map(|(log, _)| log)
}

/// [`run_algorithm`] that also returns the final agent states.
pub fn run_algorithm_with_state<P: LocalObjectives + ?Sized>(
    problem: &P,
    w: &MixingMatrix,
    spec: &RunSpec,
) -> Result<(RunLog, Vec<AgentState>)> {
    let mut agents = dprgc_init(&spec.x0, w, problem)?;
    let mut cumulative = 0u64;
    let mut rows = vec![make_row(0, &agents, w, problem, spec, 0, cumulative)];
    let mut stop = StopReason::Budget;
    for k in 1..=spec.iters {
        if is_stationary(rows.last().expect("initial row"), spec.stationarity_tol) {
            stop = StopReason::Stationary;
            break;
        }
        let (next, round) = step(spec, &agents, w, problem).map_err(|e| e.with_iteration(k))?;
        agents = next;
        cumulative += round.entries_sent;
        rows.push(make_row(k, &agents, w, problem, spec, round.entries_sent, cumulative));
        if let Some(plan) = &spec.checkpoint {
            if plan.every > 0 && k % plan.every == 0 {
                write_checkpoint(&plan.path, &agents)?;
            }
        }
    }
    if stop == StopReason::Budget && is_stationary(rows.last().expect("initial row"), spec.stationarity_tol) {
        stop = StopReason::Stationary;
    }
    Ok((RunLog { rows, stop }, agents))
}

fn is_stationary(row: &RunRow, tol: f64) -> bool {
    tol > 0.0 && !row.tube_violation && row.diagnostics.consensus_error_mean <= tol && row.diagnostics.stationarity <= tol
}

fn make_row<P: LocalObjectives + ?Sized>(
    iter: usize,
    agents: &[AgentState],
    w: &MixingMatrix,
    problem: &P,
    spec: &RunSpec,
    entries_this_iter: u64,
    cumulative: u64,
) -> RunRow {
    let (diagnostics, tube_violation) = match compute_diagnostics(agents, problem, spec.truth.as_ref(), cumulative) {
        Ok(d) => (d, false),
        Err(_) => (IterationDiagnostics::unavailable(agents.len(), cumulative, spec.truth.is_some()), true),
    };
    let residuals = invariant_residuals(agents, w);
    RunRow {
        iter,
        epoch: iter,
        diagnostics,
        entries_this_iter,
        coupling_residual: residuals.coupling,
        tracking_residual: residuals.tracking,
        feasibility_residual: residuals.feasibility,
        tube_violation,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvariantResiduals {
    /// maxᵢ max(‖sᵢ − (W x̃)ᵢ‖, ‖uᵢ − (W d̃)ᵢ‖).
    pub coupling: f64,
    /// ‖mean d − mean grad fᵢ(xᵢ)‖.
    pub tracking: f64,
    /// maxᵢ max-abs of xᵢᵀxᵢ − I.
    pub feasibility: f64,
}

pub fn invariant_residuals(agents: &[AgentState], w: &MixingMatrix) -> InvariantResiduals {
    let x_tilde: Vec<Mat> = agents.iter().map(|a| a.x_tilde.clone()).collect();
    let d_tilde: Vec<Mat> = agents.iter().map(|a| a.d_tilde.clone()).collect();
    let mut coupling = 0.0_f64;
    for (i, a) in agents.iter().enumerate() {
        coupling = coupling
            .max((&a.s - w.mix_row(i, &x_tilde)).norm())
            .max((&a.u - w.mix_row(i, &d_tilde)).norm());
    }
    let d_mean = linalg::mean(agents.iter().map(|a| &a.d));
    let g_mean = linalg::mean(agents.iter().map(|a| &a.grad));
    InvariantResiduals {
        coupling,
        tracking: (d_mean - g_mean).norm(),
        feasibility: agents.iter().map(|a| a.x.residual()).fold(0.0, f64::max),
    }
}

/// Little-endian u64 header (n, d, r), then per agent x, x̃, s, d, d̃, u as
/// column-major little-endian f64.
pub fn write_checkpoint(path: &Path, agents: &[AgentState]) -> Result<()> {
    let (d, r) = agents.first().map(|a| a.x.dims()).unwrap_or((0, 0));
    let mut buf = Vec::with_capacity(24 + agents.len() * 6 * d * r * 8);
    for v in [agents.len(), d, r] {
        buf.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for a in agents {
        for m in [a.x.as_mat(), &a.x_tilde, &a.s, &a.d, &a.d_tilde, &a.u] {
            for v in m.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Per agent: [x, x̃, s, d, d̃, u].
pub fn read_checkpoint(path: &Path) -> Result<Vec<[Mat; 6]>> {
    let bytes = fs::read(path)?;
    let word = |k: usize, field: &'static str| -> Result<u64> {
        bytes
            .get(8 * k..8 * k + 8)
            .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
            .ok_or(Error::Format {
                field,
                detail: "checkpoint truncated inside the header".into(),
            })
    };
    let n = word(0, "n")? as usize;
    let d = word(1, "d")? as usize;
    let r = word(2, "r")? as usize;
    let body = &bytes[24..];
    if body.len() != n * 6 * d * r * 8 {
        return Err(Error::Format {
            field: "body",
            detail: format!("expected {} bytes for n={n}, d={d}, r={r}, found {}", n * 6 * d * r * 8, body.len()),
        });
    }
    let mut values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    Ok((0..n)
        .map(|_| std::array::from_fn(|_| Mat::from_iterator(d, r, values.by_ref().take(d * r))))
        .collect())
}
