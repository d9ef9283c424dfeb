//! Single-step consensus on St(d, r): projected and Riemannian gradient steps
//! on φ(𝐱) = ¼Σᵢⱼ Wᵢⱼ‖xᵢ − xⱼ‖², plus the linear-rate bounds they obey.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::manifold::{polar_factor, polar_project, retract_polar, tangent_component, SmoothnessConstants, StiefelPoint};
use crate::topology::MixingMatrix;

/// Agent iterates together with their induced mean x̄ = P(x̂).
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusState {
    points: Vec<StiefelPoint>,
    induced_mean: StiefelPoint,
    consensus_error: f64,
}

impl ConsensusState {
    /// Fails with a tube violation when the arithmetic mean is at distance ≥ R
    /// from the manifold.
    pub fn new(points: Vec<StiefelPoint>) -> Result<Self> {
        let first = points.first().ok_or_else(|| Error::InvalidSize("consensus state with no agents".into()))?;
        let dims = first.dims();
        if let Some(bad) = points.iter().find(|p| p.dims() != dims) {
            return Err(Error::Dimension {
                context: "consensus state",
                expected: dims,
                found: bad.dims(),
            });
        }
        let induced_mean = induced_mean(&points)?;
        let consensus_error = stacked_distance(&points, &induced_mean).sqrt();
        Ok(ConsensusState {
            points,
            induced_mean,
            consensus_error,
        })
    }

    pub fn points(&self) -> &[StiefelPoint] {
        &self.points
    }

    pub fn into_points(self) -> Vec<StiefelPoint> {
        self.points
    }

    pub fn induced_mean(&self) -> &StiefelPoint {
        &self.induced_mean
    }

    /// ‖𝐱 − 𝐱̄‖ (stacked Frobenius).
    pub fn consensus_error(&self) -> f64 {
        self.consensus_error
    }

    pub fn n(&self) -> usize {
        self.points.len()
    }
}

/// x̄ = P(x̂) for the arithmetic mean x̂, requiring dist(x̂, M) < R.
pub fn induced_mean(points: &[StiefelPoint]) -> Result<StiefelPoint> {
    // Identical points are their own projection; skipping the SVD keeps the
    // consensus error of a shared start at exactly zero.
    if points.windows(2).all(|p| p[0] == p[1]) {
        return Ok(points[0].clone());
    }
    let hat = linalg::mean(points.iter().map(StiefelPoint::as_mat));
    let bar = polar_factor(&hat)?;
    let dist = (&hat - &bar).norm();
    if dist >= crate::manifold::PROXIMAL_RADIUS {
        return Err(Error::TubeViolation { dist });
    }
    Ok(StiefelPoint::from_orthonormal(bar))
}

/// Σᵢ‖xᵢ − c‖².
pub fn stacked_distance(points: &[StiefelPoint], center: &StiefelPoint) -> f64 {
    points.iter().map(|p| (p.as_mat() - center.as_mat()).norm_squared()).sum()
}

fn check_step(state: &ConsensusState, w: &MixingMatrix, gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidInput(format!("consensus step gamma must lie in [0, 1], got {gamma}")));
    }
    if w.n() != state.n() {
        return Err(Error::InvalidSize(format!(
            "mixing matrix is {}x{} but the state has {} agents",
            w.n(),
            w.n(),
            state.n()
        )));
    }
    Ok(())
}

fn mats(state: &ConsensusState) -> Vec<Mat> {
    state.points.iter().map(|p| p.as_mat().clone()).collect()
}

/// xᵢ ← P((1−γ)xᵢ + γΣⱼWᵢⱼxⱼ + offsetᵢ), all agents read the same snapshot.
///
/// `offsets` carries the η·dᵢ terms of the perturbed scheme; `None` is the pure
/// consensus step.
pub fn pgd_consensus_step_with_offsets(
    state: &ConsensusState,
    w: &MixingMatrix,
    gamma: f64,
    offsets: Option<&[Mat]>,
) -> Result<ConsensusState> {
    check_step(state, w, gamma)?;
    if let Some(o) = offsets {
        if o.len() != state.n() {
            return Err(Error::InvalidSize(format!("{} offsets for {} agents", o.len(), state.n())));
        }
    }
    let snapshot = mats(state);
    let next = (0..state.n())
        .map(|i| {
            let mut y = &snapshot[i] * (1.0 - gamma) + w.mix_row(i, &snapshot) * gamma;
            if let Some(o) = offsets {
                linalg::check_shape("consensus offset", state.points[i].dims(), &o[i])?;
                y += &o[i];
            }
            polar_project(&y).map_err(|e| e.at_agent(i, None))
        })
        .collect::<Result<Vec<_>>>()?;
    ConsensusState::new(next)
}

pub fn pgd_consensus_step(state: &ConsensusState, w: &MixingMatrix, gamma: f64) -> Result<ConsensusState> {
    pgd_consensus_step_with_offsets(state, w, gamma, None)
}

/// xᵢ ← R_{xᵢ}(−γ·P_{T_{xᵢ}}(xᵢ − ΣⱼWᵢⱼxⱼ)).
pub fn rgd_consensus_step(state: &ConsensusState, w: &MixingMatrix, gamma: f64) -> Result<ConsensusState> {
    check_step(state, w, gamma)?;
    let snapshot = mats(state);
    let next = (0..state.n())
        .map(|i| {
            let x = &state.points[i];
            let grad = tangent_component(x.as_mat(), &(&snapshot[i] - w.mix_row(i, &snapshot)));
            retract_polar(x, &(grad * -gamma)).map_err(|e| e.at_agent(i, None))
        })
        .collect::<Result<Vec<_>>>()?;
    ConsensusState::new(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConsensusVariant {
    Projected,
    Riemannian,
}

impl ConsensusVariant {
    pub fn name(self) -> &'static str {
        match self {
            ConsensusVariant::Projected => "pgd",
            ConsensusVariant::Riemannian => "rgd",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusTrace {
    /// Consensus error per iteration, starting with the initial state.
    pub errors: Vec<f64>,
    /// γ = 0 makes every step the identity.
    pub degenerate: bool,
    /// First iteration whose error exceeds the initial error (the measured δ).
    pub neighborhood_exit: Option<usize>,
    pub final_state: ConsensusState,
}

/// Iterates until the error is ≤ `tol` or `max_iters` steps were taken.
pub fn run_consensus(
    initial: ConsensusState,
    w: &MixingMatrix,
    gamma: f64,
    variant: ConsensusVariant,
    max_iters: usize,
    tol: f64,
) -> Result<ConsensusTrace> {
    if !(tol > 0.0) {
        return Err(Error::InvalidInput(format!("consensus tolerance must be positive, got {tol}")));
    }
    let delta = initial.consensus_error();
    let mut errors = vec![delta];
    let mut neighborhood_exit = None;
    let mut state = initial;
    for k in 1..=max_iters {
        if state.consensus_error() <= tol {
            break;
        }
        state = match variant {
            ConsensusVariant::Projected => pgd_consensus_step(&state, w, gamma),
            ConsensusVariant::Riemannian => rgd_consensus_step(&state, w, gamma),
        }
        .map_err(|e| e.with_iteration(k))?;
        let err = state.consensus_error();
        if neighborhood_exit.is_none() && err > delta {
            neighborhood_exit = Some(k);
        }
        errors.push(err);
    }
    Ok(ConsensusTrace {
        errors,
        degenerate: gamma == 0.0,
        neighborhood_exit,
        final_state: state,
    })
}

/// The two linear rates evaluated at one radius.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateBound {
    /// (R − Rγ(1−σ₂))/(R − δ), projected variant.
    pub rho1: f64,
    /// R(1−γ+γσ₂)/(R−δ) + 8·M1·γ²·δ, Riemannian variant with δ̂ = δ.
    pub rho2: f64,
    pub gamma: f64,
    pub delta: f64,
    /// Upper end of the admissible δ̂ window for the given M1.
    pub delta_hat_max: f64,
    /// δ < min(Rγ(1−σ₂), R/4) and ρ₁ < 1.
    pub rho1_valid: bool,
    /// δ < δ̂_max and ρ₂ < 1.
    pub rho2_valid: bool,
}

/// Upper end of the δ̂ window:
/// min{(8M₁γ²R + 1 − √((8M₁γ²R − 1)² + 32M₁γ²R(1−γ+γσ₂)))/(16M₁γ²), R/4}.
pub fn delta_hat_max(sc: &SmoothnessConstants, sigma2: f64, gamma: f64) -> f64 {
    let r = sc.radius;
    let a = 8.0 * sc.m1 * gamma * gamma * r;
    if a == 0.0 {
        // M1 = 0 or γ = 0: the quadratic degenerates and only the R/4 cap remains.
        return r / 4.0;
    }
    let contraction = 1.0 - gamma + gamma * sigma2;
    let root = ((a - 1.0).powi(2) + 4.0 * a * contraction).sqrt();
    ((a + 1.0 - root) / (16.0 * sc.m1 * gamma * gamma)).min(r / 4.0)
}

pub fn theoretical_rates(sc: &SmoothnessConstants, sigma2: f64, gamma: f64, delta: f64) -> Result<RateBound> {
    let r = sc.radius;
    if !(delta >= 0.0) || delta >= r {
        return Err(Error::InvalidRadius { delta, radius: r });
    }
    let contraction = 1.0 - gamma + gamma * sigma2;
    let rho1 = (r - r * gamma * (1.0 - sigma2)) / (r - delta);
    let rho2 = r * contraction / (r - delta) + 8.0 * sc.m1 * gamma * gamma * delta;
    let delta_hat_max = delta_hat_max(sc, sigma2, gamma);
    Ok(RateBound {
        rho1,
        rho2,
        gamma,
        delta,
        delta_hat_max,
        rho1_valid: delta < (r * gamma * (1.0 - sigma2)).min(r / 4.0) && rho1 < 1.0,
        rho2_valid: delta < delta_hat_max && rho2 < 1.0,
    })
}

/// Largest ‖η𝐝‖ under which the perturbed projected scheme stays in N(δ):
/// min{R/4, (Rγ(1−σ₂) − δ)/(2(R−δ))·δ}.
pub fn perturbation_cap(radius: f64, sigma2: f64, gamma: f64, delta: f64) -> f64 {
    let slack = (radius * gamma * (1.0 - sigma2) - delta) / (2.0 * (radius - delta)) * delta;
    slack.min(radius / 4.0)
}

/// "iteration,consensus_error" rows.
pub fn trajectory_csv(errors: &[f64]) -> String {
    let mut out = String::from("iteration,consensus_error\n");
    for (k, e) in errors.iter().enumerate() {
        writeln!(out, "{k},{e:.16e}").expect("writing to a String");
    }
    out
}
