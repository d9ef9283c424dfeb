//! Seeded property suites over the manifold, consensus and compression
//! primitives. Every check returns a report; none of them panic.

use std::fmt;

use dprgc_core::compression::{verify_contractive, CompressorSpec};
use dprgc_core::consensus::{
    delta_hat_max, perturbation_cap, pgd_consensus_step, pgd_consensus_step_with_offsets, rgd_consensus_step,
    theoretical_rates, ConsensusState, ConsensusVariant,
};
use dprgc_core::linalg;
use dprgc_core::manifold::{
    dist_to_manifold, estimate_constants, polar_project, retract_polar, sample_near_consensus, second_order_ratio,
    sample_point_and_offset, tangent_project, ConstantSampling, SmoothnessConstants, StiefelPoint, PROXIMAL_RADIUS,
};
use dprgc_core::metrics::mean_gap_check;
use dprgc_core::seed::stream_rng;
use dprgc_core::topology::{gen_ring, metropolis_weights, MixingMatrix};
use dprgc_core::Mat;
use rand::Rng;

use crate::error::Result;

pub const DEFAULT_TRIALS: usize = 10_000;

/// Outcome of one property over many seeded trials.
#[derive(Debug, Clone, PartialEq)]
pub struct PropertyReport {
    pub name: String,
    pub trials: usize,
    pub violations: usize,
    /// Violations tolerated before the property fails.
    pub allowed: usize,
    /// Largest lhs/rhs ratio seen (1 is the boundary).
    pub worst_ratio: f64,
    pub detail: String,
}

impl PropertyReport {
    pub fn passed(&self) -> bool {
        self.violations <= self.allowed && self.trials > 0
    }
}

impl fmt::Display for PropertyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {}/{} violations (allowed {}), worst ratio {:.4e}{}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.violations,
            self.trials,
            self.allowed,
            self.worst_ratio,
            if self.detail.is_empty() { String::new() } else { format!(", {}", self.detail) }
        )
    }
}

struct Tally {
    trials: usize,
    violations: usize,
    worst: f64,
}

impl Tally {
    fn new() -> Self {
        Tally { trials: 0, violations: 0, worst: 0.0 }
    }

    /// Records lhs ≤ rhs + slack.
    fn check(&mut self, lhs: f64, rhs: f64, slack: f64) {
        self.trials += 1;
        if lhs > rhs + slack {
            self.violations += 1;
        }
        if rhs > 0.0 {
            self.worst = self.worst.max(lhs / rhs);
        }
    }

    fn report(self, name: &str, allowed: usize, detail: String) -> PropertyReport {
        PropertyReport {
            name: name.into(),
            trials: self.trials,
            violations: self.violations,
            allowed,
            worst_ratio: self.worst,
            detail,
        }
    }
}

/// Point at distance ≤ `radius` from the manifold: x + e with ‖e‖ uniform in [0, radius].
fn tube_point<R: Rng>(x: &StiefelPoint, radius: f64, rng: &mut R) -> Mat {
    let (d, r) = x.dims();
    let e = linalg::gaussian(d, r, rng);
    x.as_mat() + &e * (radius * rng.gen::<f64>() / e.norm())
}

/// ‖P(y₁) − P(y₂)‖ ≤ ‖y₁ − y₂‖/(1 − γ) for y₁, y₂ within γR of the manifold.
pub fn projection_lipschitz(d: usize, r: usize, gamma: f64, trials: usize, seed: u64) -> Result<PropertyReport> {
    let radius = gamma * PROXIMAL_RADIUS;
    let factor = 1.0 / (1.0 - gamma);
    let mut tally = Tally::new();
    for i in 0..trials as u64 {
        let mut rng = stream_rng(seed, i);
        let x1 = StiefelPoint::random(d, r, &mut rng)?;
        // Half the pairs are close (the regime where the factor is tight),
        // half are independent.
        let x2 = if i % 2 == 0 {
            let step = 10f64.powf(rng.gen_range(-4.0..0.0));
            let g = linalg::gaussian(d, r, &mut rng);
            polar_project(&(x1.as_mat() + &g * (step / g.norm())))?
        } else {
            StiefelPoint::random(d, r, &mut rng)?
        };
        let y1 = tube_point(&x1, radius, &mut rng);
        let y2 = tube_point(&x2, radius, &mut rng);
        debug_assert!(dist_to_manifold(&y1)? <= radius + 1e-12);
        let lhs = (polar_project(&y1)?.as_mat() - polar_project(&y2)?.as_mat()).norm();
        tally.check(lhs, factor * (&y1 - &y2).norm(), 1e-12);
    }
    Ok(tally.report("projection-lipschitz", 0, format!("gamma={gamma}, factor={factor}")))
}

/// ⟨v, y − x⟩ ≤ ‖v‖/(2R)·‖y − x‖² for v = x·S (S symmetric) in the normal cone at x.
pub fn normal_inequality(d: usize, r: usize, trials: usize, seed: u64) -> Result<PropertyReport> {
    let mut tally = Tally::new();
    for i in 0..trials as u64 {
        let mut rng = stream_rng(seed, i);
        let x = StiefelPoint::random(d, r, &mut rng)?;
        let y = if i % 2 == 0 {
            let g = linalg::gaussian(d, r, &mut rng);
            polar_project(&(x.as_mat() + &g * (10f64.powf(rng.gen_range(-3.0..0.0)) / g.norm())))?
        } else {
            StiefelPoint::random(d, r, &mut rng)?
        };
        let s = linalg::sym(&linalg::gaussian(r, r, &mut rng));
        let v = x.as_mat() * s;
        let diff = y.as_mat() - x.as_mat();
        let lhs = v.dot(&diff);
        let rhs = v.norm() / (2.0 * PROXIMAL_RADIUS) * diff.norm_squared();
        tally.check(lhs, rhs, 1e-12 * v.norm());
    }
    Ok(tally.report("normal-inequality", 0, String::new()))
}

/// ‖P(x+u) − x − P_T(u)‖ ≤ Q̂‖u‖², with Q̂ the sampled maximum over a
/// disjoint estimation set; at most 1% of held-out samples may exceed it.
pub fn second_order_bound(d: usize, r: usize, trials: usize, seed: u64) -> Result<PropertyReport> {
    let q_hat = estimate_constants(&ConstantSampling {
        d,
        r,
        agents: 2,
        samples: trials,
        seed,
    })?
    .q;
    let held_out = seed ^ 0x5eed_0f0f_f5e7;
    let mut tally = Tally::new();
    for i in 0..trials as u64 {
        let (x, u) = sample_point_and_offset(d, r, held_out, i)?;
        if let Some(ratio) = second_order_ratio(&x, &u)? {
            tally.check(ratio, q_hat, 0.0);
        }
    }
    Ok(tally.report("second-order-projection", trials / 100, format!("q_hat={q_hat:.6}")))
}

/// ‖R_x(tξ) − (x + tξ)‖/t² ≤ ‖ξ‖² at t ∈ {1e-2, 1e-3, 1e-4}.
pub fn retraction_first_order(d: usize, r: usize, trials: usize, seed: u64) -> Result<PropertyReport> {
    let mut tally = Tally::new();
    for i in 0..trials as u64 {
        let mut rng = stream_rng(seed, i);
        let x = StiefelPoint::random(d, r, &mut rng)?;
        let xi = tangent_project(&x, &linalg::gaussian(d, r, &mut rng))?.into_mat();
        let xi = &xi / xi.norm();
        let t = [1e-2, 1e-3, 1e-4][i as usize % 3];
        let step = &xi * t;
        let gap = (retract_polar(&x, &step)?.as_mat() - x.as_mat() - &step).norm();
        // Cancellation in the subtraction leaves ~1e-16 absolute error.
        tally.check(gap / (t * t), xi.norm_squared(), 1e-15 / (t * t));
    }
    Ok(tally.report("retraction-first-order", 0, String::new()))
}

/// Zero violations of ‖C(x) − x‖² ≤ (1 − α)‖x‖².
pub fn compression_contract(spec: CompressorSpec, d: usize, r: usize, trials: usize, seed: u64) -> Result<PropertyReport> {
    let rep = verify_contractive(&spec, d, r, trials, seed)?;
    Ok(PropertyReport {
        name: format!("compression-contract[{spec}]"),
        trials: rep.trials,
        violations: rep.violations,
        allowed: 0,
        worst_ratio: rep.max_ratio,
        detail: format!("alpha={:.6}", rep.alpha),
    })
}

/// ‖x̄ − x̂‖ ≤ M̂₂‖𝐱 − 𝐱̄‖²/n with M̂₂ from `estimation` samples, checked on
/// a disjoint set of `trials` held-out samples; at most 1% violations.
pub fn mean_gap_bound(d: usize, r: usize, agents: usize, estimation: usize, trials: usize, seed: u64) -> Result<PropertyReport> {
    let m2 = estimate_constants(&ConstantSampling {
        d,
        r,
        agents,
        samples: estimation,
        seed,
    })?
    .m2;
    let held_out = seed ^ 0x00ff_1ce0_d15c;
    let mut tally = Tally::new();
    for i in 0..trials as u64 {
        let points = sample_near_consensus(d, r, agents, held_out, i)?;
        let rep = mean_gap_check(&points, m2)?;
        tally.check(rep.lhs, rep.rhs, 1e-15);
    }
    Ok(tally.report("mean-gap", trials / 100, format!("m2_hat={m2:.6}")))
}

/// Least-squares slope of log‖x̄ − x̂‖ against log t for clusters P(c + t·Gᵢ)
/// with fixed unit directions Gᵢ.
pub fn mean_gap_exponent(d: usize, r: usize, agents: usize, scales: &[f64], seed: u64) -> Result<f64> {
    let mut rng = stream_rng(seed, 0);
    let c = StiefelPoint::random(d, r, &mut rng)?;
    let dirs: Vec<Mat> = (0..agents)
        .map(|_| {
            let g = linalg::gaussian(d, r, &mut rng);
            &g / g.norm()
        })
        .collect();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &t in scales {
        let points = dirs.iter().map(|g| polar_project(&(c.as_mat() + g * t))).collect::<dprgc_core::Result<Vec<_>>>()?;
        let rep = mean_gap_check(&points, 0.0)?;
        xs.push(t.ln());
        ys.push(rep.lhs.ln());
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// `n` points around a random center with consensus error in [δ/2, δ].
pub fn cluster_with_error(n: usize, d: usize, r: usize, delta: f64, seed: u64) -> Result<ConsensusState> {
    let mut rng = stream_rng(seed, 0);
    let c = StiefelPoint::random(d, r, &mut rng)?;
    let dirs: Vec<Mat> = (0..n).map(|_| linalg::gaussian(d, r, &mut rng)).collect();
    let mut scale = delta / (n as f64).sqrt();
    for _ in 0..100 {
        let pts = dirs
            .iter()
            .map(|g| polar_project(&(c.as_mat() + g * (scale / g.norm()))))
            .collect::<dprgc_core::Result<Vec<_>>>()?;
        let state = ConsensusState::new(pts)?;
        let err = state.consensus_error();
        if err <= delta && err >= 0.5 * delta {
            return Ok(state);
        }
        scale *= 0.9 * delta / err.max(f64::MIN_POSITIVE);
    }
    Err(dprgc_core::Error::InvalidInput(format!("could not place a cluster with consensus error near {delta}")).into())
}

/// One consensus trajectory checked step by step against its linear rate.
#[derive(Debug, Clone, PartialEq)]
pub struct RateCheck {
    pub variant: ConsensusVariant,
    pub sigma2: f64,
    pub delta: f64,
    /// ρ₁(δ) for the projected variant, ρ₂ at the window edge for the
    /// Riemannian one.
    pub rho: f64,
    /// Error level below which the rate applies.
    pub threshold: f64,
    pub errors: Vec<f64>,
    /// Bound on errors[k] implied by errors[k − 1]; NaN where unchecked.
    pub bounds: Vec<f64>,
    /// Steps k with errorₖ₊₁ > ρ·errorₖ + slack while errorₖ ≤ threshold.
    pub violations: usize,
    pub checked: usize,
    /// First iteration with error ≤ `target`.
    pub reached: Option<usize>,
}

/// Ring of `n` agents with Metropolis weights.
pub fn ring_mixing(n: usize) -> Result<MixingMatrix> {
    Ok(metropolis_weights(&gen_ring(n)?)?)
}

/// Consensus from an initial error ≤ δ = 0.9·R·γ(1−σ₂). The projected variant
/// is checked against ρ₁(δ) at every step; the Riemannian one, once the error
/// is inside the admissible window δ̂ for the sampled M1, against ρ₂ at the
/// current error.
#[allow(clippy::too_many_arguments)]
pub fn consensus_rate_check(
    variant: ConsensusVariant,
    w: &MixingMatrix,
    gamma: f64,
    sc: &SmoothnessConstants,
    d: usize,
    r: usize,
    iters: usize,
    target: f64,
    seed: u64,
) -> Result<RateCheck> {
    let sigma2 = w.sigma2();
    let delta = 0.9 * sc.radius * gamma * (1.0 - sigma2);
    let mut state = cluster_with_error(w.n(), d, r, delta, seed)?;
    let (rho, threshold) = match variant {
        ConsensusVariant::Projected => (theoretical_rates(sc, sigma2, gamma, delta)?.rho1, f64::INFINITY),
        ConsensusVariant::Riemannian => {
            let window = delta_hat_max(sc, sigma2, gamma);
            (theoretical_rates(sc, sigma2, gamma, window)?.rho2, window)
        }
    };
    let mut errors = vec![state.consensus_error()];
    let mut bounds = vec![f64::NAN];
    let (mut violations, mut checked) = (0, 0);
    let mut reached = (errors[0] <= target).then_some(0);
    for k in 1..=iters {
        let prev = state.consensus_error();
        state = match variant {
            ConsensusVariant::Projected => pgd_consensus_step(&state, w, gamma)?,
            ConsensusVariant::Riemannian => rgd_consensus_step(&state, w, gamma)?,
        };
        let err = state.consensus_error();
        if prev <= threshold {
            checked += 1;
            // Inside the window the Riemannian rate is evaluated at the
            // current radius, which only tightens as the error shrinks.
            let step_rho = match variant {
                ConsensusVariant::Projected => rho,
                ConsensusVariant::Riemannian => theoretical_rates(sc, sigma2, gamma, prev)?.rho2,
            };
            bounds.push(step_rho * prev);
            if err > step_rho * prev + 1e-9 {
                violations += 1;
            }
        } else {
            bounds.push(f64::NAN);
        }
        if reached.is_none() && err <= target {
            reached = Some(k);
        }
        errors.push(err);
    }
    Ok(RateCheck {
        variant,
        sigma2,
        delta,
        rho,
        threshold,
        errors,
        bounds,
        violations,
        checked,
        reached,
    })
}

/// Perturbed projected consensus with random offsets of stacked norm equal to
/// the neighborhood cap. Returns (δ, largest consensus error seen).
pub fn neighborhood_stay(w: &MixingMatrix, gamma: f64, d: usize, r: usize, iters: usize, seed: u64) -> Result<(f64, f64)> {
    let sigma2 = w.sigma2();
    let delta = 0.5 * PROXIMAL_RADIUS * gamma * (1.0 - sigma2);
    let cap = perturbation_cap(PROXIMAL_RADIUS, sigma2, gamma, delta);
    let mut state = cluster_with_error(w.n(), d, r, delta, seed)?;
    let mut rng = stream_rng(seed, 1);
    let mut worst = state.consensus_error();
    for _ in 0..iters {
        let raw: Vec<Mat> = (0..w.n()).map(|_| linalg::gaussian(d, r, &mut rng)).collect();
        let norm = linalg::stacked_norm_sq(&raw).sqrt();
        let offsets: Vec<Mat> = raw.iter().map(|m| m * (cap / norm)).collect();
        state = pgd_consensus_step_with_offsets(&state, w, gamma, Some(&offsets))?;
        worst = worst.max(state.consensus_error());
    }
    Ok((delta, worst))
}

/// Manifold, mean-gap and compression property suites at `trials` each.
pub fn run_all(trials: usize, seed: u64) -> Result<Vec<PropertyReport>> {
    let (d, r) = (10, 5);
    let mut out = vec![
        projection_lipschitz(d, r, 0.25, trials, seed)?,
        normal_inequality(d, r, trials, seed.wrapping_add(1))?,
        second_order_bound(d, r, trials, seed.wrapping_add(2))?,
        retraction_first_order(d, r, trials, seed.wrapping_add(3))?,
        mean_gap_bound(d, r, 8, trials, trials.min(1000), seed.wrapping_add(4))?,
    ];
    for spec in contract_specs() {
        out.push(compression_contract(spec, d, r, trials, seed.wrapping_add(5))?);
    }
    Ok(out)
}

/// Compressors certified by the contract suite.
pub fn contract_specs() -> Vec<CompressorSpec> {
    vec![
        CompressorSpec::Identity,
        CompressorSpec::TopK { fraction: 0.2 },
        CompressorSpec::TopK { fraction: 0.4 },
        CompressorSpec::TopK { fraction: 0.8 },
        CompressorSpec::Quantizer { bits: 8 },
    ]
}
