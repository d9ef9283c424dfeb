//! Stiefel-manifold geometry under the Euclidean (Frobenius) metric.
//!
//! St(d, r) = { X ∈ ℝ^{d×r} : XᵀX = I_r }.
//!
//! - nearest-point projection: P(Y) = U Vᵀ from the thin SVD Y = U Σ Vᵀ
//! - tangent projection: P_X(V) = V − X sym(XᵀV)
//! - retraction: R_X(ξ) = P(X + ξ)
//!
//! The set is 1-proximally smooth, so the projection is single valued on the
//! open tube of radius 1 around it. The second-order constants that appear in
//! the convergence analysis (Q, M1, M2) have no closed form here and are
//! estimated by sampling in [`estimate_constants`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, check_shape, max_abs, shape, sym, Mat};
use crate::seed::stream_rng;

/// Proximal-smoothness radius of the Stiefel manifold.
pub const PROXIMAL_RADIUS: f64 = 1.0;

/// Tolerance on the orthonormality residual max|XᵀX − I|.
pub const STIEFEL_TOL: f64 = 1e-10;

/// Relative singular-value floor below which a projection input counts as rank deficient.
pub const SINGULAR_RTOL: f64 = 1e-12;

/// A d×r matrix with orthonormal columns.
#[derive(Debug, Clone, PartialEq)]
pub struct StiefelPoint {
    data: Mat,
}

impl StiefelPoint {
    /// Validates `data` against the orthonormality tolerance.
    pub fn new(data: Mat) -> Result<Self> {
        if data.ncols() == 0 || data.nrows() < data.ncols() {
            return Err(Error::InvalidSize(format!(
                "Stiefel point needs d >= r >= 1, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        let residual = orthonormality_residual(&data);
        if !(residual <= STIEFEL_TOL) {
            return Err(Error::NotOnManifold { residual });
        }
        Ok(StiefelPoint { data })
    }

    pub(crate) fn from_orthonormal(data: Mat) -> Self {
        debug_assert!(orthonormality_residual(&data) <= 1e-8);
        StiefelPoint { data }
    }

    /// The first r columns of the d×d identity.
    pub fn identity(d: usize, r: usize) -> Result<Self> {
        StiefelPoint::new(Mat::identity(d, r))
    }

    /// Polar factor of a standard Gaussian matrix.
    pub fn random<R: Rng + ?Sized>(d: usize, r: usize, rng: &mut R) -> Result<Self> {
        if r == 0 || d < r {
            return Err(Error::InvalidSize(format!("need d >= r >= 1, got d={d}, r={r}")));
        }
        loop {
            match polar_project(&linalg::gaussian(d, r, rng)) {
                Ok(p) => return Ok(p),
                // measure-zero event; redraw
                Err(Error::SingularInput { .. }) => continue,
                Err(e) => return Err(e),
            }
        }
    }

    pub fn as_mat(&self) -> &Mat {
        &self.data
    }

    pub fn into_mat(self) -> Mat {
        self.data
    }

    pub fn dims(&self) -> (usize, usize) {
        shape(&self.data)
    }

    pub fn residual(&self) -> f64 {
        orthonormality_residual(&self.data)
    }
}

/// max-abs entry of XᵀX − I.
pub fn orthonormality_residual(x: &Mat) -> f64 {
    let gram = x.transpose() * x;
    max_abs(&(gram - Mat::identity(x.ncols(), x.ncols())))
}

/// A matrix in the tangent space at `base`.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    base: StiefelPoint,
    data: Mat,
}

impl TangentVector {
    pub fn base(&self) -> &StiefelPoint {
        &self.base
    }

    pub fn as_mat(&self) -> &Mat {
        &self.data
    }

    pub fn into_mat(self) -> Mat {
        self.data
    }

    /// max-abs entry of baseᵀ·v + vᵀ·base.
    pub fn tangency_residual(&self) -> f64 {
        let xtv = self.base.as_mat().transpose() * &self.data;
        max_abs(&(&xtv + xtv.transpose()))
    }
}

/// Polar factor U·Vᵀ of `y` without wrapping.
pub(crate) fn polar_factor(y: &Mat) -> Result<Mat> {
    if y.ncols() == 0 || y.nrows() < y.ncols() {
        return Err(Error::InvalidSize(format!(
            "projection needs a tall matrix, got {}x{}",
            y.nrows(),
            y.ncols()
        )));
    }
    if !linalg::all_finite(y) {
        return Err(Error::InvalidInput("non-finite entry in projection input".into()));
    }
    let svd = y.clone().svd(true, true);
    let (smin, smax) = svd
        .singular_values
        .iter()
        .fold((f64::INFINITY, 0.0_f64), |(lo, hi), &s| (lo.min(s), hi.max(s)));
    if !(smax > 0.0) || smin < SINGULAR_RTOL * smax {
        return Err(Error::SingularInput {
            sigma_min: smin,
            sigma_max: smax,
        });
    }
    let u = svd.u.expect("svd computed with U");
    let v_t = svd.v_t.expect("svd computed with Vᵀ");
    Ok(u * v_t)
}

/// Nearest Stiefel point to a full-column-rank `y`.
pub fn polar_project(y: &Mat) -> Result<StiefelPoint> {
    polar_factor(y).map(StiefelPoint::from_orthonormal)
}

/// v − x·sym(xᵀv) on raw matrices.
pub(crate) fn tangent_component(x: &Mat, v: &Mat) -> Mat {
    let s = sym(&(x.transpose() * v));
    v - x * s
}

pub fn tangent_project(x: &StiefelPoint, v: &Mat) -> Result<TangentVector> {
    check_shape("tangent_project", x.dims(), v)?;
    Ok(TangentVector {
        base: x.clone(),
        data: tangent_component(x.as_mat(), v),
    })
}

/// Polar retraction R_x(ξ) = P(x + ξ). `xi` is not required to be tangent.
pub fn retract_polar(x: &StiefelPoint, xi: &Mat) -> Result<StiefelPoint> {
    check_shape("retract_polar", x.dims(), xi)?;
    polar_project(&(x.as_mat() + xi))
}

/// Frobenius distance from `y` to its projection.
pub fn dist_to_manifold(y: &Mat) -> Result<f64> {
    let p = polar_factor(y)?;
    Ok((y - p).norm())
}

/// min over orthogonal Q of ‖x·Q − xstar‖.
///
/// Evaluated at the optimal Q (polar factor of xᵀ·xstar) rather than through
/// sqrt(2r − 2Σσ), which loses all precision near zero.
pub fn procrustes_distance(x: &StiefelPoint, xstar: &StiefelPoint) -> Result<f64> {
    if x.dims() != xstar.dims() {
        return Err(Error::Dimension {
            context: "procrustes_distance",
            expected: x.dims(),
            found: xstar.dims(),
        });
    }
    let m = x.as_mat().transpose() * xstar.as_mat();
    let svd = m.svd(true, true);
    let q = svd.u.expect("U") * svd.v_t.expect("Vᵀ");
    Ok((x.as_mat() * q - xstar.as_mat()).norm())
}

/// Empirical second-order constants of the projection. All are sampled maxima,
/// hence lower bounds on the true constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothnessConstants {
    /// Proximal-smoothness radius, exactly 1 for Stiefel.
    pub radius: f64,
    /// ‖P(x+u) − x − P_x(u)‖ ≤ Q‖u‖² for ‖u‖ ≤ R/2.
    pub q: f64,
    /// ‖P(x+u) − R_x(P_x(u))‖ ≤ M1‖u‖².
    pub m1: f64,
    /// ‖x̄ − x̂‖ ≤ M2‖𝐱 − 𝐱̄‖²/n near consensus.
    pub m2: f64,
}

impl SmoothnessConstants {
    pub fn stiefel(q: f64, m1: f64, m2: f64) -> Self {
        SmoothnessConstants {
            radius: PROXIMAL_RADIUS,
            q,
            m1,
            m2,
        }
    }
}

/// Sampling plan for [`estimate_constants`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConstantSampling {
    pub d: usize,
    pub r: usize,
    /// Agents per tuple in the mean-gap samples.
    pub agents: usize,
    pub samples: usize,
    pub seed: u64,
}

const PAIR_STREAM: u64 = 0;
const TUPLE_STREAM: u64 = 1 << 40;

/// Sample `index` of the (x, u) family: x uniform-ish on St(d, r), u a Gaussian
/// direction with norm uniform in (0, R/2]. Sample i depends only on (seed, i).
pub fn sample_point_and_offset(d: usize, r: usize, seed: u64, index: u64) -> Result<(StiefelPoint, Mat)> {
    let mut rng = stream_rng(seed, PAIR_STREAM + index);
    let x = StiefelPoint::random(d, r, &mut rng)?;
    let g = linalg::gaussian(d, r, &mut rng);
    let radius = 0.5 * PROXIMAL_RADIUS * (1.0 - rng.gen::<f64>());
    let norm = g.norm();
    let u = if norm > 0.0 { g * (radius / norm) } else { g };
    Ok((x, u))
}

/// ‖P(x+u) − x − P_x(u)‖ / ‖u‖², or `None` when u = 0.
pub fn second_order_ratio(x: &StiefelPoint, u: &Mat) -> Result<Option<f64>> {
    let nu = u.norm();
    if nu == 0.0 {
        return Ok(None);
    }
    let p = polar_factor(&(x.as_mat() + u))?;
    let t = tangent_component(x.as_mat(), u);
    Ok(Some((p - x.as_mat() - t).norm() / (nu * nu)))
}

/// ‖P(x+u) − R_x(P_x(u))‖ / ‖u‖², or `None` when u = 0.
pub fn retraction_gap_ratio(x: &StiefelPoint, u: &Mat) -> Result<Option<f64>> {
    let nu = u.norm();
    if nu == 0.0 {
        return Ok(None);
    }
    let p = polar_factor(&(x.as_mat() + u))?;
    let t = tangent_component(x.as_mat(), u);
    let rt = polar_factor(&(x.as_mat() + t))?;
    Ok(Some((p - rt).norm() / (nu * nu)))
}

/// Sample `index` of the near-consensus tuple family: n points P(c + t·Gᵢ)
/// around a random center, t log-uniform in [1e-3, 0.3]. Tuples that break the
/// max‖xᵢ − x̄‖ ≤ R/2 precondition are redrawn from the same stream.
pub fn sample_near_consensus(d: usize, r: usize, n: usize, seed: u64, index: u64) -> Result<Vec<StiefelPoint>> {
    let mut rng = stream_rng(seed, TUPLE_STREAM + index);
    loop {
        let c = StiefelPoint::random(d, r, &mut rng)?;
        let t = 10f64.powf(rng.gen_range(-3.0..(0.3f64).log10()));
        let points = (0..n)
            .map(|_| {
                let g = linalg::gaussian(d, r, &mut rng);
                let g = &g / g.norm();
                polar_project(&(c.as_mat() + g * t))
            })
            .collect::<Result<Vec<_>>>()?;
        let mats: Vec<&Mat> = points.iter().map(StiefelPoint::as_mat).collect();
        let mean = linalg::mean(mats.iter().copied());
        let bar = match polar_factor(&mean) {
            Ok(b) => b,
            Err(Error::SingularInput { .. }) => continue,
            Err(e) => return Err(e),
        };
        if mats.iter().all(|x| (*x - &bar).norm() <= 0.5 * PROXIMAL_RADIUS) {
            return Ok(points);
        }
    }
}

/// n‖x̄ − x̂‖ / ‖𝐱 − 𝐱̄‖², or `None` at exact consensus.
pub fn mean_gap_ratio(points: &[StiefelPoint]) -> Result<Option<f64>> {
    let n = points.len();
    let mats: Vec<&Mat> = points.iter().map(StiefelPoint::as_mat).collect();
    let hat = linalg::mean(mats.iter().copied());
    let bar = polar_factor(&hat)?;
    let spread: f64 = mats.iter().map(|x| (*x - &bar).norm_squared()).sum();
    // Below this spread the ratio is rounding noise from the polar factor.
    if spread <= 1e-20 * n as f64 {
        return Ok(None);
    }
    Ok(Some(n as f64 * (&bar - &hat).norm() / spread))
}

/// Sampled maxima of the three second-order ratios.
///
/// Sample i uses its own seed stream, so growing `samples` only adds samples and
/// the returned maxima are monotone in the sample count.
pub fn estimate_constants(plan: &ConstantSampling) -> Result<SmoothnessConstants> {
    if plan.samples < 100 {
        return Err(Error::InvalidInput(format!(
            "estimate_constants needs at least 100 samples, got {}",
            plan.samples
        )));
    }
    if plan.agents == 0 {
        return Err(Error::InvalidInput("mean-gap sampling needs at least one agent".into()));
    }
    let mut q = 0.0_f64;
    let mut m1 = 0.0_f64;
    let mut m2 = 0.0_f64;
    for i in 0..plan.samples as u64 {
        let (x, u) = sample_point_and_offset(plan.d, plan.r, plan.seed, i)?;
        if let Some(v) = second_order_ratio(&x, &u)? {
            q = q.max(v);
        }
        if let Some(v) = retraction_gap_ratio(&x, &u)? {
            m1 = m1.max(v);
        }
        let tuple = sample_near_consensus(plan.d, plan.r, plan.agents, plan.seed, i)?;
        if let Some(v) = mean_gap_ratio(&tuple)? {
            m2 = m2.max(v);
        }
    }
    Ok(SmoothnessConstants::stiefel(q, m1, m2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::stream_rng;

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        stream_rng(seed, 99)
    }

    #[test]
    fn projection_fixes_stiefel_points() {
        let x = StiefelPoint::random(6, 3, &mut rng(1)).unwrap();
        let p = polar_project(x.as_mat()).unwrap();
        assert!(max_abs(&(p.as_mat() - x.as_mat())) < 1e-14);
    }

    #[test]
    fn positive_scaling_shares_polar_factor() {
        let x = StiefelPoint::random(5, 2, &mut rng(2)).unwrap();
        let p = polar_project(&(x.as_mat() * 3.0)).unwrap();
        assert!(max_abs(&(p.as_mat() - x.as_mat())) < 1e-14);
    }

    #[test]
    fn projection_beats_random_stiefel_samples() {
        let mut g = rng(3);
        let y = linalg::gaussian(4, 2, &mut g);
        let p = polar_project(&y).unwrap();
        let best = (p.as_mat() - &y).norm();
        for _ in 0..10_000 {
            let s = StiefelPoint::random(4, 2, &mut g).unwrap();
            assert!(best <= (s.as_mat() - &y).norm() + 1e-12);
        }
    }

    #[test]
    fn rank_deficient_input_rejected() {
        let y = Mat::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        assert!(matches!(polar_project(&y), Err(Error::SingularInput { .. })));
        assert!(matches!(polar_project(&Mat::zeros(3, 2)), Err(Error::SingularInput { .. })));
        assert!(matches!(dist_to_manifold(&y), Err(Error::SingularInput { .. })));
    }

    #[test]
    fn projection_is_idempotent() {
        let y = linalg::gaussian(7, 3, &mut rng(4));
        let p1 = polar_project(&y).unwrap();
        let p2 = polar_project(&(p1.as_mat() * 1.0)).unwrap();
        assert!(max_abs(&(p1.as_mat() - p2.as_mat())) <= 1e-12);
    }

    #[test]
    fn tangent_projection_hand_example() {
        let x = StiefelPoint::identity(3, 1).unwrap();
        let v = Mat::from_element(3, 1, 1.0);
        let t = tangent_project(&x, &v).unwrap();
        assert_eq!(t.as_mat().as_slice(), &[0.0, 1.0, 1.0]);
    }

    /// Minimizes ‖t − v‖ over an explicit basis of the tangent space by least
    /// squares. Independent of the sym() formula.
    fn tangent_projection_by_basis(x: &Mat, v: &Mat) -> Mat {
        let (d, r) = shape(x);
        // Tangent space = kernel of the linear map Z ↦ sym(xᵀZ); build it as the
        // null space of that map written as a matrix on vec(Z).
        let mut rows = Vec::new();
        for a in 0..r {
            for b in a..r {
                let mut row = vec![0.0; d * r];
                for k in 0..d {
                    // (xᵀZ)_{ab} + (xᵀZ)_{ba} = Σ_k x_{ka} Z_{kb} + x_{kb} Z_{ka}
                    row[k + b * d] += x[(k, a)];
                    row[k + a * d] += x[(k, b)];
                }
                rows.push(row);
            }
        }
        let c = Mat::from_fn(rows.len(), d * r, |i, j| rows[i][j]);
        // Orthogonal projector onto ker(C): I − Cᵀ(CCᵀ)⁻¹C.
        let cct = &c * c.transpose();
        let inv = cct.try_inverse().unwrap();
        let proj = Mat::identity(d * r, d * r) - c.transpose() * inv * &c;
        let vv = Mat::from_column_slice(d * r, 1, v.as_slice());
        let t = proj * vv;
        Mat::from_column_slice(d, r, t.as_slice())
    }

    #[test]
    fn tangent_projection_matches_basis_oracle() {
        let mut g = rng(5);
        for _ in 0..20 {
            let x = StiefelPoint::random(5, 3, &mut g).unwrap();
            let v = linalg::gaussian(5, 3, &mut g);
            let t = tangent_project(&x, &v).unwrap();
            let oracle = tangent_projection_by_basis(x.as_mat(), &v);
            assert!(max_abs(&(t.as_mat() - oracle)) < 1e-10);
            assert!(t.tangency_residual() < 1e-12);
        }
    }

    #[test]
    fn tangent_projection_idempotent_kills_normal_and_self_adjoint() {
        let mut g = rng(6);
        let x = StiefelPoint::random(6, 2, &mut g).unwrap();
        let u = linalg::gaussian(6, 2, &mut g);
        let v = linalg::gaussian(6, 2, &mut g);
        let pu = tangent_project(&x, &u).unwrap().into_mat();
        let ppu = tangent_project(&x, &pu).unwrap().into_mat();
        assert!(max_abs(&(&pu - ppu)) < 1e-14);
        let px = tangent_project(&x, x.as_mat()).unwrap();
        assert!(max_abs(px.as_mat()) < 1e-15);
        let pv = tangent_project(&x, &v).unwrap().into_mat();
        assert!((pu.dot(&v) - u.dot(&pv)).abs() < 1e-10);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let x = StiefelPoint::identity(3, 2).unwrap();
        assert!(matches!(tangent_project(&x, &Mat::zeros(3, 1)), Err(Error::Dimension { .. })));
        assert!(matches!(retract_polar(&x, &Mat::zeros(2, 2)), Err(Error::Dimension { .. })));
        let y = StiefelPoint::identity(3, 1).unwrap();
        assert!(matches!(procrustes_distance(&x, &y), Err(Error::Dimension { .. })));
    }

    #[test]
    fn retraction_at_zero_and_closed_form() {
        let x = StiefelPoint::random(4, 2, &mut rng(7)).unwrap();
        let r0 = retract_polar(&x, &Mat::zeros(4, 2)).unwrap();
        assert!(max_abs(&(r0.as_mat() - x.as_mat())) < 1e-14);

        let e1 = StiefelPoint::identity(2, 1).unwrap();
        for a in [0.3, -2.0, 10.0] {
            let xi = Mat::from_column_slice(2, 1, &[0.0, a]);
            let got = retract_polar(&e1, &xi).unwrap();
            let s = (1.0 + a * a).sqrt();
            let want = Mat::from_column_slice(2, 1, &[1.0 / s, a / s]);
            assert!(max_abs(&(got.as_mat() - want)) < 1e-14);
        }
    }

    #[test]
    fn retraction_agrees_to_first_order() {
        let mut g = rng(8);
        let x = StiefelPoint::random(6, 3, &mut g).unwrap();
        let xi = tangent_project(&x, &linalg::gaussian(6, 3, &mut g)).unwrap().into_mat();
        let ratios: Vec<f64> = [1e-2, 1e-3, 1e-4]
            .iter()
            .map(|&t| {
                let r = retract_polar(&x, &(&xi * t)).unwrap();
                (r.as_mat() - x.as_mat() - &xi * t).norm() / (t * t)
            })
            .collect();
        let bound = xi.norm_squared();
        for r in &ratios {
            assert!(*r <= bound, "ratio {r} exceeds {bound}");
        }
        assert!((ratios[0] - ratios[1]).abs() < 0.05 * ratios[0]);
    }

    #[test]
    fn distance_examples() {
        let x = StiefelPoint::random(5, 1, &mut rng(9)).unwrap();
        assert!(dist_to_manifold(x.as_mat()).unwrap() < 1e-14);
        assert!((dist_to_manifold(&(x.as_mat() * 2.0)).unwrap() - 1.0).abs() < 1e-14);
        let mut g = rng(10);
        for _ in 0..200 {
            let y = linalg::gaussian(5, 2, &mut g);
            let s = StiefelPoint::random(5, 2, &mut g).unwrap();
            assert!(dist_to_manifold(&y).unwrap() <= (s.as_mat() - &y).norm() + 1e-12);
        }
    }

    #[test]
    fn procrustes_examples() {
        let mut g = rng(11);
        let x = StiefelPoint::random(6, 3, &mut g).unwrap();
        assert!(procrustes_distance(&x, &x).unwrap() < 1e-14);
        let q0 = StiefelPoint::random(3, 3, &mut g).unwrap();
        let xq = StiefelPoint::new(x.as_mat() * q0.as_mat()).unwrap();
        assert!(procrustes_distance(&xq, &x).unwrap() < 1e-10);

        // r = 1: Q ∈ {+1, −1}, brute force both signs.
        for _ in 0..50 {
            let a = StiefelPoint::random(4, 1, &mut g).unwrap();
            let b = StiefelPoint::random(4, 1, &mut g).unwrap();
            let plus = (a.as_mat() - b.as_mat()).norm();
            let minus = (-a.as_mat() - b.as_mat()).norm();
            let got = procrustes_distance(&a, &b).unwrap();
            assert!((got - plus.min(minus)).abs() < 1e-12);
        }
    }

    #[test]
    fn procrustes_matches_singular_value_formula() {
        let mut g = rng(12);
        for _ in 0..50 {
            let a = StiefelPoint::random(7, 3, &mut g).unwrap();
            let b = StiefelPoint::random(7, 3, &mut g).unwrap();
            let sv = (a.as_mat().transpose() * b.as_mat()).singular_values().sum();
            let formula = (6.0 - 2.0 * sv).max(0.0).sqrt();
            let got = procrustes_distance(&a, &b).unwrap();
            assert!((got - formula).abs() < 1e-10);
            assert!((got - procrustes_distance(&b, &a).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn constants_exclude_zero_offsets_and_consensus() {
        let x = StiefelPoint::random(4, 2, &mut rng(13)).unwrap();
        assert_eq!(second_order_ratio(&x, &Mat::zeros(4, 2)).unwrap(), None);
        assert_eq!(retraction_gap_ratio(&x, &Mat::zeros(4, 2)).unwrap(), None);
        let same = vec![x.clone(), x.clone(), x];
        assert_eq!(mean_gap_ratio(&same).unwrap(), None);
    }

    #[test]
    fn constants_are_monotone_in_sample_count() {
        let small = estimate_constants(&ConstantSampling { d: 10, r: 5, agents: 4, samples: 1000, seed: 0 }).unwrap();
        let large = estimate_constants(&ConstantSampling { d: 10, r: 5, agents: 4, samples: 2000, seed: 0 }).unwrap();
        assert_eq!(small.radius, 1.0);
        assert!(small.q.is_finite() && small.q > 0.0);
        assert!(large.q >= small.q - 1e-12);
        assert!(large.m1 >= small.m1 - 1e-12);
        assert!(large.m2 >= small.m2 - 1e-12);
    }

    #[test]
    fn too_few_samples_rejected() {
        let plan = ConstantSampling { d: 4, r: 2, agents: 2, samples: 99, seed: 0 };
        assert!(matches!(estimate_constants(&plan), Err(Error::InvalidInput(_))));
    }
}
