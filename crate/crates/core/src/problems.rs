//! Decentralized PCA: f_i(x) = −½·tr(xᵀAᵢᵀAᵢx) on St(d, r).
//!
//! The network objective is f(𝐱) = (1/n)·Σ f_i(x_i); the 1/n is applied by the
//! aggregate metrics, so local gradients do not depend on n.

use std::fs;
use std::path::Path;

use nalgebra::SymmetricEigen;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::manifold::{tangent_component, StiefelPoint, TangentVector};
use crate::seed::{stream_rng, streams};

/// Local objectives of n agents, as seen by the algorithms and the metrics.
pub trait LocalObjectives {
    fn num_agents(&self) -> usize;

    /// (d, r) of every iterate.
    fn dims(&self) -> (usize, usize);

    fn value(&self, agent: usize, x: &StiefelPoint) -> f64;

    fn euclidean_gradient(&self, agent: usize, x: &StiefelPoint) -> Mat;

    /// grad f_i(x) = P_{T_x}(∇f_i(x)).
    fn riemannian_gradient(&self, agent: usize, x: &StiefelPoint) -> Mat {
        tangent_component(x.as_mat(), &self.euclidean_gradient(agent, x))
    }
}

/// One agent's data block Aᵢ (mᵢ × d).
#[derive(Debug, Clone, PartialEq)]
pub struct LocalDataset {
    a: Mat,
    /// AᵢᵀAᵢ, cached when mᵢ ≥ d.
    gram: Option<Mat>,
}

impl LocalDataset {
    pub fn new(a: Mat) -> Result<Self> {
        if a.nrows() == 0 || a.ncols() == 0 {
            return Err(Error::InvalidSize(format!("local data block is {}x{}", a.nrows(), a.ncols())));
        }
        if !linalg::all_finite(&a) {
            return Err(Error::InvalidInput("non-finite entry in local data".into()));
        }
        let gram = (a.nrows() >= a.ncols()).then(|| a.transpose() * &a);
        Ok(LocalDataset { a, gram })
    }

    pub fn data(&self) -> &Mat {
        &self.a
    }

    pub fn samples(&self) -> usize {
        self.a.nrows()
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    /// AᵢᵀAᵢ, formed on demand when not cached.
    pub fn gram(&self) -> Mat {
        self.gram.clone().unwrap_or_else(|| self.a.transpose() * &self.a)
    }

    fn check(&self, x: &Mat) -> Result<()> {
        if x.nrows() != self.dim() {
            return Err(Error::Dimension {
                context: "pca objective",
                expected: (self.dim(), x.ncols()),
                found: (x.nrows(), x.ncols()),
            });
        }
        Ok(())
    }

    fn objective(&self, x: &Mat) -> f64 {
        match &self.gram {
            Some(g) => -0.5 * x.dot(&(g * x)),
            None => -0.5 * (&self.a * x).norm_squared(),
        }
    }

    fn gradient(&self, x: &Mat) -> Mat {
        match &self.gram {
            Some(g) => -(g * x),
            None => -(self.a.transpose() * (&self.a * x)),
        }
    }
}

/// −½‖Aᵢx‖².
pub fn local_objective(ds: &LocalDataset, x: &StiefelPoint) -> Result<f64> {
    ds.check(x.as_mat())?;
    Ok(ds.objective(x.as_mat()))
}

/// −AᵢᵀAᵢx.
pub fn local_euclidean_gradient(ds: &LocalDataset, x: &StiefelPoint) -> Result<Mat> {
    ds.check(x.as_mat())?;
    Ok(ds.gradient(x.as_mat()))
}

pub fn local_riemannian_gradient(ds: &LocalDataset, x: &StiefelPoint) -> Result<TangentVector> {
    let g = local_euclidean_gradient(ds, x)?;
    crate::manifold::tangent_project(x, &g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaProblem {
    locals: Vec<LocalDataset>,
    d: usize,
    r: usize,
    ground_truth: Option<StiefelPoint>,
    /// max over agents of λ_max(AᵢᵀAᵢ).
    lipschitz_l: f64,
    /// max over agents and Stiefel points of ‖∇f_i(x)‖, i.e. the root of the
    /// sum of the r largest eigenvalues of (AᵢᵀAᵢ)².
    gradient_bound: f64,
}

impl PcaProblem {
    pub fn new(locals: Vec<LocalDataset>, r: usize, ground_truth: Option<StiefelPoint>) -> Result<Self> {
        let d = locals.first().map(LocalDataset::dim).ok_or_else(|| Error::InvalidConfig("no agents".into()))?;
        if locals.iter().any(|l| l.dim() != d) {
            return Err(Error::InvalidConfig("local data blocks disagree on column count".into()));
        }
        if r == 0 || r > d {
            return Err(Error::InvalidConfig(format!("need 1 <= r <= d, got r={r}, d={d}")));
        }
        if let Some(t) = &ground_truth {
            if t.dims() != (d, r) {
                return Err(Error::Dimension {
                    context: "ground truth",
                    expected: (d, r),
                    found: t.dims(),
                });
            }
        }
        let mut lipschitz_l = 0.0_f64;
        let mut gradient_bound = 0.0_f64;
        for l in &locals {
            let mut ev: Vec<f64> = SymmetricEigen::new(l.gram()).eigenvalues.iter().map(|v| v.max(0.0)).collect();
            ev.sort_by(|a, b| b.total_cmp(a));
            lipschitz_l = lipschitz_l.max(ev[0]);
            gradient_bound = gradient_bound.max(ev.iter().take(r).map(|v| v * v).sum::<f64>().sqrt());
        }
        Ok(PcaProblem {
            locals,
            d,
            r,
            ground_truth,
            lipschitz_l,
            gradient_bound,
        })
    }

    pub fn locals(&self) -> &[LocalDataset] {
        &self.locals
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn ground_truth(&self) -> Option<&StiefelPoint> {
        self.ground_truth.as_ref()
    }

    pub fn lipschitz_l(&self) -> f64 {
        self.lipschitz_l
    }

    /// L_g.
    pub fn gradient_bound(&self) -> f64 {
        self.gradient_bound
    }

    pub fn total_samples(&self) -> usize {
        self.locals.iter().map(LocalDataset::samples).sum()
    }

    /// f(x) = (1/n)·Σ f_i(x) at a common point.
    pub fn global_objective(&self, x: &StiefelPoint) -> f64 {
        let n = self.locals.len() as f64;
        self.locals.iter().map(|l| l.objective(x.as_mat())).sum::<f64>() / n
    }

    /// The stacked data matrix and its top-r right singular vectors, computed
    /// from scratch (used as an oracle for the generated ground truth).
    pub fn stacked_top_subspace(&self) -> Result<StiefelPoint> {
        let mut g = Mat::zeros(self.d, self.d);
        for l in &self.locals {
            g += l.gram();
        }
        let eig = SymmetricEigen::new(g);
        let mut order: Vec<usize> = (0..self.d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let cols: Vec<_> = order.iter().take(self.r).map(|&j| eig.eigenvectors.column(j).into_owned()).collect();
        StiefelPoint::new(Mat::from_columns(&cols))
    }

    /// Writes `agent_<i>.txt` per block and a `manifest.txt` with the
    /// generation parameters and the ground truth.
    pub fn write_dir(&self, dir: &Path, xi: f64, seed: u64) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (i, l) in self.locals.iter().enumerate() {
            fs::write(dir.join(format!("agent_{i}.txt")), linalg::matrix_to_text(l.data()))?;
        }
        let mut manifest = format!(
            "n={}\nd={}\nr={}\nxi={}\nseed={}\n",
            self.locals.len(),
            self.d,
            self.r,
            xi,
            seed
        );
        if let Some(t) = &self.ground_truth {
            manifest.push_str("ground_truth=\n");
            manifest.push_str(&linalg::matrix_to_text(t.as_mat()));
        }
        fs::write(dir.join("manifest.txt"), manifest)?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
        let mut n = None;
        let mut r = None;
        let mut truth_lines = None;
        for (idx, line) in manifest.lines().enumerate() {
            if line == "ground_truth=" {
                truth_lines = Some(manifest.lines().skip(idx + 1).collect::<Vec<_>>().join("\n"));
                break;
            }
            if let Some((k, v)) = line.split_once('=') {
                let parse = |field: &'static str| {
                    v.trim().parse::<usize>().map_err(|e| Error::Format {
                        field,
                        detail: e.to_string(),
                    })
                };
                match k {
                    "n" => n = Some(parse("n")?),
                    "r" => r = Some(parse("r")?),
                    _ => {}
                }
            }
        }
        let n = n.ok_or(Error::Format { field: "n", detail: "missing".into() })?;
        let r = r.ok_or(Error::Format { field: "r", detail: "missing".into() })?;
        let locals = (0..n)
            .map(|i| LocalDataset::new(linalg::matrix_from_text(&fs::read_to_string(dir.join(format!("agent_{i}.txt")))?)?))
            .collect::<Result<Vec<_>>>()?;
        let truth = truth_lines.map(|t| StiefelPoint::new(linalg::matrix_from_text(&t)?)).transpose()?;
        PcaProblem::new(locals, r, truth)
    }
}

impl LocalObjectives for PcaProblem {
    fn num_agents(&self) -> usize {
        self.locals.len()
    }

    fn dims(&self) -> (usize, usize) {
        (self.d, self.r)
    }

    fn value(&self, agent: usize, x: &StiefelPoint) -> f64 {
        self.locals[agent].objective(x.as_mat())
    }

    fn euclidean_gradient(&self, agent: usize, x: &StiefelPoint) -> Mat {
        self.locals[agent].gradient(x.as_mat())
    }
}

/// Row split into n equal blocks after a seeded permutation. n = 1 keeps the
/// original row order.
pub fn split_rows(a: &Mat, n: usize, seed: u64) -> Result<Vec<LocalDataset>> {
    let m = a.nrows();
    if n == 0 || !m.is_multiple_of(n) {
        return Err(Error::InvalidConfig(format!("cannot split {m} rows into {n} equal blocks")));
    }
    let mut order: Vec<usize> = (0..m).collect();
    if n > 1 {
        order.shuffle(&mut stream_rng(seed, streams::SPLIT));
    }
    let per = m / n;
    order
        .chunks(per)
        .map(|rows| LocalDataset::new(a.select_rows(rows)))
        .collect()
}

/// Synthetic instance with singular values ξ, ξ², …, ξ^d.
///
/// B is (n·m_per)×d standard normal; with B = UΣVᵀ the data matrix is
/// A = U·diag(ξʲ)·Vᵀ and the first r columns of V solve the problem.
pub fn gen_synthetic(n: usize, m_per: usize, d: usize, r: usize, xi: f64, seed: u64) -> Result<PcaProblem> {
    if n == 0 || m_per == 0 || d == 0 {
        return Err(Error::InvalidConfig(format!("n, m_per, d must be positive (n={n}, m_per={m_per}, d={d})")));
    }
    if n * m_per < d {
        return Err(Error::InvalidConfig(format!("n*m_per = {} is smaller than d = {d}", n * m_per)));
    }
    if r == 0 || r > d {
        return Err(Error::InvalidConfig(format!("need 1 <= r <= d, got r={r}, d={d}")));
    }
    if !(xi > 0.0 && xi < 1.0) {
        return Err(Error::InvalidConfig(format!("xi must lie in (0, 1), got {xi}")));
    }
    let (a, v) = synthetic_matrix(n * m_per, d, xi, seed);
    let truth = StiefelPoint::new(v.columns(0, r).into_owned())?;
    let locals = split_rows(&a, n, seed)?;
    PcaProblem::new(locals, r, Some(truth))
}

/// (A, V) with A = U·diag(ξʲ)·Vᵀ built from a seeded Gaussian B = UΣVᵀ.
pub fn synthetic_matrix(m: usize, d: usize, xi: f64, seed: u64) -> (Mat, Mat) {
    let mut rng = stream_rng(seed, streams::DATA);
    let b = linalg::gaussian(m, d, &mut rng);
    let svd = b.svd(true, true);
    let u = svd.u.expect("U");
    let v = svd.v_t.expect("Vᵀ").transpose();
    let mut scaled = u;
    let mut s = xi;
    for j in 0..d {
        scaled.column_mut(j).scale_mut(s);
        s *= xi;
    }
    (scaled * v.transpose(), v)
}

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const MNIST_SIDE: usize = 28;

/// Parses an IDX3 image file (big-endian header: magic, count, rows, cols)
/// into a count × 784 matrix scaled to [0, 1].
pub fn parse_idx_images(bytes: &[u8]) -> Result<Mat> {
    let word = |k: usize, field: &'static str| -> Result<u32> {
        bytes
            .get(4 * k..4 * k + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or(Error::Format {
                field,
                detail: "file truncated inside the header".into(),
            })
    };
    let magic = word(0, "magic")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Format {
            field: "magic",
            detail: format!("expected 0x{IDX_IMAGE_MAGIC:08x}, found 0x{magic:08x}"),
        });
    }
    let count = word(1, "count")? as usize;
    let rows = word(2, "rows")? as usize;
    let cols = word(3, "cols")? as usize;
    if rows != MNIST_SIDE {
        return Err(Error::Format { field: "rows", detail: format!("expected {MNIST_SIDE}, found {rows}") });
    }
    if cols != MNIST_SIDE {
        return Err(Error::Format { field: "cols", detail: format!("expected {MNIST_SIDE}, found {cols}") });
    }
    let pixels = rows * cols;
    let body = &bytes[16..];
    if body.len() != count * pixels {
        return Err(Error::Format {
            field: "pixels",
            detail: format!("expected {} pixel bytes for {count} images, found {}", count * pixels, body.len()),
        });
    }
    Ok(Mat::from_fn(count, pixels, |i, j| body[i * pixels + j] as f64 / 255.0))
}

pub fn load_mnist_idx(path: &Path) -> Result<Mat> {
    parse_idx_images(&fs::read(path)?)
}
