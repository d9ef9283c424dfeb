//! Deterministic contractive compressors: ‖C(x) − x‖² ≤ (1 − α)‖x‖².

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::seed::stream_rng;

/// Slack on the contract check in [`verify_contractive`].
pub const CONTRACT_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CompressorSpec {
    Identity,
    /// Keep the ⌈q·d⌉ largest-magnitude entries of each column.
    TopK { fraction: f64 },
    /// Per-column sign·‖c‖∞·level with 2^bits uniform levels on [0, 1].
    Quantizer { bits: u32 },
}

/// How transmitted entries are counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EntryAccounting {
    /// Value entries only.
    #[default]
    ValuesOnly,
    /// Sparse formats also pay one index per kept value.
    ValuesAndIndices,
}

impl CompressorSpec {
    pub fn top_k(fraction: f64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::InvalidInput(format!("top-k fraction must lie in (0, 1], got {fraction}")));
        }
        Ok(CompressorSpec::TopK { fraction })
    }

    pub fn quantizer(bits: u32) -> Result<Self> {
        if !(1..=32).contains(&bits) {
            return Err(Error::InvalidInput(format!("quantizer bits must lie in 1..=32, got {bits}")));
        }
        Ok(CompressorSpec::Quantizer { bits })
    }

    /// Entries kept per column of length `rows` under top-k.
    pub fn kept_per_column(&self, rows: usize) -> usize {
        match *self {
            CompressorSpec::TopK { fraction } => {
                // guard against 0.4·10 = 4.000000000000001 rounding up to 5
                let k = (fraction * rows as f64 - 1e-9).ceil() as usize;
                k.clamp(1, rows.max(1))
            }
            _ => rows,
        }
    }

    /// Contract constant for columns of length `rows`.
    ///
    /// Top-k: k/d. Quantizer with L = 2^b − 1 steps: every non-maximal entry
    /// rounds with error at most ‖c‖∞/(2L) and no more than its own magnitude,
    /// so the worst column has d − 1 entries sitting on the first half-step,
    /// giving 1 − α = (d − 1)/(4L² + d − 1).
    pub fn alpha(&self, rows: usize) -> f64 {
        match *self {
            CompressorSpec::Identity => 1.0,
            CompressorSpec::TopK { .. } => self.kept_per_column(rows) as f64 / rows as f64,
            CompressorSpec::Quantizer { bits } => {
                let l = quantizer_steps(bits);
                let slack = rows.saturating_sub(1) as f64;
                4.0 * l * l / (4.0 * l * l + slack)
            }
        }
    }

    /// Whether kept entries are transmitted exactly (sparsifiers).
    pub fn is_sparsifier(&self) -> bool {
        !matches!(self, CompressorSpec::Quantizer { .. })
    }
}

fn quantizer_steps(bits: u32) -> f64 {
    ((1u64 << bits) - 1) as f64
}

impl fmt::Display for CompressorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CompressorSpec::Identity => f.write_str("identity"),
            CompressorSpec::TopK { fraction } => write!(f, "topk:{fraction}"),
            CompressorSpec::Quantizer { bits } => write!(f, "quant:{bits}"),
        }
    }
}

impl FromStr for CompressorSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "identity" {
            return Ok(CompressorSpec::Identity);
        }
        let bad = || Error::InvalidInput(format!("unrecognized compressor `{s}` (expected identity, topk:<q>, quant:<bits>)"));
        let (kind, param) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "topk" => CompressorSpec::top_k(param.parse().map_err(|_| bad())?),
            "quant" => CompressorSpec::quantizer(param.parse().map_err(|_| bad())?),
            _ => Err(bad()),
        }
    }
}

fn top_k_column_mask(col: &[f64], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..col.len()).collect();
    // larger magnitude first, lower row index first on ties
    order.sort_by(|&a, &b| col[b].abs().total_cmp(&col[a].abs()).then(a.cmp(&b)));
    let mut mask = vec![false; col.len()];
    for &i in order.iter().take(k) {
        mask[i] = true;
    }
    mask
}

fn quantize_column(col: &[f64], out: &mut [f64], bits: u32) {
    let scale = col.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    if scale == 0.0 {
        out.fill(0.0);
        return;
    }
    let l = quantizer_steps(bits);
    for (o, &v) in out.iter_mut().zip(col) {
        // round half up on the magnitude
        let level = (v.abs() / scale * l + 0.5).floor().min(l);
        *o = v.signum() * scale * (level / l);
    }
}

/// Compressed message: the value matrix plus, for sparsifiers, the kept mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Compressed {
    pub values: Mat,
    /// Column-major kept flags; `None` for dense messages.
    pub support: Option<Vec<bool>>,
}

pub fn compress_with_support(spec: &CompressorSpec, x: &Mat) -> Result<Compressed> {
    if !linalg::all_finite(x) {
        return Err(Error::InvalidInput("non-finite entry in compressor input".into()));
    }
    let rows = x.nrows();
    match *spec {
        CompressorSpec::Identity => Ok(Compressed {
            values: x.clone(),
            support: None,
        }),
        CompressorSpec::TopK { .. } => {
            let k = spec.kept_per_column(rows);
            let mut values = Mat::zeros(rows, x.ncols());
            let mut support = vec![false; rows * x.ncols()];
            for c in 0..x.ncols() {
                let col = x.column(c);
                let mask = top_k_column_mask(col.as_slice(), k);
                for (i, keep) in mask.into_iter().enumerate() {
                    if keep {
                        values[(i, c)] = x[(i, c)];
                        support[c * rows + i] = true;
                    }
                }
            }
            Ok(Compressed {
                values,
                support: Some(support),
            })
        }
        CompressorSpec::Quantizer { bits } => {
            let mut values = Mat::zeros(rows, x.ncols());
            for c in 0..x.ncols() {
                let col: Vec<f64> = x.column(c).iter().copied().collect();
                let mut out = vec![0.0; rows];
                quantize_column(&col, &mut out, bits);
                values.column_mut(c).copy_from_slice(&out);
            }
            Ok(Compressed { values, support: None })
        }
    }
}

pub fn compress(spec: &CompressorSpec, x: &Mat) -> Result<Mat> {
    compress_with_support(spec, x).map(|c| c.values)
}

/// Compresses `target − reference` and advances `reference` by the message.
///
/// For sparsifiers the kept entries of `reference` are set to `target`
/// directly; this is the same update as reference + q in exact arithmetic and
/// keeps an uncompressed reference bit-identical to its target.
pub fn compress_difference(spec: &CompressorSpec, reference: &mut Mat, target: &Mat) -> Result<Mat> {
    let diff = target - &*reference;
    let msg = compress_with_support(spec, &diff)?;
    match (&msg.support, spec) {
        (_, CompressorSpec::Identity) => reference.copy_from(target),
        (Some(mask), _) => {
            for (idx, keep) in mask.iter().enumerate() {
                if *keep {
                    reference[idx] = target[idx];
                }
            }
        }
        (None, _) => *reference += &msg.values,
    }
    Ok(msg.values)
}

/// Matrix entries transmitted for one message of shape `rows × cols`.
pub fn nnz_transmitted(spec: &CompressorSpec, rows: usize, cols: usize, accounting: EntryAccounting) -> usize {
    match spec {
        CompressorSpec::Identity | CompressorSpec::Quantizer { .. } => rows * cols,
        CompressorSpec::TopK { .. } => {
            let kept = spec.kept_per_column(rows) * cols;
            match accounting {
                EntryAccounting::ValuesOnly => kept,
                EntryAccounting::ValuesAndIndices => 2 * kept,
            }
        }
    }
}

/// Equivalent 64-bit words for one message, counting the quantizer at its bit width.
pub fn transmitted_words(spec: &CompressorSpec, rows: usize, cols: usize) -> f64 {
    match *spec {
        CompressorSpec::Quantizer { bits } => (rows * cols) as f64 * bits as f64 / 64.0,
        _ => nnz_transmitted(spec, rows, cols, EntryAccounting::ValuesOnly) as f64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContractReport {
    pub trials: usize,
    pub max_ratio: f64,
    pub violations: usize,
    pub alpha: f64,
}

/// ‖C(x) − x‖²/‖x‖², with 0 for x = 0.
pub fn residual_ratio(spec: &CompressorSpec, x: &Mat) -> Result<f64> {
    let nx = x.norm_squared();
    if nx == 0.0 {
        return Ok(0.0);
    }
    let c = compress(spec, x)?;
    Ok((c - x).norm_squared() / nx)
}

/// Random probe for trial `t`; cycles through Gaussian, equal-magnitude
/// (top-k worst case), sparse, and half-step (quantizer worst case) families.
fn probe_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, trial: usize, rng: &mut R) -> Mat {
    match trial % 4 {
        0 => linalg::gaussian(rows, cols, rng),
        1 => Mat::from_fn(rows, cols, |_, _| if rng.gen::<bool>() { 1.0 } else { -1.0 }),
        2 => Mat::from_fn(rows, cols, |_, _| {
            if rng.gen::<f64>() < 0.2 {
                rng.gen_range(-1.0..1.0)
            } else {
                0.0
            }
        }),
        _ => {
            let scale = 10f64.powf(rng.gen_range(-3.0..3.0));
            let step = rng.gen_range(0.0..0.01);
            Mat::from_fn(rows, cols, |i, _| if i == 0 { scale } else { scale * step })
        }
    }
}

pub fn verify_contractive(spec: &CompressorSpec, rows: usize, cols: usize, trials: usize, seed: u64) -> Result<ContractReport> {
    if trials == 0 {
        return Err(Error::InvalidInput("verify_contractive needs at least one trial".into()));
    }
    let alpha = spec.alpha(rows);
    let mut rng = stream_rng(seed, 0);
    let mut max_ratio = 0.0_f64;
    let mut violations = 0;
    for t in 0..trials {
        let x = probe_matrix(rows, cols, t, &mut rng);
        let ratio = residual_ratio(spec, &x)?;
        max_ratio = max_ratio.max(ratio);
        if ratio > (1.0 - alpha) + CONTRACT_SLACK {
            violations += 1;
        }
    }
    Ok(ContractReport {
        trials,
        max_ratio,
        violations,
        alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parse_and_display() {
        assert_eq!("identity".parse::<CompressorSpec>().unwrap(), CompressorSpec::Identity);
        assert_eq!("topk:0.4".parse::<CompressorSpec>().unwrap(), CompressorSpec::TopK { fraction: 0.4 });
        assert_eq!("quant:8".parse::<CompressorSpec>().unwrap(), CompressorSpec::Quantizer { bits: 8 });
        for bad in ["topk:0", "topk:1.5", "quant:0", "quant:x", "rand:3", "topk"] {
            assert!(bad.parse::<CompressorSpec>().is_err(), "{bad}");
        }
        assert_eq!(CompressorSpec::TopK { fraction: 0.4 }.to_string(), "topk:0.4");
    }

    #[test]
    fn identity_is_lossless() {
        let x = Mat::from_row_slice(2, 2, &[1.0, -2.0, 3.0, 0.5]);
        assert_eq!(compress(&CompressorSpec::Identity, &x).unwrap(), x);
        assert_eq!(residual_ratio(&CompressorSpec::Identity, &x).unwrap(), 0.0);
    }

    #[test]
    fn top_k_hand_example() {
        let spec = CompressorSpec::top_k(1.0 / 3.0).unwrap();
        let x = Mat::from_column_slice(3, 1, &[3.0, 1.0, -2.0]);
        let c = compress(&spec, &x).unwrap();
        assert_eq!(c.as_slice(), &[3.0, 0.0, 0.0]);
        let residual = (c - &x).norm_squared();
        assert_eq!(residual, 5.0);
        assert!(residual <= (1.0 - spec.alpha(3)) * x.norm_squared());
    }

    #[test]
    fn top_k_counts() {
        let spec = CompressorSpec::top_k(0.4).unwrap();
        assert_eq!(spec.kept_per_column(10), 4);
        assert!((spec.alpha(10) - 0.4).abs() < 1e-15);
        assert_eq!(nnz_transmitted(&spec, 10, 5, EntryAccounting::ValuesOnly), 20);
        assert_eq!(nnz_transmitted(&spec, 10, 5, EntryAccounting::ValuesAndIndices), 40);
        let full = CompressorSpec::top_k(1.0).unwrap();
        assert_eq!(nnz_transmitted(&full, 10, 5, EntryAccounting::ValuesOnly), 50);
        assert_eq!(nnz_transmitted(&CompressorSpec::Identity, 10, 5, EntryAccounting::ValuesOnly), 50);
        let q8 = CompressorSpec::quantizer(8).unwrap();
        assert_eq!(nnz_transmitted(&q8, 10, 5, EntryAccounting::ValuesOnly), 50);
        assert_eq!(transmitted_words(&q8, 10, 5), 50.0 * 8.0 / 64.0);
    }

    #[test]
    fn top_k_ties_keep_lowest_rows() {
        let spec = CompressorSpec::top_k(0.5).unwrap();
        let x = Mat::from_column_slice(4, 1, &[1.0, -1.0, 1.0, 1.0]);
        assert_eq!(compress(&spec, &x).unwrap().as_slice(), &[1.0, -1.0, 0.0, 0.0]);
    }

    #[test]
    fn quantizer_levels() {
        let spec = CompressorSpec::quantizer(1).unwrap();
        let x = Mat::from_column_slice(4, 1, &[-4.0, 2.0, 1.9, 0.0]);
        // levels {0, 1}: |c|/4 ∈ {1, 0.5, 0.475, 0} → {1, 1, 0, 0}
        assert_eq!(compress(&spec, &x).unwrap().as_slice(), &[-4.0, 4.0, 0.0, 0.0]);
        let zero = Mat::zeros(3, 2);
        assert_eq!(compress(&spec, &zero).unwrap(), zero);
    }

    #[test]
    fn quantizer_alpha_is_tight() {
        // d − 1 entries exactly on the first half-step realize the bound
        let spec = CompressorSpec::quantizer(1).unwrap();
        let d = 6;
        let x = Mat::from_fn(d, 1, |i, _| if i == 0 { 1.0 } else { 0.5 });
        let ratio = residual_ratio(&spec, &x).unwrap();
        assert!((ratio - (1.0 - spec.alpha(d))).abs() < 1e-14);
    }

    #[test]
    fn non_finite_rejected() {
        let x = Mat::from_column_slice(2, 1, &[f64::NAN, 1.0]);
        assert!(compress(&CompressorSpec::Identity, &x).is_err());
    }

    #[test]
    fn verify_examples() {
        let id = verify_contractive(&CompressorSpec::Identity, 10, 5, 100, 0).unwrap();
        assert_eq!((id.max_ratio, id.violations), (0.0, 0));
        let tk = verify_contractive(&CompressorSpec::top_k(0.4).unwrap(), 10, 5, 10_000, 1).unwrap();
        assert_eq!(tk.violations, 0);
        assert!(tk.max_ratio <= 0.6 + 1e-15);
        assert_eq!(residual_ratio(&CompressorSpec::top_k(0.4).unwrap(), &Mat::zeros(10, 5)).unwrap(), 0.0);
        assert!(verify_contractive(&CompressorSpec::Identity, 2, 2, 0, 0).is_err());
    }

    #[test]
    fn difference_update_keeps_uncompressed_reference_exact() {
        let mut reference = Mat::from_row_slice(2, 1, &[0.1, 0.7]);
        let target = Mat::from_row_slice(2, 1, &[0.30000000000000004, -1.0 / 3.0]);
        let q = compress_difference(&CompressorSpec::Identity, &mut reference, &target).unwrap();
        assert_eq!(reference, target);
        assert_eq!(q, &target - Mat::from_row_slice(2, 1, &[0.1, 0.7]));

        let mut reference = Mat::zeros(4, 1);
        let target = Mat::from_column_slice(4, 1, &[0.1, -3.0, 0.2, 2.0]);
        compress_difference(&CompressorSpec::top_k(0.5).unwrap(), &mut reference, &target).unwrap();
        assert_eq!(reference.as_slice(), &[0.0, -3.0, 0.0, 2.0]);
    }

    fn matrix_strategy() -> impl Strategy<Value = Mat> {
        (1usize..12, 1usize..5).prop_flat_map(|(r, c)| {
            proptest::collection::vec(-1e3f64..1e3, r * c).prop_map(move |v| Mat::from_vec(r, c, v))
        })
    }

    fn spec_strategy() -> impl Strategy<Value = CompressorSpec> {
        prop_oneof![
            Just(CompressorSpec::Identity),
            (0.01f64..=1.0).prop_map(|q| CompressorSpec::TopK { fraction: q }),
            (1u32..=16).prop_map(|b| CompressorSpec::Quantizer { bits: b }),
        ]
    }

    proptest! {
        #[test]
        fn contract_holds(spec in spec_strategy(), x in matrix_strategy()) {
            let ratio = residual_ratio(&spec, &x).unwrap();
            prop_assert!(ratio <= 1.0 - spec.alpha(x.nrows()) + CONTRACT_SLACK);
        }

        #[test]
        fn deterministic_and_top_k_idempotent(q in 0.01f64..=1.0, x in matrix_strategy()) {
            let spec = CompressorSpec::TopK { fraction: q };
            let once = compress(&spec, &x).unwrap();
            prop_assert_eq!(&once, &compress(&spec, &x).unwrap());
            prop_assert_eq!(&compress(&spec, &once).unwrap(), &once);
            let k = spec.kept_per_column(x.nrows());
            for c in 0..x.ncols() {
                prop_assert!(once.column(c).iter().filter(|v| **v != 0.0).count() <= k);
            }
        }
    }
}
