//! Small dense-matrix helpers shared across modules.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;

pub fn shape(m: &Mat) -> (usize, usize) {
    (m.nrows(), m.ncols())
}

pub(crate) fn check_shape(context: &'static str, expected: (usize, usize), m: &Mat) -> Result<()> {
    if shape(m) != expected {
        return Err(Error::Dimension {
            context,
            expected,
            found: shape(m),
        });
    }
    Ok(())
}

/// Largest absolute entry; 0 for empty matrices.
pub fn max_abs(m: &Mat) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// (A + Aᵀ) / 2 for a square matrix.
pub fn sym(a: &Mat) -> Mat {
    (a + a.transpose()) * 0.5
}

pub fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn all_finite(m: &Mat) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Squared stacked Frobenius norm Σᵢ ‖vᵢ‖².
pub fn stacked_norm_sq<'a, I>(blocks: I) -> f64
where
    I: IntoIterator<Item = &'a Mat>,
{
    blocks.into_iter().map(|b| b.norm_squared()).sum()
}

/// Arithmetic mean of equally shaped blocks, summed in index order.
pub fn mean<'a, I>(blocks: I) -> Mat
where
    I: IntoIterator<Item = &'a Mat>,
{
    let mut iter = blocks.into_iter();
    let first = iter.next().expect("mean of an empty block list");
    let mut acc = first.clone();
    let mut count = 1usize;
    for b in iter {
        acc += b;
        count += 1;
    }
    acc / count as f64
}

/// Writes a matrix as plain text: one row per line, space-separated shortest
/// round-trip decimals.
pub fn matrix_to_text(m: &Mat) -> String {
    let mut out = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{}", m[(i, j)])).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn matrix_from_text(text: &str) -> Result<Mat> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|e| Error::Format {
                    field: "matrix-entry",
                    detail: format!("line {}: `{tok}`: {e}", lineno + 1),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Format {
                    field: "matrix-row",
                    detail: format!(
                        "line {} has {} entries, expected {}",
                        lineno + 1,
                        row.len(),
                        first.len()
                    ),
                });
            }
        }
        rows.push(row);
    }
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    Ok(Mat::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_is_exact() {
        let m = Mat::from_row_slice(2, 3, &[1.0 / 3.0, -2.5e-17, 7.0, 0.1, 1e300, -0.0]);
        let back = matrix_from_text(&matrix_to_text(&m)).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn ragged_text_rejected() {
        let err = matrix_from_text("1 2\n3\n").unwrap_err();
        assert!(matches!(err, Error::Format { field: "matrix-row", .. }));
    }
}
