//! Number formatting shared by the CSV writers.

use nalgebra::DMatrix;

/// Formats with 17 significant digits.
pub fn fmt_num(x: f64) -> String {
    format!("{x:.16e}")
}

/// Column names `prefix_i_j` (one-based, row-major).
pub fn matrix_header(prefix: &str, rows: usize, cols: usize) -> Vec<String> {
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out.push(format!("{prefix}_{}_{}", i + 1, j + 1));
        }
    }
    out
}

/// Column names `prefix_i` (one-based).
pub fn vector_header(prefix: &str, len: usize) -> Vec<String> {
    (1..=len).map(|i| format!("{prefix}_{i}")).collect()
}

/// Appends the entries of `m` row-major.
pub fn push_matrix(rec: &mut Vec<String>, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            rec.push(fmt_num(m[(i, j)]));
        }
    }
}
