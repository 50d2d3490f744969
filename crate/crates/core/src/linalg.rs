//! Dense Gaussian elimination with partial pivoting for the small systems
//! that relate raw-level factors to basis strengths.

use crate::error::AlgebraError;

const PIVOT_EPS: f64 = 1e-14;

/// Solves `a · x = b` for square `a` (row-major rows).
pub fn solve(a: &[Vec<f64>], b: &[f64]) -> Result<Vec<f64>, AlgebraError> {
    let n = b.len();
    if a.len() != n || a.iter().any(|row| row.len() != n) {
        return Err(AlgebraError::Arity {
            expected: n,
            got: a.len(),
        });
    }
    // augmented matrix
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .zip(b)
        .map(|(row, &bi)| {
            let mut r = row.clone();
            r.push(bi);
            r
        })
        .collect();

    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .expect("non-empty range");
        if m[pivot][col].abs() < PIVOT_EPS {
            return Err(AlgebraError::Singular);
        }
        m.swap(col, pivot);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            if f == 0.0 {
                continue;
            }
            let (upper, lower) = m.split_at_mut(row);
            for (a, b) in lower[0][col..].iter_mut().zip(&upper[col][col..]) {
                *a -= f * b;
            }
        }
    }

    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|k| m[row][k] * x[k]).sum();
        x[row] = (m[row][n] - tail) / m[row][row];
    }
    Ok(x)
}
