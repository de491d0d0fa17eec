//! Small dense complex solves used by the oracle receiver.

use ndarray::{Array2, ArrayView2};

use crate::{CMatrix, C64};

/// Solves `A Z = B` by Gaussian elimination with partial pivoting.
///
/// Returns `None` when a pivot falls below `pivot_tol` times the largest
/// absolute entry of `A`.
pub fn solve(a: ArrayView2<C64>, b: ArrayView2<C64>, pivot_tol: f64) -> Option<CMatrix> {
    let n = a.nrows();
    assert_eq!(a.ncols(), n, "solve needs a square matrix");
    assert_eq!(b.nrows(), n, "right-hand side row count");
    let k = b.ncols();
    let scale = a.iter().fold(0.0f64, |m, z| m.max(z.norm()));
    if n == 0 {
        return Some(Array2::zeros((0, k)));
    }
    if scale == 0.0 {
        return None;
    }
    let mut m = a.to_owned();
    let mut z = b.to_owned();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[[i, col]].norm().total_cmp(&m[[j, col]].norm()))
            .expect("non-empty range");
        if m[[piv, col]].norm() <= pivot_tol * scale {
            return None;
        }
        if piv != col {
            for c in 0..n {
                m.swap([piv, c], [col, c]);
            }
            for c in 0..k {
                z.swap([piv, c], [col, c]);
            }
        }
        let inv = m[[col, col]].inv();
        for r in col + 1..n {
            let f = m[[r, col]] * inv;
            if f == C64::new(0.0, 0.0) {
                continue;
            }
            for c in col..n {
                let v = m[[col, c]];
                m[[r, c]] -= f * v;
            }
            for c in 0..k {
                let v = z[[col, c]];
                z[[r, c]] -= f * v;
            }
        }
    }
    for col in (0..n).rev() {
        let inv = m[[col, col]].inv();
        for c in 0..k {
            let mut acc = z[[col, c]];
            for j in col + 1..n {
                acc -= m[[col, j]] * z[[j, c]];
            }
            z[[col, c]] = acc * inv;
        }
    }
    Some(z)
}

/// Conjugate transpose.
pub fn herm(a: ArrayView2<C64>) -> CMatrix {
    a.t().mapv(|z| z.conj())
}
