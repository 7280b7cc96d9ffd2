//! Null-vector extraction via column-pivoted Householder QR.
//!
//! Works on the transpose internally so every reflector touches contiguous
//! memory; the Liouvillian superoperators this runs on reach dimensions of
//! a few thousand.

use num_complex::Complex64;

use super::{ComplexDense, NumericsError, Result};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Unit-norm null vector of a square matrix whose null space is expected to
/// be one-dimensional.
///
/// `rank_tol` is relative to the largest R diagonal. Errors if no diagonal
/// falls below the tolerance, or if two or more do (degenerate null space).
pub fn nullspace_vector(a: &ComplexDense, rank_tol: f64) -> Result<Vec<Complex64>> {
    assert!(a.is_square(), "nullspace_vector expects a square matrix");
    let n = a.rows();
    if n == 0 {
        return Err(NumericsError::NoNullVector { pivot: 0.0 });
    }

    // w holds the transpose: row j of w is column j of a.
    let mut w: Vec<Vec<Complex64>> = (0..n).map(|j| a.col(j)).collect();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut norms_sq: Vec<f64> = w
        .iter()
        .map(|r| r.iter().map(|z| z.norm_sqr()).sum())
        .collect();

    for k in 0..n {
        // Pivot: remaining column with the largest norm over rows k..n.
        let mut best = k;
        let mut best_norm = norms_sq[k];
        for (j, &nj) in norms_sq.iter().enumerate().skip(k + 1) {
            if nj > best_norm {
                best = j;
                best_norm = nj;
            }
        }
        if best != k {
            w.swap(k, best);
            perm.swap(k, best);
            norms_sq.swap(k, best);
        }

        // Householder reflector on rows k..n of w[k].
        let (head, tail) = w.split_at_mut(k + 1);
        let col = &mut head[k];
        let alpha = col[k];
        let sigma_sq: f64 = col[k + 1..].iter().map(|z| z.norm_sqr()).sum();
        if sigma_sq == 0.0 {
            // already triangular in this column
            norms_sq[k] = 0.0;
            for j in (k + 1)..n {
                norms_sq[j] = w[j][k + 1..].iter().map(|z| z.norm_sqr()).sum();
            }
            continue;
        }
        let norm_x = (alpha.norm_sqr() + sigma_sq).sqrt();
        let phi = if alpha.norm() > 0.0 {
            alpha / alpha.norm()
        } else {
            Complex64::new(1.0, 0.0)
        };
        let g = -phi * norm_x;
        let mut v = vec![ZERO; n - k];
        v[0] = alpha - g;
        v[1..].copy_from_slice(&col[k + 1..]);
        let vsq: f64 = v.iter().map(|z| z.norm_sqr()).sum();
        let beta = 2.0 / vsq;
        col[k] = g;
        for z in col[k + 1..].iter_mut() {
            *z = ZERO;
        }

        for row in tail.iter_mut() {
            let seg = &mut row[k..];
            let mut s = ZERO;
            for (vi, wi) in v.iter().zip(seg.iter()) {
                s += vi.conj() * wi;
            }
            s *= beta;
            for (vi, wi) in v.iter().zip(seg.iter_mut()) {
                *wi -= s * vi;
            }
        }
        for j in (k + 1)..n {
            norms_sq[j] = w[j][k + 1..].iter().map(|z| z.norm_sqr()).sum();
        }
    }

    // R[k][j] = w[j][k] for j >= k. Inspect the diagonal.
    let diag_max = (0..n).map(|k| w[k][k].norm()).fold(0.0, f64::max);
    if diag_max == 0.0 {
        return Err(NumericsError::DegenerateNullSpace { tiny: n });
    }
    let tol = rank_tol * diag_max;
    let tiny: Vec<usize> = (0..n).filter(|&k| w[k][k].norm() <= tol).collect();
    if tiny.is_empty() {
        let smallest = (0..n).map(|k| w[k][k].norm()).fold(f64::INFINITY, f64::min);
        return Err(NumericsError::NoNullVector { pivot: smallest });
    }
    if tiny.len() > 1 || tiny[0] != n - 1 {
        return Err(NumericsError::DegenerateNullSpace { tiny: tiny.len() });
    }

    // With pivoting the tiny diagonal sits at the end; solve
    // R[0..n-1,0..n-1] y = -R[0..n-1, n-1] and append 1.
    let last = n - 1;
    let mut x = vec![ZERO; n];
    x[last] = Complex64::new(1.0, 0.0);
    for k in (0..last).rev() {
        let mut acc = w[last][k];
        for j in (k + 1)..last {
            acc += w[j][k] * x[j];
        }
        x[k] = -acc / w[k][k];
    }

    let mut out = vec![ZERO; n];
    for (j, &p) in perm.iter().enumerate() {
        out[p] = x[j];
    }
    let norm: f64 = out.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    for z in &mut out {
        *z /= norm;
    }
    Ok(out)
}
