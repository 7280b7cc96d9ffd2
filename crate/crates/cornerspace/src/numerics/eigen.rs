//! Dense Hermitian eigendecomposition.
//!
//! Householder reduction to real symmetric tridiagonal form followed by
//! implicit-shift QL iteration with accumulated complex eigenvectors.
//! Eigenvalues come out sorted descending; each eigenvector is phase-fixed
//! so that its first component of magnitude above 1e-12 is real positive,
//! which keeps corner bases reproducible across runs.

use num_complex::Complex64;

use super::{ComplexDense, NumericsError, Result};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const PHASE_FLOOR: f64 = 1e-12;
const MAX_QL_ITERS: usize = 64;

/// Eigenvalues (descending) and orthonormal eigenvectors (columns).
#[derive(Clone, Debug)]
pub struct EigenDecomposition {
    pub values: Vec<f64>,
    pub vectors: ComplexDense,
}

impl EigenDecomposition {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Column `r` of the eigenvector matrix.
    pub fn vector(&self, r: usize) -> Vec<Complex64> {
        self.vectors.col(r)
    }

    /// V diag(values) V^H.
    pub fn reconstruct(&self) -> ComplexDense {
        let n = self.dim();
        let mut scaled = self.vectors.clone();
        for c in 0..n {
            let s = Complex64::new(self.values[c], 0.0);
            for r in 0..n {
                scaled[(r, c)] *= s;
            }
        }
        scaled.mul_dag(&self.vectors)
    }
}

/// Eigendecomposition of a Hermitian matrix.
///
/// Fails if `a` is not square, deviates from Hermiticity by more than
/// `hermiticity_tol` relative to its largest entry, or if the QL iteration
/// does not converge.
pub fn hermitian_eig(a: &ComplexDense, hermiticity_tol: f64) -> Result<EigenDecomposition> {
    if !a.is_square() {
        return Err(NumericsError::NotSquare {
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    let n = a.rows();
    if n == 0 {
        return Ok(EigenDecomposition {
            values: Vec::new(),
            vectors: ComplexDense::zeros(0, 0),
        });
    }
    let scale = a.max_abs();
    let deviation = a.hermiticity_deviation();
    if scale > 0.0 && deviation > hermiticity_tol * scale {
        return Err(NumericsError::NotHermitian {
            deviation,
            allowed: hermiticity_tol * scale,
        });
    }

    let mut work = a.hermitize();
    let (mut d, mut e, mut q) = tridiagonalize(&mut work);
    ql_implicit(&mut d, &mut e, &mut q)?;
    sort_descending(&mut d, &mut q);
    fix_phases(&mut q);
    Ok(EigenDecomposition {
        values: d,
        vectors: q,
    })
}

/// Reduce a Hermitian matrix to real tridiagonal form; returns the real
/// diagonal `d`, real non-negative off-diagonal `e` (length n-1), and the
/// unitary `q` with A = q T q^H.
fn tridiagonalize(a: &mut ComplexDense) -> (Vec<f64>, Vec<f64>, ComplexDense) {
    let n = a.rows();
    let mut reflectors: Vec<(usize, Vec<Complex64>, f64)> = Vec::new();

    for k in 0..n.saturating_sub(2) {
        let m = n - k - 1;
        let alpha = a[(k + 1, k)];
        let mut sigma_sq = 0.0;
        for i in 2..=m {
            sigma_sq += a[(k + i, k)].norm_sqr();
        }
        if sigma_sq == 0.0 {
            continue;
        }
        let norm_x = (alpha.norm_sqr() + sigma_sq).sqrt();
        let phi = if alpha.norm() > 0.0 {
            alpha / alpha.norm()
        } else {
            Complex64::new(1.0, 0.0)
        };
        let g = -phi * norm_x;
        let mut v = vec![ZERO; m];
        v[0] = alpha - g;
        for i in 1..m {
            v[i] = a[(k + 1 + i, k)];
        }
        let vsq: f64 = v.iter().map(|z| z.norm_sqr()).sum();
        let beta = 2.0 / vsq;

        // p = beta * B v over the trailing block B = a[k+1.., k+1..]
        let mut p = vec![ZERO; m];
        for i in 0..m {
            let mut acc = ZERO;
            for j in 0..m {
                acc += a[(k + 1 + i, k + 1 + j)] * v[j];
            }
            p[i] = beta * acc;
        }
        let vp: Complex64 = v.iter().zip(&p).map(|(x, y)| x.conj() * y).sum();
        let kappa = 0.5 * beta * vp;
        let w: Vec<Complex64> = p.iter().zip(&v).map(|(pi, vi)| pi - kappa * vi).collect();
        // B <- B - v w^H - w v^H
        for i in 0..m {
            for j in 0..m {
                let upd = v[i] * w[j].conj() + w[i] * v[j].conj();
                a[(k + 1 + i, k + 1 + j)] -= upd;
            }
        }
        a[(k + 1, k)] = g;
        a[(k, k + 1)] = g.conj();
        for i in 2..=m {
            a[(k + i, k)] = ZERO;
            a[(k, k + i)] = ZERO;
        }
        reflectors.push((k, v, beta));
    }

    // Backward accumulation of Q = H_0 H_1 ... H_last.
    let mut q = ComplexDense::identity(n);
    for (k, v, beta) in reflectors.iter().rev() {
        let m = v.len();
        for col in (k + 1)..n {
            let mut s = ZERO;
            for i in 0..m {
                s += v[i].conj() * q[(k + 1 + i, col)];
            }
            s *= Complex64::new(*beta, 0.0);
            for i in 0..m {
                let upd = v[i] * s;
                q[(k + 1 + i, col)] -= upd;
            }
        }
    }

    // Make the off-diagonal real non-negative with a diagonal phase.
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n.saturating_sub(1)];
    for i in 0..n {
        d[i] = a[(i, i)].re;
    }
    let mut delta = Complex64::new(1.0, 0.0);
    let mut deltas = vec![Complex64::new(1.0, 0.0); n];
    for k in 0..n.saturating_sub(1) {
        let ek = a[(k + 1, k)];
        let mag = ek.norm();
        e[k] = mag;
        if mag > 0.0 {
            delta *= ek / mag;
        }
        deltas[k + 1] = delta;
    }
    for c in 0..n {
        if deltas[c] != Complex64::new(1.0, 0.0) {
            for r in 0..n {
                q[(r, c)] *= deltas[c];
            }
        }
    }

    (d, e, q)
}

/// Implicit-shift QL on a real tridiagonal with complex eigenvector
/// accumulation; classic tql2 bookkeeping.
fn ql_implicit(d: &mut [f64], e_in: &mut [f64], z: &mut ComplexDense) -> Result<()> {
    let n = d.len();
    if n <= 1 {
        return Ok(());
    }
    // Shift e so that e[i] couples d[i] and d[i+1]; pad with a trailing 0.
    let mut e = vec![0.0; n];
    e[..n - 1].copy_from_slice(e_in);

    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m < n - 1 {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > MAX_QL_ITERS {
                return Err(NumericsError::NoConvergence {
                    row: l,
                    iters: iter,
                });
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            let sign_r = if g >= 0.0 { r } else { -r };
            g = d[m] - d[l] + e[l] / (g + sign_r);
            let mut s = 1.0;
            let mut c = 1.0;
            let mut p = 0.0;
            let mut underflow = false;
            for i in (l..m).rev() {
                let mut f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                for row in 0..z.rows() {
                    f = z[(row, i + 1)].re;
                    let fi = z[(row, i + 1)].im;
                    let zi = z[(row, i)];
                    z[(row, i + 1)] = Complex64::new(s * zi.re + c * f, s * zi.im + c * fi);
                    z[(row, i)] = Complex64::new(c * zi.re - s * f, c * zi.im - s * fi);
                }
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok(())
}

fn sort_descending(d: &mut Vec<f64>, z: &mut ComplexDense) {
    let n = d.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[j].partial_cmp(&d[i]).unwrap());
    let mut sorted_d = Vec::with_capacity(n);
    let mut sorted_z = ComplexDense::zeros(n, n);
    for (new_c, &old_c) in order.iter().enumerate() {
        sorted_d.push(d[old_c]);
        for r in 0..n {
            sorted_z[(r, new_c)] = z[(r, old_c)];
        }
    }
    *d = sorted_d;
    *z = sorted_z;
}

/// Make the first significant component of each column real positive.
fn fix_phases(z: &mut ComplexDense) {
    let n = z.rows();
    for c in 0..z.cols() {
        let mut phase = None;
        for r in 0..n {
            let v = z[(r, c)];
            if v.norm() > PHASE_FLOOR {
                phase = Some(v / v.norm());
                break;
            }
        }
        if let Some(ph) = phase {
            let fix = ph.conj();
            for r in 0..n {
                z[(r, c)] *= fix;
            }
        }
    }
}
