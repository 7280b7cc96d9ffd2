//! Gutzwiller mean-field baseline.
//!
//! In the factorized (product-state) approximation with all sites
//! identical, the hopping term collapses to a self-consistent coherent
//! field: each site sees `H_mf = -dw n + (U/2) n2 + F (b' + b) -
//! J (<b> b' + <b>* b)`, and the z-neighbor sum times J/z leaves a
//! single factor of J. The one-site steady state is solved exactly
//! through the Liouvillian null space and `<b>` is iterated to a damped
//! fixed point.

use num_complex::Complex64;
use thiserror::Error;

use crate::model::{fock_site_operators, Interaction, ModelError, ModelParams};
use crate::numerics::{ComplexDense, ComplexSparse, Operator};
use crate::steadystate::{steady_state_nullspace, DensityMatrix, SolveError};

#[derive(Debug, Error)]
pub enum MeanFieldError {
    #[error("damping must lie in (0, 1], got {0}")]
    BadDamping(f64),

    #[error("fixed point not reached after {iters} iterations (residual {residual:.3e})")]
    NotConverged { iters: usize, residual: f64 },

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error(transparent)]
    Solve(#[from] SolveError),
}

pub type Result<T> = std::result::Result<T, MeanFieldError>;

/// Converged (or best-effort) self-consistent single-site solution.
#[derive(Clone, Debug)]
pub struct MeanFieldSolution {
    pub rho: DensityMatrix,
    pub b_mean: Complex64,
    pub n: f64,
    pub g2_onsite: Option<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    /// Oscillation flag: residual stopped decreasing before the tolerance
    /// was met.
    pub oscillatory: bool,
    /// (`<b>`, residual) per iteration.
    pub trace: Vec<(Complex64, f64)>,
}

struct SiteOperators {
    b: ComplexSparse,
    n: ComplexSparse,
    n2: ComplexSparse,
    b_dag: ComplexSparse,
}

fn single_site_steady_state(
    params: &ModelParams,
    ops: &SiteOperators,
    b_field: Complex64,
) -> Result<DensityMatrix> {
    let u_half = match params.interaction {
        Interaction::Finite(u) => 0.5 * u,
        Interaction::HardCore => 0.0,
    };
    let mut h = ops.n.scale(Complex64::new(-params.delta_omega, 0.0));
    if u_half != 0.0 {
        h = h.add(&ops.n2.scale(Complex64::new(u_half, 0.0)));
    }
    h = h.add(
        &ops.b
            .add(&ops.b_dag)
            .scale(Complex64::new(params.drive, 0.0)),
    );
    // mean-field hopping: -J (<b> b' + <b>* b)
    let j = params.hopping;
    if j != 0.0 {
        h = h.add(&ops.b_dag.scale(-j * b_field));
        h = h.add(&ops.b.scale(-j * b_field.conj()));
    }
    let jump = Operator::Sparse(ops.b.scale(Complex64::new(params.gamma.sqrt(), 0.0)));
    Ok(steady_state_nullspace(
        &Operator::Sparse(h),
        &[jump],
        params.site_dim(),
        "meanfield:site",
    )?)
}

fn expectation(op: &ComplexSparse, rho: &ComplexDense) -> Complex64 {
    Operator::Sparse(op.clone()).expectation(rho)
}

/// Damped fixed-point iteration for the Gutzwiller field `<b>`.
///
/// Starts from the linear-cavity guess `<b> = F / (dw + J + i gamma/2)`
/// and mixes updates as `<b> <- (1-damping) <b> + damping <b>_new`. When
/// several fixed points exist, the one reached from this guess is
/// reported along with the full iteration trace.
pub fn gutzwiller_fixed_point(
    params: &ModelParams,
    damping: f64,
    tol: f64,
    max_iter: usize,
) -> Result<MeanFieldSolution> {
    params.validate()?;
    if !(0.0 < damping && damping <= 1.0) {
        return Err(MeanFieldError::BadDamping(damping));
    }
    let (b, n, n2) = fock_site_operators(params.n_max);
    let ops = SiteOperators {
        b_dag: b.dagger(),
        b,
        n,
        n2,
    };

    let denom = Complex64::new(
        params.delta_omega + params.hopping,
        0.5 * params.gamma,
    );
    let mut b_field = Complex64::new(params.drive, 0.0) / denom;

    let mut trace = Vec::new();
    let mut rho = single_site_steady_state(params, &ops, b_field)?;
    let mut residual = f64::INFINITY;
    let mut best_residual = f64::INFINITY;
    let mut stall = 0usize;
    let mut iterations = 0;
    let mut converged = false;

    for it in 1..=max_iter {
        iterations = it;
        let b_new = expectation(&ops.b, &rho.mat);
        residual = (b_new - b_field).norm();
        trace.push((b_field, residual));
        if params.hopping == 0.0 {
            // the field never enters H, so the first solve is the answer
            b_field = b_new;
            residual = 0.0;
            converged = true;
            break;
        }
        if residual < tol {
            converged = true;
            b_field = b_new;
            break;
        }
        if residual < best_residual * (1.0 - 1e-12) {
            best_residual = residual;
            stall = 0;
        } else {
            stall += 1;
        }
        b_field = b_field + damping * (b_new - b_field);
        rho = single_site_steady_state(params, &ops, b_field)?;
        if stall > 40 {
            break;
        }
    }
    // evaluate the final state at the reported field
    rho = single_site_steady_state(params, &ops, b_field)?;
    let n_val = expectation(&ops.n, &rho.mat).re;
    let g2 = if params.is_hardcore() {
        if n_val > crate::observables::DENSITY_FLOOR {
            Some(0.0)
        } else {
            None
        }
    } else {
        let num = expectation(&ops.n2, &rho.mat).re;
        if n_val > crate::observables::DENSITY_FLOOR {
            Some(num / (n_val * n_val))
        } else {
            None
        }
    };
    Ok(MeanFieldSolution {
        rho,
        b_mean: b_field,
        n: n_val,
        g2_onsite: g2,
        iterations,
        residual,
        converged,
        oscillatory: !converged && stall > 40,
        trace,
    })
}

/// Product state rho_mf^(x sites), used as the initial condition for base
/// clusters.
pub fn meanfield_product_state(
    params: &ModelParams,
    n_sites: usize,
    basis: impl Into<String>,
) -> Result<DensityMatrix> {
    let mf = gutzwiller_fixed_point(params, 0.5, 1e-10, 500)?;
    let mut rho = ComplexDense::identity(1);
    for _ in 0..n_sites {
        rho = crate::numerics::kron(&rho, &mf.rho.mat).map_err(ModelError::Numerics)?;
    }
    let mut dm = DensityMatrix::new(rho, basis);
    dm.renormalize();
    Ok(dm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(
        delta_omega: f64,
        interaction: Interaction,
        hopping: f64,
        n_max: usize,
    ) -> ModelParams {
        ModelParams {
            delta_omega,
            interaction,
            hopping,
            drive: 2.0,
            gamma: 1.0,
            n_max,
            z: 4,
        }
    }

    #[test]
    fn linear_meanfield_closed_form() {
        // U = 0: <b> = F / (dw + J + i gamma/2)
        let p = params(5.0, Interaction::Finite(0.0), 1.0, 10);
        let mf = gutzwiller_fixed_point(&p, 0.5, 1e-10, 500).unwrap();
        assert!(mf.converged);
        assert!((mf.n - 4.0 / 36.25).abs() < 1e-7, "n = {}", mf.n);
        assert!(
            (mf.b_mean.re - 12.0 / 36.25).abs() < 1e-7,
            "re b = {}",
            mf.b_mean.re
        );
    }

    #[test]
    fn zero_hopping_reduces_to_bare_site() {
        let p = params(5.0, Interaction::HardCore, 0.0, 1);
        let mf = gutzwiller_fixed_point(&p, 0.5, 1e-12, 500).unwrap();
        assert!(mf.converged);
        // two-level optical Bloch value
        assert!((mf.n - 4.0 / 33.25).abs() < 1e-9);
        // J = 0 makes the first update already self-consistent
        assert!(mf.iterations <= 3, "iterations = {}", mf.iterations);
    }

    #[test]
    fn self_consistency_of_reported_field() {
        let p = params(5.0, Interaction::Finite(20.0), 1.0, 3);
        let mf = gutzwiller_fixed_point(&p, 0.5, 1e-10, 1000).unwrap();
        assert!(mf.converged);
        let (b, _, _) = fock_site_operators(p.n_max);
        let b_check = expectation(&b, &mf.rho.mat);
        assert!((b_check - mf.b_mean).norm() < 1e-8);
    }

    #[test]
    fn hardcore_meanfield_population() {
        let p = params(5.0, Interaction::HardCore, 1.0, 1);
        let mf = gutzwiller_fixed_point(&p, 0.5, 1e-10, 1000).unwrap();
        assert!(mf.converged);
        assert!((mf.n - 0.0953).abs() < 0.0953 * 0.01, "n = {}", mf.n);
        assert_eq!(mf.g2_onsite, Some(0.0));
    }

    #[test]
    fn residual_decreases_monotonically_under_half_damping() {
        for (inter, j, n_max) in [
            (Interaction::HardCore, 1.0, 1),
            (Interaction::Finite(20.0), 1.0, 3),
            (Interaction::Finite(20.0), 3.0, 3),
            (Interaction::Finite(10.0), 1.0, 5),
            (Interaction::Finite(1.0), 1.0, 4),
        ] {
            let p = params(5.0, inter, j, n_max);
            let mf = gutzwiller_fixed_point(&p, 0.5, 1e-9, 2000).unwrap();
            assert!(mf.converged, "row {inter:?} J={j} did not converge");
            let mut increases = 0;
            for w in mf.trace.windows(2) {
                if w[1].1 > w[0].1 * (1.0 + 1e-9) {
                    increases += 1;
                }
            }
            assert_eq!(
                increases, 0,
                "residual increased {increases} times for {inter:?} J={j}"
            );
        }
    }

    #[test]
    fn product_state_is_valid_density_matrix() {
        let p = params(5.0, Interaction::HardCore, 1.0, 1);
        let rho = meanfield_product_state(&p, 4, "fock:2x2").unwrap();
        rho.validate(1e-10).unwrap();
        assert_eq!(rho.dim(), 16);
    }
}
