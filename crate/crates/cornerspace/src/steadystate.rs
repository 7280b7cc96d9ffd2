//! Deterministic Lindblad evolution and an exact null-space oracle.
//!
//! dρ/dt = i[ρ, H] + Σ_j (C_j ρ C_j† − ½{C_j†C_j, ρ})   (ħ = 1)
//!
//! The time stepper folds the commutator and the anticommutator into a
//! single drift matrix W = iH + ½ Σ C†C, so each right-hand side costs one
//! dense product for the drift plus two sparse-aware products per jump
//! channel. The steady state is a fixed point of the exact flow and of the
//! RK4 map alike, so the step size is chosen for stability, not accuracy:
//! dt = dt_factor / Ω with Ω an upper estimate of the fastest Liouvillian
//! frequency (RK4 is stable on the imaginary axis up to |z| ≈ 2.8).

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::Geometry;
use crate::model::{self, ModelError, ModelParams, OperatorSet};
use crate::numerics::{
    nullspace_vector, ComplexDense, NumericsError, Operator, Rk4Workspace,
};
use crate::observables::{self, ObservableRecord};

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("dimension mismatch between state ({0}) and operators ({1})")]
    DimensionMismatch(usize, usize),

    #[error("evolution diverged at t = {t:.3}: {what}")]
    Diverged { t: f64, what: String },

    #[error("density matrix invariant violated: {0}")]
    InvalidState(String),

    #[error("Liouvillian dimension {dim} exceeds the null-space cap {cap}")]
    NullspaceTooLarge { dim: usize, cap: usize },

    #[error("steady-state manifold is degenerate (null-space dimension > 1)")]
    DegenerateSteadyState,

    #[error(transparent)]
    Numerics(#[from] NumericsError),

    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, SolveError>;

/// Hermitian, trace-one state of a cluster, tagged with the basis it
/// lives in so mismatched uses fail loudly.
#[derive(Clone, Debug)]
pub struct DensityMatrix {
    pub mat: ComplexDense,
    pub basis: String,
}

impl DensityMatrix {
    pub fn new(mat: ComplexDense, basis: impl Into<String>) -> Self {
        Self {
            mat,
            basis: basis.into(),
        }
    }

    pub fn dim(&self) -> usize {
        self.mat.rows()
    }

    /// Pure state |k><k|.
    pub fn pure(dim: usize, k: usize, basis: impl Into<String>) -> Self {
        let mut mat = ComplexDense::zeros(dim, dim);
        mat[(k, k)] = Complex64::new(1.0, 0.0);
        Self::new(mat, basis)
    }

    /// Diagonal state from (possibly unnormalized) weights.
    pub fn from_weights(weights: &[f64], basis: impl Into<String>) -> Self {
        let sum: f64 = weights.iter().sum();
        let mat = ComplexDense::from_diag(
            &weights.iter().map(|w| w / sum).collect::<Vec<_>>(),
        );
        Self::new(mat, basis)
    }

    /// Check Hermiticity and unit trace within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        if !self.mat.is_square() {
            return Err(SolveError::InvalidState("matrix not square".into()));
        }
        let herm = self.mat.hermiticity_deviation();
        if herm > tol {
            return Err(SolveError::InvalidState(format!(
                "Hermiticity deviation {herm:.3e} > {tol:.1e}"
            )));
        }
        let tr = self.mat.trace();
        if (tr.re - 1.0).abs() > tol || tr.im.abs() > tol {
            return Err(SolveError::InvalidState(format!(
                "trace {tr} deviates from 1"
            )));
        }
        Ok(())
    }

    /// ρ ← (ρ + ρ†)/2 with the trace renormalized to one.
    pub fn renormalize(&mut self) {
        self.mat = self.mat.hermitize();
        let tr = self.mat.trace().re;
        self.mat.scale_mut(Complex64::new(1.0 / tr, 0.0));
    }
}

/// Literal Lindblad right-hand side; prefer [`LindbladPropagator`] in
/// loops. Valid for any (not necessarily Hermitian) ρ.
pub fn lindblad_rhs(rho: &ComplexDense, h: &Operator, jumps: &[Operator]) -> ComplexDense {
    let hd = h.to_dense();
    assert_eq!(rho.rows(), hd.rows(), "state and Hamiltonian dimensions");
    let i = Complex64::new(0.0, 1.0);
    // i (rho H - H rho)
    let mut out = rho.mul(&hd);
    out.axpy(Complex64::new(-1.0, 0.0), &hd.mul(rho));
    out.scale_mut(i);
    for c in jumps {
        let cd = c.to_dense();
        let c_rho = cd.mul(rho);
        out.axpy(Complex64::new(1.0, 0.0), &c_rho.mul_dag(&cd));
        let cc = cd.dag_mul(&cd); // C†C
        out.axpy(Complex64::new(-0.5, 0.0), &cc.mul(rho));
        out.axpy(Complex64::new(-0.5, 0.0), &rho.mul(&cc));
    }
    out
}

enum Drift {
    Dense(ComplexDense),
    Sparse(crate::numerics::ComplexSparse),
}

struct JumpChannel {
    c: Operator,
    /// C† materialized, same representation as `c`.
    c_dag: Operator,
}

/// Precomputed Lindblad generator for repeated right-hand-side evaluation
/// on Hermitian states: rhs(ρ) = −Wρ − (Wρ)† + Σ_j C_j ρ C_j†.
pub struct LindbladPropagator {
    dim: usize,
    drift: Drift,
    channels: Vec<JumpChannel>,
    /// Estimate of the fastest frequency in the generator.
    omega: f64,
}

/// Scratch matrices for [`LindbladPropagator::rhs_into`].
pub struct PropagatorWorkspace {
    rho: ComplexDense,
    t: ComplexDense,
    u: ComplexDense,
    v: ComplexDense,
    w: ComplexDense,
}

impl PropagatorWorkspace {
    pub fn new(dim: usize) -> Self {
        Self {
            rho: ComplexDense::zeros(dim, dim),
            t: ComplexDense::zeros(dim, dim),
            u: ComplexDense::zeros(dim, dim),
            v: ComplexDense::zeros(dim, dim),
            w: ComplexDense::zeros(dim, dim),
        }
    }
}

impl LindbladPropagator {
    pub fn new(h: &Operator, jumps: &[Operator]) -> Result<Self> {
        let dim = h.dim();
        for j in jumps {
            if j.dim() != dim {
                return Err(SolveError::DimensionMismatch(j.dim(), dim));
            }
        }
        // G = sum C†C, W = iH + G/2, built in the representation of H
        let i = Complex64::new(0.0, 1.0);
        let half = Complex64::new(0.5, 0.0);
        let (drift, g_for_omega) = match h {
            Operator::Sparse(hs) => {
                let mut g = crate::numerics::ComplexSparse::zero(dim, dim);
                for c in jumps {
                    let Operator::Sparse(cs) = c else {
                        return Err(SolveError::DimensionMismatch(c.dim(), dim));
                    };
                    g = g.add(&cs.dagger().mul_sparse(cs));
                }
                let w = hs.scale(i).add(&g.scale(half));
                (Drift::Sparse(w), Operator::Sparse(g))
            }
            Operator::Dense(hd) => {
                let mut g = ComplexDense::zeros(dim, dim);
                for c in jumps {
                    let cd = c.to_dense();
                    g.gemm_acc(
                        Complex64::new(1.0, 0.0),
                        crate::numerics::GemmSide::dagger(&cd),
                        crate::numerics::GemmSide::plain(&cd),
                    );
                }
                let mut w = hd.scale(i);
                w.axpy(half, &g);
                (Drift::Dense(w), Operator::Dense(g))
            }
        };
        let channels = jumps
            .iter()
            .map(|c| JumpChannel {
                c: c.clone(),
                c_dag: c.dagger(),
            })
            .collect();
        let omega = 2.0 * spectral_radius_estimate(h) + 2.0 * spectral_radius_estimate(&g_for_omega);
        Ok(Self {
            dim,
            drift,
            channels,
            omega,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Upper estimate of the fastest generator frequency; the stable RK4
    /// step is about 2.8 / omega.
    pub fn frequency_scale(&self) -> f64 {
        self.omega.max(f64::MIN_POSITIVE)
    }

    /// rhs for a Hermitian ρ given as a flattened row-major slice.
    pub fn rhs_into(&self, rho_flat: &[Complex64], out: &mut [Complex64], ws: &mut PropagatorWorkspace) {
        let d = self.dim;
        debug_assert_eq!(rho_flat.len(), d * d);
        debug_assert_eq!(out.len(), d * d);
        ws.rho.data_mut().copy_from_slice(rho_flat);
        let (rho, t, u, v, w) = (&ws.rho, &mut ws.t, &mut ws.u, &mut ws.v, &mut ws.w);

        // drift and dissipator on the two cores
        rayon::join(
            || {
                // t = W rho
                match &self.drift {
                    Drift::Dense(wd) => {
                        let mut tt = std::mem::replace(t, ComplexDense::zeros(0, 0));
                        tt.data_mut().fill(Complex64::new(0.0, 0.0));
                        tt.gemm_acc(
                            Complex64::new(1.0, 0.0),
                            crate::numerics::GemmSide::plain(wd),
                            crate::numerics::GemmSide::plain(rho),
                        );
                        *t = tt;
                    }
                    Drift::Sparse(ws_) => {
                        ws_.mul_dense_into(rho, t);
                    }
                }
            },
            || {
                // u = sum_j C_j rho C_j†
                u.data_mut().fill(Complex64::new(0.0, 0.0));
                for ch in &self.channels {
                    match (&ch.c, &ch.c_dag) {
                        (Operator::Sparse(cs), Operator::Sparse(cds)) => {
                            cs.mul_dense_into(rho, v);
                            cds.dense_mul_into(v, w);
                        }
                        _ => {
                            let cd = ch.c.to_dense();
                            v.data_mut().fill(Complex64::new(0.0, 0.0));
                            v.gemm_acc(
                                Complex64::new(1.0, 0.0),
                                crate::numerics::GemmSide::plain(&cd),
                                crate::numerics::GemmSide::plain(rho),
                            );
                            w.data_mut().fill(Complex64::new(0.0, 0.0));
                            w.gemm_acc(
                                Complex64::new(1.0, 0.0),
                                crate::numerics::GemmSide::plain(v),
                                crate::numerics::GemmSide::dagger(&cd),
                            );
                        }
                    }
                    u.axpy(Complex64::new(1.0, 0.0), w);
                }
            },
        );

        // out = -t - t† + u
        for r in 0..d {
            for c in 0..d {
                out[r * d + c] = ws.u[(r, c)] - ws.t[(r, c)] - ws.t[(c, r)].conj();
            }
        }
    }
}

/// Spectral-radius estimate by power iteration from a fixed seed vector.
pub fn spectral_radius_estimate(op: &Operator) -> f64 {
    let d = op.dim();
    if d == 0 {
        return 0.0;
    }
    let mut v: Vec<Complex64> = (0..d)
        .map(|i| {
            // deterministic pseudo-random direction
            let x = ((i as u64).wrapping_mul(0x9e3779b97f4a7c15) >> 11) as f64
                / (1u64 << 53) as f64;
            Complex64::new(0.5 + x, 0.25 - 0.5 * x)
        })
        .collect();
    let mut norm = crate::numerics::vec_norm(&v);
    let mut y = vec![Complex64::new(0.0, 0.0); d];
    let mut radius = 0.0;
    for _ in 0..30 {
        for z in &mut v {
            *z /= norm;
        }
        op.matvec_into(&v, &mut y);
        norm = crate::numerics::vec_norm(&y);
        if norm == 0.0 {
            return 0.0;
        }
        radius = norm;
        std::mem::swap(&mut v, &mut y);
    }
    // small safety factor: power iteration converges from below
    1.05 * radius
}

/// Why the evolution stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxTime,
    Diverged,
}

/// Controls for [`evolve_to_steady_state`]; times in units of 1/gamma.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SteadyStateControls {
    /// Explicit step size; overrides `dt_factor` when set.
    pub dt: Option<f64>,
    /// dt = dt_factor / Ω_max. RK4 is stable up to about 2.8 and the
    /// fixed point is exact at any stable step, so this trades nothing
    /// but transient accuracy.
    pub dt_factor: f64,
    /// Model time between convergence checks.
    pub check_window: f64,
    /// Relative change per window below which observables count as
    /// converged.
    pub rel_tol: f64,
    /// Give up (with `Termination::MaxTime`) beyond this model time.
    pub max_time: f64,
}

impl Default for SteadyStateControls {
    fn default() -> Self {
        Self {
            dt: None,
            dt_factor: 2.0,
            check_window: 5.0,
            rel_tol: 1e-6,
            max_time: 1e3,
        }
    }
}

/// One monitored sample along the evolution.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MonitorSample {
    pub t: f64,
    pub n: f64,
    pub re_b: f64,
    pub im_b: f64,
    pub g2_onsite: Option<f64>,
    pub g2_nn: Option<f64>,
}

/// Result of a direct integration to the steady state.
#[derive(Clone, Debug)]
pub struct SteadyStateReport {
    pub rho: DensityMatrix,
    pub elapsed: f64,
    pub steps: u64,
    pub history: Vec<MonitorSample>,
    pub termination: Termination,
    pub dt: f64,
}

fn monitor_sample(
    ops: &OperatorSet,
    geom: &Geometry,
    rho: &ComplexDense,
    t: f64,
) -> Result<MonitorSample> {
    let rec: ObservableRecord = observables::record_from_state(ops, geom, rho)?;
    Ok(MonitorSample {
        t,
        n: rec.n,
        re_b: rec.re_b,
        im_b: rec.im_b,
        g2_onsite: rec.g2_onsite,
        g2_nn: rec.g2_nn,
    })
}

fn rel_change(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs()).max(1e-9);
    (a - b).abs() / scale
}

fn sample_converged(cur: &MonitorSample, prev: &MonitorSample, rel_tol: f64) -> bool {
    let mut ok = rel_change(cur.n, prev.n) < rel_tol
        && rel_change(cur.re_b, prev.re_b) < rel_tol
        && rel_change(cur.im_b, prev.im_b) < rel_tol;
    for (c, p) in [
        (cur.g2_onsite, prev.g2_onsite),
        (cur.g2_nn, prev.g2_nn),
    ] {
        ok &= match (c, p) {
            (Some(x), Some(y)) => rel_change(x, y) < rel_tol,
            (None, None) => true,
            _ => false,
        };
    }
    ok
}

fn sample_finite(s: &MonitorSample) -> bool {
    s.n.is_finite()
        && s.re_b.is_finite()
        && s.im_b.is_finite()
        && s.g2_onsite.is_none_or(f64::is_finite)
        && s.g2_nn.is_none_or(f64::is_finite)
}

/// Integrate the master equation from `rho0` until the monitored
/// observables (site-averaged n, `Re<b>`, `Im<b>`, g2, nearest-neighbor g2)
/// stop changing. The state is re-Hermitized and trace-renormalized at
/// every check window.
pub fn evolve_to_steady_state(
    ops: &OperatorSet,
    geom: &Geometry,
    params: &ModelParams,
    rho0: &DensityMatrix,
    controls: &SteadyStateControls,
) -> Result<SteadyStateReport> {
    if rho0.dim() != ops.dim {
        return Err(SolveError::DimensionMismatch(rho0.dim(), ops.dim));
    }
    let h = model::assemble_hamiltonian(ops, geom, params)?;
    let jumps = model::jump_operators(ops, params);
    let prop = LindbladPropagator::new(&h, &jumps)?;

    let gamma = params.gamma;
    let dt_raw = controls
        .dt
        .unwrap_or_else(|| controls.dt_factor / prop.frequency_scale());
    let window = controls.check_window / gamma;
    let steps_per_window = (window / dt_raw).ceil().max(1.0) as u64;
    let dt = window / steps_per_window as f64;
    let max_time = controls.max_time / gamma;

    let dim = ops.dim;
    let mut state = rho0.mat.clone();
    let mut rk4 = Rk4Workspace::new(dim * dim);
    let mut ws = PropagatorWorkspace::new(dim);

    let mut history = Vec::new();
    let mut prev = monitor_sample(ops, geom, &state, 0.0)?;
    history.push(prev.clone());

    let mut t = 0.0;
    let mut steps: u64 = 0;
    let termination;
    loop {
        {
            let mut flat = state.into_data();
            let mut f = |_t: f64, y: &[Complex64], out: &mut [Complex64]| {
                prop.rhs_into(y, out, &mut ws);
            };
            for _ in 0..steps_per_window {
                rk4.step(&mut f, &mut flat, t, dt);
                t += dt;
                steps += 1;
            }
            state = ComplexDense::from_vec(dim, dim, flat);
        }
        if !state.all_finite() {
            return Err(SolveError::Diverged {
                t: t * gamma,
                what: "non-finite density matrix".into(),
            });
        }
        // re-Hermitize and renormalize each window
        state = state.hermitize();
        let tr = state.trace().re;
        if !(tr.is_finite() && tr > 0.0) {
            return Err(SolveError::Diverged {
                t: t * gamma,
                what: format!("trace collapsed to {tr}"),
            });
        }
        state.scale_mut(Complex64::new(1.0 / tr, 0.0));

        let sample = monitor_sample(ops, geom, &state, t * gamma)?;
        if !sample_finite(&sample) {
            return Err(SolveError::Diverged {
                t: t * gamma,
                what: "non-finite observable".into(),
            });
        }
        let converged = sample_converged(&sample, &prev, controls.rel_tol);
        history.push(sample.clone());
        prev = sample;
        if converged {
            termination = Termination::Converged;
            break;
        }
        if t >= max_time - 0.5 * dt {
            termination = Termination::MaxTime;
            break;
        }
    }

    let rho = DensityMatrix::new(state, rho0.basis.clone());
    rho.validate(1e-8)?;
    Ok(SteadyStateReport {
        rho,
        elapsed: t * gamma,
        steps,
        history,
        termination,
        dt,
    })
}

/// Exact steady state from the null space of the vectorized Liouvillian.
///
/// Builds the d²×d² superoperator in row-major vectorization, extracts its
/// null vector by rank-revealing QR, and reshapes. The cap bounds d (the
/// Liouvillian has d² rows).
pub fn steady_state_nullspace(
    h: &Operator,
    jumps: &[Operator],
    cap: usize,
    basis: impl Into<String>,
) -> Result<DensityMatrix> {
    let d = h.dim();
    if d > cap {
        return Err(SolveError::NullspaceTooLarge { dim: d, cap });
    }
    let d2 = d * d;
    let hd = h.to_dense();
    let i = Complex64::new(0.0, 1.0);
    let mut l = ComplexDense::zeros(d2, d2);

    // i (rho H): L[(a,b),(a,l)] += i H[l,b]
    for a in 0..d {
        for b in 0..d {
            for lc in 0..d {
                l[(a * d + b, a * d + lc)] += i * hd[(lc, b)];
            }
        }
    }
    // -i (H rho): L[(a,b),(k,b)] -= i H[a,k]
    for a in 0..d {
        for b in 0..d {
            for k in 0..d {
                l[(a * d + b, k * d + b)] -= i * hd[(a, k)];
            }
        }
    }
    for c in jumps {
        let cd = c.to_dense();
        // C rho C†: L[(a,b),(k,l)] += C[a,k] conj(C[b,l])
        for a in 0..d {
            for b in 0..d {
                for k in 0..d {
                    let cak = cd[(a, k)];
                    if cak.norm_sqr() == 0.0 {
                        continue;
                    }
                    for lc in 0..d {
                        l[(a * d + b, k * d + lc)] += cak * cd[(b, lc)].conj();
                    }
                }
            }
        }
        let cc = cd.dag_mul(&cd);
        // -1/2 C†C rho: L[(a,b),(k,b)] -= 1/2 CC[a,k]
        for a in 0..d {
            for b in 0..d {
                for k in 0..d {
                    l[(a * d + b, k * d + b)] -= 0.5 * cc[(a, k)];
                }
            }
        }
        // -1/2 rho C†C: L[(a,b),(a,l)] -= 1/2 CC[l,b]
        for a in 0..d {
            for b in 0..d {
                for lc in 0..d {
                    l[(a * d + b, a * d + lc)] -= 0.5 * cc[(lc, b)];
                }
            }
        }
    }

    let x = nullspace_vector(&l, 1e-9).map_err(|e| match e {
        NumericsError::DegenerateNullSpace { .. } => SolveError::DegenerateSteadyState,
        other => SolveError::Numerics(other),
    })?;
    let mut rho = ComplexDense::from_vec(d, d, x);
    let tr = rho.trace();
    if tr.norm() < 1e-10 {
        return Err(SolveError::InvalidState(
            "null vector has vanishing trace".into(),
        ));
    }
    rho.scale_mut(Complex64::new(1.0, 0.0) / tr);
    rho = rho.hermitize();
    let tr2 = rho.trace().re;
    rho.scale_mut(Complex64::new(1.0 / tr2, 0.0));
    let dm = DensityMatrix::new(rho, basis);
    dm.validate(1e-8)?;
    Ok(dm)
}

#[cfg(test)]
mod tests;
