//! Monte Carlo wavefunction (quantum trajectory) solver.
//!
//! Each trajectory evolves a pure state under the non-Hermitian drift
//! H_eff = H - (i/2) Σ C†C. The squared norm decays by exactly the
//! cumulative no-jump probability; when it crosses a uniform draw
//! r ∈ (0,1], the jump time is located by bisection inside the step, a
//! channel is chosen with probability ∝ ‖C_j ψ‖², the jump is applied, and
//! r is redrawn. Observables are sampled on the normalized state at fixed
//! strides after a relaxation window; the density matrix is estimated by
//! averaging |ψ⟩⟨ψ| over trajectories and sample times.
//!
//! Trajectory i draws from a counter-based stream derived from
//! (master_seed, i), so ensembles are reproducible bit-for-bit regardless
//! of thread count or scheduling; all reductions run in a fixed order.

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::Geometry;
use crate::model::{ModelError, OperatorSet};
use crate::numerics::{vec_norm, ComplexDense, Operator, Rk4Workspace};
use crate::observables::{ObservableErrors, ObservableRecord, DENSITY_FLOOR};
use crate::steadystate::{spectral_radius_estimate, DensityMatrix, SolveError};

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("invalid trajectory configuration: {0}")]
    InvalidConfig(String),

    #[error("norm increased by {factor} at t = {t:.4}; H_eff is not dissipative")]
    NormIncreased { t: f64, factor: f64 },

    #[error("state became non-finite at t = {t:.4}")]
    NonFinite { t: f64 },

    #[error("no snapshots were collected; enable state collection")]
    NoSnapshots,

    #[error("at least 2 trajectories are required for error estimation, got {0}")]
    TooFewTrajectories(usize),

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error(transparent)]
    Solve(#[from] SolveError),
}

pub type Result<T> = std::result::Result<T, TrajectoryError>;

/// Fixed block length for parallel scheduling; reductions run block by
/// block in index order so results do not depend on the thread count.
const TRAJECTORY_BLOCK: usize = 16;

/// Controls for an ensemble run; times in units of 1/gamma.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    pub n_trajectories: usize,
    /// Explicit step size; overrides `dt_factor` when set.
    pub dt: Option<f64>,
    /// dt = dt_factor / Ω_max when `dt` is unset.
    pub dt_factor: f64,
    /// Transient discarded before sampling.
    pub t_relax: f64,
    /// Length of the steady-state sampling window.
    pub t_sample: f64,
    /// Time between samples.
    pub sample_stride: f64,
    pub master_seed: u64,
    /// Bisection tolerance on the jump time.
    pub jump_time_tol: f64,
    /// Accumulate |ψ⟩⟨ψ| snapshots for density-matrix estimation.
    pub collect_states: bool,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            n_trajectories: 200,
            dt: None,
            dt_factor: 2.0,
            t_relax: 30.0,
            t_sample: 100.0,
            sample_stride: 0.5,
            master_seed: 7,
            jump_time_tol: 1e-6,
            collect_states: true,
        }
    }
}

impl TrajectoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trajectories == 0 {
            return Err(TrajectoryError::InvalidConfig(
                "n_trajectories must be positive".into(),
            ));
        }
        for (name, v) in [
            ("t_relax", self.t_relax),
            ("t_sample", self.t_sample),
            ("sample_stride", self.sample_stride),
            ("jump_time_tol", self.jump_time_tol),
        ] {
            if (!v.is_finite() || v <= 0.0) && name != "t_relax" {
                return Err(TrajectoryError::InvalidConfig(format!(
                    "{name} must be positive, got {v}"
                )));
            }
            if name == "t_relax" && (!v.is_finite() || v < 0.0) {
                return Err(TrajectoryError::InvalidConfig(
                    "t_relax must be non-negative".into(),
                ));
            }
        }
        if self.t_sample < self.sample_stride {
            return Err(TrajectoryError::InvalidConfig(
                "t_sample must be at least one sample_stride".into(),
            ));
        }
        if let Some(dt) = self.dt {
            if !dt.is_finite() || dt <= 0.0 {
                return Err(TrajectoryError::InvalidConfig("dt must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Distribution of the initial pure state per trajectory.
#[derive(Clone, Debug)]
pub enum InitialState {
    Pure(Vec<Complex64>),
    /// Basis state k with probability `probs[k]` (diagonal corner state).
    WeightedBasis(Vec<f64>),
    /// Column k of `vectors` with probability `probs[k]`.
    Mixture {
        vectors: ComplexDense,
        probs: Vec<f64>,
    },
    /// Independent per-site mixtures tensored in site order; entry j is
    /// (eigenvectors, probabilities) of site j's reduced density matrix.
    ProductMixture(Vec<(ComplexDense, Vec<f64>)>),
}

impl InitialState {
    pub fn dim(&self) -> usize {
        match self {
            InitialState::Pure(v) => v.len(),
            InitialState::WeightedBasis(p) => p.len(),
            InitialState::Mixture { vectors, .. } => vectors.rows(),
            InitialState::ProductMixture(sites) => {
                sites.iter().map(|(v, _)| v.rows()).product()
            }
        }
    }

    fn draw_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
        let total: f64 = probs.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        for (k, p) in probs.iter().enumerate() {
            u -= p;
            if u <= 0.0 {
                return k;
            }
        }
        probs.len() - 1
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<Complex64> {
        match self {
            InitialState::Pure(v) => v.clone(),
            InitialState::WeightedBasis(probs) => {
                let k = Self::draw_index(probs, rng);
                let mut v = vec![Complex64::new(0.0, 0.0); probs.len()];
                v[k] = Complex64::new(1.0, 0.0);
                v
            }
            InitialState::Mixture { vectors, probs } => {
                let k = Self::draw_index(probs, rng);
                vectors.col(k)
            }
            InitialState::ProductMixture(sites) => {
                let mut state = vec![Complex64::new(1.0, 0.0)];
                for (vectors, probs) in sites {
                    let k = Self::draw_index(probs, rng);
                    let site = vectors.col(k);
                    let mut next =
                        Vec::with_capacity(state.len() * site.len());
                    for a in &state {
                        for b in &site {
                            next.push(a * b);
                        }
                    }
                    state = next;
                }
                state
            }
        }
    }
}

/// A density-density bond observable with its endpoints.
#[derive(Clone, Debug)]
pub struct BondObservable {
    pub op: Operator,
    pub multiplicity: usize,
    pub a: usize,
    pub b: usize,
}

/// Operators sampled at each stride.
#[derive(Clone, Debug)]
pub struct SampleOps {
    pub site_n: Vec<Operator>,
    pub site_b: Vec<Operator>,
    pub site_n2: Vec<Operator>,
    pub bond_dens: Vec<BondObservable>,
}

impl SampleOps {
    pub fn from_operator_set(ops: &OperatorSet, geom: &Geometry) -> Result<Self> {
        let mut bond_dens = Vec::with_capacity(geom.bonds.len());
        for (k, bond) in geom.bonds.iter().enumerate() {
            bond_dens.push(BondObservable {
                op: ops.dens(geom, k)?,
                multiplicity: bond.multiplicity,
                a: bond.a,
                b: bond.b,
            });
        }
        Ok(Self {
            site_n: ops.sites.iter().map(|s| s.n.clone()).collect(),
            site_b: ops.sites.iter().map(|s| s.b.clone()).collect(),
            site_n2: ops.sites.iter().map(|s| s.n2.clone()).collect(),
            bond_dens,
        })
    }

    pub fn n_sites(&self) -> usize {
        self.site_n.len()
    }
}

/// Site-averaged time series entry: (t, n, g2 numerator).
pub type TimeSeriesPoint = (f64, f64, f64);

/// Per-trajectory sample means over the steady-state window.
#[derive(Clone, Debug)]
pub struct TrajectoryStats {
    pub n_site: Vec<f64>,
    pub b_site: Vec<Complex64>,
    pub g2num_site: Vec<f64>,
    pub dens_bond: Vec<f64>,
    pub samples: usize,
    pub jumps: usize,
    /// Time series at every stride, transient included.
    pub time_series: Vec<TimeSeriesPoint>,
}

/// Ensemble aggregate: per-trajectory stats, their mean/standard-error
/// record, and the accumulated density-matrix estimate.
#[derive(Debug)]
pub struct TrajectoryEnsemble {
    pub per_trajectory: Vec<TrajectoryStats>,
    /// (multiplicity, endpoint a, endpoint b) per sampled bond.
    pub bond_info: Vec<(usize, usize, usize)>,
    pub rho_sum: Option<ComplexDense>,
    pub snapshots: usize,
    pub basis: String,
    pub config: TrajectoryConfig,
    pub dt: f64,
}

struct Propagator {
    /// M = -iH - (1/2) Σ C†C so that dψ/dt = M ψ.
    drift: Operator,
    jumps: Vec<Operator>,
    dim: usize,
}

impl Propagator {
    fn new(h: &Operator, jumps: &[Operator]) -> Result<Self> {
        let dim = h.dim();
        let minus_i = Complex64::new(0.0, -1.0);
        let minus_half = Complex64::new(-0.5, 0.0);
        let drift = match h {
            Operator::Sparse(hs) => {
                let mut m = hs.scale(minus_i);
                for c in jumps {
                    let Operator::Sparse(cs) = c else {
                        return Err(TrajectoryError::InvalidConfig(
                            "mixed sparse/dense operator sets".into(),
                        ));
                    };
                    m = m.add(&cs.dagger().mul_sparse(cs).scale(minus_half));
                }
                Operator::Sparse(m)
            }
            Operator::Dense(hd) => {
                let mut m = hd.scale(minus_i);
                for c in jumps {
                    let cd = c.to_dense();
                    m.gemm_acc(
                        minus_half,
                        crate::numerics::GemmSide::dagger(&cd),
                        crate::numerics::GemmSide::plain(&cd),
                    );
                }
                Operator::Dense(m)
            }
        };
        Ok(Self {
            drift,
            jumps: jumps.to_vec(),
            dim,
        })
    }
}

struct TrajectoryRunner<'a> {
    prop: &'a Propagator,
    obs: &'a SampleOps,
    dt: f64,
    jump_time_tol: f64,
    rk4: Rk4Workspace,
    scratch: Vec<Complex64>,
    prev: Vec<Complex64>,
    probe: Vec<Complex64>,
}

impl<'a> TrajectoryRunner<'a> {
    fn new(prop: &'a Propagator, obs: &'a SampleOps, dt: f64, jump_time_tol: f64) -> Self {
        let dim = prop.dim;
        Self {
            prop,
            obs,
            dt,
            jump_time_tol,
            rk4: Rk4Workspace::new(dim),
            scratch: vec![Complex64::new(0.0, 0.0); dim],
            prev: vec![Complex64::new(0.0, 0.0); dim],
            probe: vec![Complex64::new(0.0, 0.0); dim],
        }
    }

    /// Advance `psi` by `dt`, handling any jumps inside the step.
    /// Returns the number of jumps applied.
    fn advance_step(
        &mut self,
        psi: &mut [Complex64],
        t: &mut f64,
        r: &mut f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<usize> {
        self.advance_segment(psi, t, self.dt, r, rng)
    }

    /// Advance `psi` by an arbitrary segment length.
    fn advance_segment(
        &mut self,
        psi: &mut [Complex64],
        t: &mut f64,
        segment: f64,
        r: &mut f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<usize> {
        let mut remaining = segment;
        let mut jumps = 0usize;
        let drift = &self.prop.drift;
        while remaining > 1e-30 {
            self.prev.copy_from_slice(psi);
            let prev_norm2: f64 = psi.iter().map(|z| z.norm_sqr()).sum();
            let mut f = |_t: f64, y: &[Complex64], out: &mut [Complex64]| {
                drift.matvec_into(y, out);
            };
            self.rk4.step(&mut f, psi, *t, remaining);
            let norm2: f64 = psi.iter().map(|z| z.norm_sqr()).sum();
            if !norm2.is_finite() {
                return Err(TrajectoryError::NonFinite { t: *t });
            }
            if norm2 > prev_norm2 * (1.0 + 1e-8) {
                return Err(TrajectoryError::NormIncreased {
                    t: *t,
                    factor: norm2 / prev_norm2,
                });
            }
            if norm2 >= *r {
                *t += remaining;
                return Ok(jumps);
            }

            // a jump happened inside (t, t + remaining]: bisect on the norm
            let mut lo = 0.0;
            let mut hi = remaining;
            while hi - lo > self.jump_time_tol && hi > f64::EPSILON {
                let mid = 0.5 * (lo + hi);
                self.probe.copy_from_slice(&self.prev);
                let mut f = |_t: f64, y: &[Complex64], out: &mut [Complex64]| {
                    drift.matvec_into(y, out);
                };
                self.rk4.step(&mut f, &mut self.probe, *t, mid);
                let n2: f64 = self.probe.iter().map(|z| z.norm_sqr()).sum();
                if n2 >= *r {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let delta = hi;
            psi.copy_from_slice(&self.prev);
            if delta > f64::EPSILON {
                let mut f = |_t: f64, y: &[Complex64], out: &mut [Complex64]| {
                    drift.matvec_into(y, out);
                };
                self.rk4.step(&mut f, psi, *t, delta);
            }

            // channel selection with probability ∝ ‖C_j ψ‖²
            let mut weights = Vec::with_capacity(self.prop.jumps.len());
            let mut total = 0.0;
            for c in &self.prop.jumps {
                c.matvec_into(psi, &mut self.scratch);
                let w: f64 = self.scratch.iter().map(|z| z.norm_sqr()).sum();
                weights.push(w);
                total += w;
            }
            if total <= 0.0 {
                return Err(TrajectoryError::NonFinite { t: *t });
            }
            let mut u = rng.gen::<f64>() * total;
            let mut channel = weights.len() - 1;
            for (k, w) in weights.iter().enumerate() {
                u -= w;
                if u <= 0.0 {
                    channel = k;
                    break;
                }
            }
            self.prop.jumps[channel].matvec_into(psi, &mut self.scratch);
            let jn = vec_norm(&self.scratch);
            for (p, s) in psi.iter_mut().zip(&self.scratch) {
                *p = s / jn;
            }
            *r = 1.0 - rng.gen::<f64>(); // redraw in (0, 1]
            *t += delta;
            remaining -= delta;
            jumps += 1;
        }
        Ok(jumps)
    }

    fn sample(&mut self, psi: &[Complex64]) -> SamplePoint {
        let norm2: f64 = psi.iter().map(|z| z.norm_sqr()).sum();
        let inv = 1.0 / norm2;
        let n_sites = self.obs.n_sites();
        let mut point = SamplePoint {
            n_site: Vec::with_capacity(n_sites),
            b_site: Vec::with_capacity(n_sites),
            g2num_site: Vec::with_capacity(n_sites),
            dens_bond: Vec::with_capacity(self.obs.bond_dens.len()),
        };
        for op in &self.obs.site_n {
            point
                .n_site
                .push(op.quadratic_form(psi, &mut self.scratch).re * inv);
        }
        for op in &self.obs.site_b {
            point
                .b_site
                .push(op.quadratic_form(psi, &mut self.scratch) * inv);
        }
        for op in &self.obs.site_n2 {
            if op.is_zero() {
                point.g2num_site.push(0.0);
            } else {
                point
                    .g2num_site
                    .push(op.quadratic_form(psi, &mut self.scratch).re * inv);
            }
        }
        for bond in &self.obs.bond_dens {
            point
                .dens_bond
                .push(bond.op.quadratic_form(psi, &mut self.scratch).re * inv);
        }
        point
    }
}

struct SamplePoint {
    n_site: Vec<f64>,
    b_site: Vec<Complex64>,
    g2num_site: Vec<f64>,
    dens_bond: Vec<f64>,
}

/// Evolve one trajectory and return its sample means (and, optionally,
/// the accumulated |ψ⟩⟨ψ| over the sampling window).
#[allow(clippy::too_many_arguments)]
pub fn run_trajectory(
    h: &Operator,
    jumps: &[Operator],
    obs: &SampleOps,
    psi0: Vec<Complex64>,
    config: &TrajectoryConfig,
    gamma: f64,
    dt: f64,
    stream: u64,
    collect_rho: Option<&mut ComplexDense>,
) -> Result<(TrajectoryStats, usize)> {
    let prop = Propagator::new(h, jumps)?;
    run_trajectory_inner(&prop, obs, psi0, config, gamma, dt, stream, collect_rho)
}

/// Streams below this flag drive the jump dynamics; streams with the flag
/// set sample initial states, so the two never share randomness.
const INIT_STREAM_FLAG: u64 = 1 << 63;

#[allow(clippy::too_many_arguments)]
fn run_trajectory_inner(
    prop: &Propagator,
    obs: &SampleOps,
    mut psi: Vec<Complex64>,
    config: &TrajectoryConfig,
    gamma: f64,
    dt: f64,
    stream: u64,
    mut collect_rho: Option<&mut ComplexDense>,
) -> Result<(TrajectoryStats, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.master_seed);
    rng.set_stream(stream);

    let nrm = vec_norm(&psi);
    for z in &mut psi {
        *z /= nrm;
    }

    let stride = config.sample_stride / gamma;
    let stride_steps = (stride / dt).round().max(1.0) as usize;
    let relax_strides = (config.t_relax / config.sample_stride).ceil() as usize;
    let sample_strides = (config.t_sample / config.sample_stride).ceil() as usize;

    let n_sites = obs.n_sites();
    let mut stats = TrajectoryStats {
        n_site: vec![0.0; n_sites],
        b_site: vec![Complex64::new(0.0, 0.0); n_sites],
        g2num_site: vec![0.0; n_sites],
        dens_bond: vec![0.0; obs.bond_dens.len()],
        samples: 0,
        jumps: 0,
        time_series: Vec::with_capacity(relax_strides + sample_strides + 1),
    };
    let mut snapshots = 0usize;

    let mut runner = TrajectoryRunner::new(prop, obs, dt, config.jump_time_tol / gamma);
    let mut t = 0.0f64;
    let mut r = 1.0 - rng.gen::<f64>();

    for stride_idx in 0..(relax_strides + sample_strides) {
        if stride_idx > 0 {
            for _ in 0..stride_steps {
                stats.jumps += runner.advance_step(&mut psi, &mut t, &mut r, &mut rng)?;
            }
        }
        let point = runner.sample(&psi);
        let n_avg = point.n_site.iter().sum::<f64>() / n_sites as f64;
        let g2num_avg = point.g2num_site.iter().sum::<f64>() / n_sites as f64;
        stats.time_series.push((t * gamma, n_avg, g2num_avg));
        if stride_idx >= relax_strides {
            for (acc, v) in stats.n_site.iter_mut().zip(&point.n_site) {
                *acc += v;
            }
            for (acc, v) in stats.b_site.iter_mut().zip(&point.b_site) {
                *acc += v;
            }
            for (acc, v) in stats.g2num_site.iter_mut().zip(&point.g2num_site) {
                *acc += v;
            }
            for (acc, v) in stats.dens_bond.iter_mut().zip(&point.dens_bond) {
                *acc += v;
            }
            stats.samples += 1;
            if let Some(rho) = collect_rho.as_deref_mut() {
                let norm2: f64 = psi.iter().map(|z| z.norm_sqr()).sum();
                let inv = Complex64::new(1.0 / norm2, 0.0);
                let d = psi.len();
                for a in 0..d {
                    let pa = psi[a] * inv;
                    for b_ in 0..d {
                        rho[(a, b_)] += pa * psi[b_].conj();
                    }
                }
                snapshots += 1;
            }
        }
    }

    let inv = 1.0 / stats.samples as f64;
    for v in &mut stats.n_site {
        *v *= inv;
    }
    for v in &mut stats.b_site {
        *v *= inv;
    }
    for v in &mut stats.g2num_site {
        *v *= inv;
    }
    for v in &mut stats.dens_bond {
        *v *= inv;
    }
    Ok((stats, snapshots))
}

#[inline]
fn col_norm_sqr(flat: &[Complex64], width: usize, dim: usize, j: usize) -> f64 {
    let mut acc = 0.0;
    for i in 0..dim {
        acc += flat[i * width + j].norm_sqr();
    }
    acc
}

fn extract_col(flat: &[Complex64], width: usize, dim: usize, j: usize) -> Vec<Complex64> {
    (0..dim).map(|i| flat[i * width + j]).collect()
}

fn insert_col(flat: &mut [Complex64], width: usize, j: usize, col: &[Complex64]) {
    for (i, &v) in col.iter().enumerate() {
        flat[i * width + j] = v;
    }
}

/// Evolve one block of trajectories together. The shared drift acts on
/// all columns as a single matrix product per RK4 stage; jump events are
/// rare and get fixed up per column with the scalar path, replaying the
/// step from the saved pre-step state.
#[allow(clippy::too_many_arguments)]
fn run_block_batched(
    prop: &Propagator,
    obs: &SampleOps,
    initial: &InitialState,
    config: &TrajectoryConfig,
    gamma: f64,
    dt: f64,
    start: usize,
    end: usize,
) -> Result<(Vec<TrajectoryStats>, Option<ComplexDense>, usize)> {
    let dim = prop.dim;
    let width = end - start;
    let n_sites = obs.n_sites();

    let mut rngs: Vec<ChaCha8Rng> = (start..end)
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(config.master_seed);
            r.set_stream(i as u64);
            r
        })
        .collect();
    let mut psi_flat = vec![Complex64::new(0.0, 0.0); dim * width];
    for (j, i) in (start..end).enumerate() {
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.master_seed);
        init_rng.set_stream(i as u64 | INIT_STREAM_FLAG);
        let mut v = initial.sample(&mut init_rng);
        let nrm = vec_norm(&v);
        for z in &mut v {
            *z /= nrm;
        }
        insert_col(&mut psi_flat, width, j, &v);
    }
    let mut rs: Vec<f64> = rngs.iter_mut().map(|r| 1.0 - r.gen::<f64>()).collect();
    let mut prev_norms = vec![1.0f64; width];

    let stride = config.sample_stride / gamma;
    let stride_steps = (stride / dt).round().max(1.0) as usize;
    let relax_strides = (config.t_relax / config.sample_stride).ceil() as usize;
    let sample_strides = (config.t_sample / config.sample_stride).ceil() as usize;

    let mut stats: Vec<TrajectoryStats> = (0..width)
        .map(|_| TrajectoryStats {
            n_site: vec![0.0; n_sites],
            b_site: vec![Complex64::new(0.0, 0.0); n_sites],
            g2num_site: vec![0.0; n_sites],
            dens_bond: vec![0.0; obs.bond_dens.len()],
            samples: 0,
            jumps: 0,
            time_series: Vec::with_capacity(relax_strides + sample_strides),
        })
        .collect();
    let mut rho = if config.collect_states {
        Some(ComplexDense::zeros(dim, dim))
    } else {
        None
    };
    let mut snapshots = 0usize;

    let mut scalar = TrajectoryRunner::new(prop, obs, dt, config.jump_time_tol / gamma);
    let mut rk4 = Rk4Workspace::new(dim * width);
    let mut prev_flat = vec![Complex64::new(0.0, 0.0); dim * width];
    let mut y_mat = ComplexDense::zeros(dim, width);
    let mut out_mat = ComplexDense::zeros(dim, width);
    let mut phi = ComplexDense::zeros(dim, width);
    let drift = &prop.drift;

    let mut t = 0.0f64;
    for stride_idx in 0..(relax_strides + sample_strides) {
        if stride_idx > 0 {
            for _ in 0..stride_steps {
                prev_flat.copy_from_slice(&psi_flat);
                {
                    let mut f = |_t: f64, y: &[Complex64], out: &mut [Complex64]| {
                        y_mat.data_mut().copy_from_slice(y);
                        match drift {
                            Operator::Dense(w) => {
                                out_mat.data_mut().fill(Complex64::new(0.0, 0.0));
                                out_mat.gemm_acc(
                                    Complex64::new(1.0, 0.0),
                                    crate::numerics::GemmSide::plain(w),
                                    crate::numerics::GemmSide::plain(&y_mat),
                                );
                            }
                            Operator::Sparse(s) => {
                                s.mul_dense_into(&y_mat, &mut out_mat);
                            }
                        }
                        out.copy_from_slice(out_mat.data());
                    };
                    rk4.step(&mut f, &mut psi_flat, t, dt);
                }
                for j in 0..width {
                    let n2 = col_norm_sqr(&psi_flat, width, dim, j);
                    if !n2.is_finite() {
                        return Err(TrajectoryError::NonFinite { t: t * gamma });
                    }
                    if n2 >= rs[j] {
                        if n2 > prev_norms[j] * (1.0 + 1e-8) {
                            return Err(TrajectoryError::NormIncreased {
                                t: t * gamma,
                                factor: n2 / prev_norms[j],
                            });
                        }
                        prev_norms[j] = n2;
                    } else {
                        // jump inside this step: replay the column alone
                        let mut col = extract_col(&prev_flat, width, dim, j);
                        let mut tj = t;
                        stats[j].jumps +=
                            scalar.advance_segment(&mut col, &mut tj, dt, &mut rs[j], &mut rngs[j])?;
                        prev_norms[j] = col.iter().map(|z| z.norm_sqr()).sum();
                        insert_col(&mut psi_flat, width, j, &col);
                    }
                }
                t += dt;
            }
        }

        // batched sampling at the stride boundary
        y_mat.data_mut().copy_from_slice(&psi_flat);
        let norms: Vec<f64> = (0..width)
            .map(|j| col_norm_sqr(&psi_flat, width, dim, j))
            .collect();
        let in_window = stride_idx >= relax_strides;
        let apply_op = |op: &Operator, out_mat: &mut ComplexDense| {
            match op {
                Operator::Dense(o) => {
                    out_mat.data_mut().fill(Complex64::new(0.0, 0.0));
                    out_mat.gemm_acc(
                        Complex64::new(1.0, 0.0),
                        crate::numerics::GemmSide::plain(o),
                        crate::numerics::GemmSide::plain(&y_mat),
                    );
                }
                Operator::Sparse(s) => s.mul_dense_into(&y_mat, out_mat),
            };
        };
        let col_expect = |y: &ComplexDense, psi: &[Complex64], j: usize| -> Complex64 {
            let mut acc = Complex64::new(0.0, 0.0);
            for i in 0..dim {
                acc += psi[i * width + j].conj() * y[(i, j)];
            }
            acc
        };

        let mut n_vals = vec![0.0; width * n_sites];
        for (k, op) in obs.site_n.iter().enumerate() {
            apply_op(op, &mut out_mat);
            for j in 0..width {
                n_vals[j * n_sites + k] = col_expect(&out_mat, &psi_flat, j).re / norms[j];
            }
        }
        let mut g2_vals = vec![0.0; width * n_sites];
        for (k, op) in obs.site_n2.iter().enumerate() {
            if op.is_zero() {
                continue;
            }
            apply_op(op, &mut out_mat);
            for j in 0..width {
                g2_vals[j * n_sites + k] = col_expect(&out_mat, &psi_flat, j).re / norms[j];
            }
        }
        for (j, stat) in stats.iter_mut().enumerate() {
            let n_avg =
                n_vals[j * n_sites..(j + 1) * n_sites].iter().sum::<f64>() / n_sites as f64;
            let g2_avg =
                g2_vals[j * n_sites..(j + 1) * n_sites].iter().sum::<f64>() / n_sites as f64;
            stat.time_series.push((t * gamma, n_avg, g2_avg));
        }
        if in_window {
            for (k, op) in obs.site_b.iter().enumerate() {
                apply_op(op, &mut out_mat);
                for j in 0..width {
                    stats[j].b_site[k] += col_expect(&out_mat, &psi_flat, j) / norms[j];
                }
            }
            for (k, bond) in obs.bond_dens.iter().enumerate() {
                apply_op(&bond.op, &mut out_mat);
                for j in 0..width {
                    stats[j].dens_bond[k] += col_expect(&out_mat, &psi_flat, j).re / norms[j];
                }
            }
            for (j, stat) in stats.iter_mut().enumerate() {
                for k in 0..n_sites {
                    stat.n_site[k] += n_vals[j * n_sites + k];
                    stat.g2num_site[k] += g2_vals[j * n_sites + k];
                }
                stat.samples += 1;
            }
            if let Some(acc) = rho.as_mut() {
                // rho += Phi Phi† with unit-normalized columns
                for j in 0..width {
                    let inv = Complex64::new(1.0 / norms[j].sqrt(), 0.0);
                    for i in 0..dim {
                        phi[(i, j)] = psi_flat[i * width + j] * inv;
                    }
                }
                acc.gemm_acc(
                    Complex64::new(1.0, 0.0),
                    crate::numerics::GemmSide::plain(&phi),
                    crate::numerics::GemmSide::dagger(&phi),
                );
                snapshots += width;
            }
        }
    }

    let inv = 1.0 / stats[0].samples.max(1) as f64;
    for stat in &mut stats {
        for v in &mut stat.n_site {
            *v *= inv;
        }
        for v in &mut stat.b_site {
            *v *= inv;
        }
        for v in &mut stat.g2num_site {
            *v *= inv;
        }
        for v in &mut stat.dens_bond {
            *v *= inv;
        }
    }
    Ok((stats, rho, snapshots))
}

/// Run a reproducible parallel ensemble.
pub fn run_ensemble(
    h: &Operator,
    jumps: &[Operator],
    obs: &SampleOps,
    initial: &InitialState,
    config: &TrajectoryConfig,
    gamma: f64,
    basis: impl Into<String>,
) -> Result<TrajectoryEnsemble> {
    config.validate()?;
    let dim = h.dim();
    if initial.dim() != dim {
        return Err(TrajectoryError::InvalidConfig(format!(
            "initial state dimension {} vs operators {}",
            initial.dim(),
            dim
        )));
    }
    let prop = Propagator::new(h, jumps)?;
    let dt_raw = config.dt.unwrap_or_else(|| {
        let omega = 2.0 * spectral_radius_estimate(h)
            + 2.0 * {
                // Σ C†C enters H_eff; reuse the drift's radius
                spectral_radius_estimate(&prop.drift)
            };
        config.dt_factor / omega.max(f64::MIN_POSITIVE)
    });
    let stride = config.sample_stride / gamma;
    let stride_steps = (stride / dt_raw).ceil().max(1.0);
    let dt = stride / stride_steps;

    let n_traj = config.n_trajectories;
    let blocks: Vec<(usize, usize)> = (0..n_traj)
        .step_by(TRAJECTORY_BLOCK)
        .map(|start| (start, (start + TRAJECTORY_BLOCK).min(n_traj)))
        .collect();

    struct BlockResult {
        stats: Vec<TrajectoryStats>,
        rho: Option<ComplexDense>,
        snapshots: usize,
    }

    let block_results: Vec<Result<BlockResult>> = blocks
        .par_iter()
        .map(|&(start, end)| {
            let (stats, rho, snapshots) =
                run_block_batched(&prop, obs, initial, config, gamma, dt, start, end)?;
            Ok(BlockResult {
                stats,
                rho,
                snapshots,
            })
        })
        .collect();

    let mut per_trajectory = Vec::with_capacity(n_traj);
    let mut rho_sum = if config.collect_states {
        Some(ComplexDense::zeros(dim, dim))
    } else {
        None
    };
    let mut snapshots = 0usize;
    for block in block_results {
        let block = block?;
        per_trajectory.extend(block.stats);
        if let (Some(acc), Some(b)) = (rho_sum.as_mut(), block.rho.as_ref()) {
            acc.axpy(Complex64::new(1.0, 0.0), b);
        }
        snapshots += block.snapshots;
    }

    Ok(TrajectoryEnsemble {
        per_trajectory,
        bond_info: obs
            .bond_dens
            .iter()
            .map(|b| (b.multiplicity, b.a, b.b))
            .collect(),
        rho_sum,
        snapshots,
        basis: basis.into(),
        config: *config,
        dt,
    })
}

/// Mean and standard error over per-trajectory means.
fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Ensemble statistics with per-trajectory means as the unit of variance;
/// time samples within a trajectory are correlated and never treated as
/// independent.
pub fn observable_stats(ensemble: &TrajectoryEnsemble) -> Result<ObservableRecord> {
    let per = &ensemble.per_trajectory;
    if per.len() < 2 {
        return Err(TrajectoryError::TooFewTrajectories(per.len()));
    }
    let n_sites = per[0].n_site.len();
    let nt = per.len();

    let n_traj: Vec<f64> = per
        .iter()
        .map(|s| s.n_site.iter().sum::<f64>() / n_sites as f64)
        .collect();
    let re_b_traj: Vec<f64> = per
        .iter()
        .map(|s| s.b_site.iter().map(|z| z.re).sum::<f64>() / n_sites as f64)
        .collect();
    let im_b_traj: Vec<f64> = per
        .iter()
        .map(|s| s.b_site.iter().map(|z| z.im).sum::<f64>() / n_sites as f64)
        .collect();
    let g2_traj: Vec<Option<f64>> = per
        .iter()
        .map(|s| {
            let mut acc = 0.0;
            for (num, n) in s.g2num_site.iter().zip(&s.n_site) {
                if *n <= DENSITY_FLOOR {
                    return None;
                }
                acc += num / (n * n);
            }
            Some(acc / n_sites as f64)
        })
        .collect();
    let g2nn_traj: Vec<Option<f64>> = per
        .iter()
        .map(|s| {
            let mut acc = 0.0;
            let mut weight = 0usize;
            for (k, dens) in s.dens_bond.iter().enumerate() {
                let (mult, a, b) = ensemble.bond_info[k];
                let (na, nb) = (s.n_site[a], s.n_site[b]);
                if na <= DENSITY_FLOOR || nb <= DENSITY_FLOOR {
                    return None;
                }
                acc += mult as f64 * dens / (na * nb);
                weight += mult;
            }
            if weight == 0 {
                None
            } else {
                Some(acc / weight as f64)
            }
        })
        .collect();

    let (n, n_err) = mean_and_stderr(&n_traj);
    let (re_b, re_b_err) = mean_and_stderr(&re_b_traj);
    let (im_b, im_b_err) = mean_and_stderr(&im_b_traj);
    let g2_vals: Vec<f64> = g2_traj.iter().flatten().copied().collect();
    let (g2_onsite, g2_err) = if g2_vals.len() == nt {
        let (m, e) = mean_and_stderr(&g2_vals);
        (Some(m), e)
    } else {
        (None, 0.0)
    };
    let g2nn_vals: Vec<f64> = g2nn_traj.iter().flatten().copied().collect();
    let (g2_nn, g2nn_err) = if g2nn_vals.len() == nt && !g2nn_vals.is_empty() {
        let (m, e) = mean_and_stderr(&g2nn_vals);
        (Some(m), e)
    } else {
        (None, 0.0)
    };

    let per_site_n: Vec<f64> = (0..n_sites)
        .map(|j| per.iter().map(|s| s.n_site[j]).sum::<f64>() / nt as f64)
        .collect();
    let per_site_b: Vec<(f64, f64)> = (0..n_sites)
        .map(|j| {
            let z: Complex64 = per.iter().map(|s| s.b_site[j]).sum::<Complex64>()
                / Complex64::new(nt as f64, 0.0);
            (z.re, z.im)
        })
        .collect();
    let per_bond_g2nn: Vec<Option<f64>> = (0..ensemble.bond_info.len())
        .map(|k| {
            let (_, a, b) = ensemble.bond_info[k];
            let mut vals = Vec::with_capacity(nt);
            for s in per {
                let (na, nb) = (s.n_site[a], s.n_site[b]);
                if na <= DENSITY_FLOOR || nb <= DENSITY_FLOOR {
                    return None;
                }
                vals.push(s.dens_bond[k] / (na * nb));
            }
            Some(vals.iter().sum::<f64>() / nt as f64)
        })
        .collect();

    Ok(ObservableRecord {
        n,
        re_b,
        im_b,
        g2_onsite,
        g2_nn,
        per_site_n,
        per_site_b,
        per_bond_g2nn,
        errors: Some(ObservableErrors {
            n: n_err,
            re_b: re_b_err,
            im_b: im_b_err,
            g2_onsite: g2_err,
            g2_nn: g2nn_err,
        }),
    })
}

/// Ensemble- and time-averaged density matrix over the sampling window,
/// Hermitized and normalized to unit trace.
pub fn estimate_density_matrix(ensemble: &TrajectoryEnsemble) -> Result<DensityMatrix> {
    let Some(sum) = &ensemble.rho_sum else {
        return Err(TrajectoryError::NoSnapshots);
    };
    if ensemble.snapshots == 0 {
        return Err(TrajectoryError::NoSnapshots);
    }
    let mut mat = sum.scale(Complex64::new(1.0 / ensemble.snapshots as f64, 0.0));
    mat = mat.hermitize();
    let tr = mat.trace().re;
    mat.scale_mut(Complex64::new(1.0 / tr, 0.0));
    let dm = DensityMatrix::new(mat, ensemble.basis.clone());
    dm.validate(1e-8)?;
    Ok(dm)
}

/// Ensemble mean and standard error of the site-averaged population at
/// each stride boundary (transient included).
pub fn population_time_series(ensemble: &TrajectoryEnsemble) -> Vec<(f64, f64, f64)> {
    let per = &ensemble.per_trajectory;
    if per.is_empty() {
        return Vec::new();
    }
    let len = per.iter().map(|s| s.time_series.len()).min().unwrap();
    (0..len)
        .map(|k| {
            let t = per[0].time_series[k].0;
            let vals: Vec<f64> = per.iter().map(|s| s.time_series[k].1).collect();
            let (m, e) = mean_and_stderr(&vals);
            (t, m, e)
        })
        .collect()
}

#[cfg(test)]
mod tests;
