//! The renormalization core: density-matrix diagonalization, top-M
//! joint-probability pair selection, cluster merging with exact operator
//! projection, and the convergence-in-M driver.
//!
//! Merging clusters A and B keeps the M product states
//! |φ_r^A⟩|φ_r'^B⟩ with the largest joint probability p_r^A p_r'^B. In
//! the selected corner basis an operator living in A acts as
//! [V_A† O V_A]_{r_s r_t} δ_{r'_s r'_t}, and a cross bond factorizes into
//! the two projected single-site operators, so every matrix element is
//! exact; truncation error enters only through the discarded pairs.
//! Operators for bonds inside a child are carried from the child (exact
//! mode) or rebuilt from projected single-site operators (fast mode).

use std::collections::HashMap;
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::{BondSource, Geometry, MergeSchedule, NodeKind, ScheduleNode};
use crate::meanfield::{meanfield_product_state, MeanFieldError};
use crate::model::{
    self, BondOps, ModelError, ModelParams, OperatorMode, OperatorSet, SiteOps,
};
use crate::numerics::{
    hermitian_eig, ComplexDense, ComplexSparse, EigenDecomposition, NumericsError, Operator,
};
use crate::observables::{self, ObservableRecord};
use crate::steadystate::{
    evolve_to_steady_state, steady_state_nullspace, DensityMatrix, MonitorSample, SolveError,
    SteadyStateControls, Termination,
};
use crate::trajectories::{
    estimate_density_matrix, observable_stats, run_ensemble, InitialState, SampleOps,
    TrajectoryConfig, TrajectoryError,
};

mod checkpoint;
pub use checkpoint::{load_cluster, save_cluster, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Debug, Error)]
pub enum CornerError {
    #[error("requested corner dimension {m} exceeds the product space {max}")]
    CornerTooLarge { m: usize, max: usize },

    #[error("probability {value:.3e} at rank {rank} is negative beyond the clip tolerance {tol:.1e}")]
    NegativeProbability { rank: usize, value: f64, tol: f64 },

    #[error("probability lists must be sorted descending and sum to at most one")]
    BadProbabilities,

    #[error("merge node children do not match the supplied clusters")]
    ChildMismatch,

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Numerics(#[from] NumericsError),

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error(transparent)]
    Solve(#[from] SolveError),

    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),

    #[error(transparent)]
    MeanField(#[from] MeanFieldError),

    #[error(transparent)]
    Lattice(#[from] crate::lattice::LatticeError),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CornerError>;

/// How a cluster came to be.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Leaf,
    Merged { m: usize },
}

/// A lattice fragment with its (possibly truncated) basis, operators,
/// steady-state density matrix, and cached eigendecomposition.
#[derive(Clone, Debug)]
pub struct Cluster {
    pub geometry: Geometry,
    pub dim: usize,
    pub ops: OperatorSet,
    pub rho: DensityMatrix,
    /// Eigendecomposition of `rho`, descending, clipped, renormalized.
    pub eig: EigenDecomposition,
    pub provenance: Provenance,
    /// Isometry from the corner basis back to the full Fock basis, kept
    /// while the Fock dimension stays small; exactness tests use it.
    pub embedding: Option<ComplexDense>,
    pub basis: String,
    pub warnings: Vec<String>,
}

impl Cluster {
    pub fn n_sites(&self) -> usize {
        self.geometry.n_sites()
    }

    pub fn record(&self) -> Result<ObservableRecord> {
        Ok(observables::record_from_state(
            &self.ops,
            &self.geometry,
            &self.rho.mat,
        )?)
    }

    pub fn spectrum(&self) -> Vec<observables::SpectrumRow> {
        observables::probability_spectrum(&self.eig, &self.ops.n_total())
    }

    /// ρ expressed in the Fock basis, if the embedding is available.
    pub fn rho_in_fock_basis(&self) -> Option<ComplexDense> {
        let e = self.embedding.as_ref()?;
        Some(e.mul(&self.rho.mat).mul_dag(e))
    }
}

/// Eigendecomposition of a density matrix with small negative eigenvalues
/// clipped to zero and the spectrum renormalized to unit sum. Negativity
/// beyond `clip_tol` is an error (it signals a broken solve upstream).
pub fn diagonalize_rho(rho: &DensityMatrix, clip_tol: f64) -> Result<EigenDecomposition> {
    let mut eig = hermitian_eig(&rho.mat, 1e-8)?;
    for (rank, v) in eig.values.iter().enumerate() {
        if *v < -clip_tol {
            return Err(CornerError::NegativeProbability {
                rank,
                value: *v,
                tol: clip_tol,
            });
        }
    }
    for v in &mut eig.values {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let sum: f64 = eig.values.iter().sum();
    if sum > 0.0 {
        for v in &mut eig.values {
            *v /= sum;
        }
    }
    Ok(eig)
}

/// The corner basis: M pairs (index in A, index in B) with non-increasing
/// joint probability; ties broken lexicographically.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSelection {
    pub pairs: Vec<(usize, usize)>,
    pub joint: Vec<f64>,
}

#[derive(PartialEq)]
struct FrontierItem {
    p: f64,
    i: usize,
    j: usize,
}

impl Eq for FrontierItem {}

impl Ord for FrontierItem {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // max-heap on p, then lexicographically smallest (i, j) first
        self.p
            .partial_cmp(&other.p)
            .unwrap()
            .then_with(|| other.i.cmp(&self.i))
            .then_with(|| other.j.cmp(&self.j))
    }
}

impl PartialOrd for FrontierItem {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Exactly the M largest products `p_a[i] * p_b[j]`, by a frontier max-heap
/// seeded at (0,0) and expanded to (i+1,j) and (i,j+1); correctness
/// follows from both lists being sorted descending.
pub fn select_top_m_pairs(p_a: &[f64], p_b: &[f64], m: usize) -> Result<PairSelection> {
    let max = p_a.len() * p_b.len();
    if m > max {
        return Err(CornerError::CornerTooLarge { m, max });
    }
    let descending = |p: &[f64]| p.windows(2).all(|w| w[0] >= w[1]);
    let sum_a: f64 = p_a.iter().sum();
    let sum_b: f64 = p_b.iter().sum();
    if !descending(p_a) || !descending(p_b) || sum_a > 1.0 + 1e-9 || sum_b > 1.0 + 1e-9 {
        return Err(CornerError::BadProbabilities);
    }

    let mut heap = std::collections::BinaryHeap::new();
    let mut visited = vec![false; max];
    let cols = p_b.len();
    heap.push(FrontierItem {
        p: p_a[0] * p_b[0],
        i: 0,
        j: 0,
    });
    visited[0] = true;
    let mut pairs = Vec::with_capacity(m);
    let mut joint = Vec::with_capacity(m);
    while pairs.len() < m {
        let item = heap.pop().expect("frontier cannot empty before M pairs");
        pairs.push((item.i, item.j));
        joint.push(item.p);
        if item.i + 1 < p_a.len() && !visited[(item.i + 1) * cols + item.j] {
            visited[(item.i + 1) * cols + item.j] = true;
            heap.push(FrontierItem {
                p: p_a[item.i + 1] * p_b[item.j],
                i: item.i + 1,
                j: item.j,
            });
        }
        if item.j + 1 < p_b.len() && !visited[item.i * cols + item.j + 1] {
            visited[item.i * cols + item.j + 1] = true;
            heap.push(FrontierItem {
                p: p_a[item.i] * p_b[item.j + 1],
                i: item.i,
                j: item.j + 1,
            });
        }
    }
    Ok(PairSelection { pairs, joint })
}

/// Relative gap below which a truncation cut is flagged as slicing
/// through a degenerate probability shell.
const DEGENERATE_CUT_TOL: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Merge machinery
// ---------------------------------------------------------------------------

/// Corner bookkeeping: selected pairs plus, for each child index, the
/// corner slots that share it (used to place child-local operators).
struct CornerIndex {
    pairs: Vec<(usize, usize)>,
    groups_by_b: Vec<Vec<usize>>,
    groups_by_a: Vec<Vec<usize>>,
}

impl CornerIndex {
    fn new(selection: &PairSelection, dim_a: usize, dim_b: usize) -> Self {
        let mut groups_by_b = vec![Vec::new(); dim_b];
        let mut groups_by_a = vec![Vec::new(); dim_a];
        for (s, &(ra, rb)) in selection.pairs.iter().enumerate() {
            groups_by_a[ra].push(s);
            groups_by_b[rb].push(s);
        }
        Self {
            pairs: selection.pairs.clone(),
            groups_by_b,
            groups_by_a,
        }
    }

    fn m(&self) -> usize {
        self.pairs.len()
    }
}

/// Keep corner operators sparse when they fill at most this fraction.
const CORNER_SPARSE_THRESHOLD: f64 = 0.25;

enum Side {
    Left,
    Right,
}

/// V† O V: child operator expressed in the child's eigenbasis.
fn to_eigenbasis(op: &Operator, v: &ComplexDense) -> ComplexDense {
    match op {
        Operator::Sparse(s) => v.dag_mul(&s.mul_dense(v)),
        Operator::Dense(d) => v.dag_mul(&d.mul(v)),
    }
}

/// Lift a child-local operator (already in the child eigenbasis) into the
/// corner: entries are nonzero only between corner slots sharing the same
/// index in the other child.
fn corner_from_child(otilde: &ComplexDense, idx: &CornerIndex, side: Side) -> Operator {
    let m = idx.m();
    let groups = match side {
        Side::Left => &idx.groups_by_b,
        Side::Right => &idx.groups_by_a,
    };
    let pick = |s: usize| match side {
        Side::Left => idx.pairs[s].0,
        Side::Right => idx.pairs[s].1,
    };
    let nnz: usize = groups.iter().map(|g| g.len() * g.len()).sum();
    if (nnz as f64) <= CORNER_SPARSE_THRESHOLD * (m * m) as f64 {
        let mut trips = Vec::with_capacity(nnz);
        for g in groups {
            for &s in g {
                for &t in g {
                    let val = otilde[(pick(s), pick(t))];
                    if val != Complex64::new(0.0, 0.0) {
                        trips.push((s, t, val));
                    }
                }
            }
        }
        Operator::Sparse(ComplexSparse::from_triplets(m, m, &trips))
    } else {
        let mut out = ComplexDense::zeros(m, m);
        for g in groups {
            for &s in g {
                for &t in g {
                    out[(s, t)] = otilde[(pick(s), pick(t))];
                }
            }
        }
        Operator::Dense(out)
    }
}

/// Cross operator X_A ⊗ Y_B restricted to the corner: factorizes exactly
/// into the two eigenbasis matrices.
fn corner_cross(xa: &ComplexDense, yb: &ComplexDense, idx: &CornerIndex) -> Operator {
    let m = idx.m();
    let mut out = ComplexDense::zeros(m, m);
    for s in 0..m {
        let (ras, rbs) = idx.pairs[s];
        for t in 0..m {
            let (rat, rbt) = idx.pairs[t];
            out[(s, t)] = xa[(ras, rat)] * yb[(rbs, rbt)];
        }
    }
    Operator::Dense(out)
}

/// Merge two solved clusters at a schedule node, keeping the M most
/// probable pairs. The merged density matrix is the diagonal
/// joint-probability state (renormalized), ready for the next solve.
pub fn merge_clusters(
    a: &Cluster,
    b: &Cluster,
    node: &ScheduleNode,
    m: usize,
    embed_cap: usize,
) -> Result<Cluster> {
    let NodeKind::Merged {
        bond_sources,
        ..
    } = &node.kind
    else {
        return Err(CornerError::ChildMismatch);
    };
    let n_left = a.n_sites();
    if a.n_sites() + b.n_sites() != node.geometry.n_sites() {
        return Err(CornerError::ChildMismatch);
    }
    let max = a.dim * b.dim;
    if m > max {
        return Err(CornerError::CornerTooLarge { m, max });
    }

    let selection = select_top_m_pairs(&a.eig.values, &b.eig.values, m)?;
    let mut warnings = Vec::new();
    if m < max {
        // probability of the first discarded pair, found by peeking one
        // past the cut
        let extended = select_top_m_pairs(&a.eig.values, &b.eig.values, m + 1)?;
        let last = selection.joint[m - 1];
        let next = extended.joint[m];
        if last > 0.0 && (last - next).abs() <= DEGENERATE_CUT_TOL * last {
            warnings.push(format!(
                "corner cut at M = {m} slices a degenerate probability shell \
                 (p_M = {last:.6e}, p_M+1 = {next:.6e}); ties were broken \
                 lexicographically"
            ));
        }
    }
    let idx = CornerIndex::new(&selection, a.dim, b.dim);

    let va = &a.eig.vectors;
    let vb = &b.eig.vectors;

    // project all child site operators into their eigenbases once
    let proj_site = |cluster: &Cluster, v: &ComplexDense| -> Vec<(ComplexDense, ComplexDense, ComplexDense)> {
        cluster
            .ops
            .sites
            .iter()
            .map(|s| {
                (
                    to_eigenbasis(&s.b, v),
                    to_eigenbasis(&s.n, v),
                    to_eigenbasis(&s.n2, v),
                )
            })
            .collect()
    };
    let (a_sites, b_sites) = rayon::join(|| proj_site(a, va), || proj_site(b, vb));

    let mut sites = Vec::with_capacity(node.geometry.n_sites());
    for (bt, nt, n2t) in &a_sites {
        sites.push(SiteOps {
            b: corner_from_child(bt, &idx, Side::Left),
            n: corner_from_child(nt, &idx, Side::Left),
            n2: corner_from_child(n2t, &idx, Side::Left),
        });
    }
    for (bt, nt, n2t) in &b_sites {
        sites.push(SiteOps {
            b: corner_from_child(bt, &idx, Side::Right),
            n: corner_from_child(nt, &idx, Side::Right),
            n2: corner_from_child(n2t, &idx, Side::Right),
        });
    }

    let mode = a.ops.mode;
    let mut bonds = Vec::with_capacity(node.geometry.bonds.len());
    if mode == OperatorMode::Exact {
        for (k, bond) in node.geometry.bonds.iter().enumerate() {
            let ops = match bond_sources[k] {
                BondSource::Left(child_k) => BondOps {
                    hop: Some(corner_from_child(
                        &to_eigenbasis(
                            a.ops.bonds[child_k].hop.as_ref().expect("exact mode tracks hops"),
                            va,
                        ),
                        &idx,
                        Side::Left,
                    )),
                    dens: Some(corner_from_child(
                        &to_eigenbasis(
                            a.ops.bonds[child_k]
                                .dens
                                .as_ref()
                                .expect("exact mode tracks densities"),
                            va,
                        ),
                        &idx,
                        Side::Left,
                    )),
                },
                BondSource::Right(child_k) => BondOps {
                    hop: Some(corner_from_child(
                        &to_eigenbasis(
                            b.ops.bonds[child_k].hop.as_ref().expect("exact mode tracks hops"),
                            vb,
                        ),
                        &idx,
                        Side::Right,
                    )),
                    dens: Some(corner_from_child(
                        &to_eigenbasis(
                            b.ops.bonds[child_k]
                                .dens
                                .as_ref()
                                .expect("exact mode tracks densities"),
                            vb,
                        ),
                        &idx,
                        Side::Right,
                    )),
                },
                BondSource::Cross => {
                    // K_jl = b_j† ⊗ b_l and D_jl = n_j ⊗ n_l, exact by
                    // factorization across the A|B split
                    let ja = bond.a;
                    let lb = bond.b - n_left;
                    let bdag_a = a_sites[ja].0.dagger();
                    BondOps {
                        hop: Some(corner_cross(&bdag_a, &b_sites[lb].0, &idx)),
                        dens: Some(corner_cross(&a_sites[ja].1, &b_sites[lb].1, &idx)),
                    }
                }
            };
            bonds.push(ops);
        }
    } else {
        bonds = node
            .geometry
            .bonds
            .iter()
            .map(|_| BondOps {
                hop: None,
                dens: None,
            })
            .collect();
    }

    let ops = OperatorSet {
        dim: m,
        sites,
        bonds,
        mode,
    };

    let basis = format!(
        "corner:{}x{}:M{}",
        node.geometry.width, node.geometry.height, m
    );
    let rho = DensityMatrix::from_weights(&selection.joint, basis.clone());
    // diagonal state: trivial eigendecomposition, already descending
    let sum: f64 = selection.joint.iter().sum();
    let eig = EigenDecomposition {
        values: selection.joint.iter().map(|p| p / sum).collect(),
        vectors: ComplexDense::identity(m),
    };

    let embedding = match (&a.embedding, &b.embedding) {
        (Some(ea), Some(eb)) if ea.rows() * eb.rows() <= embed_cap => {
            let eava = ea.mul(va);
            let ebvb = eb.mul(vb);
            let fock_dim = ea.rows() * eb.rows();
            let mut e = ComplexDense::zeros(fock_dim, m);
            for (s, &(ra, rb)) in selection.pairs.iter().enumerate() {
                let ca = eava.col(ra);
                let cb = ebvb.col(rb);
                for (ia, za) in ca.iter().enumerate() {
                    for (ib, zb) in cb.iter().enumerate() {
                        e[(ia * eb.rows() + ib, s)] = za * zb;
                    }
                }
            }
            Some(e)
        }
        _ => None,
    };

    Ok(Cluster {
        geometry: node.geometry.clone(),
        dim: m,
        ops,
        rho,
        eig,
        provenance: Provenance::Merged { m },
        embedding,
        basis,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// Pipeline driver
// ---------------------------------------------------------------------------

/// Which solver handled a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Nullspace,
    Direct,
    Mcwf,
}

impl std::fmt::Display for SolverKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SolverKind::Nullspace => write!(f, "nullspace"),
            SolverKind::Direct => write!(f, "direct"),
            SolverKind::Mcwf => write!(f, "mcwf"),
        }
    }
}

/// Pipeline configuration shared by every node solve.
#[derive(Clone, Debug)]
pub struct PipelineConfig {
    /// Ascending corner dimensions to sweep.
    pub m_list: Vec<usize>,
    /// Relative tolerance on observables between consecutive M values.
    pub obs_tol: f64,
    /// Direct integration for corner dimensions up to this; MCWF above.
    pub direct_cap: usize,
    /// Exact null-space solve for leaves up to this dimension.
    pub nullspace_cap: usize,
    /// Leaf Fock-dimension cap.
    pub brute_force_cap: usize,
    pub controls: SteadyStateControls,
    pub trajectories: TrajectoryConfig,
    pub operator_mode: OperatorMode,
    /// Negative-eigenvalue clip for density-matrix diagonalization.
    pub clip_tol: f64,
    /// Keep Fock embeddings while the full dimension stays below this.
    pub embed_cap: usize,
    /// When set, solved merge nodes are written here and reused on rerun.
    pub checkpoint_dir: Option<std::path::PathBuf>,
    /// Keep sweeping the whole M schedule even after convergence (for
    /// table reproduction); convergence is still recorded at the first
    /// M that met the tolerance.
    pub run_full_schedule: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            m_list: vec![100],
            obs_tol: 0.01,
            direct_cap: 400,
            nullspace_cap: 64,
            brute_force_cap: 4096,
            controls: SteadyStateControls::default(),
            trajectories: TrajectoryConfig::default(),
            operator_mode: OperatorMode::Exact,
            clip_tol: 1e-8,
            embed_cap: 1024,
            checkpoint_dir: None,
            run_full_schedule: false,
        }
    }
}

/// Outcome of one node solve.
#[derive(Clone, Debug)]
pub struct NodeResult {
    pub width: usize,
    pub height: usize,
    pub m: usize,
    pub solver: SolverKind,
    pub record: ObservableRecord,
    pub termination: Option<Termination>,
    pub wall_seconds: f64,
    pub warnings: Vec<String>,
    /// Monitored samples of the direct integration (empty for other
    /// solvers).
    pub history: Vec<MonitorSample>,
    /// MCWF ensemble population time series (t, mean, stderr).
    pub time_series: Vec<(f64, f64, f64)>,
}

/// Full convergence-in-M outcome.
#[derive(Clone, Debug)]
pub struct ConvergenceReport {
    /// Every solved (node, M) row, in execution order.
    pub rows: Vec<NodeResult>,
    /// Root-record per swept M.
    pub per_m_root: Vec<(usize, ObservableRecord)>,
    /// First M at which all observables moved less than `obs_tol`.
    pub converged_m: Option<usize>,
    pub warnings: Vec<String>,
}

struct SweepCaches {
    leaves: HashMap<(usize, usize), Arc<Cluster>>,
    /// merged nodes whose effective M saturated (reusable across sweeps)
    saturated: HashMap<(usize, usize), Arc<Cluster>>,
}

fn params_basis(geom: &Geometry) -> String {
    format!("fock:{}x{}", geom.width, geom.height)
}

fn solve_leaf(
    node: &ScheduleNode,
    params: &ModelParams,
    cfg: &PipelineConfig,
) -> Result<(Arc<Cluster>, NodeResult)> {
    let start = std::time::Instant::now();
    let geom = &node.geometry;
    let mut ops = model::build_base_cluster_ops(geom, params, cfg.brute_force_cap)?;
    ops.mode = cfg.operator_mode;
    let basis = params_basis(geom);
    let h = model::assemble_hamiltonian(&ops, geom, params)?;
    let jumps = model::jump_operators(&ops, params);

    let (rho, solver, termination, history) = if ops.dim <= cfg.nullspace_cap {
        let rho = steady_state_nullspace(&h, &jumps, cfg.nullspace_cap, basis.clone())?;
        (rho, SolverKind::Nullspace, None, Vec::new())
    } else {
        let rho0 = meanfield_product_state(params, geom.n_sites(), basis.clone())?;
        let report = evolve_to_steady_state(&ops, geom, params, &rho0, &cfg.controls)?;
        (
            report.rho,
            SolverKind::Direct,
            Some(report.termination),
            report.history,
        )
    };
    let eig = diagonalize_rho(&rho, cfg.clip_tol)?;
    // reconstruct from the clipped spectrum so rho and eig agree exactly
    let rho = DensityMatrix::new(
        EigenDecomposition {
            values: eig.values.clone(),
            vectors: eig.vectors.clone(),
        }
        .reconstruct(),
        basis.clone(),
    );
    let embedding = if ops.dim <= cfg.embed_cap {
        Some(ComplexDense::identity(ops.dim))
    } else {
        None
    };
    let record = observables::record_from_state(&ops, geom, &rho.mat)?;
    let dim = ops.dim;
    let cluster = Arc::new(Cluster {
        geometry: geom.clone(),
        dim,
        ops,
        rho,
        eig,
        provenance: Provenance::Leaf,
        embedding,
        basis,
        warnings: Vec::new(),
    });
    let result = NodeResult {
        width: geom.width,
        height: geom.height,
        m: dim,
        solver,
        record,
        termination,
        wall_seconds: start.elapsed().as_secs_f64(),
        warnings: Vec::new(),
        history,
        time_series: Vec::new(),
    };
    Ok((cluster, result))
}

fn solve_merged(
    merged: Cluster,
    params: &ModelParams,
    cfg: &PipelineConfig,
) -> Result<(Arc<Cluster>, NodeResult)> {
    let start = std::time::Instant::now();
    let geom = merged.geometry.clone();
    let m = merged.dim;
    let mut warnings = merged.warnings.clone();

    let (rho, eig, record, solver, termination, history, time_series) = if m <= cfg.direct_cap {
        let report =
            evolve_to_steady_state(&merged.ops, &geom, params, &merged.rho, &cfg.controls)?;
        let eig = diagonalize_rho(&report.rho, cfg.clip_tol)?;
        let rho = DensityMatrix::new(
            EigenDecomposition {
                values: eig.values.clone(),
                vectors: eig.vectors.clone(),
            }
            .reconstruct(),
            merged.basis.clone(),
        );
        let record = observables::record_from_state(&merged.ops, &geom, &rho.mat)?;
        (
            rho,
            eig,
            record,
            SolverKind::Direct,
            Some(report.termination),
            report.history,
            Vec::new(),
        )
    } else {
        let h = model::assemble_hamiltonian(&merged.ops, &geom, params)?;
        let jumps = model::jump_operators(&merged.ops, params);
        let obs = SampleOps::from_operator_set(&merged.ops, &geom)?;
        let weights: Vec<f64> = (0..m).map(|k| merged.rho.mat[(k, k)].re).collect();
        let initial = InitialState::WeightedBasis(weights);
        let mut traj_cfg = cfg.trajectories;
        traj_cfg.collect_states = true;
        let ensemble = run_ensemble(
            &h,
            &jumps,
            &obs,
            &initial,
            &traj_cfg,
            params.gamma,
            merged.basis.clone(),
        )?;
        let record = observable_stats(&ensemble)?;
        let rho = estimate_density_matrix(&ensemble)?;
        let eig = diagonalize_rho(&rho, cfg.clip_tol)?;
        let rho = DensityMatrix::new(
            EigenDecomposition {
                values: eig.values.clone(),
                vectors: eig.vectors.clone(),
            }
            .reconstruct(),
            merged.basis.clone(),
        );
        let series = crate::trajectories::population_time_series(&ensemble);
        (
            rho,
            eig,
            record,
            SolverKind::Mcwf,
            None,
            Vec::new(),
            series,
        )
    };

    warnings.extend(record_warnings(&record));
    let cluster = Arc::new(Cluster {
        geometry: geom.clone(),
        dim: m,
        ops: merged.ops,
        rho,
        eig,
        provenance: merged.provenance,
        embedding: merged.embedding,
        basis: merged.basis,
        warnings: warnings.clone(),
    });
    let result = NodeResult {
        width: geom.width,
        height: geom.height,
        m,
        solver,
        record,
        termination,
        wall_seconds: start.elapsed().as_secs_f64(),
        warnings,
        history,
        time_series,
    };
    Ok((cluster, result))
}

fn record_warnings(rec: &ObservableRecord) -> Vec<String> {
    let mut w = Vec::new();
    if !rec.all_finite() {
        w.push("non-finite observable in record".into());
    }
    w
}

/// Effective corner dimension of each node for sweep value `m`.
fn effective_dims(
    schedule: &MergeSchedule,
    site_dim: usize,
    m: usize,
) -> Vec<usize> {
    let mut dims = vec![0usize; schedule.nodes.len()];
    for idx in schedule.solve_order() {
        let node = &schedule.nodes[idx];
        dims[idx] = match &node.kind {
            NodeKind::Leaf => site_dim.pow(node.geometry.n_sites() as u32),
            NodeKind::Merged { left, right, .. } => {
                let product = dims[*left].saturating_mul(dims[*right]);
                m.min(node.m_cap).min(product)
            }
        };
    }
    dims
}

/// Run one full pipeline pass at sweep dimension `m`.
fn run_sweep(
    schedule: &MergeSchedule,
    params: &ModelParams,
    cfg: &PipelineConfig,
    m: usize,
    caches: &mut SweepCaches,
    rows: &mut Vec<NodeResult>,
) -> Result<Arc<Cluster>> {
    let dims = effective_dims(schedule, params.site_dim(), m);
    let mut solved: Vec<Option<Arc<Cluster>>> = vec![None; schedule.nodes.len()];

    for idx in schedule.solve_order() {
        let node = &schedule.nodes[idx];
        let cluster = match &node.kind {
            NodeKind::Leaf => {
                let key = node.geometry.shape();
                if let Some(c) = caches.leaves.get(&key) {
                    c.clone()
                } else {
                    let (c, row) = solve_leaf(node, params, cfg)?;
                    rows.push(row);
                    caches.leaves.insert(key, c.clone());
                    c
                }
            }
            NodeKind::Merged { left, right, .. } => {
                let m_eff = dims[idx];
                let product = dims[*left] * dims[*right];
                let saturated = m_eff == product || m_eff == node.m_cap;
                let key = (idx, m_eff);
                if saturated {
                    if let Some(c) = caches.saturated.get(&key) {
                        solved[idx] = Some(c.clone());
                        continue;
                    }
                }
                let a = solved[*left].as_ref().expect("children solve first");
                let b = solved[*right].as_ref().expect("children solve first");

                // checkpoint reuse
                let ckpt_path = cfg.checkpoint_dir.as_ref().map(|dir| {
                    checkpoint::checkpoint_path(dir, params, &node.geometry, m_eff, cfg.operator_mode)
                });
                if let Some(path) = &ckpt_path {
                    if path.exists() {
                        match load_cluster(path, params) {
                            Ok(c) => {
                                let c = Arc::new(c);
                                if saturated {
                                    caches.saturated.insert(key, c.clone());
                                }
                                solved[idx] = Some(c);
                                continue;
                            }
                            Err(e) => {
                                rows.push(NodeResult {
                                    width: node.geometry.width,
                                    height: node.geometry.height,
                                    m: m_eff,
                                    solver: SolverKind::Direct,
                                    record: empty_record(node.geometry.n_sites()),
                                    termination: None,
                                    wall_seconds: 0.0,
                                    warnings: vec![format!(
                                        "ignoring unreadable checkpoint {}: {e}",
                                        path.display()
                                    )],
                                    history: Vec::new(),
                                    time_series: Vec::new(),
                                });
                            }
                        }
                    }
                }

                let merged = merge_clusters(a, b, node, m_eff, cfg.embed_cap)?;
                let (c, row) = solve_merged(merged, params, cfg)?;
                rows.push(row);
                if let Some(path) = &ckpt_path {
                    save_cluster(path, &c, params)?;
                }
                if saturated {
                    caches.saturated.insert(key, c.clone());
                }
                c
            }
        };
        solved[idx] = Some(cluster);
    }
    Ok(solved[schedule.root].take().expect("root solved"))
}

fn empty_record(n_sites: usize) -> ObservableRecord {
    ObservableRecord {
        n: 0.0,
        re_b: 0.0,
        im_b: 0.0,
        g2_onsite: None,
        g2_nn: None,
        per_site_n: vec![0.0; n_sites],
        per_site_b: vec![(0.0, 0.0); n_sites],
        per_bond_g2nn: Vec::new(),
        errors: None,
    }
}

fn rel_change(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs()).max(1e-9);
    (a - b).abs() / scale
}

/// Converged when each observable either moved less than `tol`
/// (relative) or less than three combined standard errors, so sampled
/// rows cannot be held to changes below their own statistical resolution.
fn records_converged(cur: &ObservableRecord, prev: &ObservableRecord, tol: f64) -> bool {
    let e_cur = cur.errors.unwrap_or_default();
    let e_prev = prev.errors.unwrap_or_default();
    let close = |a: f64, b: f64, sa: f64, sb: f64| {
        rel_change(a, b) < tol || (a - b).abs() <= 3.0 * (sa * sa + sb * sb).sqrt()
    };
    let mut ok = close(cur.n, prev.n, e_cur.n, e_prev.n)
        && close(cur.re_b, prev.re_b, e_cur.re_b, e_prev.re_b)
        && close(cur.im_b, prev.im_b, e_cur.im_b, e_prev.im_b);
    for (c, p, sc, sp) in [
        (cur.g2_onsite, prev.g2_onsite, e_cur.g2_onsite, e_prev.g2_onsite),
        (cur.g2_nn, prev.g2_nn, e_cur.g2_nn, e_prev.g2_nn),
    ] {
        ok &= match (c, p) {
            (Some(x), Some(y)) => close(x, y, sc, sp),
            (None, None) => true,
            _ => false,
        };
    }
    ok
}

/// Sweep the merge schedule over ascending corner dimensions until the
/// root observables stop moving (or the list is exhausted, which is
/// reported, not fatal). Returns the last solved root cluster.
pub fn converge_in_m(
    schedule: &MergeSchedule,
    params: &ModelParams,
    cfg: &PipelineConfig,
) -> Result<(Arc<Cluster>, ConvergenceReport)> {
    params.validate()?;
    assert!(
        cfg.m_list.windows(2).all(|w| w[0] < w[1]),
        "m_list must be strictly ascending"
    );
    let mut caches = SweepCaches {
        leaves: HashMap::new(),
        saturated: HashMap::new(),
    };
    let mut rows = Vec::new();
    let mut per_m_root: Vec<(usize, ObservableRecord)> = Vec::new();
    let mut warnings = Vec::new();
    let mut converged_m = None;
    let mut root = None;

    let mut diffs: Vec<f64> = Vec::new();
    for &m in &cfg.m_list {
        let cluster = run_sweep(schedule, params, cfg, m, &mut caches, &mut rows)?;
        let record = cluster.record()?;
        // a root corner spanning the full product space is exact: no
        // M-comparison needed
        let dims = effective_dims(schedule, params.site_dim(), m);
        let root_exact = match &schedule.nodes[schedule.root].kind {
            NodeKind::Leaf => true,
            NodeKind::Merged { left, right, .. } => {
                dims[schedule.root] == dims[*left] * dims[*right]
            }
        };
        if root_exact && converged_m.is_none() {
            converged_m = Some(m);
        }
        if let Some((_, prev)) = per_m_root.last() {
            let d = rel_change(record.n, prev.n);
            if converged_m.is_none() && records_converged(&record, prev, cfg.obs_tol) {
                converged_m = Some(m);
            }
            diffs.push(d);
            if diffs.len() >= 2 {
                let k = diffs.len();
                if diffs[k - 1] > diffs[k - 2] * (1.0 + 1e-9) && diffs[k - 2] > cfg.obs_tol {
                    warnings.push(format!(
                        "population differences in M are not monotone: {:.3e} then {:.3e}",
                        diffs[k - 2],
                        diffs[k - 1]
                    ));
                }
            }
        }
        per_m_root.push((m, record));
        root = Some(cluster);
        if converged_m.is_some() && !cfg.run_full_schedule {
            break;
        }
    }
    if converged_m.is_none() {
        warnings.push(format!(
            "observables did not converge to {:.1e} within the M schedule {:?}",
            cfg.obs_tol, cfg.m_list
        ));
    }
    for row in &rows {
        warnings.extend(row.warnings.iter().cloned());
    }
    Ok((
        root.expect("at least one sweep"),
        ConvergenceReport {
            rows,
            per_m_root,
            converged_m,
            warnings,
        },
    ))
}
