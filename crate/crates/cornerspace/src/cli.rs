//! Experiment configuration, presets, and machine-readable output.
//!
//! A run is described by a JSON [`ExperimentConfig`]; `run_experiment`
//! executes it and writes four artifacts into the output directory:
//!
//! - `results.csv` — one row per solved (node geometry, M) with columns
//!   `Lx,Ly,M,solver,n,n_err,re_b,re_b_err,im_b,im_b_err,g2,g2_err,g2_nn,g2_nn_err`;
//! - `spectrum.csv` — `rank,p,n_tot` of the final root state;
//! - `timeseries.csv` — `t,n,g2` relaxation of the root solve;
//! - `manifest.json` — resolved config, seeds, per-node solver/timing,
//!   warnings.
//!
//! Numbers are printed with nine significant digits and absent values as
//! empty fields, so reruns with the same config and seeds are
//! byte-identical. Exit status: 0 converged, 2 finished without meeting
//! the convergence target, 1 error.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corner::{converge_in_m, CornerError, NodeResult, PipelineConfig};
use crate::lattice::{build_geometry, plan_merge_schedule, LatticeError};
use crate::meanfield::{gutzwiller_fixed_point, MeanFieldError};
use crate::model::{
    self, Interaction, ModelError, ModelParams, OperatorMode,
};
use crate::observables::{ObservableRecord, SpectrumRow};
use crate::steadystate::{SolveError, SteadyStateControls, Termination};
use crate::trajectories::{
    estimate_density_matrix, observable_stats, run_ensemble, InitialState, SampleOps,
    TrajectoryConfig, TrajectoryError,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config field `{field}`: {message}")]
    InvalidField { field: &'static str, message: String },

    #[error("unknown preset `{0}`; available: {1}")]
    UnknownPreset(String, String),

    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },

    #[error(transparent)]
    Corner(#[from] CornerError),

    #[error(transparent)]
    Lattice(#[from] LatticeError),

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error(transparent)]
    Solve(#[from] SolveError),

    #[error(transparent)]
    MeanField(#[from] MeanFieldError),

    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

pub type Result<T> = std::result::Result<T, CliError>;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Config schema
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    /// Corner-space renormalization over the merge schedule.
    Corner,
    /// Self-consistent Gutzwiller single-site solution.
    Meanfield,
    /// Monte Carlo wavefunction in the full Fock basis of the target
    /// (exact up to statistics; the benchmark route).
    BruteForce,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub delta_omega: f64,
    /// On-site interaction; mutually exclusive with `hardcore`.
    pub u: Option<f64>,
    pub hardcore: bool,
    pub j: f64,
    pub f: f64,
    pub gamma: f64,
    pub n_max: usize,
    /// Coordination number for J/z; defaults to the target lattice's.
    pub z: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            delta_omega: 5.0,
            u: None,
            hardcore: true,
            j: 1.0,
            f: 2.0,
            gamma: 1.0,
            n_max: 1,
            z: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatticeConfig {
    pub lx: usize,
    pub ly: usize,
    pub periodic_x: bool,
    pub periodic_y: bool,
}

impl Default for LatticeConfig {
    fn default() -> Self {
        Self {
            lx: 4,
            ly: 4,
            periodic_x: true,
            periodic_y: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseConfig {
    pub lx: usize,
    pub ly: usize,
}

impl Default for BaseConfig {
    fn default() -> Self {
        Self { lx: 2, ly: 2 }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub dt: Option<f64>,
    pub dt_factor: f64,
    pub check_window: f64,
    pub rel_tol: f64,
    pub max_time: f64,
    /// Convergence-in-M tolerance on observables.
    pub obs_tol: f64,
    pub direct_cap: usize,
    pub nullspace_cap: usize,
    pub brute_force_cap: usize,
    pub clip_tol: f64,
    pub embed_cap: usize,
    /// Sweep the whole M schedule even after convergence (table runs).
    pub run_full_schedule: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let c = SteadyStateControls::default();
        Self {
            dt: c.dt,
            dt_factor: c.dt_factor,
            check_window: c.check_window,
            rel_tol: c.rel_tol,
            max_time: c.max_time,
            obs_tol: 0.01,
            direct_cap: 400,
            nullspace_cap: 64,
            brute_force_cap: 4096,
            clip_tol: 1e-8,
            embed_cap: 1024,
            run_full_schedule: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: String,
    pub spectrum: bool,
    pub timeseries: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: "out".into(),
            spectrum: true,
            timeseries: true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub preset: Option<String>,
    pub run: RunKind,
    pub model: ModelConfig,
    pub lattice: LatticeConfig,
    pub base: BaseConfig,
    pub m_schedule: Vec<usize>,
    pub solver: SolverConfig,
    pub trajectories: TrajectoryConfig,
    pub operator_mode: OperatorMode,
    pub output: OutputConfig,
    pub checkpoint_dir: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_SCHEMA_VERSION,
            preset: None,
            run: RunKind::Corner,
            model: ModelConfig::default(),
            lattice: LatticeConfig::default(),
            base: BaseConfig::default(),
            m_schedule: vec![100],
            solver: SolverConfig::default(),
            trajectories: TrajectoryConfig::default(),
            operator_mode: OperatorMode::Exact,
            output: OutputConfig::default(),
            checkpoint_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_SCHEMA_VERSION {
            return Err(CliError::InvalidField {
                field: "version",
                message: format!(
                    "unsupported schema version {}, expected {CONFIG_SCHEMA_VERSION}",
                    self.version
                ),
            });
        }
        if let Some(name) = &self.preset {
            if !preset_catalog().iter().any(|p| p.name == name) {
                return Err(CliError::UnknownPreset(
                    name.clone(),
                    preset_names().join(", "),
                ));
            }
        }
        if self.model.hardcore && self.model.u.is_some() {
            return Err(CliError::InvalidField {
                field: "model.u",
                message: "hardcore and a finite u are mutually exclusive".into(),
            });
        }
        if !self.model.hardcore && self.model.u.is_none() {
            return Err(CliError::InvalidField {
                field: "model.u",
                message: "set u or enable hardcore".into(),
            });
        }
        if self.model.hardcore && self.model.n_max != 1 {
            return Err(CliError::InvalidField {
                field: "model.n_max",
                message: "hardcore bosons require n_max = 1".into(),
            });
        }
        if !self.model.gamma.is_finite() || self.model.gamma <= 0.0 {
            return Err(CliError::InvalidField {
                field: "model.gamma",
                message: format!("must be positive, got {}", self.model.gamma),
            });
        }
        if self.model.n_max < 1 {
            return Err(CliError::InvalidField {
                field: "model.n_max",
                message: "must be at least 1".into(),
            });
        }
        if self.lattice.lx == 0 || self.lattice.ly == 0 {
            return Err(CliError::InvalidField {
                field: "lattice",
                message: "dimensions must be at least 1x1".into(),
            });
        }
        if self.base.lx == 0
            || self.base.ly == 0
            || !self.lattice.lx.is_multiple_of(self.base.lx)
            || !self.lattice.ly.is_multiple_of(self.base.ly)
        {
            return Err(CliError::InvalidField {
                field: "base",
                message: format!(
                    "base {}x{} must divide the target {}x{}",
                    self.base.lx, self.base.ly, self.lattice.lx, self.lattice.ly
                ),
            });
        }
        if self.run == RunKind::Corner && self.m_schedule.is_empty() {
            return Err(CliError::InvalidField {
                field: "m_schedule",
                message: "at least one corner dimension is required".into(),
            });
        }
        if !self.m_schedule.windows(2).all(|w| w[0] < w[1]) {
            return Err(CliError::InvalidField {
                field: "m_schedule",
                message: "must be strictly ascending".into(),
            });
        }
        for (field, v) in [
            ("solver.dt_factor", self.solver.dt_factor),
            ("solver.check_window", self.solver.check_window),
            ("solver.rel_tol", self.solver.rel_tol),
            ("solver.max_time", self.solver.max_time),
            ("solver.obs_tol", self.solver.obs_tol),
            ("solver.clip_tol", self.solver.clip_tol),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(CliError::InvalidField {
                    field,
                    message: format!("must be positive, got {v}"),
                });
            }
        }
        self.trajectories
            .validate()
            .map_err(|e| CliError::InvalidField {
                field: "trajectories",
                message: e.to_string(),
            })?;
        Ok(())
    }

    pub fn to_model_params(&self) -> Result<ModelParams> {
        let target = build_geometry(
            self.lattice.lx,
            self.lattice.ly,
            self.lattice.periodic_x,
            self.lattice.periodic_y,
        )?;
        let z = self
            .model
            .z
            .or_else(|| target.coordination_number().filter(|&z| z > 0))
            .unwrap_or(4);
        let params = ModelParams {
            delta_omega: self.model.delta_omega,
            interaction: if self.model.hardcore {
                Interaction::HardCore
            } else {
                Interaction::Finite(self.model.u.unwrap())
            },
            hopping: self.model.j,
            drive: self.model.f,
            gamma: self.model.gamma,
            n_max: self.model.n_max,
            z,
        };
        params.validate()?;
        Ok(params)
    }

    fn to_pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            m_list: self.m_schedule.clone(),
            obs_tol: self.solver.obs_tol,
            direct_cap: self.solver.direct_cap,
            nullspace_cap: self.solver.nullspace_cap,
            brute_force_cap: self.solver.brute_force_cap,
            controls: SteadyStateControls {
                dt: self.solver.dt,
                dt_factor: self.solver.dt_factor,
                check_window: self.solver.check_window,
                rel_tol: self.solver.rel_tol,
                max_time: self.solver.max_time,
            },
            trajectories: self.trajectories,
            operator_mode: self.operator_mode,
            clip_tol: self.solver.clip_tol,
            embed_cap: self.solver.embed_cap,
            checkpoint_dir: self.checkpoint_dir.as_ref().map(PathBuf::from),
            run_full_schedule: self.solver.run_full_schedule,
        }
    }
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct Preset {
    pub name: &'static str,
    pub description: &'static str,
    pub configs: Vec<ExperimentConfig>,
}

fn hardcore_model(j: f64) -> ModelConfig {
    ModelConfig {
        delta_omega: 5.0,
        u: None,
        hardcore: true,
        j,
        f: 2.0,
        gamma: 1.0,
        n_max: 1,
        z: None,
    }
}

fn softcore_model(u: f64, j: f64, n_max: usize) -> ModelConfig {
    ModelConfig {
        delta_omega: 5.0,
        u: Some(u),
        hardcore: false,
        j,
        f: 2.0,
        gamma: 1.0,
        n_max,
        z: None,
    }
}

/// The built-in experiment catalog.
pub fn preset_catalog() -> Vec<Preset> {
    let mut table1 = ExperimentConfig {
        preset: Some("table1".into()),
        run: RunKind::Corner,
        model: hardcore_model(1.0),
        lattice: LatticeConfig {
            lx: 4,
            ly: 4,
            periodic_x: true,
            periodic_y: true,
        },
        base: BaseConfig { lx: 2, ly: 2 },
        m_schedule: vec![20, 50, 100, 200, 400, 800],
        ..Default::default()
    };
    // 0.002 keeps the M = 400 direct point from counting as converged;
    // the published g2_nn still moves by ~0.6% between M = 200 and 400
    table1.solver.obs_tol = 0.002;
    table1.solver.run_full_schedule = true; // emit every published row
    table1.trajectories.n_trajectories = 128;
    table1.trajectories.master_seed = 41;
    table1.trajectories.t_relax = 15.0;
    table1.trajectories.t_sample = 60.0;

    let mut table2 = ExperimentConfig {
        preset: Some("table2".into()),
        run: RunKind::Corner,
        model: softcore_model(20.0, 3.0, 3),
        lattice: LatticeConfig {
            lx: 4,
            ly: 4,
            periodic_x: true,
            periodic_y: true,
        },
        base: BaseConfig { lx: 2, ly: 2 },
        m_schedule: vec![200, 400, 800],
        ..Default::default()
    };
    table2.solver.direct_cap = 256; // M = 200 stays deterministic
    table2.solver.obs_tol = 0.02;
    table2.solver.run_full_schedule = true;
    table2.trajectories.n_trajectories = 128;
    table2.trajectories.master_seed = 43;
    table2.trajectories.t_relax = 12.0;
    table2.trajectories.t_sample = 40.0;

    // lattice-size survey: the self-consistent single-site columns for
    // each interaction row (the corner columns at the published sizes are
    // far beyond a desk run; small-M versions are reachable through `run`)
    let table3_rows: Vec<ExperimentConfig> = [
        (hardcore_model(1.0), 8usize, 8usize, 8000usize),
        (softcore_model(20.0, 1.0, 3), 4, 4, 3200),
        (softcore_model(20.0, 3.0, 3), 4, 4, 6400),
        (softcore_model(10.0, 1.0, 5), 4, 2, 6400),
        (softcore_model(1.0, 1.0, 4), 16, 8, 600),
        (softcore_model(0.5, 1.0, 4), 16, 16, 400),
    ]
    .into_iter()
    .map(|(model, lx, ly, m)| ExperimentConfig {
        preset: Some("table3".into()),
        run: RunKind::Meanfield,
        model,
        lattice: LatticeConfig {
            lx,
            ly,
            periodic_x: true,
            periodic_y: true,
        },
        base: BaseConfig { lx: 1, ly: 1 },
        // corner dimension of the published survey row; informational for
        // the mean-field columns this preset computes
        m_schedule: vec![m],
        output: OutputConfig {
            spectrum: false,
            timeseries: false,
            ..Default::default()
        },
        ..Default::default()
    })
    .collect();

    let fig2 = ExperimentConfig {
        preset: Some("fig2".into()),
        run: RunKind::Corner,
        model: softcore_model(20.0, 3.0, 3),
        lattice: LatticeConfig {
            lx: 2,
            ly: 2,
            periodic_x: true,
            periodic_y: true,
        },
        base: BaseConfig { lx: 2, ly: 2 },
        m_schedule: vec![256],
        output: OutputConfig {
            spectrum: false,
            timeseries: true,
            ..Default::default()
        },
        ..Default::default()
    };

    let mut fig3 = ExperimentConfig {
        preset: Some("fig3".into()),
        run: RunKind::Corner,
        model: hardcore_model(1.0),
        lattice: LatticeConfig {
            lx: 6,
            ly: 3,
            periodic_x: true,
            periodic_y: true,
        },
        base: BaseConfig { lx: 3, ly: 1 },
        m_schedule: vec![128, 200],
        output: OutputConfig {
            spectrum: true,
            timeseries: false,
            ..Default::default()
        },
        ..Default::default()
    };
    fig3.solver.obs_tol = 0.02;

    vec![
        Preset {
            name: "table1",
            description: "4x4 hard-core benchmark: corner convergence in M \
                          against the exact full-space result (J=1, F=2, dw=5)",
            configs: vec![table1],
        },
        Preset {
            name: "table2",
            description: "4x4 soft-core convergence in M (U=20, J=3, F=2, \
                          dw=5, n_max=3), MCWF beyond the direct cap",
            configs: vec![table2],
        },
        Preset {
            name: "table3",
            description: "lattice-size survey, mean-field columns: hard-core \
                          8x8; U=20 J=1 4x4; U=20 J=3 4x4; U=10 4x2 \
                          (n_max=5); U=1 16x8; U=0.5 16x16 M=400",
            configs: table3_rows,
        },
        Preset {
            name: "fig2",
            description: "relaxation time series toward the steady state \
                          (U=20, J=3, F=2, dw=5 on 2x2)",
            configs: vec![fig2],
        },
        Preset {
            name: "fig3",
            description: "probability spectrum of the 6x3 hard-core steady \
                          state built from 3x1 clusters",
            configs: vec![fig3],
        },
    ]
}

pub fn preset_names() -> Vec<String> {
    preset_catalog().iter().map(|p| p.name.to_string()).collect()
}

/// One-line catalog listing.
pub fn list_presets() -> String {
    let mut out = String::new();
    for p in preset_catalog() {
        out.push_str(&format!("{:8} {}\n", p.name, p.description));
    }
    out
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

/// (converged, converged M, spectrum rows, time series) of a corner run.
type CornerRunSummary = (
    bool,
    Option<usize>,
    Vec<SpectrumRow>,
    Vec<(f64, f64, Option<f64>)>,
);

/// One results.csv row.
#[derive(Clone, Debug, Serialize)]
pub struct ResultRow {
    pub lx: usize,
    pub ly: usize,
    pub m: usize,
    pub solver: String,
    pub record: ObservableRecord,
}

#[derive(Clone, Debug, Serialize)]
pub struct ManifestNode {
    pub lx: usize,
    pub ly: usize,
    pub m: usize,
    pub solver: String,
    pub wall_seconds: f64,
    pub termination: Option<Termination>,
    pub warnings: Vec<String>,
    /// Per-bond nearest-neighbor g2; cross-boundary bonds are exact even
    /// in fast mode, so spread across bonds makes truncation error
    /// visible.
    pub per_bond_g2nn: Vec<Option<f64>>,
}

/// Machine-readable run summary; every result row belongs to the manifest
/// sitting next to it.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub code_version: String,
    pub configs: Vec<ExperimentConfig>,
    pub nodes: Vec<ManifestNode>,
    pub converged: bool,
    pub converged_m: Vec<Option<usize>>,
    pub warnings: Vec<String>,
    pub files: Vec<String>,
    pub exit_code: i32,
}

/// Everything a run produced, before/after writing to disk.
#[derive(Debug)]
pub struct RunOutcome {
    pub rows: Vec<ResultRow>,
    pub spectrum: Vec<SpectrumRow>,
    pub timeseries: Vec<(f64, f64, Option<f64>)>,
    pub manifest: RunManifest,
    pub exit_code: i32,
}

fn node_to_row(node: &NodeResult) -> ResultRow {
    ResultRow {
        lx: node.width,
        ly: node.height,
        m: node.m,
        solver: node.solver.to_string(),
        record: node.record.clone(),
    }
}

fn run_corner(
    config: &ExperimentConfig,
    rows: &mut Vec<ResultRow>,
    nodes: &mut Vec<ManifestNode>,
    warnings: &mut Vec<String>,
) -> Result<CornerRunSummary> {
    let params = config.to_model_params()?;
    let target = build_geometry(
        config.lattice.lx,
        config.lattice.ly,
        config.lattice.periodic_x,
        config.lattice.periodic_y,
    )?;
    let base = build_geometry(
        config.base.lx,
        config.base.ly,
        config.lattice.periodic_x,
        config.lattice.periodic_y,
    )?;
    let schedule = plan_merge_schedule(
        &target,
        &base,
        &[],
        params.site_dim(),
        config.solver.brute_force_cap,
    )?;
    let cfg = config.to_pipeline_config();
    let (root, report) = converge_in_m(&schedule, &params, &cfg)?;

    let mut max_time_hit = false;
    for node in &report.rows {
        rows.push(node_to_row(node));
        nodes.push(ManifestNode {
            lx: node.width,
            ly: node.height,
            m: node.m,
            solver: node.solver.to_string(),
            wall_seconds: node.wall_seconds,
            termination: node.termination,
            warnings: node.warnings.clone(),
            per_bond_g2nn: node.record.per_bond_g2nn.clone(),
        });
        if node.termination == Some(Termination::MaxTime) {
            max_time_hit = true;
        }
    }
    warnings.extend(report.warnings.iter().cloned());

    let spectrum = if config.output.spectrum {
        root.spectrum()
    } else {
        Vec::new()
    };
    let timeseries = if config.output.timeseries {
        root_timeseries(&report.rows)
    } else {
        Vec::new()
    };
    let converged = report.converged_m.is_some() && !max_time_hit;
    Ok((converged, report.converged_m, spectrum, timeseries))
}

/// Time series of the last-solved root node: direct history if present,
/// otherwise the MCWF ensemble population curve.
fn root_timeseries(rows: &[NodeResult]) -> Vec<(f64, f64, Option<f64>)> {
    let Some(last) = rows.last() else {
        return Vec::new();
    };
    if !last.history.is_empty() {
        last.history
            .iter()
            .map(|s| (s.t, s.n, s.g2_onsite))
            .collect()
    } else {
        last.time_series
            .iter()
            .map(|&(t, n, _err)| (t, n, None))
            .collect()
    }
}

fn run_meanfield(
    config: &ExperimentConfig,
    rows: &mut Vec<ResultRow>,
    nodes: &mut Vec<ManifestNode>,
    warnings: &mut Vec<String>,
) -> Result<bool> {
    let params = config.to_model_params()?;
    let start = std::time::Instant::now();
    let mf = gutzwiller_fixed_point(&params, 0.5, 1e-10, 5000)?;
    if !mf.converged {
        warnings.push(format!(
            "mean-field fixed point stopped at residual {:.3e} after {} iterations{}",
            mf.residual,
            mf.iterations,
            if mf.oscillatory { " (oscillatory)" } else { "" }
        ));
    }
    let record = ObservableRecord {
        n: mf.n,
        re_b: mf.b_mean.re,
        im_b: mf.b_mean.im,
        g2_onsite: mf.g2_onsite,
        g2_nn: Some(1.0), // factorized state
        per_site_n: vec![mf.n],
        per_site_b: vec![(mf.b_mean.re, mf.b_mean.im)],
        per_bond_g2nn: Vec::new(),
        errors: None,
    };
    rows.push(ResultRow {
        lx: config.lattice.lx,
        ly: config.lattice.ly,
        m: 1,
        solver: "meanfield".into(),
        record,
    });
    nodes.push(ManifestNode {
        lx: config.lattice.lx,
        ly: config.lattice.ly,
        m: 1,
        solver: "meanfield".into(),
        wall_seconds: start.elapsed().as_secs_f64(),
        termination: Some(if mf.converged {
            Termination::Converged
        } else {
            Termination::MaxTime
        }),
        warnings: Vec::new(),
        per_bond_g2nn: Vec::new(),
    });
    Ok(mf.converged)
}

/// Full-Fock-space MCWF benchmark of the target lattice.
pub fn run_brute_force(
    config: &ExperimentConfig,
) -> Result<(ObservableRecord, crate::steadystate::DensityMatrix)> {
    let params = config.to_model_params()?;
    let geom = build_geometry(
        config.lattice.lx,
        config.lattice.ly,
        config.lattice.periodic_x,
        config.lattice.periodic_y,
    )?;
    let ops = model::build_base_cluster_ops(&geom, &params, config.solver.brute_force_cap)?;
    let h = model::assemble_hamiltonian(&ops, &geom, &params)?;
    let jumps = model::jump_operators(&ops, &params);
    let obs = SampleOps::from_operator_set(&ops, &geom)?;

    // initial states drawn site by site from the mean-field solution
    let mf = gutzwiller_fixed_point(&params, 0.5, 1e-10, 5000)?;
    let site_eig = crate::corner::diagonalize_rho(&mf.rho, config.solver.clip_tol)?;
    let initial = InitialState::ProductMixture(vec![
        (site_eig.vectors.clone(), site_eig.values.clone());
        geom.n_sites()
    ]);

    let basis = format!("fock:{}x{}", geom.width, geom.height);
    let ensemble = run_ensemble(
        &h,
        &jumps,
        &obs,
        &initial,
        &config.trajectories,
        params.gamma,
        basis,
    )?;
    let record = observable_stats(&ensemble)?;
    let rho = estimate_density_matrix(&ensemble)?;
    Ok((record, rho))
}

fn run_brute_force_into(
    config: &ExperimentConfig,
    rows: &mut Vec<ResultRow>,
    nodes: &mut Vec<ManifestNode>,
) -> Result<bool> {
    let params = config.to_model_params()?;
    let start = std::time::Instant::now();
    let (record, _) = run_brute_force(config)?;
    let dim = params
        .site_dim()
        .pow((config.lattice.lx * config.lattice.ly) as u32);
    nodes.push(ManifestNode {
        lx: config.lattice.lx,
        ly: config.lattice.ly,
        m: dim,
        solver: "mcwf".into(),
        wall_seconds: start.elapsed().as_secs_f64(),
        termination: None,
        warnings: Vec::new(),
        per_bond_g2nn: record.per_bond_g2nn.clone(),
    });
    rows.push(ResultRow {
        lx: config.lattice.lx,
        ly: config.lattice.ly,
        m: dim,
        solver: "mcwf".into(),
        record,
    });
    Ok(true)
}

/// Execute a batch of configs into one output set (presets with several
/// parameter rows reuse this).
pub fn run_configs(configs: &[ExperimentConfig], out_dir: &Path) -> Result<RunOutcome> {
    let mut rows = Vec::new();
    let mut nodes = Vec::new();
    let mut warnings = Vec::new();
    let mut spectrum = Vec::new();
    let mut timeseries = Vec::new();
    let mut all_converged = true;
    let mut converged_m = Vec::new();

    for config in configs {
        config.validate()?;
        match config.run {
            RunKind::Corner => {
                let (ok, m, spec, ts) = run_corner(config, &mut rows, &mut nodes, &mut warnings)?;
                all_converged &= ok;
                converged_m.push(m);
                if !spec.is_empty() {
                    spectrum = spec;
                }
                if !ts.is_empty() {
                    timeseries = ts;
                }
            }
            RunKind::Meanfield => {
                let ok = run_meanfield(config, &mut rows, &mut nodes, &mut warnings)?;
                all_converged &= ok;
                converged_m.push(None);
            }
            RunKind::BruteForce => {
                let ok = run_brute_force_into(config, &mut rows, &mut nodes)?;
                all_converged &= ok;
                converged_m.push(None);
            }
        }
    }

    let exit_code = if all_converged { 0 } else { 2 };
    let mut files = vec!["results.csv".to_string(), "manifest.json".to_string()];
    if !spectrum.is_empty() {
        files.push("spectrum.csv".into());
    }
    if !timeseries.is_empty() {
        files.push("timeseries.csv".into());
    }
    let manifest = RunManifest {
        schema_version: CONFIG_SCHEMA_VERSION,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        configs: configs.to_vec(),
        nodes,
        converged: all_converged,
        converged_m,
        warnings,
        files,
        exit_code,
    };
    let outcome = RunOutcome {
        rows,
        spectrum,
        timeseries,
        manifest,
        exit_code,
    };
    write_outputs(&outcome, out_dir)?;
    Ok(outcome)
}

/// Run one experiment config.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutcome> {
    let out_dir = PathBuf::from(&config.output.dir);
    run_configs(std::slice::from_ref(config), &out_dir)
}

/// Resolve and run a preset, with optional output/seed/M-cap overrides.
pub fn run_preset(
    name: &str,
    out_dir: Option<&Path>,
    seed: Option<u64>,
    m_max: Option<usize>,
) -> Result<RunOutcome> {
    let preset = preset_catalog()
        .into_iter()
        .find(|p| p.name == name)
        .ok_or_else(|| CliError::UnknownPreset(name.into(), preset_names().join(", ")))?;
    let mut configs = preset.configs;
    for config in &mut configs {
        if let Some(s) = seed {
            config.trajectories.master_seed = s;
        }
        if let Some(cap) = m_max {
            config.m_schedule.retain(|&m| m <= cap);
            if config.m_schedule.is_empty() {
                config.m_schedule = vec![cap];
            }
        }
        if let Some(dir) = out_dir {
            config.output.dir = dir.display().to_string();
        }
    }
    let dir = out_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(&configs[0].output.dir));
    run_configs(&configs, &dir)
}

// ---------------------------------------------------------------------------
// Output formatting
// ---------------------------------------------------------------------------

/// Nine significant digits; empty string for absent values.
pub fn fmt_value(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.8e}"),
        None => String::new(),
    }
}

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from(
        "Lx,Ly,M,solver,n,n_err,re_b,re_b_err,im_b,im_b_err,g2,g2_err,g2_nn,g2_nn_err\n",
    );
    for row in rows {
        let r = &row.record;
        let e = r.errors;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            row.lx,
            row.ly,
            row.m,
            row.solver,
            fmt_value(Some(r.n)),
            fmt_value(e.map(|e| e.n)),
            fmt_value(Some(r.re_b)),
            fmt_value(e.map(|e| e.re_b)),
            fmt_value(Some(r.im_b)),
            fmt_value(e.map(|e| e.im_b)),
            fmt_value(r.g2_onsite),
            fmt_value(e.and_then(|e| r.g2_onsite.map(|_| e.g2_onsite))),
            fmt_value(r.g2_nn),
            fmt_value(e.and_then(|e| r.g2_nn.map(|_| e.g2_nn))),
        ));
    }
    out
}

pub fn spectrum_csv(rows: &[SpectrumRow]) -> String {
    let mut out = String::from("rank,p,n_tot\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{}\n",
            r.rank,
            fmt_value(Some(r.p)),
            fmt_value(Some(r.n_tot))
        ));
    }
    out
}

pub fn timeseries_csv(rows: &[(f64, f64, Option<f64>)]) -> String {
    let mut out = String::from("t,n,g2\n");
    for &(t, n, g2) in rows {
        out.push_str(&format!(
            "{},{},{}\n",
            fmt_value(Some(t)),
            fmt_value(Some(n)),
            fmt_value(g2)
        ));
    }
    out
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| CliError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    f.write_all(contents.as_bytes()).map_err(|e| CliError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn write_outputs(outcome: &RunOutcome, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::Io {
        path: out_dir.display().to_string(),
        source: e,
    })?;
    write_file(&out_dir.join("results.csv"), &results_csv(&outcome.rows))?;
    if !outcome.spectrum.is_empty() {
        write_file(&out_dir.join("spectrum.csv"), &spectrum_csv(&outcome.spectrum))?;
    }
    if !outcome.timeseries.is_empty() {
        write_file(
            &out_dir.join("timeseries.csv"),
            &timeseries_csv(&outcome.timeseries),
        )?;
    }
    let manifest = serde_json::to_string_pretty(&outcome.manifest)?;
    write_file(&out_dir.join("manifest.json"), &manifest)?;
    Ok(())
}

#[cfg(test)]
mod tests;
