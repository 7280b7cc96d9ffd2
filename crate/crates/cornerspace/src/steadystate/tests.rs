use num_complex::Complex64;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::lattice::build_geometry;
use crate::model::{build_base_cluster_ops, Interaction, ModelParams};

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

fn linear_cavity_params(n_max: usize) -> ModelParams {
    ModelParams {
        delta_omega: 5.0,
        interaction: Interaction::Finite(0.0),
        hopping: 0.0,
        drive: 2.0,
        gamma: 1.0,
        n_max,
        z: 4,
    }
}

fn hardcore_params() -> ModelParams {
    ModelParams {
        delta_omega: 5.0,
        interaction: Interaction::HardCore,
        hopping: 1.0,
        drive: 2.0,
        gamma: 1.0,
        n_max: 1,
        z: 4,
    }
}

fn random_hermitian_trace_one(d: usize, rng: &mut ChaCha8Rng) -> ComplexDense {
    let raw = ComplexDense::from_fn(d, d, |_, _| {
        c(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
    });
    let mut h = raw.hermitize();
    let shift = (1.0 - h.trace().re) / d as f64;
    for i in 0..d {
        h[(i, i)] += c(shift, 0.0);
    }
    h
}

// --- lindblad_rhs --------------------------------------------------------

#[test]
fn rhs_single_decay_channel() {
    // rho = |1><1|, H = 0, C = sqrt(gamma) b  ->  gamma (|0><0| - |1><1|)
    let gamma: f64 = 0.7;
    let h = Operator::Dense(ComplexDense::zeros(2, 2));
    let mut b = ComplexDense::zeros(2, 2);
    b[(0, 1)] = c(gamma.sqrt(), 0.0);
    let jumps = vec![Operator::Dense(b)];
    let mut rho = ComplexDense::zeros(2, 2);
    rho[(1, 1)] = c(1.0, 0.0);
    let out = lindblad_rhs(&rho, &h, &jumps);
    assert!((out[(0, 0)] - c(gamma, 0.0)).norm() < 1e-14);
    assert!((out[(1, 1)] - c(-gamma, 0.0)).norm() < 1e-14);
    assert!(out[(0, 1)].norm() < 1e-14);
    assert!(out[(1, 0)].norm() < 1e-14);
}

#[test]
fn rhs_vacuum_is_dark_for_pure_decay() {
    let geom = build_geometry(1, 1, false, false).unwrap();
    let params = linear_cavity_params(3);
    let ops = build_base_cluster_ops(&geom, &params, 4096).unwrap();
    let h = Operator::Dense(ComplexDense::zeros(4, 4));
    let jumps = crate::model::jump_operators(&ops, &params);
    let mut rho = ComplexDense::zeros(4, 4);
    rho[(0, 0)] = c(1.0, 0.0);
    let out = lindblad_rhs(&rho, &h, &jumps);
    assert!(out.max_abs() < 1e-14);
}

#[test]
fn rhs_conserves_trace_and_hermiticity() {
    let geom = build_geometry(2, 1, true, false).unwrap();
    let params = hardcore_params();
    let ops = build_base_cluster_ops(&geom, &params, 4096).unwrap();
    let h = crate::model::assemble_hamiltonian(&ops, &geom, &params).unwrap();
    let jumps = crate::model::jump_operators(&ops, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..20 {
        let rho = random_hermitian_trace_one(4, &mut rng);
        let out = lindblad_rhs(&rho, &h, &jumps);
        assert!(
            out.trace().norm() < 1e-12 * rho.frob_norm().max(1.0),
            "trace leak {:.3e}",
            out.trace().norm()
        );
        assert!(out.hermiticity_deviation() < 1e-12);
    }
}

#[test]
fn propagator_matches_literal_rhs() {
    let geom = build_geometry(2, 1, true, false).unwrap();
    let params = hardcore_params();
    let ops = build_base_cluster_ops(&geom, &params, 4096).unwrap();
    let h = crate::model::assemble_hamiltonian(&ops, &geom, &params).unwrap();
    let jumps = crate::model::jump_operators(&ops, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let rho = random_hermitian_trace_one(4, &mut rng);

    let literal = lindblad_rhs(&rho, &h, &jumps);

    // sparse-drift path
    let prop = LindbladPropagator::new(&h, &jumps).unwrap();
    let mut ws = PropagatorWorkspace::new(4);
    let mut out = vec![c(0.0, 0.0); 16];
    prop.rhs_into(rho.data(), &mut out, &mut ws);
    let fast = ComplexDense::from_vec(4, 4, out.clone());
    assert!(fast.sub(&literal).max_abs() < 1e-12);

    // dense-drift path
    let hd = Operator::Dense(h.to_dense());
    let jd: Vec<Operator> = jumps.iter().map(|j| Operator::Dense(j.to_dense())).collect();
    let prop2 = LindbladPropagator::new(&hd, &jd).unwrap();
    let mut ws2 = PropagatorWorkspace::new(4);
    prop2.rhs_into(rho.data(), &mut out, &mut ws2);
    let fast2 = ComplexDense::from_vec(4, 4, out);
    assert!(fast2.sub(&literal).max_abs() < 1e-12);
}

// --- evolve_to_steady_state ----------------------------------------------

#[test]
fn linear_cavity_closed_form() {
    // U = 0, J = 0: <b> = F / (dw + i gamma/2), coherent steady state
    let geom = build_geometry(1, 1, false, false).unwrap();
    let params = linear_cavity_params(10);
    let ops = build_base_cluster_ops(&geom, &params, 1 << 14).unwrap();
    let rho0 = DensityMatrix::pure(ops.dim, 0, "fock:1x1");
    let controls = SteadyStateControls {
        rel_tol: 1e-9,
        ..Default::default()
    };
    let report = evolve_to_steady_state(&ops, &geom, &params, &rho0, &controls).unwrap();
    assert_eq!(report.termination, Termination::Converged);
    let rec = crate::observables::record_from_state(&ops, &geom, &report.rho.mat).unwrap();
    assert!((rec.n - 0.15841584).abs() < 1e-6, "n = {}", rec.n);
    assert!((rec.re_b - 0.39603960).abs() < 1e-6, "re_b = {}", rec.re_b);

    let h = crate::model::assemble_hamiltonian(&ops, &geom, &params).unwrap();
    let jumps = crate::model::jump_operators(&ops, &params);
    let oracle = steady_state_nullspace(&h, &jumps, 64, "fock:1x1").unwrap();
    let rec2 = crate::observables::record_from_state(&ops, &geom, &oracle.mat).unwrap();
    assert!((rec2.n - 0.15841584).abs() < 1e-8);
    assert!((rec2.re_b - 0.39603960).abs() < 1e-8);
    assert!(report.rho.mat.sub(&oracle.mat).max_abs() < 1e-8);
}

#[test]
fn two_level_optical_bloch_steady_state() {
    // hard-core single site: n = (2F)^2/4 / (dw^2 + gamma^2/4 + (2F)^2/2)
    let geom = build_geometry(1, 1, false, false).unwrap();
    let mut params = hardcore_params();
    params.hopping = 0.0;
    let ops = build_base_cluster_ops(&geom, &params, 4096).unwrap();
    let rho0 = DensityMatrix::pure(2, 0, "fock:1x1");
    let controls = SteadyStateControls {
        rel_tol: 1e-9,
        ..Default::default()
    };
    let report = evolve_to_steady_state(&ops, &geom, &params, &rho0, &controls).unwrap();
    let rec = crate::observables::record_from_state(&ops, &geom, &report.rho.mat).unwrap();
    let expect = 4.0 / 33.25;
    assert!((rec.n - expect).abs() < 1e-6, "n = {} vs {}", rec.n, expect);
}

#[test]
fn undriven_lattice_decays_to_vacuum() {
    let geom = build_geometry(2, 1, true, false).unwrap();
    let mut params = hardcore_params();
    params.drive = 0.0;
    let ops = build_base_cluster_ops(&geom, &params, 4096).unwrap();
    // start from all-excited
    let rho0 = DensityMatrix::pure(4, 3, "fock:2x1");
    let report =
        evolve_to_steady_state(&ops, &geom, &params, &rho0, &SteadyStateControls::default())
            .unwrap();
    let rec = crate::observables::record_from_state(&ops, &geom, &report.rho.mat).unwrap();
    assert!(rec.n < 1e-8, "undriven lattice must empty, n = {}", rec.n);
}

#[test]
fn evolve_agrees_with_nullspace_on_two_sites() {
    let geom = build_geometry(2, 1, true, false).unwrap();
    let params = hardcore_params();
    let ops = build_base_cluster_ops(&geom, &params, 4096).unwrap();
    let rho0 = DensityMatrix::pure(4, 0, "fock:2x1");
    let controls = SteadyStateControls {
        rel_tol: 1e-9,
        ..Default::default()
    };
    let report = evolve_to_steady_state(&ops, &geom, &params, &rho0, &controls).unwrap();

    let h = crate::model::assemble_hamiltonian(&ops, &geom, &params).unwrap();
    let jumps = crate::model::jump_operators(&ops, &params);
    let oracle = steady_state_nullspace(&h, &jumps, 64, "fock:2x1").unwrap();
    let dev = report.rho.mat.sub(&oracle.mat).max_abs();
    assert!(dev < 1e-6, "evolve vs nullspace deviation {dev:.3e}");
}

#[test]
fn evolve_is_idempotent_at_the_fixed_point() {
    let geom = build_geometry(1, 1, false, false).unwrap();
    let params = linear_cavity_params(6);
    let ops = build_base_cluster_ops(&geom, &params, 4096).unwrap();
    let rho0 = DensityMatrix::pure(7, 0, "fock:1x1");
    let controls = SteadyStateControls::default();
    let first = evolve_to_steady_state(&ops, &geom, &params, &rho0, &controls).unwrap();
    let second =
        evolve_to_steady_state(&ops, &geom, &params, &first.rho, &controls).unwrap();
    assert_eq!(second.termination, Termination::Converged);
    // one check window suffices when starting at the fixed point
    assert_eq!(second.history.len(), 2);
}

#[test]
fn max_time_is_reported_not_fatal() {
    let geom = build_geometry(1, 1, false, false).unwrap();
    let params = linear_cavity_params(4);
    let ops = build_base_cluster_ops(&geom, &params, 4096).unwrap();
    let rho0 = DensityMatrix::pure(5, 0, "fock:1x1");
    let controls = SteadyStateControls {
        rel_tol: 0.0, // unattainable
        max_time: 20.0,
        ..Default::default()
    };
    let report = evolve_to_steady_state(&ops, &geom, &params, &rho0, &controls).unwrap();
    assert_eq!(report.termination, Termination::MaxTime);
}

// --- nullspace oracle -----------------------------------------------------

#[test]
fn nullspace_output_has_unit_trace() {
    let geom = build_geometry(1, 1, false, false).unwrap();
    let params = hardcore_params();
    let ops = build_base_cluster_ops(&geom, &params, 4096).unwrap();
    let h = crate::model::assemble_hamiltonian(&ops, &geom, &params).unwrap();
    let jumps = crate::model::jump_operators(&ops, &params);
    let rho = steady_state_nullspace(&h, &jumps, 64, "fock").unwrap();
    assert!((rho.mat.trace().re - 1.0).abs() < 1e-14);
    assert!(rho.mat.trace().im.abs() < 1e-14);
}

#[test]
fn nullspace_rejects_degenerate_manifold() {
    // pure dephasing: every diagonal state is steady
    let mut n = ComplexDense::zeros(2, 2);
    n[(1, 1)] = c(1.0, 0.0);
    let h = Operator::Dense(ComplexDense::zeros(2, 2));
    let jumps = vec![Operator::Dense(n)];
    assert!(matches!(
        steady_state_nullspace(&h, &jumps, 64, "x"),
        Err(SolveError::DegenerateSteadyState)
    ));
}

#[test]
fn nullspace_cap_is_enforced() {
    let h = Operator::Dense(ComplexDense::zeros(80, 80));
    assert!(matches!(
        steady_state_nullspace(&h, &[], 64, "x"),
        Err(SolveError::NullspaceTooLarge { .. })
    ));
}
