use num_complex::Complex64;

use super::*;
use crate::lattice::build_geometry;
use crate::model::{
    assemble_hamiltonian, build_base_cluster_ops, jump_operators, Interaction, ModelParams,
};
use crate::numerics::ComplexSparse;
use crate::steadystate::steady_state_nullspace;

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// Two-level pure-decay setup: H = 0, C = sqrt(gamma) b.
fn decay_setup(gamma: f64) -> (Operator, Vec<Operator>, SampleOps) {
    let h = Operator::Sparse(ComplexSparse::zero(2, 2));
    let b = ComplexSparse::from_triplets(2, 2, &[(0, 1, c(gamma.sqrt(), 0.0))]);
    let n = ComplexSparse::from_triplets(2, 2, &[(1, 1, c(1.0, 0.0))]);
    let obs = SampleOps {
        site_n: vec![Operator::Sparse(n)],
        site_b: vec![Operator::Sparse(b.scale(c(1.0 / gamma.sqrt(), 0.0)))],
        site_n2: vec![Operator::Sparse(ComplexSparse::zero(2, 2))],
        bond_dens: Vec::new(),
    };
    (h, vec![Operator::Sparse(b)], obs)
}

#[test]
fn unitary_evolution_preserves_norm() {
    // no jump operators: |psi(t)| stays 1
    let geom = build_geometry(2, 1, true, false).unwrap();
    let params = ModelParams {
        delta_omega: 5.0,
        interaction: Interaction::HardCore,
        hopping: 1.0,
        drive: 2.0,
        gamma: 1.0,
        n_max: 1,
        z: 4,
    };
    let ops = build_base_cluster_ops(&geom, &params, 4096).unwrap();
    let h = assemble_hamiltonian(&ops, &geom, &params).unwrap();
    let obs = SampleOps::from_operator_set(&ops, &geom).unwrap();
    let config = TrajectoryConfig {
        n_trajectories: 1,
        t_relax: 0.0,
        t_sample: 5.0,
        sample_stride: 1.0,
        collect_states: false,
        ..Default::default()
    };
    let psi0 = vec![c(0.5, 0.0), c(0.5, 0.0), c(0.5, 0.0), c(0.5, 0.0)];
    let (stats, _) = run_trajectory(&h, &[], &obs, psi0, &config, 1.0, 1e-3, 0, None).unwrap();
    assert_eq!(stats.jumps, 0);
    // populations stay normalized along the way
    for (_, n, _) in &stats.time_series {
        assert!(n.is_finite());
    }
}

#[test]
fn pure_decay_matches_exponential_law() {
    let gamma = 1.0;
    let (h, jumps, obs) = decay_setup(gamma);
    let config = TrajectoryConfig {
        n_trajectories: 2000,
        t_relax: 0.0,
        t_sample: 3.0,
        sample_stride: 0.3,
        master_seed: 1234,
        collect_states: false,
        ..Default::default()
    };
    let initial = InitialState::Pure(vec![c(0.0, 0.0), c(1.0, 0.0)]);
    let ens = run_ensemble(&h, &jumps, &obs, &initial, &config, gamma, "decay").unwrap();
    let series = population_time_series(&ens);
    assert!(series.len() >= 8);
    for (t, mean, err) in series.iter().skip(1) {
        let expect = (-gamma * t).exp();
        let tol = 3.0 * err.max(1e-4);
        assert!(
            (mean - expect).abs() < tol,
            "population {mean:.4} vs e^-t {expect:.4} at t = {t} (3se = {tol:.4})"
        );
    }
    // mean jump count equals the decayed fraction (each trajectory jumps
    // at most once out of |1>)
    let jump_frac =
        ens.per_trajectory.iter().map(|s| s.jumps as f64).sum::<f64>() / 2000.0;
    let expect = 1.0 - (-gamma * 3.0f64).exp();
    assert!(
        (jump_frac - expect).abs() < 0.05,
        "jump fraction {jump_frac:.3} vs {expect:.3}"
    );
}

#[test]
fn error_scales_as_inverse_sqrt_trajectories() {
    let gamma = 1.0;
    let (h, jumps, obs) = decay_setup(gamma);
    let initial = InitialState::Pure(vec![c(0.0, 0.0), c(1.0, 0.0)]);
    let mut errs = Vec::new();
    for n_traj in [100usize, 400, 1600] {
        let config = TrajectoryConfig {
            n_trajectories: n_traj,
            t_relax: 0.0,
            t_sample: 1.0,
            sample_stride: 0.5,
            master_seed: 99,
            collect_states: false,
            ..Default::default()
        };
        let ens = run_ensemble(&h, &jumps, &obs, &initial, &config, gamma, "decay").unwrap();
        let rec = observable_stats(&ens).unwrap();
        errs.push(rec.errors.unwrap().n);
    }
    for w in errs.windows(2) {
        let ratio = w[0] / w[1];
        // quadrupling the trajectories should halve the error
        assert!(
            (1.5..2.7).contains(&ratio),
            "error ratio {ratio:.2} out of 1/sqrt(n) range, errs {errs:?}"
        );
    }
}

#[test]
fn single_snapshot_gives_rank_one_projector() {
    let gamma = 1.0;
    let (h, jumps, obs) = decay_setup(gamma);
    let config = TrajectoryConfig {
        n_trajectories: 1,
        t_relax: 0.0,
        t_sample: 0.1,
        sample_stride: 0.1,
        master_seed: 5,
        collect_states: true,
        ..Default::default()
    };
    let psi0 = vec![c(1.0 / 2f64.sqrt(), 0.0), c(0.5, 0.5)];
    let initial = InitialState::Pure(psi0.clone());
    let ens = run_ensemble(&h, &jumps, &obs, &initial, &config, gamma, "x").unwrap();
    let rho = estimate_density_matrix(&ens).unwrap();
    let eig = crate::numerics::hermitian_eig(&rho.mat, 1e-10).unwrap();
    assert!((eig.values[0] - 1.0).abs() < 1e-10);
    assert!(eig.values[1].abs() < 1e-10);
}

#[test]
fn decay_endpoint_is_vacuum() {
    let gamma = 1.0;
    let (h, jumps, obs) = decay_setup(gamma);
    let config = TrajectoryConfig {
        n_trajectories: 64,
        t_relax: 15.0,
        t_sample: 5.0,
        sample_stride: 0.5,
        master_seed: 11,
        collect_states: true,
        ..Default::default()
    };
    let initial = InitialState::Pure(vec![c(0.0, 0.0), c(1.0, 0.0)]);
    let ens = run_ensemble(&h, &jumps, &obs, &initial, &config, gamma, "x").unwrap();
    let rho = estimate_density_matrix(&ens).unwrap();
    assert!((rho.mat[(0, 0)].re - 1.0).abs() < 1e-4);
    assert!(rho.mat[(1, 1)].norm() < 1e-4);
}

#[test]
fn driven_site_matches_nullspace_oracle() {
    let geom = build_geometry(1, 1, false, false).unwrap();
    let params = ModelParams {
        delta_omega: 5.0,
        interaction: Interaction::Finite(0.0),
        hopping: 0.0,
        drive: 2.0,
        gamma: 1.0,
        n_max: 8,
        z: 4,
    };
    let ops = build_base_cluster_ops(&geom, &params, 1 << 14).unwrap();
    let h = assemble_hamiltonian(&ops, &geom, &params).unwrap();
    let jumps = jump_operators(&ops, &params);
    let obs = SampleOps::from_operator_set(&ops, &geom).unwrap();
    let config = TrajectoryConfig {
        n_trajectories: 400,
        t_relax: 15.0,
        t_sample: 40.0,
        sample_stride: 0.5,
        master_seed: 21,
        collect_states: true,
        ..Default::default()
    };
    let initial = InitialState::Pure({
        let mut v = vec![c(0.0, 0.0); ops.dim];
        v[0] = c(1.0, 0.0);
        v
    });
    let ens = run_ensemble(&h, &jumps, &obs, &initial, &config, 1.0, "fock:1x1").unwrap();
    let rec = observable_stats(&ens).unwrap();
    let err = rec.errors.unwrap();

    let oracle = steady_state_nullspace(&h, &jumps, 64, "fock:1x1").unwrap();
    let oracle_rec = crate::observables::record_from_state(&ops, &geom, &oracle.mat).unwrap();
    assert!(
        (rec.n - oracle_rec.n).abs() < 5.0 * err.n.max(2e-4),
        "n {} vs oracle {} (se {})",
        rec.n,
        oracle_rec.n,
        err.n
    );

    let rho = estimate_density_matrix(&ens).unwrap();
    let dev = rho.mat.sub(&oracle.mat).max_abs();
    assert!(
        dev < 5.0 * err.n.max(2e-3),
        "density-matrix deviation {dev:.2e} vs 5se"
    );
}

#[test]
fn two_trajectory_error_formula() {
    // synthetic ensemble: means a and b give mean (a+b)/2, se |a-b|/2
    let mk = |val: f64| TrajectoryStats {
        n_site: vec![val],
        b_site: vec![c(val, 0.0)],
        g2num_site: vec![0.0],
        dens_bond: vec![],
        samples: 1,
        jumps: 0,
        time_series: vec![],
    };
    let ens = TrajectoryEnsemble {
        per_trajectory: vec![mk(0.2), mk(0.6)],
        bond_info: vec![],
        rho_sum: None,
        snapshots: 0,
        basis: "x".into(),
        config: TrajectoryConfig::default(),
        dt: 0.01,
    };
    let rec = observable_stats(&ens).unwrap();
    assert!((rec.n - 0.4).abs() < 1e-15);
    assert!((rec.errors.unwrap().n - 0.2).abs() < 1e-15);

    // identical trajectories: zero error
    let ens2 = TrajectoryEnsemble {
        per_trajectory: vec![mk(0.3), mk(0.3), mk(0.3)],
        bond_info: vec![],
        rho_sum: None,
        snapshots: 0,
        basis: "x".into(),
        config: TrajectoryConfig::default(),
        dt: 0.01,
    };
    let rec2 = observable_stats(&ens2).unwrap();
    assert_eq!(rec2.errors.unwrap().n, 0.0);
}

#[test]
fn ensembles_are_deterministic_across_thread_counts() {
    let gamma = 1.0;
    let (h, jumps, obs) = decay_setup(gamma);
    let config = TrajectoryConfig {
        n_trajectories: 48,
        t_relax: 0.5,
        t_sample: 2.0,
        sample_stride: 0.5,
        master_seed: 4242,
        collect_states: true,
        ..Default::default()
    };
    let initial = InitialState::WeightedBasis(vec![0.25, 0.75]);

    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| run_ensemble(&h, &jumps, &obs, &initial, &config, gamma, "x").unwrap())
    };
    let a = run(1);
    let b = run(2);
    assert_eq!(a.snapshots, b.snapshots);
    for (x, y) in a.per_trajectory.iter().zip(&b.per_trajectory) {
        assert_eq!(x.jumps, y.jumps);
        for (u, v) in x.n_site.iter().zip(&y.n_site) {
            assert_eq!(u.to_bits(), v.to_bits(), "trajectory means must be bit-equal");
        }
    }
    let ra = a.rho_sum.unwrap();
    let rb = b.rho_sum.unwrap();
    for (u, v) in ra.data().iter().zip(rb.data().iter()) {
        assert_eq!(u.re.to_bits(), v.re.to_bits());
        assert_eq!(u.im.to_bits(), v.im.to_bits());
    }
}

#[test]
fn norm_never_increases_between_jumps() {
    // evolve the no-jump branch explicitly and watch the squared norm
    let gamma = 0.8;
    let (h, jumps, _) = decay_setup(gamma);
    let prop = Propagator::new(&h, &jumps).unwrap();
    let mut psi = vec![c(0.6, 0.0), c(0.8, 0.0)];
    let mut rk4 = crate::numerics::Rk4Workspace::new(2);
    let mut last = 1.0f64;
    for _ in 0..200 {
        let drift = &prop.drift;
        let mut f = |_t: f64, y: &[Complex64], out: &mut [Complex64]| {
            drift.matvec_into(y, out);
        };
        rk4.step(&mut f, &mut psi, 0.0, 0.01);
        let n2: f64 = psi.iter().map(|z| z.norm_sqr()).sum();
        assert!(n2 <= last * (1.0 + 1e-12), "norm grew: {n2} > {last}");
        last = n2;
    }
}

#[test]
fn config_validation_rejects_bad_windows() {
    let config = TrajectoryConfig {
        t_sample: 0.1,
        sample_stride: 0.5,
        ..Default::default()
    };
    assert!(config.validate().is_err());
    let config = TrajectoryConfig {
        n_trajectories: 0,
        ..Default::default()
    };
    assert!(config.validate().is_err());
}
