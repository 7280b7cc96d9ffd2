use super::*;

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("cornerspace_{tag}_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn small_corner_config(out: &Path) -> ExperimentConfig {
    let mut config = ExperimentConfig {
        run: RunKind::Corner,
        lattice: LatticeConfig {
            lx: 2,
            ly: 2,
            periodic_x: true,
            periodic_y: true,
        },
        base: BaseConfig { lx: 2, ly: 1 },
        m_schedule: vec![4, 16],
        ..Default::default()
    };
    // the truncated M = 4 point sits far from the exact M = 16 answer, so
    // a loose target lets the tiny schedule count as converged
    config.solver.obs_tol = 0.25;
    config.output.dir = out.display().to_string();
    config
}

#[test]
fn config_roundtrips_through_json() {
    let config = small_corner_config(Path::new("x"));
    let json = serde_json::to_string_pretty(&config).unwrap();
    let back = ExperimentConfig::from_json(&json).unwrap();
    let json2 = serde_json::to_string_pretty(&back).unwrap();
    assert_eq!(json, json2, "serialization must be lossless");
}

#[test]
fn validation_names_the_offending_field() {
    let mut config = small_corner_config(Path::new("x"));
    config.model.u = Some(10.0); // hardcore is still set
    let err = config.validate().unwrap_err();
    assert!(err.to_string().contains("model.u"), "{err}");

    let mut config = small_corner_config(Path::new("x"));
    config.m_schedule = vec![16, 4];
    let err = config.validate().unwrap_err();
    assert!(err.to_string().contains("m_schedule"), "{err}");

    let mut config = small_corner_config(Path::new("x"));
    config.base.lx = 3;
    let err = config.validate().unwrap_err();
    assert!(err.to_string().contains("base"), "{err}");

    let mut config = small_corner_config(Path::new("x"));
    config.model.gamma = -1.0;
    let err = config.validate().unwrap_err();
    assert!(err.to_string().contains("model.gamma"), "{err}");

    let mut config = small_corner_config(Path::new("x"));
    config.preset = Some("nope".into());
    assert!(matches!(
        config.validate(),
        Err(CliError::UnknownPreset(..))
    ));
}

#[test]
fn unknown_json_fields_are_rejected() {
    let err = ExperimentConfig::from_json(r#"{"no_such_field": 1}"#).unwrap_err();
    assert!(err.to_string().contains("no_such_field"));
}

#[test]
fn preset_catalog_contents() {
    let names = preset_names();
    for expected in ["table1", "table2", "table3", "fig2", "fig3"] {
        assert!(names.iter().any(|n| n == expected), "missing {expected}");
    }
    let catalog = preset_catalog();
    let fig2 = catalog.iter().find(|p| p.name == "fig2").unwrap();
    let m = &fig2.configs[0].model;
    assert_eq!(m.u, Some(20.0));
    assert_eq!(m.j, 3.0);
    assert_eq!(m.f, 2.0);
    assert_eq!(m.delta_omega, 5.0);

    let table3 = catalog.iter().find(|p| p.name == "table3").unwrap();
    assert!(table3
        .configs
        .iter()
        .any(|c| c.model.u == Some(0.5) && c.lattice.lx == 16 && c.lattice.ly == 16
            && c.m_schedule == vec![400]));
    // every preset config validates
    for p in &catalog {
        for c in &p.configs {
            c.validate().unwrap_or_else(|e| panic!("{}: {e}", p.name));
        }
    }
    assert!(list_presets().contains("table1"));
}

#[test]
fn csv_formatting_rules() {
    assert_eq!(fmt_value(Some(0.09543999)), "9.54399900e-2");
    assert_eq!(fmt_value(None), "");
    let row = ResultRow {
        lx: 4,
        ly: 4,
        m: 100,
        solver: "direct".into(),
        record: crate::observables::ObservableRecord {
            n: 0.1,
            re_b: 0.2,
            im_b: -0.05,
            g2_onsite: None,
            g2_nn: Some(1.06),
            per_site_n: vec![],
            per_site_b: vec![],
            per_bond_g2nn: vec![],
            errors: None,
        },
    };
    let csv = results_csv(&[row]);
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "Lx,Ly,M,solver,n,n_err,re_b,re_b_err,im_b,im_b_err,g2,g2_err,g2_nn,g2_nn_err"
    );
    let data = lines.next().unwrap();
    assert_eq!(data.split(',').count(), 14);
    // absent g2 and all error fields are empty
    let fields: Vec<&str> = data.split(',').collect();
    assert_eq!(fields[10], "");
    assert_eq!(fields[5], "");
    assert!(fields[4].contains('.'));
}

#[test]
fn small_experiment_writes_all_outputs_and_is_reproducible() {
    let dir = temp_dir("run");
    let config = small_corner_config(&dir);
    let outcome = run_experiment(&config).unwrap();
    assert_eq!(outcome.exit_code, 0, "full-M run converges");
    assert!(dir.join("results.csv").exists());
    assert!(dir.join("spectrum.csv").exists());
    assert!(dir.join("timeseries.csv").exists());
    assert!(dir.join("manifest.json").exists());

    let results1 = std::fs::read(dir.join("results.csv")).unwrap();
    let spectrum1 = std::fs::read(dir.join("spectrum.csv")).unwrap();
    // leaf row + merge rows at M = 4 and 16
    let text = String::from_utf8(results1.clone()).unwrap();
    assert_eq!(text.lines().count(), 1 + 3, "header + three rows: {text}");

    // rerunning reproduces the CSVs byte for byte
    let outcome2 = run_experiment(&config).unwrap();
    assert_eq!(outcome2.exit_code, 0);
    let results2 = std::fs::read(dir.join("results.csv")).unwrap();
    let spectrum2 = std::fs::read(dir.join("spectrum.csv")).unwrap();
    assert_eq!(results1, results2);
    assert_eq!(spectrum1, spectrum2);

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["exit_code"], 0);
    assert!(manifest["nodes"].as_array().unwrap().len() >= 3);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn unconverged_schedule_exits_with_code_two() {
    let dir = temp_dir("unconv");
    let mut config = small_corner_config(&dir);
    config.m_schedule = vec![2, 4];
    config.solver.obs_tol = 1e-12;
    let outcome = run_experiment(&config).unwrap();
    assert_eq!(outcome.exit_code, 2);
    assert!(outcome
        .manifest
        .warnings
        .iter()
        .any(|w| w.contains("did not converge")));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn meanfield_run_emits_one_row_per_config() {
    let dir = temp_dir("mf");
    let mut config = small_corner_config(&dir);
    config.run = RunKind::Meanfield;
    config.output.spectrum = false;
    config.output.timeseries = false;
    let outcome = run_experiment(&config).unwrap();
    assert_eq!(outcome.exit_code, 0);
    assert_eq!(outcome.rows.len(), 1);
    assert_eq!(outcome.rows[0].solver, "meanfield");
    assert_eq!(outcome.rows[0].record.g2_nn, Some(1.0));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn brute_force_run_matches_nullspace_oracle() {
    let dir = temp_dir("bf");
    let mut config = ExperimentConfig {
        run: RunKind::BruteForce,
        lattice: LatticeConfig {
            lx: 2,
            ly: 1,
            periodic_x: true,
            periodic_y: false,
        },
        base: BaseConfig { lx: 2, ly: 1 },
        m_schedule: vec![4],
        ..Default::default()
    };
    config.output.dir = dir.display().to_string();
    config.trajectories.n_trajectories = 200;
    config.trajectories.t_relax = 10.0;
    config.trajectories.t_sample = 30.0;
    config.trajectories.master_seed = 12;
    let (record, _) = run_brute_force(&config).unwrap();

    let params = config.to_model_params().unwrap();
    let geom = build_geometry(2, 1, true, false).unwrap();
    let ops = model::build_base_cluster_ops(&geom, &params, 4096).unwrap();
    let h = model::assemble_hamiltonian(&ops, &geom, &params).unwrap();
    let jumps = model::jump_operators(&ops, &params);
    let oracle = crate::steadystate::steady_state_nullspace(&h, &jumps, 64, "x").unwrap();
    let oracle_rec =
        crate::observables::record_from_state(&ops, &geom, &oracle.mat).unwrap();
    let err = record.errors.unwrap();
    assert!(
        (record.n - oracle_rec.n).abs() < 4.0 * err.n.max(1e-3),
        "brute force n {} vs oracle {} (se {})",
        record.n,
        oracle_rec.n,
        err.n
    );
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn preset_overrides_apply() {
    let dir = temp_dir("preset");
    // cap fig3 down to a tiny M so the run stays fast, and reseed it
    let outcome = run_preset("fig3", Some(&dir), Some(123), Some(8)).unwrap();
    assert!(!outcome.rows.is_empty());
    for config in &outcome.manifest.configs {
        assert!(config.m_schedule.iter().all(|&m| m <= 8));
        assert_eq!(config.trajectories.master_seed, 123);
    }
    assert!(dir.join("spectrum.csv").exists());
    std::fs::remove_dir_all(&dir).ok();
}
