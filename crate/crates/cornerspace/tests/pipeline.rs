//! End-to-end checks of the command-line interface and its file formats.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_cornerspace")
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("cornerspace_it_{tag}_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, name: &str, json: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, json).unwrap();
    path
}

fn small_config(out: &Path) -> String {
    format!(
        r#"{{
  "run": "corner",
  "model": {{ "delta_omega": 5.0, "hardcore": true, "j": 1.0, "f": 2.0, "gamma": 1.0, "n_max": 1 }},
  "lattice": {{ "lx": 2, "ly": 2, "periodic_x": true, "periodic_y": true }},
  "base": {{ "lx": 2, "ly": 1 }},
  "m_schedule": [16],
  "output": {{ "dir": "{}" }}
}}"#,
        out.display()
    )
}

#[test]
fn run_subcommand_produces_outputs_and_exit_zero() {
    let dir = temp_dir("run");
    let out = dir.join("out");
    let config = write_config(&dir, "exp.json", &small_config(&out));

    let status = Command::new(bin())
        .args(["run", config.to_str().unwrap()])
        .env("CORNERSPACE_THREADS", "2")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));

    let results = std::fs::read_to_string(out.join("results.csv")).unwrap();
    let mut lines = results.lines();
    assert_eq!(
        lines.next().unwrap(),
        "Lx,Ly,M,solver,n,n_err,re_b,re_b_err,im_b,im_b_err,g2,g2_err,g2_nn,g2_nn_err"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2, "leaf + merge: {rows:?}");
    assert!(rows[0].starts_with("2,1,4,nullspace,"));
    assert!(rows[1].starts_with("2,2,16,direct,"));

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["exit_code"], 0);
    assert_eq!(manifest["schema_version"], 1);
    assert!(manifest["nodes"][1]["wall_seconds"].as_f64().unwrap() > 0.0);

    assert!(out.join("spectrum.csv").exists());
    assert!(out.join("timeseries.csv").exists());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn validate_subcommand_reports_field_errors() {
    let dir = temp_dir("validate");
    let good = write_config(&dir, "good.json", &small_config(&dir.join("o")));
    let status = Command::new(bin())
        .args(["validate", good.to_str().unwrap()])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));

    let bad = write_config(
        &dir,
        "bad.json",
        r#"{ "model": { "hardcore": true, "u": 5.0, "n_max": 1 } }"#,
    );
    let output = Command::new(bin())
        .args(["validate", bad.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("model.u"), "stderr: {stderr}");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn presets_subcommand_lists_catalog() {
    let output = Command::new(bin()).arg("presets").output().unwrap();
    assert_eq!(output.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&output.stdout);
    for name in ["table1", "table2", "table3", "fig2", "fig3"] {
        assert!(stdout.contains(name), "missing {name} in:\n{stdout}");
    }
}

#[test]
fn preset_command_runs_table3_quickly() {
    let dir = temp_dir("preset_t3");
    let status = Command::new(bin())
        .args(["preset", "table3", "--out", dir.to_str().unwrap()])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let results = std::fs::read_to_string(dir.join("results.csv")).unwrap();
    // six mean-field rows
    assert_eq!(results.lines().count(), 1 + 6, "{results}");
    assert!(results.contains("meanfield"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn unknown_subcommand_prints_usage() {
    let output = Command::new(bin()).arg("frobnicate").output().unwrap();
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("usage"));
}

#[test]
fn rerun_reproduces_csv_bytes() {
    let dir = temp_dir("repro");
    let out = dir.join("out");
    // a config that exercises the MCWF path so seeds matter
    let json = format!(
        r#"{{
  "run": "corner",
  "model": {{ "delta_omega": 5.0, "hardcore": true, "j": 1.0, "f": 2.0, "gamma": 1.0, "n_max": 1 }},
  "lattice": {{ "lx": 2, "ly": 2, "periodic_x": true, "periodic_y": true }},
  "base": {{ "lx": 2, "ly": 1 }},
  "m_schedule": [12],
  "solver": {{ "direct_cap": 8, "obs_tol": 0.5 }},
  "trajectories": {{ "n_trajectories": 24, "t_relax": 3.0, "t_sample": 6.0,
                     "sample_stride": 0.5, "master_seed": 777, "dt_factor": 2.0,
                     "jump_time_tol": 1e-6, "collect_states": true, "dt": null }},
  "output": {{ "dir": "{}" }}
}}"#,
        out.display()
    );
    let config = write_config(&dir, "exp.json", &json);
    for threads in ["1", "2"] {
        let status = Command::new(bin())
            .args(["run", config.to_str().unwrap()])
            .env("CORNERSPACE_THREADS", threads)
            .status()
            .unwrap();
        assert!(status.code().is_some());
        let bytes = std::fs::read(out.join("results.csv")).unwrap();
        if threads == "1" {
            std::fs::write(dir.join("first.csv"), &bytes).unwrap();
        } else {
            let first = std::fs::read(dir.join("first.csv")).unwrap();
            assert_eq!(first, bytes, "thread count must not change results");
        }
        // direct_cap routing: M = 12 > 8 goes to the sampler
        let text = String::from_utf8(bytes).unwrap();
        assert!(
            text.lines().any(|l| l.starts_with("2,2,12,mcwf,")),
            "M above direct_cap must route to mcwf:\n{text}"
        );
    }
    std::fs::remove_dir_all(&dir).ok();
}
