use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gncprior::foe::FoEModel;
use gncprior::io::{read_csv, save_model, save_pgm};
use gncprior::spline::SplineGrid;
use gncprior::tensor::ImageTensor;

fn gncprior(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gncprior")).args(args).output().expect("binary runs")
}

fn untrained_model(path: &Path) {
    let grid = SplineGrid::new(15, 4, (1e-4f64).ln(), 0.0).unwrap();
    save_model(path, &FoEModel::initialized(1, grid, 0).unwrap()).unwrap();
}

fn test_image(path: &Path) {
    let data = (0..24 * 24).map(|k| ((k % 24) as f64 / 23.0 + (k / 24) as f64 / 46.0) % 1.0).collect();
    save_pgm(path, &ImageTensor::image(24, 24, data).unwrap()).unwrap();
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn export_params_writes_one_file_per_kernel_and_activation() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.json");
    untrained_model(&model);
    let out = dir.path().join("params");
    let o = gncprior(&["export-params", "--model", s(&model), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let count = |ext: &str| {
        fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == ext)).count()
    };
    assert_eq!(count("pgm"), 48);
    assert_eq!(count("csv"), 48);
}

#[test]
fn fully_observed_inpainting_returns_the_observation() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.json");
    untrained_model(&model);
    let input = dir.path().join("in.pgm");
    test_image(&input);
    let task = dir.path().join("task.json");
    fs::write(&task, r#"{"kind": "inpainting", "missing": 0.0, "seed": 3}"#).unwrap();
    let out = dir.path().join("solve");
    let o = gncprior(&["solve", "--model", s(&model), "--task", s(&task), "--input", s(&input), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let restored = fs::read(out.join("restored.pgm")).unwrap();
    assert_eq!(restored, fs::read(out.join("observation.pgm")).unwrap());
    assert_eq!(restored, fs::read(&input).unwrap());
    let (header, rows) = read_csv(&out.join("trace.csv")).unwrap();
    assert_eq!(header, ["step", "energy", "psnr", "t_hat"]);
    assert_eq!(rows.len(), 31);
}

#[test]
fn denoising_solve_is_reproducible_under_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.json");
    untrained_model(&model);
    let input = dir.path().join("in.pgm");
    test_image(&input);
    let task = dir.path().join("task.json");
    fs::write(&task, r#"{"kind": "denoising", "sigma": 0.1}"#).unwrap();
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = gncprior(&[
            "solve",
            "--model",
            s(&model),
            "--task",
            s(&task),
            "--input",
            s(&input),
            "--out",
            s(&out),
            "--seed",
            seed,
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        fs::read(out.join("observation.pgm")).unwrap()
    };
    assert_eq!(run("a", "5"), run("b", "5"));
    assert_ne!(run("a", "5"), run("c", "6"));
}

#[test]
fn gnc_rate_default_grid_has_twelve_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("rate");
    let o = gncprior(&["gnc-rate", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = read_csv(&out.join("rate.csv")).unwrap();
    assert_eq!(header, ["t0", "I", "rate"]);
    assert_eq!(rows.len(), 12);
    let top = rows.iter().find(|r| r[0] == 1.0 && r[1] == 100.0).unwrap();
    assert_eq!(top[2], 1.0);
}

#[test]
fn spec_file_runs_through_the_run_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let spec = dir.path().join("spec.json");
    let text = serde_json::json!({
        "name": "gmm-sweep",
        "parameters": { "points_per_axis": 101, "curve_points": 5 },
        "output_dir": out,
    });
    fs::write(&spec, text.to_string()).unwrap();
    let o = gncprior(&["run", s(&spec)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["convexity.csv", "energy_curves.csv", "report.json", "run.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
}

#[test]
fn failures_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"no_such_field": 1}"#).unwrap();
    let o = gncprior(&["gnc-rate", "--config", s(&bad), "--out", s(dir.path())]);
    assert!(!o.status.success());

    let o = gncprior(&["export-params", "--model", s(&dir.path().join("missing.json")), "--out", s(dir.path())]);
    assert!(!o.status.success());

    let spec = dir.path().join("spec.json");
    fs::write(&spec, r#"{"name": "fig9", "parameters": {}, "output_dir": "x"}"#).unwrap();
    let o = gncprior(&["run", s(&spec)]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown experiment"));
}
