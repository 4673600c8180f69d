use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kerrvapor_cli::io::{png_bytes, read_csv, sha256_hex};
use kerrvapor_cli::manifest::{RunManifest, MANIFEST_NAME};
use kerrvapor_core::interferometry::KerrScene;
use serde_json::Value;

fn kerrvapor(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_kerrvapor"));
    cmd.args(args).env_remove("KERRVAPOR_GAMMA_MHZ").env_remove("KERRVAPOR_CONSTANTS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_NAME)).unwrap()).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn empty_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "empty.toml", "");
    let o = kerrvapor(&["simulate", "--config", s(&cfg), "--out", s(&dir.path().join("o"))], &[]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn unknown_key_and_missing_files_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "bad.toml",
        "mode = \"analytic_sweep\"\n[physics]\ntemperature_k = 423.15\ndetuning_hz = -2.2e9\n",
    );
    let out = dir.path().join("o");
    assert_eq!(code(&kerrvapor(&["simulate", "--config", s(&cfg), "--out", s(&out)], &[])), 2);
    let missing = dir.path().join("nope.toml");
    assert_eq!(code(&kerrvapor(&["simulate", "--config", s(&missing), "--out", s(&out)], &[])), 2);
    assert_eq!(
        code(&kerrvapor(&["retrieve", "--method", "fourier", "--synth", s(&missing), "--out", s(&out)], &[])),
        2
    );
    assert_eq!(
        code(&kerrvapor(&["retrieve", "--method", "bucket", "--frames", s(&missing), "--ramp", s(&missing), "--out", s(&out)], &[])),
        2
    );
    assert_eq!(code(&kerrvapor(&["frobnicate"], &[])), 2);
}

#[test]
fn analytic_sweep_writes_table_exponent_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "analytic.toml",
        r#"mode = "analytic_sweep"
[physics]
temperature_k = 423.15
detuning_ghz = -2.2
[waist_sweep]
waists_mm = [0.3, 0.47, 0.73, 1.15, 1.8]
intensity_wcm2 = 17.8
"#,
    );
    let out = dir.path().join("o");
    let o = kerrvapor(&["simulate", "--config", s(&cfg), "--out", s(&out)], &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = read_csv(&out.join("waist_sweep.csv"), 2).unwrap();
    assert_eq!(header, ["waist_mm", "delta_n"]);
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r[1] < 0.0));
    let e = json(&out.join("exponent.json"));
    assert!(e["exponent"].as_f64().unwrap() > 0.0);
    let m = manifest(&out);
    assert_eq!(m.config_sha256.as_deref(), Some(sha256_hex(&std::fs::read(&cfg).unwrap()).as_str()));
    for f in &m.outputs {
        assert_eq!(f.sha256, sha256_hex(&std::fs::read(out.join(&f.path)).unwrap()), "{}", f.path);
    }
}

const SMALL_MC: &str = r#"mode = "waist_sweep"
seed = 3
[physics]
temperature_k = 423.15
detuning_ghz = -2.2
[monte_carlo]
n_traj = 30
n_classes = 2
grid_size = 16
[waist_sweep]
waists_mm = [0.3, 0.6, 1.0, 1.8]
intensity_wcm2 = 17.8
"#;

#[test]
fn monte_carlo_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "mc.toml", SMALL_MC);
    let run = |name: &str, workers: &str| {
        let out = dir.path().join(name);
        let o = kerrvapor(&["simulate", "--config", s(&cfg), "--out", s(&out), "--workers", workers], &[]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        manifest(&out)
    };
    let a = run("a", "1");
    let b = run("b", "3");
    assert_eq!(a.outputs, b.outputs);
    assert!(a.outputs.iter().any(|f| f.path.starts_with("grids/")));
    assert_eq!(a.seed, Some(3));
    // a different seed changes the grids
    let out = dir.path().join("c");
    assert_eq!(code(&kerrvapor(&["simulate", "--config", s(&cfg), "--out", s(&out), "--seed", "4"], &[])), 0);
    assert_ne!(manifest(&out).outputs, a.outputs);
}

#[test]
fn pulsed_run_gives_tau_table_under_the_bound() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "pulsed.toml",
        r#"mode = "pulsed_response"
[physics]
temperature_k = 413.15
[monte_carlo]
n_traj = 40
n_classes = 2
[pulsed]
waist_mm = 0.66
power_w = 0.4
detunings_ghz = [-5.5]
delays_us = [0.3, 0.6, 1.0, 1.5, 2.2, 3.0, 4.2]
"#,
    );
    let out = dir.path().join("o");
    let o = kerrvapor(&["simulate", "--config", s(&cfg), "--out", s(&out)], &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = read_csv(&out.join("tau.csv"), 4).unwrap();
    assert_eq!(header[0], "detuning_ghz");
    assert_eq!(rows.len(), 1);
    let (tau, bound) = (rows[0][1], rows[0][3]);
    assert!(tau > 0.0 && tau <= bound, "tau {tau} µs, bound {bound} µs");
}

#[test]
fn fit_command_reads_csv_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("intensity_wcm2,phase\n");
    for k in 1..=12 {
        let i = 10.0 * k as f64;
        text += &format!("{i},{}\n", -2e-5 * i * 1e4 / (1.0 + i / 40.0) + 0.3);
    }
    let csv = write(dir.path(), "ramp.csv", &text);
    let out = dir.path().join("o");
    let o = kerrvapor(&["fit", "--model", "saturated", "--input", s(&csv), "--out", s(&out)], &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&out.join("fit.json"));
    assert!((v["result"]["i_sat"].as_f64().unwrap() - 40.0).abs() < 1e-6);
    assert!((v["result"]["offset"].as_f64().unwrap() - 0.3).abs() < 1e-9);

    let req = write(dir.path(), "req.json", r#"{"model": "power-law", "points": [[1, 3], [2, 12], [3, 27], [4, 48]]}"#);
    let o = kerrvapor(&["fit", "--input", s(&req), "--out", s(&out)], &[]);
    assert_eq!(code(&o), 0);
    assert!((json(&out.join("fit.json"))["result"]["exponent"].as_f64().unwrap() - 2.0).abs() < 1e-9);

    let short = write(dir.path(), "short.json", r#"{"model": "power-law", "points": [[1, 3]]}"#);
    assert_eq!(code(&kerrvapor(&["fit", "--input", s(&short), "--out", s(&out)], &[])), 2);
    assert_eq!(code(&kerrvapor(&["fit", "--input", s(&csv), "--out", s(&out)], &[])), 2);
}

const SYNTH: &str = r#"peak_intensity_wcm2 = 100.0
[scene]
size_px = 512
waist_px = 90.0
reference_waist_px = 360.0
peak_phase_rad = -20.0
[bucket]
samples = 100
"#;

#[test]
fn bucket_and_fourier_agree_on_a_synthetic_ramp() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "synth.toml", SYNTH);
    let fo = dir.path().join("fourier");
    let bo = dir.path().join("bucket");
    let o = kerrvapor(&["retrieve", "--method", "fourier", "--synth", s(&cfg), "--out", s(&fo)], &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = kerrvapor(&["retrieve", "--method", "bucket", "--synth", s(&cfg), "--out", s(&bo)], &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let f = json(&fo.join("kerr_fit.json"));
    let b = json(&bo.join("kerr_fit.json"));
    assert_eq!(f["method"], "fourier");
    let phase = |v: &Value, i: f64| {
        let fit = &v["fit"];
        let n2 = fit["n2"].as_f64().unwrap();
        let is = fit["i_sat"].as_f64().unwrap();
        n2 * i * 1e4 / (1.0 + i / is)
    };
    // plot-ready Fourier profile against the bucket curve
    let (_, rows) = read_csv(&fo.join("profile.csv"), 3).unwrap();
    let peak = rows.iter().map(|r| r[1].abs()).fold(0.0, f64::max);
    let ms = rows.iter().map(|r| (r[1] - phase(&b, r[0])).powi(2)).sum::<f64>() / rows.len() as f64;
    assert!(ms.sqrt() / peak < 0.02, "rms {}", ms.sqrt() / peak);
    assert!((phase(&f, 100.0) + 20.0).abs() < 0.4);
    let (_, trace) = read_csv(&bo.join("trace.csv"), 4).unwrap();
    assert_eq!(trace.len(), 100);
}

#[test]
fn png_frames_retrieve_with_amplitude_intensity() {
    let scene = KerrScene {
        size: 256,
        waist_px: 45.0,
        reference_waist_px: 180.0,
        ..KerrScene::default()
    }
    .with_peak_phase(-10.0, 100.0);
    let (frame, _) = scene.frame(100.0, 100.0, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("frame.png");
    std::fs::write(&p, png_bytes(&frame, 8000.0).unwrap()).unwrap();
    let out = dir.path().join("o");
    let o = kerrvapor(
        &["retrieve", "--method", "fourier", "--frames", s(&p), "--peak-intensity", "100", "--out", s(&out)],
        &[],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&out.join("kerr_fit.json"));
    let n2 = v["fit"]["n2"].as_f64().unwrap();
    assert!(n2 < 0.0);
    assert_eq!(manifest(&out).inputs.len(), 1);
    // without an intensity source the request is incomplete
    let o = kerrvapor(&["retrieve", "--method", "fourier", "--frames", s(&p), "--out", s(&out)], &[]);
    assert_eq!(code(&o), 2);
}

#[test]
fn halving_gamma_breaks_the_oracle_criterion() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("v");
    let o = kerrvapor(&["validate", "--only", "1,2", "--out", s(&out)], &[]);
    let text = stdout(&o);
    assert_eq!(code(&o), 0, "{text}");
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() == 2, "{text}");

    let o = kerrvapor(&["validate", "--only", "1", "--out", s(&out)], &[("KERRVAPOR_GAMMA_MHZ", "3.035")]);
    let text = stdout(&o);
    assert_eq!(code(&o), 3, "{text}");
    assert!(text.lines().any(|l| l.starts_with("FAIL") && l.contains("criterion  1")), "{text}");
    let report = json(&out.join("validate.json"));
    assert_eq!(report[0]["checks"][0]["pass"], false);
}

#[test]
fn quick_validate_skips_long_criteria() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("v");
    let o = kerrvapor(&["validate", "--quick", "--only", "2,3,5,8", "--out", s(&out)], &[]);
    let text = stdout(&o);
    assert_eq!(code(&o), 0, "{text}");
    assert!(text.contains("criterion  2"));
    assert!(!text.contains("criterion  3") && !text.contains("criterion  5") && !text.contains("criterion  8"));
}
