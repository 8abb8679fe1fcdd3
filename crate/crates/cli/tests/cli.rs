use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use msical_cli::manifest::digest_bytes;
use msical_core::estimators::{gmwm_fit, FitOptions, ObjectiveSpec, WeightScheme};
use msical_core::io::read_replicate;
use msical_core::wv::default_scales;
use msical_core::{estimate_wv, CompositeModel, LatentBlock, WVEstimate, WvOptions};
use serde_json::Value;

fn msical(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msical"))
        .args(args)
        .env_remove("MSICAL_SEED")
        .env("SOURCE_DATE_EPOCH", "0")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn write_model(dir: &Path, name: &str, model: &CompositeModel) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_vec(model).unwrap()).unwrap();
    p
}

fn wn_rw() -> CompositeModel {
    CompositeModel::new(vec![
        LatentBlock::WhiteNoise { sigma2: 1.0 },
        LatentBlock::RandomWalk { gamma2: 1e-4 },
    ])
    .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn result_of(path: &Path) -> Value {
    let v: Value = serde_json::from_slice(&fs::read(path).unwrap()).unwrap();
    assert!(v.get("manifest").is_some(), "artifact without manifest");
    v["result"].clone()
}

fn simulate(dir: &Path, model: &Path, reps: usize, length: usize, seed: u64) -> PathBuf {
    let out = dir.join(format!("sim_{seed}_{reps}"));
    let o = msical(&[
        "simulate",
        s(model),
        "--length",
        &length.to_string(),
        "--reps",
        &reps.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn reps(dir: &Path, k: usize) -> Vec<String> {
    (0..k)
        .map(|i| dir.join(format!("rep_{i:03}.f64")).to_str().unwrap().to_string())
        .collect()
}

#[test]
fn simulate_zero_reps_writes_nothing() {
    let d = tempfile::tempdir().unwrap();
    let m = write_model(d.path(), "m.json", &wn_rw());
    let out = simulate(d.path(), &m, 0, 100, 1);
    assert!(!out.exists());
}

#[test]
fn simulate_missing_model_exits_2() {
    let d = tempfile::tempdir().unwrap();
    let o = msical(&["simulate", "/nonexistent/m.json", "--length", "10", "--out", s(d.path())]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("m.json"));
}

#[test]
fn simulate_seed_repeat_gives_identical_digests() {
    let d = tempfile::tempdir().unwrap();
    let m = write_model(d.path(), "m.json", &wn_rw());
    let a = simulate(d.path(), &m, 2, 500, 4);
    let b = d.path().join("again");
    fs::rename(&a, &b).unwrap();
    let a = simulate(d.path(), &m, 2, 500, 4);
    for f in ["rep_000.f64", "rep_001.f64", "rep_000.f64.json", "manifest.json"] {
        let x = fs::read(a.join(f)).unwrap();
        let y = fs::read(b.join(f)).unwrap();
        assert_eq!(digest_bytes(&x), digest_bytes(&y), "{f}");
    }
    let c = simulate(d.path(), &m, 2, 500, 5);
    assert_ne!(fs::read(a.join("rep_000.f64")).unwrap(), fs::read(c.join("rep_000.f64")).unwrap());
}

#[test]
fn env_seed_overrides_flag() {
    let d = tempfile::tempdir().unwrap();
    let m = write_model(d.path(), "m.json", &wn_rw());
    let expected = simulate(d.path(), &m, 1, 200, 77);
    let out = d.path().join("env");
    let o = Command::new(env!("CARGO_BIN_EXE_msical"))
        .args(["simulate", s(&m), "--length", "200", "--seed", "1", "--out", s(&out)])
        .env("MSICAL_SEED", "77")
        .env("SOURCE_DATE_EPOCH", "0")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert_eq!(
        fs::read(out.join("rep_000.f64")).unwrap(),
        fs::read(expected.join("rep_000.f64")).unwrap()
    );
}

#[test]
fn wv_of_constant_csv_is_zero() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().join("const.csv");
    fs::write(&p, "3.5\n".repeat(256)).unwrap();
    let out = d.path().join("wv");
    let o = msical(&["wv", s(&p), "--scales", "5", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let wv: WVEstimate = serde_json::from_value(result_of(&out.join("000_const.wv.json"))).unwrap();
    assert!(wv.nu_hat.iter().all(|&v| v == 0.0));
    let csv = fs::read_to_string(out.join("000_const.wv.csv")).unwrap();
    assert!(csv.starts_with("scale,nu,lo,hi\n"));
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn wv_too_many_scales_exits_2() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().join("x.csv");
    fs::write(&p, "1\n2\n3\n4\n5\n6\n7\n8\n").unwrap();
    let o = msical(&["wv", s(&p), "--scales", "9", "--out", s(&d.path().join("o"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn wv_matches_library_call() {
    let d = tempfile::tempdir().unwrap();
    let m = write_model(d.path(), "m.json", &wn_rw());
    let sim = simulate(d.path(), &m, 1, 4096, 2);
    let rep = sim.join("rep_000.f64");
    let out = d.path().join("wv");
    let o = msical(&["wv", s(&rep), "--scales", "8", "--out", s(&out)]);
    assert_eq!(code(&o), 0);
    let lib = estimate_wv(&read_replicate(&rep, 1.0).unwrap(), 8, &WvOptions::default()).unwrap();
    let mut expected = Vec::new();
    lib.write_csv(&mut expected).unwrap();
    assert_eq!(digest_bytes(&fs::read(out.join("000_rep_000.wv.csv")).unwrap()), digest_bytes(&expected));
}

fn fit_theta(dir: &Path, signals: &[String], model: &Path, method: &str, tag: &str) -> Vec<f64> {
    let out = dir.join(format!("fit_{tag}"));
    let mut args = vec!["fit"];
    args.extend(signals.iter().map(String::as_str));
    args.extend(["--model", s(model), "--method", method, "--boot", "0", "--starts", "3", "--out", s(&out)]);
    let o = msical(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m: CompositeModel = serde_json::from_value(result_of(&out.join("fit.json"))["theta"].clone()).unwrap();
    assert!(out.join("fit.csv").exists());
    m.flatten()
}

#[test]
fn fit_single_signal_awv_equals_gmwm() {
    let d = tempfile::tempdir().unwrap();
    let m = write_model(d.path(), "m.json", &wn_rw());
    let sim = simulate(d.path(), &m, 1, 8192, 3);
    let sig = reps(&sim, 1);
    let awv = fit_theta(d.path(), &sig, &m, "awv", "awv");
    let gmwm = fit_theta(d.path(), &sig, &m, "gmwm", "gmwm");
    assert_eq!(awv, gmwm);

    let j = default_scales(8192);
    let wv = estimate_wv(&read_replicate(Path::new(&sig[0]), 1.0).unwrap(), j, &WvOptions::default()).unwrap();
    let spec = ObjectiveSpec::identity(j, WeightScheme::uniform_d(&[8192]).unwrap());
    let opts = FitOptions {
        n_starts: 3,
        ..FitOptions::default()
    };
    let lib = gmwm_fit(&wv, &wn_rw(), &spec, &opts).unwrap();
    assert_eq!(lib.theta_hat.flatten(), gmwm);
}

#[test]
fn fit_awv_and_msgmwm_agree() {
    let d = tempfile::tempdir().unwrap();
    let m = write_model(d.path(), "m.json", &wn_rw());
    let sim = simulate(d.path(), &m, 3, 4096, 6);
    let sig = reps(&sim, 3);
    let a = fit_theta(d.path(), &sig, &m, "awv", "a");
    let b = fit_theta(d.path(), &sig, &m, "msgmwm", "b");
    let num: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(num / den < 1e-5, "{}", num / den);
}

#[test]
fn fit_bad_method_exits_2() {
    let d = tempfile::tempdir().unwrap();
    let m = write_model(d.path(), "m.json", &wn_rw());
    let sim = simulate(d.path(), &m, 1, 1024, 1);
    let sig = reps(&sim, 1);
    let o = msical(&["fit", &sig[0], "--model", s(&m), "--method", "ols", "--out", s(&d.path().join("o"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn test_command_writes_p_value() {
    let d = tempfile::tempdir().unwrap();
    let m = write_model(d.path(), "m.json", &wn_rw());
    let sim = simulate(d.path(), &m, 2, 2048, 8);
    let sig = reps(&sim, 2);
    let out = d.path().join("t");
    let o = msical(&["test", &sig[0], &sig[1], "--model", s(&m), "--nboot", "19", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = result_of(&out.join("test.json"));
    let p = r["p_value"].as_f64().unwrap();
    assert!((0.05..=1.0).contains(&p));
    assert_eq!(fs::read_to_string(out.join("test.csv")).unwrap().lines().count(), 2 + 19);
}

#[test]
fn naveval_window_outside_outage_exits_2() {
    let d = tempfile::tempdir().unwrap();
    let sim = simulate(d.path(), &write_model(d.path(), "m.json", &wn_rw()), 1, 100, 1);
    let cfg = serde_json::json!({
        "scenario": {"eval_window_s": [10.0, 20.0]},
        "models": [{"label": "wn", "model": {"blocks": [{"type": "WN", "sigma2": 1e-6}]}}],
        "sources": [reps(&sim, 1)[0]],
    });
    let p = d.path().join("nav.json");
    fs::write(&p, cfg.to_string()).unwrap();
    let o = msical(&["naveval", s(&p), "--out", s(&d.path().join("o"))]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("outage"));
}

#[test]
fn naveval_direct_config_runs() {
    let d = tempfile::tempdir().unwrap();
    let wn = CompositeModel::new(vec![LatentBlock::WhiteNoise { sigma2: 1e-6 }]).unwrap();
    let m = write_model(d.path(), "m.json", &wn);
    let sim = simulate(d.path(), &m, 1, 2 * 90 * 50, 1);
    let cfg = serde_json::json!({
        "scenario": {"imu_rate_hz": 50.0, "n_runs": 2},
        "models": [{"label": "wn", "model": wn}],
        "sources": [reps(&sim, 1)[0]],
    });
    let p = d.path().join("nav.json");
    fs::write(&p, cfg.to_string()).unwrap();
    let out = d.path().join("o");
    let o = msical(&["--threads", "1", "naveval", s(&p), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("nav.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}
