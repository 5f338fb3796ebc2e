use nlid::bench::{export_csv, fir_core};
use nlid::signals::{realizations, MultisineSpec};
use nlid::spectral::TimeRecord;
use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

fn nlid(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nlid"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("NLID_OUT")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn read_json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn design_defaults_report_resolution_and_rms() {
    let dir = tempfile::tempdir().unwrap();
    let o = nlid(dir.path(), &["design"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("f0 = 0.01 Hz"), "{text}");
    assert!(dir.path().join("grid.json").exists() && dir.path().join("signal_r0.csv").exists());
    assert!(dir.path().join("manifest.json").exists());

    let o = nlid(dir.path(), &["design", "--band", "1", "5", "--rms", "20", "--realizations", "1"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("realization 0: rms = 20.000000"), "{}", stdout(&o));
    let grid = read_json(&dir.path().join("grid.json"));
    assert_eq!(grid["band"], serde_json::json!([1.0, 5.0]));
    let excited = grid["excited"].as_array().unwrap();
    assert!(excited.iter().all(|k| (101..=499).contains(&k.as_u64().unwrap())));
}

#[test]
fn invalid_band_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = nlid(dir.path(), &["design", "--band", "1", "25"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("signal"), "{}", String::from_utf8_lossy(&o.stderr));
    let o = nlid(dir.path(), &["design", "--degrees", "1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn env_var_sets_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_nlid"))
        .args(["design", "--realizations", "1"])
        .env("NLID_OUT", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(dir.path().join("grid.json").exists());
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "seed = 3\nrealizations = 1\n[signal]\nn = 1000\ntarget_rms = 2.0\n").unwrap();
    let o = nlid(dir.path(), &["design", "--config", cfg.to_str().unwrap(), "--rms", "4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("rms = 4.000000"));
    assert!(stdout(&o).contains("f0 = 0.05 Hz"));
    let m = read_json(&dir.path().join("manifest.json"));
    assert_eq!(m["command"], "design");
    assert_eq!(m["config"]["seed"], 3);
    assert_eq!(m["inputs"][0]["path"], cfg.to_str().unwrap());
    assert_eq!(m["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn analyze_flags_presets() {
    for (preset, label) in [("soc90", "behaviour: linear"), ("soc10", "behaviour: even+odd, even dominant")] {
        let dir = tempfile::tempdir().unwrap();
        let o = nlid(dir.path(), &["simulate", "--preset", preset, "--periods", "8"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let rec = dir.path().join("record.csv");
        let o = nlid(dir.path(), &["analyze", "--input", rec.to_str().unwrap(), "--periods", "8"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains(label), "{preset}: {}", stdout(&o));
        assert!(dir.path().join("distortion.json").exists());
    }
}

#[test]
fn analyze_fir_data_stays_at_noise_floor() {
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};
    let dir = tempfile::tempdir().unwrap();
    let spec = MultisineSpec { n: 1000, ..MultisineSpec::default() };
    let ex = realizations(&spec, 1).unwrap();
    let u = ex[0].tiled(6);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
    let noise = Normal::new(0.0, 1e-3).unwrap();
    let y = fir_core(spec.fs, &[0.5, 0.3, -0.2, 0.1]).simulate(&u).into_iter().map(|v| v + noise.sample(&mut rng)).collect();
    let rec = TimeRecord { u, y, fs: spec.fs, n: spec.n, periods: 6, realizations: 1 };
    let path = dir.path().join("fir.csv");
    export_csv(&path, &rec, BTreeMap::new()).unwrap();
    let o = nlid(dir.path(), &["analyze", "--input", path.to_str().unwrap(), "--n", "1000", "--no-detrend"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("behaviour: linear"), "{}", stdout(&o));
    // grid/data mismatch is a configuration error
    let o = nlid(dir.path(), &["analyze", "--input", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ingest_reports_trailing_samples() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("raw.csv");
    let mut text = String::from("t,current,voltage\n");
    for i in 0..2050 {
        text.push_str(&format!("{},{},{}\n", i as f64 / 50.0, (i as f64).sin(), (i as f64).cos()));
    }
    std::fs::write(&path, text).unwrap();
    let out = dir.path().join("out");
    let o = nlid(&out, &["ingest", "--input", path.to_str().unwrap(), "--n", "1000", "--realizations", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("dropped 50 trailing"), "{}", stdout(&o));
    assert!(out.join("record.csv").exists() && out.join("record.json").exists());
    // a missing sample is a format error
    let bad = dir.path().join("bad.csv");
    let rows: String = (0..12).filter(|&i| i != 2).map(|i| format!("{},1,1\n", i as f64 / 50.0)).collect();
    std::fs::write(&bad, format!("t,current,voltage\n{rows}")).unwrap();
    let o = nlid(&out, &["ingest", "--input", bad.to_str().unwrap(), "--n", "4", "--realizations", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("row 4"));
}

fn small_identify(dir: &Path, preset: &str) -> Output {
    let common = ["--n", "1000", "--periods", "6", "--seed", "5", "--max-iter", "15"];
    let o = nlid(dir, &[&["simulate", "--preset", preset][..], &common].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rec = dir.join("record.csv");
    nlid(dir, &[&["identify", "--input", rec.to_str().unwrap()][..], &common].concat())
}

#[test]
fn identify_is_deterministic_and_writes_artifacts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let oa = small_identify(a.path(), "soc10");
    assert!(oa.status.success(), "{}", String::from_utf8_lossy(&oa.stderr));
    let ob = small_identify(b.path(), "soc10");
    assert!(ob.status.success());
    for f in ["linear_model.json", "pnlss_model.json", "fit_iterations.csv", "error_spectrum.csv", "bla.csv", "identify_report.json"] {
        let (x, y) = (std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        assert!(x == y, "{f} differs between runs");
    }
    assert!(stdout(&oa).contains("PNLSS/linear rmse ratio"));
    let header = std::fs::read_to_string(a.path().join("fit_iterations.csv")).unwrap();
    assert!(header.starts_with("iter,lambda,est_cost,val_cost"));

    // validate reproduces the comparison from the saved models
    let rec = a.path().join("record.csv");
    let (model, linear) = (a.path().join("pnlss_model.json"), a.path().join("linear_model.json"));
    let out = a.path().join("val");
    let o = nlid(
        &out,
        &["validate", "--input", rec.to_str().unwrap(), "--model", model.to_str().unwrap(), "--linear", linear.to_str().unwrap(), "--n", "1000", "--periods", "6"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(read_json(&out.join("validation.json"))["ratio"].as_f64().unwrap() > 0.0);
}

#[test]
fn identify_reports_linear_adequacy_on_linear_cell() {
    let dir = tempfile::tempdir().unwrap();
    let o = small_identify(dir.path(), "soc90");
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("linear model adequate"), "{}", stdout(&o));
    let r = read_json(&dir.path().join("identify_report.json"));
    assert!(r["improvement_db"].as_f64().unwrap() < 3.0);
}
