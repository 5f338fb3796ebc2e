use nlid_ffi::*;
use std::ffi::{CStr, CString};
use std::ptr;

fn last_error() -> String {
    let p = nlid_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn multisine(n: usize, count: usize) -> *mut NlidMultisine {
    let mut h = ptr::null_mut();
    let st = unsafe { nlid_multisine_new(50.0, n, 1.0, 5.0, 20.0, 3, count, &mut h) };
    assert_eq!(st, NlidStatus::Ok);
    h
}

#[test]
fn multisine_handle_round_trip() {
    let h = multisine(5000, 2);
    unsafe {
        assert_eq!(nlid_multisine_count(h), 2);
        assert_eq!(nlid_multisine_period(h), 5000);
        assert_eq!(nlid_multisine_excited_count(h), 150);
        let mut buf = vec![0.0; 5000];
        assert_eq!(nlid_multisine_samples(h, 1, buf.as_mut_ptr(), buf.len()), NlidStatus::Ok);
        let rms = (buf.iter().map(|v| v * v).sum::<f64>() / 5000.0).sqrt();
        assert!((rms - 20.0).abs() < 1e-9);
        assert_eq!(nlid_multisine_samples(h, 2, buf.as_mut_ptr(), buf.len()), NlidStatus::Config);
        assert_eq!(nlid_multisine_samples(h, 0, buf.as_mut_ptr(), 10), NlidStatus::Config);
        nlid_multisine_free(h);
        nlid_multisine_free(ptr::null_mut());
        assert_eq!(nlid_multisine_count(ptr::null()), 0);
    }
}

#[test]
fn invalid_band_reports_config_error() {
    let mut h = ptr::null_mut();
    let st = unsafe { nlid_multisine_new(50.0, 5000, 1.0, 30.0, 20.0, 0, 1, &mut h) };
    assert_eq!(st, NlidStatus::Config);
    assert_eq!(st as i32, 2);
    assert!(h.is_null());
    assert!(last_error().contains("configuration error"), "{}", last_error());
    let st = unsafe { nlid_multisine_new(50.0, 5000, 1.0, 5.0, 20.0, 0, 1, ptr::null_mut()) };
    assert_eq!(st, NlidStatus::NullPointer);
}

#[test]
fn analyze_simulated_presets() {
    let ms = multisine(5000, 2);
    for (preset, want) in [("soc90", NlidBehaviour::Linear), ("soc10", NlidBehaviour::EvenDominant)] {
        let name = CString::new(preset).unwrap();
        let mut rec = ptr::null_mut();
        unsafe {
            assert_eq!(nlid_simulate_cell(ms, name.as_ptr(), 4, 1, &mut rec), NlidStatus::Ok);
            assert_eq!(nlid_record_len(rec), 2 * 4 * 5000);
            let mut s = NlidDistortionSummary::default();
            assert_eq!(nlid_analyze(rec, ms, 0.1, &mut s), NlidStatus::Ok);
            assert_eq!(s.behaviour, want as i32, "{preset}: {s:?}");
            nlid_record_free(rec);
        }
    }
    let bad = CString::new("soc50").unwrap();
    let mut rec = ptr::null_mut();
    assert_eq!(unsafe { nlid_simulate_cell(ms, bad.as_ptr(), 4, 1, &mut rec) }, NlidStatus::Config);
    unsafe { nlid_multisine_free(ms) };
}

#[test]
fn record_validation_and_output_copy() {
    let u = vec![1.0; 40];
    let y: Vec<f64> = (0..40).map(|i| i as f64).collect();
    let mut rec = ptr::null_mut();
    unsafe {
        assert_eq!(nlid_record_new(u.as_ptr(), y.as_ptr(), 40, 10.0, 10, 4, 1, &mut rec), NlidStatus::Ok);
        let mut out = vec![0.0; 40];
        assert_eq!(nlid_record_output(rec, out.as_mut_ptr(), 40), NlidStatus::Ok);
        assert_eq!(out, y);
        nlid_record_free(rec);
        let mut rec = ptr::null_mut();
        assert_ne!(nlid_record_new(u.as_ptr(), y.as_ptr(), 40, 10.0, 10, 3, 1, &mut rec), NlidStatus::Ok);
        assert!(rec.is_null());
        assert_eq!(nlid_record_new(ptr::null(), y.as_ptr(), 40, 10.0, 10, 4, 1, &mut rec), NlidStatus::NullPointer);
    }
}

#[test]
fn trend_extremes() {
    let y: Vec<f64> = (0..200).map(|i| (i as f64 * 0.1).sin() + 0.01 * i as f64).collect();
    let mut m = vec![0.0; 200];
    unsafe {
        assert_eq!(nlid_l1_trend(y.as_ptr(), y.len(), 0.0, m.as_mut_ptr()), NlidStatus::Ok);
        assert_eq!(m, y);
        assert_eq!(nlid_l1_trend(y.as_ptr(), y.len(), 2.0, m.as_mut_ptr()), NlidStatus::Ok);
        let d2 = (1..199).map(|i| (m[i + 1] - 2.0 * m[i] + m[i - 1]).abs()).fold(0.0, f64::max);
        assert!(d2 < 1e-9);
        assert_eq!(nlid_l1_trend(y.as_ptr(), y.len(), -1.0, m.as_mut_ptr()), NlidStatus::Config);
    }
}

#[test]
fn identify_save_load_simulate() {
    let ms = multisine(1000, 1);
    let name = CString::new("quadratic").unwrap();
    let mut rec = ptr::null_mut();
    let cfg = CString::new("periods = 5\n[signal]\nn = 1000\n[fit]\nmax_iter = 10\nvalidation_periods = 1\n[model]\nmax_order = 2\ndegrees = [2]\n").unwrap();
    let mut model = ptr::null_mut();
    let mut s = NlidIdentifySummary::default();
    unsafe {
        assert_eq!(nlid_simulate_cell(ms, name.as_ptr(), 5, 1, &mut rec), NlidStatus::Ok);
        let st = nlid_identify(rec, ms, cfg.as_ptr(), &mut model, &mut s);
        assert_eq!(st, NlidStatus::Ok, "{}", last_error());
        assert!(s.final_cost <= s.initial_cost);
        assert!(s.pnlss_rms < s.linear_rms);
        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("m.json").to_str().unwrap()).unwrap();
        assert_eq!(nlid_model_save(model, path.as_ptr()), NlidStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(nlid_model_load(path.as_ptr(), &mut back), NlidStatus::Ok);
        assert_eq!(nlid_model_states(back), nlid_model_states(model));
        let u: Vec<f64> = (0..100).map(|i| (i as f64 * 0.3).sin()).collect();
        let (mut y1, mut y2) = (vec![0.0; 100], vec![0.0; 100]);
        assert_eq!(nlid_model_simulate(model, u.as_ptr(), y1.as_mut_ptr(), 100), NlidStatus::Ok);
        assert_eq!(nlid_model_simulate(back, u.as_ptr(), y2.as_mut_ptr(), 100), NlidStatus::Ok);
        assert_eq!(y1, y2);
        let missing = CString::new(dir.path().join("none.json").to_str().unwrap()).unwrap();
        let mut none = ptr::null_mut();
        assert_eq!(nlid_model_load(missing.as_ptr(), &mut none), NlidStatus::Io);
        nlid_model_free(model);
        nlid_model_free(back);
        nlid_record_free(rec);
        nlid_multisine_free(ms);
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/nlid.h")).unwrap();
    for sym in [
        "nlid_last_error",
        "nlid_version",
        "nlid_multisine_new",
        "nlid_record_new",
        "nlid_analyze",
        "nlid_identify",
        "nlid_model_simulate",
        "nlid_model_free",
        "NLID_STATUS_CONFIG = 2",
        "typedef struct NlidModel NlidModel",
    ] {
        assert!(header.contains(sym), "missing {sym}");
    }
    let v = unsafe { CStr::from_ptr(nlid_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
