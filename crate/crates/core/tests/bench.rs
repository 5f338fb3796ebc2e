use nlid::bench::{export_csv, ingest_csv, sidecar_path, simulate_cell, RecordMeta, SyntheticCell};
use nlid::linmodel::fit_rational;
use nlid::signals::{build_grid, realizations, MultisineSpec};
use nlid::spectral::{analyze_record, Behaviour, DistortionOptions};
use nlid::trend::{detrend_record, low_frequency_power, LambdaPolicy};
use nlid::Error;
use std::collections::BTreeMap;

fn cell_spec() -> MultisineSpec {
    MultisineSpec { target_rms: Some(20.0), ..MultisineSpec::default() }
}

fn quiet(name: &str) -> SyntheticCell {
    SyntheticCell { noise_std: 0.0, drift_rate: 0.0, ..SyntheticCell::preset(name).unwrap() }
}

#[test]
fn linear_cell_matches_linear_core() {
    let spec = cell_spec();
    let ex = realizations(&spec, 1).unwrap();
    let cell = quiet("soc90");
    let rec = simulate_cell(&cell, &ex, 2).unwrap();
    let lin = cell.linear.simulate(&ex[0].tiled(2));
    assert_eq!(rec.y, lin);
    assert_eq!(rec.u, ex[0].tiled(2));
}

#[test]
fn steady_state_is_periodic() {
    let spec = cell_spec();
    let ex = realizations(&spec, 1).unwrap();
    for name in ["soc10", "soc90"] {
        let rec = simulate_cell(&quiet(name), &ex, 3).unwrap();
        let (a, b) = (rec.y_period(0, 1), rec.y_period(0, 2));
        let rms = (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt();
        assert!(rms < 1e-8, "{name}: {rms}");
    }
}

#[test]
fn simulation_is_deterministic() {
    let ex = realizations(&cell_spec(), 2).unwrap();
    let cell = SyntheticCell::preset("soc10").unwrap();
    let a = simulate_cell(&cell, &ex, 2).unwrap();
    let b = simulate_cell(&cell, &ex, 2).unwrap();
    assert_eq!(a.y, b.y);
    let other = simulate_cell(&SyntheticCell { seed: 2, ..cell }, &ex, 2).unwrap();
    assert_ne!(a.y, other.y);
}

#[test]
fn preset_contracts_hold_after_detrending() {
    let spec = cell_spec();
    let grid = build_grid(&spec).unwrap();
    let ex = realizations(&spec, 2).unwrap();
    let opts = DistortionOptions::default();
    let mut levels = BTreeMap::new();
    for name in ["soc10", "soc90"] {
        let rec = simulate_cell(&SyntheticCell::preset(name).unwrap(), &ex, 8).unwrap();
        let clean = detrend_record(&rec, LambdaPolicy::default()).unwrap().record;
        let rep = analyze_record(&clean, &grid, &opts).unwrap();
        let even = rep.pooled.even_detect.clone().unwrap();
        let odd = rep.pooled.odd_detect.clone().unwrap();
        println!("{name}: even {:.1} dB over noise, odd {:.1} dB, {}", even.excess_db, odd.excess_db, rep.behaviour().label());
        levels.insert(name, (even.excess_db, odd.excess_db, rep.behaviour()));
    }
    let (e90, o90, b90) = levels["soc90"];
    assert!(e90.abs() < 3.0 && o90.abs() < 3.0, "soc90 detection lines {e90:.1}/{o90:.1} dB");
    assert_eq!(b90, Behaviour::Linear);
    let (e10, o10, b10) = levels["soc10"];
    assert!(e10 >= 10.0, "soc10 even excess {e10:.1} dB");
    assert!(e10 > o10);
    assert_eq!(b10, Behaviour::EvenDominant);
}

#[test]
fn detrending_suppresses_drift_below_band() {
    let spec = cell_spec();
    let grid = build_grid(&spec).unwrap();
    let ex = realizations(&spec, 1).unwrap();
    let cell = SyntheticCell::preset("soc90").unwrap();
    assert!(cell.drift_rate > 0.0);
    let rec = simulate_cell(&cell, &ex, 8).unwrap();
    let below = grid.excited[0];
    let before = low_frequency_power(&rec, below).unwrap();
    let det = detrend_record(&rec, LambdaPolicy::default()).unwrap().record;
    let after = low_frequency_power(&det, below).unwrap();
    let gain_db = 10.0 * (before / after).log10();
    assert!(gain_db >= 20.0, "{gain_db:.1} dB");
    // the periodic response survives
    let clean = simulate_cell(&SyntheticCell { drift_rate: 0.0, ..cell }, &ex, 8).unwrap();
    let d: Vec<f64> = det.y.iter().zip(&clean.y).map(|(a, b)| a - b).collect();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let dev = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
    let sig = (clean.y.iter().map(|v| v * v).sum::<f64>() / d.len() as f64).sqrt();
    assert!(dev < 0.01 * sig, "detrending changed the response by {dev:e} of {sig:e}");
}

#[test]
fn csv_round_trip_is_bit_identical() {
    let spec = MultisineSpec { n: 500, target_rms: Some(20.0), ..MultisineSpec::default() };
    let ex = realizations(&spec, 2).unwrap();
    let rec = simulate_cell(&SyntheticCell::preset("soc10").unwrap(), &ex, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cell.csv");
    let labels = BTreeMap::from([("soc".to_string(), "10%".to_string()), ("temperature_c".to_string(), "25".to_string())]);
    export_csv(&path, &rec, labels.clone()).unwrap();
    let back = ingest_csv(&path, None).unwrap();
    assert_eq!(back.record.u, rec.u);
    assert_eq!(back.record.y, rec.y);
    assert_eq!((back.record.n, back.record.periods, back.record.realizations), (500, 3, 2));
    assert!((back.record.fs - rec.fs).abs() < 1e-12);
    assert_eq!(back.meta.labels, labels);
    assert!(back.warnings.is_empty());
}

fn write_lines(path: &std::path::Path, rows: impl Iterator<Item = String>) {
    let mut text = String::from("t,current,voltage\n");
    for r in rows {
        text.push_str(&r);
        text.push('\n');
    }
    std::fs::write(path, text).unwrap();
}

#[test]
fn missing_sample_is_reported_with_row() {
    let dir = tempfile::tempdir().unwrap();
    let meta = RecordMeta { fs: Some(10.0), n: 10, ..Default::default() };
    // a dropped row shows up as a doubled sampling interval
    let gap = dir.path().join("gap.csv");
    write_lines(&gap, (0..40).filter(|&i| i != 17).map(|i| format!("{},{},{}", i as f64 / 10.0, i, 2 * i)));
    let err = ingest_csv(&gap, Some(meta.clone())).unwrap_err();
    assert!(matches!(err, Error::Format(_)));
    assert!(err.to_string().contains("row 19"), "{err}");
    assert_eq!(err.exit_code(), 2);
    // an empty field names its row
    let hole = dir.path().join("hole.csv");
    write_lines(&hole, (0..40).map(|i| if i == 5 { "0.5,5,".to_string() } else { format!("{},{},{}", i as f64 / 10.0, i, i) }));
    let err = ingest_csv(&hole, Some(meta)).unwrap_err();
    assert!(err.to_string().contains("row 7") && err.to_string().contains("voltage"), "{err}");
}

#[test]
fn missing_column_and_jitter_are_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let meta = RecordMeta { n: 10, ..Default::default() };
    let p = dir.path().join("cols.csv");
    std::fs::write(&p, "t,current\n0,1\n0.1,2\n").unwrap();
    assert!(ingest_csv(&p, Some(meta.clone())).unwrap_err().to_string().contains("voltage"));
    let j = dir.path().join("jitter.csv");
    write_lines(&j, (0..20).map(|i| format!("{},{},{}", i as f64 * 0.1 + if i == 9 { 1e-5 } else { 0.0 }, i, i)));
    assert!(matches!(ingest_csv(&j, Some(meta.clone())), Err(Error::Format(_))));
    // fs inferred from the time column
    let ok = dir.path().join("ok.csv");
    write_lines(&ok, (0..20).map(|i| format!("{},{},{}", i as f64 * 0.1, i, i)));
    let rec = ingest_csv(&ok, Some(meta)).unwrap();
    assert!((rec.record.fs - 10.0).abs() < 1e-9);
}

#[test]
fn trailing_partial_period_is_dropped_with_warning() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("tail.csv");
    write_lines(&p, (0..47).map(|i| format!("{},{},{}", i as f64 * 0.1, i, -i)));
    let meta = RecordMeta { n: 10, ..Default::default() };
    std::fs::write(sidecar_path(&p), serde_json::to_string(&meta).unwrap()).unwrap();
    let rec = ingest_csv(&p, None).unwrap();
    assert_eq!(rec.record.periods, 4);
    assert_eq!(rec.record.y.len(), 40);
    assert_eq!(rec.warnings.len(), 1);
    assert!(rec.warnings[0].contains("7 trailing"), "{}", rec.warnings[0]);
}

#[test]
fn weighted_fit_cost_is_chi_square_on_cell_frf() {
    use nlid::lpm::{BlaEstimate, TotalVarianceSource};
    use nlid::C64;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};
    let spec = cell_spec();
    let ex = &realizations(&spec, 1).unwrap()[0];
    let cell = SyntheticCell::preset("soc90").unwrap();
    let u = nlid::dft::rfft_unitary(&ex.samples);
    let periods = 20.0;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let std = Normal::new(0.0, 1.0).unwrap();
    let bins = ex.grid.excited.clone();
    let mut g = Vec::new();
    let mut var = Vec::new();
    for &k in &bins {
        let z = C64::from_polar(1.0, 2.0 * std::f64::consts::PI * k as f64 / spec.n as f64);
        // output noise averaged over the periods, divided by the input line
        let v = cell.noise_std.powi(2) / periods / u[k].norm_sqr();
        let s = (v / 2.0).sqrt();
        g.push(cell.linear.frf(z) + C64::new(s * std.sample(&mut rng), s * std.sample(&mut rng)));
        var.push(v);
    }
    let bla = BlaEstimate {
        fs: spec.fs,
        n: spec.n,
        transient: vec![C64::new(0.0, 0.0); bins.len()],
        bins,
        g,
        var_total: var,
        var_noise: None,
        total_source: TotalVarianceSource::Realizations,
        unestimable: vec![],
        realizations: 1,
        periods: 20,
    };
    let fit = fit_rational(&bla, 2, 2).unwrap();
    let f = bla.bins.len() as f64;
    assert!((fit.cost - f).abs() < 3.0 * (2.0 * f).sqrt(), "cost {} vs F = {f}", fit.cost);
}
