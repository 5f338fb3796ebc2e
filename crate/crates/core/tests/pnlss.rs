use nalgebra::DMatrix;
use nlid::linmodel::StateSpaceModel;
use nlid::pnlss::{build_basis, fit, from_linear, init_from_linear, monomial_count, rmse, spectral_cost, FitOptions, PnlssModel};
use nlid::signals::{build_grid, realizations, MultisineSpec};
use nlid::spectral::TimeRecord;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn ss(a: &[f64], b: &[f64], c: &[f64], d: f64) -> StateSpaceModel {
    let n = b.len();
    StateSpaceModel {
        a: DMatrix::from_row_slice(n, n, a),
        b: DMatrix::from_column_slice(n, 1, b),
        c: DMatrix::from_row_slice(1, n, c),
        d: DMatrix::from_element(1, 1, d),
        fs: 1.0,
    }
}

fn linear_core() -> StateSpaceModel {
    ss(&[0.6, 0.3, -0.3, 0.6], &[1.0, 0.5], &[0.5, -0.2], 0.1)
}

/// Two-state, degree-3 generator with a few active monomials.
fn generator() -> PnlssModel {
    let mut m = from_linear(&linear_core(), &[2, 3], None).unwrap();
    let idx = |b: &nlid::pnlss::MonomialBasis, label: &str| (0..b.len()).find(|&i| b.label(i) == label).unwrap();
    m.e[(0, idx(&m.basis_state, "x1^2"))] = 0.1;
    m.e[(1, idx(&m.basis_state, "x1*x2"))] = -0.08;
    m.e[(0, idx(&m.basis_state, "x1^3"))] = -0.03;
    m.f[(0, idx(&m.basis_output, "x1^2"))] = 0.05;
    m.f[(0, idx(&m.basis_output, "x2^3"))] = 0.02;
    m
}

fn spec(seed: u64) -> MultisineSpec {
    MultisineSpec { fs: 256.0, n: 256, band: [2.0, 40.0], target_rms: Some(1.0), seed, ..MultisineSpec::default() }
}

/// Steady-state record of `model` (one discarded period) with output noise at `snr_db`.
fn record(model: &PnlssModel, spec: &MultisineSpec, periods: usize, reals: usize, snr_db: Option<f64>) -> TimeRecord {
    let sigs = realizations(spec, reals).unwrap();
    let mut u = Vec::new();
    let mut y = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed + 100);
    for s in &sigs {
        let tiled = s.tiled(periods + 1);
        let out = model.simulate(&tiled, None).unwrap().y;
        let clean = &out[spec.n..];
        let rms = (clean.iter().map(|v| v * v).sum::<f64>() / clean.len() as f64).sqrt();
        let normal = Normal::new(0.0, snr_db.map(|d| rms * 10f64.powf(-d / 20.0)).unwrap_or(0.0)).unwrap();
        u.extend_from_slice(&tiled[spec.n..]);
        y.extend(clean.iter().map(|v| v + normal.sample(&mut rng)));
    }
    TimeRecord { u, y, fs: spec.fs, n: spec.n, periods, realizations: reals }
}

#[test]
fn basis_counts_follow_stars_and_bars() {
    for nx in 1..=4 {
        for nu in 0..=2 {
            for d in 2..=4 {
                let b = build_basis(nx, nu, &[d]).unwrap();
                assert_eq!(b.len(), monomial_count(nx + nu, d));
                assert!(b.exponents.iter().all(|e| e.iter().sum::<u32>() as usize == d));
                let mut uniq = b.exponents.clone();
                uniq.sort();
                uniq.dedup();
                assert_eq!(uniq.len(), b.len());
            }
        }
    }
    assert_eq!(build_basis(1, 1, &[2]).unwrap().len(), 3);
    assert_eq!(build_basis(2, 1, &[2, 3]).unwrap().len(), 16);
}

#[test]
fn hand_recursion() {
    let mut m = from_linear(&ss(&[0.5], &[1.0], &[1.0], 0.0), &[2], None).unwrap();
    m.e[(0, 0)] = 0.1;
    let sim = m.simulate(&[1.0, 0.0, 0.0], None).unwrap();
    let want = [0.0, 1.0, 0.6, 0.336];
    for (a, b) in sim.x.iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
    for (a, b) in sim.y.iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn zero_nonlinearity_is_the_linear_model() {
    let lin = linear_core();
    let s = spec(1);
    let data = record(&from_linear(&lin, &[2, 3], None).unwrap(), &s, 2, 1, None);
    let init = init_from_linear(&lin, &[2, 3], &data).unwrap();
    assert!(init.x_scale.iter().chain(&init.u_scale).chain(&init.y_scale).all(|v| *v > 0.0));
    let u: Vec<f64> = data.u.clone();
    let y_lin = lin.simulate(&u);
    let y_pn = init.simulate(&u, None).unwrap().y;
    let scale = y_lin.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    for (a, b) in y_lin.iter().zip(&y_pn) {
        assert!((a - b).abs() < 1e-12 * scale);
    }
    let grid = build_grid(&s).unwrap();
    let bins = grid.in_band();
    let unit = from_linear(&lin, &[2, 3], None).unwrap();
    let c_init = spectral_cost(&init, &data, &bins, 1).unwrap();
    let c_lin = spectral_cost(&unit, &data, &bins, 1).unwrap();
    assert!((c_init - c_lin).abs() <= 1e-20 + 1e-10 * c_lin);
}

fn random_model(rng: &mut ChaCha8Rng) -> PnlssModel {
    let nx = rng.random_range(1..=3);
    let p = rng.random_range(2..=3);
    let degrees: Vec<usize> = (2..=p).collect();
    let mut a = DMatrix::from_fn(nx, nx, |_, _| rng.random_range(-1.0..1.0));
    let radius = a.complex_eigenvalues().iter().map(|v| v.norm()).fold(0.0, f64::max);
    a *= 0.6 / radius.max(1e-9);
    let lin = StateSpaceModel {
        a,
        b: DMatrix::from_fn(nx, 1, |_, _| rng.random_range(-1.0..1.0)),
        c: DMatrix::from_fn(1, nx, |_, _| rng.random_range(-1.0..1.0)),
        d: DMatrix::from_fn(1, 1, |_, _| rng.random_range(-1.0..1.0)),
        fs: 1.0,
    };
    let scales = ((0..nx).map(|_| rng.random_range(0.5..2.0)).collect(), rng.random_range(0.5..2.0), rng.random_range(0.5..2.0));
    let mut m = from_linear(&lin, &degrees, Some(scales)).unwrap();
    m.e = DMatrix::from_fn(m.e.nrows(), m.e.ncols(), |_, _| rng.random_range(-0.05..0.05));
    m.f = DMatrix::from_fn(m.f.nrows(), m.f.ncols(), |_, _| rng.random_range(-0.05..0.05));
    m
}

#[test]
fn jacobian_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut worst = 0.0_f64;
    for _ in 0..20 {
        let m = random_model(&mut rng);
        let u: Vec<f64> = (0..40).map(|_| normal.sample(&mut rng)).collect();
        let j = m.jacobian(&u, None).unwrap();
        let p0 = m.params();
        let h = 1e-6;
        // central differences carry ~eps |y| / h of rounding noise
        let floor = 1e-4 * j.amax();
        for p in 0..p0.len() {
            let mut pp = p0.clone();
            pp[p] += h;
            let mut pm = p0.clone();
            pm[p] -= h;
            let yp = m.with_params(&pp).simulate(&u, None).unwrap().y;
            let ym = m.with_params(&pm).simulate(&u, None).unwrap().y;
            for t in 0..u.len() {
                let fd = (yp[t] - ym[t]) / (2.0 * h);
                let rel = (j[(t, p)] - fd).abs() / fd.abs().max(floor);
                worst = worst.max(rel);
            }
        }
    }
    assert!(worst < 1e-5, "worst relative error {worst:e}");
}

#[test]
fn feedthrough_sensitivity_is_the_input() {
    let lin = linear_core();
    let m = from_linear(&lin, &[2, 3], Some((vec![1.3, 0.7], 2.0, 0.5))).unwrap();
    let u: Vec<f64> = (0..30).map(|t| (t as f64 * 0.4).sin()).collect();
    let j = m.jacobian(&u, None).unwrap();
    let d_index = 4 + 2 + 2;
    // normalized D maps u/u_scale to y/y_scale
    for t in 0..u.len() {
        assert!((j[(t, d_index)] - u[t] / m.u_scale[0] * m.y_scale[0]).abs() < 1e-14);
    }
    let unit = from_linear(&lin, &[2, 3], None).unwrap();
    let j = unit.jacobian(&u, None).unwrap();
    for t in 0..u.len() {
        assert_eq!(j[(t, d_index)], u[t]);
    }
}

#[test]
fn nonlinear_sensitivities_vanish_at_rest() {
    let m = generator();
    let j = m.jacobian(&vec![0.0; 25], None).unwrap();
    let start = 4 + 2 + 2 + 1;
    assert!(j.columns(start, j.ncols() - start).iter().all(|v| *v == 0.0));
}

#[test]
fn periodic_input_gives_periodic_output() {
    let m = generator();
    let s = spec(5);
    let u = realizations(&s, 1).unwrap().remove(0).samples;
    assert!(m.steady_state_residual(&u, 6).unwrap() < 1e-8);
}

#[test]
fn rmse_definitions() {
    let m = generator();
    let data = record(&m, &spec(6), 2, 1, None);
    assert!(rmse(&m, &data, 1).unwrap() < 1e-12);
    let mut shifted = data.clone();
    shifted.y.iter_mut().for_each(|v| *v += 0.25);
    assert!((rmse(&m, &shifted, 1).unwrap() - 0.25).abs() < 1e-12);
}

#[test]
fn recovers_known_pnlss() {
    let truth = generator();
    let s = spec(7);
    let grid = build_grid(&s).unwrap();
    let data = record(&truth, &s, 6, 2, Some(60.0));
    let init = init_from_linear(&linear_core(), &[2, 3], &data).unwrap();
    let (fitted, report) = fit(&init, &data, &grid, &FitOptions::default()).unwrap();
    assert!(report.final_cost <= report.initial_cost);
    let costs: Vec<f64> = report.history.iter().map(|h| h.cost).collect();
    assert!(costs.windows(2).all(|w| w[1] <= w[0]));

    let val = record(&truth, &MultisineSpec { seed: 70, ..s }, 2, 1, None);
    let y_rms = (val.y.iter().map(|v| v * v).sum::<f64>() / val.y.len() as f64).sqrt();
    let err_db = 20.0 * (rmse(&fitted, &val, 1).unwrap() / y_rms).log10();
    let lin_db = 20.0 * (rmse(&init, &val, 1).unwrap() / y_rms).log10();
    assert!(err_db <= -50.0, "validation error {err_db:.1} dB (linear {lin_db:.1} dB)");
    assert!(fitted.steady_state_residual(&val.u[..val.n], 8).unwrap() < 1e-8);
}

#[test]
fn linear_data_leaves_nonlinear_terms_small() {
    let lin = linear_core();
    let s = spec(9);
    let grid = build_grid(&s).unwrap();
    let data = record(&from_linear(&lin, &[2, 3], None).unwrap(), &s, 6, 2, Some(60.0));
    let init = init_from_linear(&lin, &[2, 3], &data).unwrap();
    let (fitted, _) = fit(&init, &data, &grid, &FitOptions::default()).unwrap();
    let (e, f, l) = fitted.coefficient_norms();
    assert!(e < 1e-3 * l && f < 1e-3 * l, "|E| {e:e} |F| {f:e} linear {l:e}");
}

#[test]
fn model_json_round_trip() {
    let m = generator();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pnlss.json");
    m.write_json(&path, serde_json::json!({"note": "generator"})).unwrap();
    assert_eq!(PnlssModel::read_json(&path).unwrap(), m);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.contains("\"x1*x2\""));
}
