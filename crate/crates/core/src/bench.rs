//! Synthetic ground-truth systems and measured-record ingestion.
//!
//! The synthetic cell is a Wiener structure: a stable linear core followed by
//! a static quadratic-plus-cubic output map, with a slow drift and white noise
//! added afterwards. Presets imitate a linear high-charge operating point and
//! an even-dominant low-charge one.

use crate::error::{Error, Result};
use crate::linmodel::StateSpaceModel;
use crate::signals::ExcitationSignal;
use crate::spectral::TimeRecord;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCell {
    pub linear: StateSpaceModel,
    pub nl_even: f64,
    pub nl_odd: f64,
    /// Initial drift slope in output units per sample.
    pub drift_rate: f64,
    /// Drift relaxation constant in samples (`inf` gives a straight ramp).
    pub drift_tau: f64,
    pub noise_std: f64,
    pub operating_point: String,
    pub seed: u64,
}

/// Two parallel RC branches plus a series resistance, discretized with a
/// zero-order hold. Output in volts for current in amperes.
pub fn rc_core(fs: f64, r0: f64, branches: &[(f64, f64)]) -> StateSpaceModel {
    let n = branches.len();
    let ts = 1.0 / fs;
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, 1);
    for (i, &(r, tau)) in branches.iter().enumerate() {
        let p = (-ts / tau).exp();
        a[(i, i)] = p;
        b[(i, 0)] = (1.0 - p) * r;
    }
    StateSpaceModel { a, b, c: DMatrix::from_element(1, n, 1.0), d: DMatrix::from_element(1, 1, r0), fs }
}

impl SyntheticCell {
    /// Named presets: `soc10`, `soc90`, `cubic`, `quadratic`, `fir`.
    pub fn preset(name: &str) -> Result<Self> {
        let fs = 50.0;
        let cell_core = || rc_core(fs, 2.0e-3, &[(1.0e-3, 0.05), (1.5e-3, 2.0)]);
        let base = |linear: StateSpaceModel| SyntheticCell {
            linear,
            nl_even: 0.0,
            nl_odd: 0.0,
            drift_rate: 0.0,
            drift_tau: f64::INFINITY,
            noise_std: 0.0,
            operating_point: name.to_string(),
            seed: 1,
        };
        let cell = match name {
            "soc10" => SyntheticCell {
                nl_even: 0.5,
                nl_odd: 2.0,
                drift_rate: 1.0e-6,
                drift_tau: 2.0e5,
                noise_std: 1.0e-4,
                ..base(cell_core())
            },
            "soc90" => SyntheticCell { drift_rate: 1.0e-6, drift_tau: 2.0e5, noise_std: 1.0e-4, ..base(cell_core()) },
            "cubic" => SyntheticCell { nl_odd: 0.1, ..base(static_gain(fs, 1.0)) },
            "quadratic" => SyntheticCell { nl_even: 0.1, ..base(static_gain(fs, 1.0)) },
            "fir" => base(fir_core(fs, &[0.5, 0.3, -0.2, 0.1])),
            other => return Err(Error::Config(format!("unknown bench preset '{other}' (soc10, soc90, cubic, quadratic, fir)"))),
        };
        cell.validate()?;
        Ok(cell)
    }

    pub fn validate(&self) -> Result<()> {
        self.linear.validate()?;
        let radius = crate::linmodel::spectral_radius(&self.linear.a);
        if !(radius < 1.0) {
            return Err(Error::Config(format!("cell linear core is unstable (spectral radius {radius:.4})")));
        }
        let finite = [self.nl_even, self.nl_odd, self.drift_rate, self.noise_std].iter().all(|v| v.is_finite());
        if !finite || self.noise_std < 0.0 || !(self.drift_tau > 0.0) {
            return Err(Error::Config("cell coefficients must be finite, noise_std >= 0, drift_tau > 0".into()));
        }
        Ok(())
    }

    /// Static output map applied to the linear core output.
    pub fn output_map(&self, y_lin: f64) -> f64 {
        y_lin + self.nl_even * y_lin * y_lin + self.nl_odd * y_lin * y_lin * y_lin
    }

    pub fn drift(&self, t: usize) -> f64 {
        let t = t as f64;
        if self.drift_tau.is_infinite() {
            self.drift_rate * t
        } else {
            self.drift_rate * self.drift_tau * (1.0 - (-t / self.drift_tau).exp())
        }
    }
}

pub fn static_gain(fs: f64, g: f64) -> StateSpaceModel {
    StateSpaceModel { a: DMatrix::zeros(0, 0), b: DMatrix::zeros(0, 1), c: DMatrix::zeros(1, 0), d: DMatrix::from_element(1, 1, g), fs }
}

/// FIR filter `y(t) = sum_i taps[i] u(t - i)` as a delay-line state-space model.
pub fn fir_core(fs: f64, taps: &[f64]) -> StateSpaceModel {
    let n = taps.len().saturating_sub(1);
    let mut a = DMatrix::zeros(n, n);
    for i in 1..n {
        a[(i, i - 1)] = 1.0;
    }
    let mut b = DMatrix::zeros(n, 1);
    if n > 0 {
        b[(0, 0)] = 1.0;
    }
    StateSpaceModel { a, b, c: DMatrix::from_fn(1, n, |_, j| taps[j + 1]), d: DMatrix::from_element(1, 1, taps[0]), fs }
}

/// Simulates `periods` periods of each excitation realization from rest.
/// Drift and noise restart per realization; noise is seeded from the cell
/// seed and the realization index.
pub fn simulate_cell(cell: &SyntheticCell, excitation: &[ExcitationSignal], periods: usize) -> Result<TimeRecord> {
    cell.validate()?;
    let first = excitation.first().ok_or_else(|| Error::Config("no excitation realizations".into()))?;
    if periods == 0 {
        return Err(Error::Config("periods must be >= 1".into()));
    }
    let (n, fs) = (first.spec.n, first.spec.fs);
    if (fs - cell.linear.fs).abs() > 1e-9 * fs {
        return Err(Error::Config(format!("excitation fs {fs} differs from cell fs {}", cell.linear.fs)));
    }
    let mut u = Vec::with_capacity(excitation.len() * periods * n);
    let mut y = Vec::with_capacity(u.capacity());
    for (r, sig) in excitation.iter().enumerate() {
        if sig.spec.n != n {
            return Err(Error::Config("all realizations must share the period length".into()));
        }
        let ur = sig.tiled(periods);
        let lin = cell.linear.simulate(&ur);
        let mut rng = ChaCha8Rng::seed_from_u64(cell.seed);
        rng.set_stream(r as u64 + 1);
        let normal = Normal::new(0.0, cell.noise_std).map_err(|e| Error::Config(e.to_string()))?;
        for (t, &yl) in lin.iter().enumerate() {
            let v = cell.output_map(yl) + cell.drift(t) + if cell.noise_std > 0.0 { normal.sample(&mut rng) } else { 0.0 };
            if !v.is_finite() {
                return Err(Error::Instability { step: t, norm: v.abs() });
            }
            y.push(v);
        }
        u.extend_from_slice(&ur);
    }
    Ok(TimeRecord { u, y, fs, n, periods, realizations: excitation.len() })
}

/// Sidecar metadata for a CSV record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub fs: Option<f64>,
    pub n: usize,
    #[serde(default)]
    pub periods: Option<usize>,
    #[serde(default = "one")]
    pub realizations: usize,
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
}

impl Default for RecordMeta {
    fn default() -> Self {
        Self { fs: None, n: 0, periods: None, realizations: 1, labels: BTreeMap::new() }
    }
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone)]
pub struct MeasuredRecord {
    pub record: TimeRecord,
    pub meta: RecordMeta,
    pub warnings: Vec<String>,
}

/// Sidecar path: `<stem>.json` next to the CSV.
pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

/// Writes `t,current,voltage` rows (realizations concatenated) and the sidecar.
pub fn export_csv(path: &Path, rec: &TimeRecord, labels: BTreeMap<String, String>) -> Result<()> {
    rec.validate()?;
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    w.write_record(["t", "current", "voltage"])?;
    for (i, (u, y)) in rec.u.iter().zip(&rec.y).enumerate() {
        w.write_record([(i as f64 / rec.fs).to_string(), u.to_string(), y.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let meta = RecordMeta { fs: Some(rec.fs), n: rec.n, periods: Some(rec.periods), realizations: rec.realizations, labels };
    let side = sidecar_path(path);
    std::fs::write(&side, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&side, e))?;
    Ok(())
}

/// Reads a `t,current,voltage` CSV. `meta` overrides the sidecar when given.
pub fn ingest_csv(path: &Path, meta: Option<RecordMeta>) -> Result<MeasuredRecord> {
    let meta = match meta {
        Some(m) => m,
        None => {
            let side = sidecar_path(path);
            let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
            serde_json::from_str(&text)?
        }
    };
    if meta.n == 0 || meta.realizations == 0 {
        return Err(Error::Format("metadata needs n >= 1 and realizations >= 1".into()));
    }
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Format(format!("{}: missing column '{name}'", path.display())))
    };
    let (ct, cu, cy) = (col("t")?, col("current")?, col("voltage")?);
    let mut t = Vec::new();
    let mut u = Vec::new();
    let mut y = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        // data rows start on line 2
        let line = i + 2;
        let row = row.map_err(|e| Error::Format(format!("{}: row {line}: {e}", path.display())))?;
        let field = |c: usize, name: &str| -> Result<f64> {
            let raw = row.get(c).map(str::trim).unwrap_or("");
            if raw.is_empty() {
                return Err(Error::Format(format!("{}: row {line}: missing {name} sample", path.display())));
            }
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Format(format!("{}: row {line}: invalid {name} value '{raw}'", path.display())))
        };
        t.push(field(ct, "t")?);
        u.push(field(cu, "current")?);
        y.push(field(cy, "voltage")?);
    }
    if t.len() < 2 {
        return Err(Error::Format(format!("{}: fewer than two samples", path.display())));
    }
    let mut steps: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    steps.sort_by(f64::total_cmp);
    let dt_nominal = steps[steps.len() / 2];
    if !(dt_nominal > 0.0) {
        return Err(Error::Format(format!("{}: time column is not increasing", path.display())));
    }
    for (i, w) in t.windows(2).enumerate() {
        let dt = w[1] - w[0];
        if (dt - dt_nominal).abs() > 1e-6 * dt_nominal {
            return Err(Error::Format(format!(
                "{}: row {}: sampling interval {dt:e} deviates from {dt_nominal:e} (missing or extra sample?)",
                path.display(),
                i + 3
            )));
        }
    }
    let fs = match meta.fs {
        Some(fs) => {
            if (fs * dt_nominal - 1.0).abs() > 1e-6 {
                return Err(Error::Format(format!("declared fs {fs} disagrees with time column (1/dt = {})", 1.0 / dt_nominal)));
            }
            fs
        }
        None => 1.0 / dt_nominal,
    };

    let total = y.len();
    let r = meta.realizations;
    if total % r != 0 {
        return Err(Error::Format(format!("{total} samples cannot be split into {r} equal realizations")));
    }
    let len_r = total / r;
    let periods = len_r / meta.n;
    if periods == 0 {
        return Err(Error::Format(format!("realization length {len_r} is shorter than one period ({})", meta.n)));
    }
    if let Some(p) = meta.periods {
        if p != periods {
            return Err(Error::Format(format!("metadata declares {p} periods, data holds {periods}")));
        }
    }
    let mut warnings = Vec::new();
    let trailing = len_r - periods * meta.n;
    if trailing > 0 {
        let msg = format!("period length {} does not divide {len_r} samples per realization; dropped {trailing} trailing sample(s) from each of {r} realization(s)", meta.n);
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let keep = |v: &[f64]| -> Vec<f64> { (0..r).flat_map(|k| v[k * len_r..k * len_r + periods * meta.n].to_vec()).collect() };
    let record = TimeRecord { u: keep(&u), y: keep(&y), fs, n: meta.n, periods, realizations: r };
    record.validate()?;
    Ok(MeasuredRecord { record, meta: RecordMeta { fs: Some(fs), periods: Some(periods), ..meta }, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_stable() {
        for name in ["soc10", "soc90", "cubic", "quadratic", "fir"] {
            SyntheticCell::preset(name).unwrap();
        }
        assert!(SyntheticCell::preset("soc50").is_err());
    }

    #[test]
    fn fir_core_impulse_response() {
        let taps = [0.5, 0.3, -0.2, 0.1];
        let y = fir_core(1.0, &taps).simulate(&[1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(y, vec![0.5, 0.3, -0.2, 0.1, 0.0]);
    }

    #[test]
    fn rc_core_dc_gain() {
        let m = rc_core(50.0, 2e-3, &[(1e-3, 0.05), (1.5e-3, 2.0)]);
        let g = m.frf(crate::C64::new(1.0, 0.0));
        assert!((g.re - 4.5e-3).abs() < 1e-12 && g.im.abs() < 1e-15);
    }

    #[test]
    fn drift_shapes() {
        let mut c = SyntheticCell::preset("soc90").unwrap();
        assert_eq!(c.drift(0), 0.0);
        assert!((c.drift(1) - c.drift_rate).abs() < 1e-3 * c.drift_rate);
        c.drift_tau = f64::INFINITY;
        assert_eq!(c.drift(10), 10.0 * c.drift_rate);
    }
}
