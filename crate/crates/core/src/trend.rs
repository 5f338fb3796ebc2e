//! Drift removal by l1 trend filtering.
//!
//! Minimizes `0.5 ||y - m||^2 + lambda ||D m||_1` with `D` the second-order
//! difference operator. The solver runs a primal-dual interior-point method on
//! the box-constrained dual `min 0.5 v' D D' v - y' D' v, |v| <= lambda`, then
//! polishes the active set so the trend is exactly piecewise linear.

use crate::error::{Error, Result};
use crate::spectral::TimeRecord;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone)]
pub struct TrendProblem<'a> {
    pub y: &'a [f64],
    pub lambda: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrendResult {
    pub m: Vec<f64>,
    pub detrended: Vec<f64>,
    pub kink_count: usize,
    /// Rows of `D m` above the kink threshold.
    pub kinks: Vec<usize>,
    pub iterations: usize,
    pub duality_gap: f64,
    pub lambda: f64,
    /// Dual variable, `m = y - D' dual`.
    pub dual: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct TrendOptions {
    /// Absolute duality-gap target.
    pub tol: f64,
    pub max_iter: usize,
}

impl TrendOptions {
    /// Gap target scaled to the data energy.
    pub fn for_data(y: &[f64]) -> Self {
        let energy = 0.5 * y.iter().map(|v| v * v).sum::<f64>();
        Self { tol: 1e-9 * energy.max(1e-300), max_iter: 200 }
    }
}

/// `(D v)_i = v_i - 2 v_{i+1} + v_{i+2}`.
pub fn second_difference(v: &[f64]) -> Vec<f64> {
    v.windows(3).map(|w| w[0] - 2.0 * w[1] + w[2]).collect()
}

/// `D' z` for `z` of length `n - 2`.
fn second_difference_t(z: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; z.len() + 2];
    for (i, &zi) in z.iter().enumerate() {
        out[i] += zi;
        out[i + 1] -= 2.0 * zi;
        out[i + 2] += zi;
    }
    out
}

/// `D D' z`: Toeplitz band (1, -4, 6, -4, 1).
fn ddt_mul(z: &[f64]) -> Vec<f64> {
    second_difference(&second_difference_t(z))
}

/// Symmetric positive-definite pentadiagonal matrix and its LDL' factorization.
struct Penta {
    diag: Vec<f64>,
    off1: Vec<f64>,
    off2: Vec<f64>,
}

impl Penta {
    fn factor(mut self) -> Option<Self> {
        let n = self.diag.len();
        for i in 0..n {
            if i >= 1 {
                let l1 = self.off1[i - 1];
                let mut d = self.diag[i] - l1 * l1 * self.diag[i - 1];
                if i >= 2 {
                    let l2 = self.off2[i - 2];
                    d -= l2 * l2 * self.diag[i - 2];
                }
                self.diag[i] = d;
            }
            if !(self.diag[i] > 0.0) || !self.diag[i].is_finite() {
                return None;
            }
            // column i of L: off1[i] = L[i+1,i], off2[i] = L[i+2,i]
            if i + 1 < n {
                let mut v = self.off1[i];
                if i >= 1 {
                    v -= self.off1[i - 1] * self.off2[i - 1] * self.diag[i - 1];
                }
                self.off1[i] = v / self.diag[i];
            }
            if i + 2 < n {
                self.off2[i] /= self.diag[i];
            }
        }
        Some(self)
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let mut x = b.to_vec();
        for i in 0..n {
            if i >= 1 {
                x[i] -= self.off1[i - 1] * x[i - 1];
            }
            if i >= 2 {
                x[i] -= self.off2[i - 2] * x[i - 2];
            }
        }
        for i in 0..n {
            x[i] /= self.diag[i];
        }
        for i in (0..n).rev() {
            if i + 1 < n {
                x[i] -= self.off1[i] * x[i + 1];
            }
            if i + 2 < n {
                x[i] -= self.off2[i] * x[i + 2];
            }
        }
        x
    }

    /// `D_S D_S'` for the ordered row subset `rows`, plus `extra` on the diagonal.
    fn ddt_subset(rows: &[usize], extra: impl Fn(usize) -> f64) -> Self {
        let k = rows.len();
        let coupling = |a: usize, b: usize| match a.abs_diff(b) {
            0 => 6.0,
            1 => -4.0,
            2 => 1.0,
            _ => 0.0,
        };
        Self {
            diag: (0..k).map(|i| coupling(rows[i], rows[i]) + extra(i)).collect(),
            off1: (0..k.saturating_sub(1)).map(|i| coupling(rows[i], rows[i + 1])).collect(),
            off2: (0..k.saturating_sub(2)).map(|i| coupling(rows[i], rows[i + 2])).collect(),
        }
    }
}

fn ddt_full(n: usize) -> Penta {
    let rows: Vec<usize> = (0..n).collect();
    Penta::ddt_subset(&rows, |_| 0.0)
}

/// `||(D D')^-1 D y||_inf`; any larger weight yields an affine trend.
pub fn lambda_max(y: &[f64]) -> Result<f64> {
    check(y)?;
    let nu = ddt_full(y.len() - 2).factor().expect("D D' is positive definite").solve(&second_difference(y));
    Ok(nu.iter().fold(0.0, |a, v| a.max(v.abs())))
}

fn check(y: &[f64]) -> Result<()> {
    if y.len() < 3 {
        return Err(Error::InsufficientData(format!("trend filtering needs >= 3 samples, got {}", y.len())));
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite sample at index {i}")));
    }
    Ok(())
}

fn objective(y: &[f64], m: &[f64], lambda: f64) -> f64 {
    let fit: f64 = y.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum();
    0.5 * fit + lambda * second_difference(m).iter().map(|v| v.abs()).sum::<f64>()
}

/// Duality gap certified by a dual point `nu` (clamped into the box).
pub fn duality_gap(y: &[f64], lambda: f64, nu: &[f64]) -> f64 {
    let nu: Vec<f64> = nu.iter().map(|v| v.clamp(-lambda, lambda)).collect();
    let dtnu = second_difference_t(&nu);
    let m: Vec<f64> = y.iter().zip(&dtnu).map(|(a, b)| a - b).collect();
    let dual = -0.5 * dtnu.iter().map(|v| v * v).sum::<f64>() + y.iter().zip(&dtnu).map(|(a, b)| a * b).sum::<f64>();
    (objective(y, &m, lambda) - dual).max(0.0)
}

/// Kink threshold `1e-6 max|y|`.
pub fn kink_tolerance(y: &[f64]) -> f64 {
    1e-6 * y.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
}

fn finish(y: &[f64], lambda: f64, nu: Vec<f64>, iterations: usize) -> TrendResult {
    let dtnu = second_difference_t(&nu);
    let m: Vec<f64> = y.iter().zip(&dtnu).map(|(a, b)| a - b).collect();
    let tol = kink_tolerance(y);
    let kinks: Vec<usize> = second_difference(&m).iter().enumerate().filter(|(_, v)| v.abs() > tol).map(|(i, _)| i).collect();
    let duality_gap = duality_gap(y, lambda, &nu);
    TrendResult { detrended: dtnu, m, kink_count: kinks.len(), kinks, iterations, duality_gap, lambda, dual: nu }
}

/// Least-squares line in the sample index.
fn affine_fit(y: &[f64]) -> Vec<f64> {
    let n = y.len() as f64;
    let mid = (n - 1.0) / 2.0;
    let mean = y.iter().sum::<f64>() / n;
    let sxy: f64 = y.iter().enumerate().map(|(i, v)| (i as f64 - mid) * (v - mean)).sum();
    let sxx: f64 = (0..y.len()).map(|i| (i as f64 - mid).powi(2)).sum();
    let slope = sxy / sxx;
    (0..y.len()).map(|i| mean + slope * (i as f64 - mid)).collect()
}

/// The box constraint is inactive: the trend is the least-squares line and
/// `nu` is the exact dual optimum.
fn finish_affine(y: &[f64], lambda: f64, nu: Vec<f64>) -> TrendResult {
    let m = affine_fit(y);
    let dtnu = second_difference_t(&nu);
    let dual = -0.5 * dtnu.iter().map(|v| v * v).sum::<f64>() + y.iter().zip(&dtnu).map(|(a, b)| a * b).sum::<f64>();
    let duality_gap = (objective(y, &m, lambda) - dual).max(0.0);
    let detrended = y.iter().zip(&m).map(|(a, b)| a - b).collect();
    TrendResult { detrended, m, kink_count: 0, kinks: vec![], iterations: 0, duality_gap, lambda, dual: nu }
}

impl TrendResult {
    /// Kinks with runs of adjacent rows merged; a breakpoint between samples
    /// is often spread over two rows.
    pub fn breakpoint_count(&self) -> usize {
        self.kinks.windows(2).filter(|w| w[1] > w[0] + 1).count() + usize::from(!self.kinks.is_empty())
    }
}

/// Fixes `nu` on the active rows and solves for the free rows exactly. Returns
/// the polished dual if it satisfies the optimality conditions.
fn polish(y: &[f64], lambda: f64, nu: &[f64]) -> Option<Vec<f64>> {
    let thresh = lambda * (1.0 - 1e-6);
    let free: Vec<usize> = (0..nu.len()).filter(|&i| nu[i].abs() < thresh).collect();
    let mut out: Vec<f64> = nu.iter().map(|&v| if v.abs() >= thresh { lambda * v.signum() } else { 0.0 }).collect();
    if !free.is_empty() {
        // D_F (y - D' nu_A) = D_F D_F' nu_F
        let r = second_difference(&y.iter().zip(second_difference_t(&out)).map(|(a, b)| a - b).collect::<Vec<_>>());
        let rhs: Vec<f64> = free.iter().map(|&i| r[i]).collect();
        let sol = Penta::ddt_subset(&free, |_| 0.0).factor()?.solve(&rhs);
        for (&i, v) in free.iter().zip(sol) {
            if v.abs() > lambda {
                return None;
            }
            out[i] = v;
        }
    }
    let m: Vec<f64> = y.iter().zip(second_difference_t(&out)).map(|(a, b)| a - b).collect();
    let dm = second_difference(&m);
    let scale = kink_tolerance(y).max(1e-300);
    for (i, &v) in out.iter().enumerate() {
        let active = v.abs() == lambda && !free.contains(&i);
        if active && dm[i] * v < -scale {
            return None;
        }
    }
    Some(out)
}

/// Solves the l1 trend problem to the requested duality gap.
pub fn l1_trend(p: &TrendProblem, opts: &TrendOptions) -> Result<TrendResult> {
    let y = p.y;
    check(y)?;
    let lambda = p.lambda;
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Config(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    let n = y.len();
    let k = n - 2;
    if lambda == 0.0 {
        return Ok(finish(y, 0.0, vec![0.0; k], 0));
    }
    let dy = second_difference(y);
    let ddt = ddt_full(k).factor().expect("D D' is positive definite");
    let unconstrained = ddt.solve(&dy);
    if unconstrained.iter().all(|v| v.abs() <= lambda) {
        return Ok(finish_affine(y, lambda, unconstrained));
    }

    const ALPHA: f64 = 0.01;
    const BETA: f64 = 0.5;
    const MU: f64 = 2.0;
    let mut z = vec![0.0; k];
    let mut mu1 = vec![1.0; k];
    let mut mu2 = vec![1.0; k];
    let mut f1: Vec<f64> = z.iter().map(|v| v - lambda).collect();
    let mut f2: Vec<f64> = z.iter().map(|v| -v - lambda).collect();
    let mut t = 1e-10;
    let mut step = f64::INFINITY;
    let mut iterations = 0;
    let residual_norm = |ddtz: &[f64], mu1: &[f64], mu2: &[f64], f1: &[f64], f2: &[f64], t: f64| -> f64 {
        let mut s = 0.0;
        for i in 0..k {
            s += (ddtz[i] - dy[i] + mu1[i] - mu2[i]).powi(2);
            s += (-mu1[i] * f1[i] - 1.0 / t).powi(2);
            s += (-mu2[i] * f2[i] - 1.0 / t).powi(2);
        }
        s.sqrt()
    };

    while iterations < opts.max_iter {
        let dtz = second_difference_t(&z);
        let ddtz = second_difference(&dtz);
        let w: Vec<f64> = (0..k).map(|i| dy[i] - (mu1[i] - mu2[i])).collect();
        let ww = ddt.solve(&w);
        let pobj1 = 0.5 * w.iter().zip(&ww).map(|(a, b)| a * b).sum::<f64>() + lambda * (0..k).map(|i| mu1[i] + mu2[i]).sum::<f64>();
        let pobj2 = 0.5 * dtz.iter().map(|v| v * v).sum::<f64>() + lambda * (0..k).map(|i| (dy[i] - ddtz[i]).abs()).sum::<f64>();
        let pobj = pobj1.min(pobj2);
        let dobj = -0.5 * dtz.iter().map(|v| v * v).sum::<f64>() + dy.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>();
        let gap = pobj - dobj;
        if gap <= opts.tol {
            break;
        }
        iterations += 1;
        if step >= 0.2 {
            t = (2.0 * k as f64 * MU / gap).max(1.2 * t);
        }
        let s = Penta {
            diag: (0..k).map(|i| 6.0 - mu1[i] / f1[i] - mu2[i] / f2[i]).collect(),
            off1: vec![-4.0; k.saturating_sub(1)],
            off2: vec![1.0; k.saturating_sub(2)],
        }
        .factor()
        .ok_or_else(|| Error::Numerical("trend Newton system lost definiteness".into()))?;
        let r: Vec<f64> = (0..k).map(|i| -ddtz[i] + dy[i] + (1.0 / t) / f1[i] - (1.0 / t) / f2[i]).collect();
        let dz = s.solve(&r);
        let dmu1: Vec<f64> = (0..k).map(|i| -(mu1[i] + (1.0 / t + dz[i] * mu1[i]) / f1[i])).collect();
        let dmu2: Vec<f64> = (0..k).map(|i| -(mu2[i] + (1.0 / t - dz[i] * mu2[i]) / f2[i])).collect();
        let res0 = residual_norm(&ddtz, &mu1, &mu2, &f1, &f2, t);

        step = 1.0;
        for i in 0..k {
            if dmu1[i] < 0.0 {
                step = step.min(-0.99 * mu1[i] / dmu1[i]);
            }
            if dmu2[i] < 0.0 {
                step = step.min(-0.99 * mu2[i] / dmu2[i]);
            }
        }
        let mut accepted = None;
        for _ in 0..40 {
            let nz: Vec<f64> = (0..k).map(|i| z[i] + step * dz[i]).collect();
            let nmu1: Vec<f64> = (0..k).map(|i| mu1[i] + step * dmu1[i]).collect();
            let nmu2: Vec<f64> = (0..k).map(|i| mu2[i] + step * dmu2[i]).collect();
            let nf1: Vec<f64> = nz.iter().map(|v| v - lambda).collect();
            let nf2: Vec<f64> = nz.iter().map(|v| -v - lambda).collect();
            let feasible = nf1.iter().chain(&nf2).all(|v| *v < 0.0);
            if feasible && residual_norm(&ddt_mul(&nz), &nmu1, &nmu2, &nf1, &nf2, t) <= (1.0 - ALPHA * step) * res0 {
                accepted = Some((nz, nmu1, nmu2, nf1, nf2));
                break;
            }
            step *= BETA;
        }
        let Some((nz, nmu1, nmu2, nf1, nf2)) = accepted else {
            log::warn!("trend line search stalled after {iterations} iterations");
            break;
        };
        z = nz;
        mu1 = nmu1;
        mu2 = nmu2;
        f1 = nf1;
        f2 = nf2;
    }

    let ip = finish(y, lambda, z.clone(), iterations);
    let polished = polish(y, lambda, &z).map(|nu| finish(y, lambda, nu, iterations));
    let best = match polished {
        Some(pr) if objective(y, &pr.m, lambda) <= objective(y, &ip.m, lambda) + opts.tol => pr,
        _ => ip,
    };
    if best.duality_gap > opts.tol {
        log::warn!("trend filter stopped with duality gap {:.3e} above target {:.3e}", best.duality_gap, opts.tol);
    }
    Ok(best)
}

/// How the regularization weight is chosen per realization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum LambdaPolicy {
    Absolute(f64),
    /// Fraction of `lambda_max` of each realization's output.
    FractionOfMax(f64),
    /// Largest `lambda_max * 10^-j` (j = 0..=8) whose detrended power on bins
    /// `1..below_bin` is within `margin_db` of the noise floor, estimated from
    /// the scatter between periods on the bins above. Needs two periods.
    SubBand { below_bin: usize, margin_db: f64 },
}

impl Default for LambdaPolicy {
    fn default() -> Self {
        LambdaPolicy::FractionOfMax(0.1)
    }
}

/// Detrended record and the trend of each realization.
#[derive(Debug, Clone)]
pub struct DetrendedRecord {
    pub record: TimeRecord,
    pub trends: Vec<TrendResult>,
}

/// Removes an l1 trend from the output channel of every realization.
pub fn detrend_record(rec: &TimeRecord, policy: LambdaPolicy) -> Result<DetrendedRecord> {
    rec.validate()?;
    let len = rec.n * rec.periods;
    let mut out = rec.clone();
    let mut trends = Vec::with_capacity(rec.realizations);
    for r in 0..rec.realizations {
        let y = &rec.y[r * len..(r + 1) * len];
        let opts = TrendOptions::for_data(y);
        let res = match policy {
            LambdaPolicy::Absolute(v) => l1_trend(&TrendProblem { y, lambda: v }, &opts)?,
            LambdaPolicy::FractionOfMax(f) => l1_trend(&TrendProblem { y, lambda: f * lambda_max(y)? }, &opts)?,
            LambdaPolicy::SubBand { below_bin, margin_db } => sub_band_trend(y, rec.n, rec.periods, below_bin, margin_db)?,
        };
        out.y[r * len..(r + 1) * len].copy_from_slice(&res.detrended);
        trends.push(res);
    }
    Ok(DetrendedRecord { record: out, trends })
}

/// Low-band power and noise floor of a detrended realization.
fn sub_band_levels(d: &[f64], n: usize, periods: usize, below_bin: usize) -> (f64, f64) {
    let spectra: Vec<Vec<crate::C64>> = d.chunks(n).map(crate::dft::rfft_unitary).collect();
    let low = spectra.iter().map(|s| s[1..below_bin].iter().map(|v| v.norm_sqr()).sum::<f64>()).sum::<f64>()
        / (periods * (below_bin - 1)) as f64;
    let upper = below_bin..=n / 2;
    let bins = upper.clone().count();
    let floor = upper
        .map(|k| {
            let mean = spectra.iter().map(|s| s[k]).sum::<crate::C64>() / periods as f64;
            spectra.iter().map(|s| (s[k] - mean).norm_sqr()).sum::<f64>() / (periods - 1) as f64
        })
        .sum::<f64>()
        / bins as f64;
    (low, floor)
}

fn sub_band_trend(y: &[f64], n: usize, periods: usize, below_bin: usize, margin_db: f64) -> Result<TrendResult> {
    if periods < 2 {
        return Err(Error::InsufficientData("the sub-band lambda policy needs at least two periods".into()));
    }
    if below_bin < 2 || below_bin > n / 2 || !margin_db.is_finite() {
        return Err(Error::Config(format!("sub-band policy: band 1..{below_bin} must lie below Nyquist with a finite margin")));
    }
    let lmax = lambda_max(y)?;
    let opts = TrendOptions::for_data(y);
    let factor = 10f64.powf(margin_db / 10.0);
    let mut last = None;
    for j in 0..=8 {
        let res = l1_trend(&TrendProblem { y, lambda: lmax * 10f64.powi(-j) }, &opts)?;
        let (low, floor) = sub_band_levels(&res.detrended, n, periods, below_bin);
        if low <= factor * floor {
            return Ok(res);
        }
        last = Some(res);
    }
    log::warn!("sub-band lambda policy: low-band power stays above the noise floor; using the smallest lambda tried");
    Ok(last.expect("at least one lambda tried"))
}

/// CSV with columns `t,y,m,y_minus_m`.
pub fn write_trend_csv(path: &Path, fs: f64, y: &[f64], res: &TrendResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    w.write_record(["t", "y", "m", "y_minus_m"])?;
    for (i, ((yi, mi), di)) in y.iter().zip(&res.m).zip(&res.detrended).enumerate() {
        w.write_record([(i as f64 / fs).to_string(), yi.to_string(), mi.to_string(), di.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Mean power of the output over bins `1..below_bin` of every period's
/// unitary DFT. Tracks drift leaking below the excited band.
pub fn low_frequency_power(rec: &TimeRecord, below_bin: usize) -> Result<f64> {
    rec.validate()?;
    if below_bin < 2 || below_bin > rec.n / 2 {
        return Err(Error::Config(format!("low-frequency band 1..{below_bin} is empty or above Nyquist")));
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for r in 0..rec.realizations {
        for p in 0..rec.periods {
            let spec = crate::dft::rfft_unitary(rec.y_period(r, p));
            acc += spec[1..below_bin].iter().map(|v| v.norm_sqr()).sum::<f64>();
            count += below_bin - 1;
        }
    }
    Ok(acc / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn banded_solver_matches_dense() {
        let rows: Vec<usize> = vec![0, 1, 3, 4, 5, 8, 9];
        let p = Penta::ddt_subset(&rows, |i| 0.1 * i as f64);
        let dense = nalgebra::DMatrix::from_fn(rows.len(), rows.len(), |i, j| {
            if i == j {
                p.diag[i]
            } else if i.abs_diff(j) == 1 {
                p.off1[i.min(j)]
            } else if i.abs_diff(j) == 2 {
                p.off2[i.min(j)]
            } else {
                0.0
            }
        });
        let b: Vec<f64> = (0..rows.len()).map(|i| (i as f64).sin() + 0.5).collect();
        let x = p.factor().unwrap().solve(&b);
        let want = dense.lu().solve(&nalgebra::DVector::from_vec(b)).unwrap();
        for (a, w) in x.iter().zip(want.iter()) {
            assert!((a - w).abs() < 1e-12);
        }
    }

    #[test]
    fn adjoint_pair() {
        let v: Vec<f64> = (0..9).map(|i| (i as f64 * 0.7).cos()).collect();
        let z: Vec<f64> = (0..7).map(|i| (i as f64 * 1.3).sin()).collect();
        let lhs: f64 = second_difference(&v).iter().zip(&z).map(|(a, b)| a * b).sum();
        let rhs: f64 = v.iter().zip(second_difference_t(&z)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn lambda_zero_is_identity() {
        let y = [1.0, 3.0, -2.0, 0.5];
        let r = l1_trend(&TrendProblem { y: &y, lambda: 0.0 }, &TrendOptions::for_data(&y)).unwrap();
        assert_eq!(r.m, y.to_vec());
        assert!(r.detrended.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rejects_bad_input() {
        let opts = TrendOptions { tol: 1e-9, max_iter: 10 };
        assert!(l1_trend(&TrendProblem { y: &[1.0, 2.0], lambda: 1.0 }, &opts).is_err());
        assert!(l1_trend(&TrendProblem { y: &[1.0, f64::NAN, 2.0], lambda: 1.0 }, &opts).is_err());
        assert!(l1_trend(&TrendProblem { y: &[1.0, 0.0, 2.0], lambda: -1.0 }, &opts).is_err());
    }
}
