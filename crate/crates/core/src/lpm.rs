//! Local Polynomial Method estimate of the best linear approximation.
//!
//! Around every excited bin `k` the FRF and the generalized transient are
//! modelled as polynomials of order `R` in the bin offset `r`:
//!
//! ```text
//! Y(k + r) = (G(k) + sum_s g_s r^s) U(k + r) + T(k) + sum_s t_s r^s + V(k + r)
//! ```
//!
//! and the `2(R + 1)` complex coefficients are solved in least squares over the
//! `2n + 1` nearest excited bins. Only excited bins enter the regression; the
//! detection bins carry no input and are left to the spectral module.

use crate::error::{Error, Result};
use crate::spectral::{period_variance, SpectralRecord};
use crate::C64;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LpmConfig {
    /// Local polynomial order `R`.
    pub order: usize,
    /// Half-window width `n`, counted in excited lines on each side of the centre.
    pub half_width: usize,
    /// Extra lines per side beyond `R + 1`; `half_width = order + 1 + dof_extra`.
    pub dof_extra: usize,
    /// How many extra lines per side may be added when a window is rank deficient.
    pub max_widen: usize,
}

impl Default for LpmConfig {
    fn default() -> Self {
        Self::new(2, 1)
    }
}

impl LpmConfig {
    pub fn new(order: usize, dof_extra: usize) -> Self {
        Self { order, half_width: order + 1 + dof_extra, dof_extra, max_widen: 4 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.half_width < self.order + 1 {
            return Err(Error::Config(format!(
                "LPM half-width {} must be at least order + 1 = {}",
                self.half_width,
                self.order + 1
            )));
        }
        Ok(())
    }
}

/// How `var_total` was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TotalVarianceSource {
    /// Scatter of the per-realization estimates.
    Realizations,
    /// LPM residuals; used when only one realization is available.
    LpmResidual,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlaEstimate {
    pub fs: f64,
    pub n: usize,
    /// Excited bins with an estimate.
    pub bins: Vec<usize>,
    pub g: Vec<C64>,
    /// Noise plus stochastic nonlinear variance of `g`.
    pub var_total: Vec<f64>,
    /// Noise-only variance of `g`, available with two or more periods.
    pub var_noise: Option<Vec<f64>>,
    /// Generalized transient estimate `T(k)`.
    pub transient: Vec<C64>,
    pub total_source: TotalVarianceSource,
    /// Excited bins whose window stayed rank deficient.
    pub unestimable: Vec<usize>,
    pub realizations: usize,
    pub periods: usize,
}

impl BlaEstimate {
    pub fn freq(&self, k: usize) -> f64 {
        k as f64 * self.fs / self.n as f64
    }

    /// `z_k = exp(j 2 pi k / N)` for every estimated bin.
    pub fn z(&self) -> Vec<C64> {
        self.bins
            .iter()
            .map(|&k| C64::from_polar(1.0, 2.0 * std::f64::consts::PI * k as f64 / self.n as f64))
            .collect()
    }

    /// `bin,freq_hz,re_g,im_g,var_noise,var_total` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        let io = |e| Error::io(path, e);
        writeln!(w, "bin,freq_hz,re_g,im_g,var_noise,var_total").map_err(io)?;
        for (i, &k) in self.bins.iter().enumerate() {
            let vn = self.var_noise.as_ref().map_or(f64::NAN, |v| v[i]);
            writeln!(w, "{k},{},{},{},{vn},{}", self.freq(k), self.g[i].re, self.g[i].im, self.var_total[i]).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Local fit at one centre bin.
#[derive(Debug, Clone, Copy)]
pub struct LocalFit {
    pub bin: usize,
    pub g: C64,
    pub transient: C64,
    /// Residual variance of `Y` within the window.
    pub residual_var: f64,
    /// `[(K^H K)^-1]_00`: maps a per-line output variance to the variance of `g`.
    pub noise_gain: f64,
    /// Indices (into the excited list) of the rows used.
    pub rows: (usize, usize),
}

/// Picks `2 * half + 1` consecutive entries around `i`, shifted inwards at the edges.
fn window(i: usize, half: usize, len: usize) -> (usize, usize) {
    let width = (2 * half + 1).min(len);
    let start = i.saturating_sub(half).min(len - width);
    (start, start + width)
}

fn solve_window(u: &[C64], y: &[C64], excited: &[usize], centre: usize, rows: (usize, usize), order: usize) -> Option<LocalFit> {
    let (lo, hi) = rows;
    let m = hi - lo;
    let np = 2 * (order + 1);
    if m <= np {
        return None;
    }
    let k0 = excited[centre] as f64;
    let span = excited[lo..hi].iter().map(|&k| (k as f64 - k0).abs()).fold(1.0, f64::max);
    let mut kmat = DMatrix::<C64>::zeros(m, np);
    let mut rhs = DMatrix::<C64>::zeros(m, 1);
    for (row, &k) in excited[lo..hi].iter().enumerate() {
        let rho = (k as f64 - k0) / span;
        let mut pw = 1.0;
        for s in 0..=order {
            kmat[(row, s)] = u[k] * pw;
            kmat[(row, order + 1 + s)] = C64::new(pw, 0.0);
            pw *= rho;
        }
        rhs[(row, 0)] = y[k];
    }
    let svd = kmat.clone().svd(true, true);
    let sv = &svd.singular_values;
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(smax > 0.0) || smin <= smax * 1e-10 {
        return None;
    }
    let theta = svd.solve(&rhs, 0.0).ok()?;
    let resid = &rhs - &kmat * &theta;
    let residual_var = resid.iter().map(|v| v.norm_sqr()).sum::<f64>() / (m - np) as f64;
    // [(K^H K)^-1]_00 = sum_i |V_0i|^2 / s_i^2
    let v = svd.v_t.as_ref()?.adjoint();
    let noise_gain = (0..sv.len()).map(|i| v[(0, i)].norm_sqr() / (sv[i] * sv[i])).sum();
    Some(LocalFit {
        bin: excited[centre],
        g: theta[(0, 0)],
        transient: theta[(order + 1, 0)],
        residual_var,
        noise_gain,
        rows,
    })
}

/// LPM on a single input/output spectrum pair over the given excited bins.
/// Returns one entry per excited bin; `None` marks an unestimable bin.
pub fn lpm_spectrum(u: &[C64], y: &[C64], excited: &[usize], cfg: &LpmConfig) -> Result<Vec<Option<LocalFit>>> {
    cfg.validate()?;
    if excited.iter().any(|&k| k >= u.len() || k >= y.len()) {
        return Err(Error::Config("excited bin outside the spectrum".into()));
    }
    let len = excited.len();
    Ok((0..len)
        .into_par_iter()
        .map(|i| {
            (0..=cfg.max_widen).find_map(|extra| {
                let rows = window(i, cfg.half_width + extra, len);
                solve_window(u, y, excited, i, rows, cfg.order)
            })
        })
        .collect())
}

struct RealizationFit {
    fits: Vec<Option<LocalFit>>,
}

fn fit_realizations(spec: &SpectralRecord, cfg: &LpmConfig) -> Result<Vec<RealizationFit>> {
    if spec.realizations() == 0 || spec.periods() == 0 {
        return Err(Error::InsufficientData("empty spectral record".into()));
    }
    let excited = &spec.grid.excited;
    (0..spec.realizations())
        .map(|r| {
            let fits = lpm_spectrum(&spec.mean_u(r), &spec.mean_y(r), excited, cfg)?;
            Ok(RealizationFit { fits })
        })
        .collect()
}

/// Bins estimable in every realization.
fn common_bins(fits: &[RealizationFit], excited: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut ok = Vec::new();
    let mut bad = Vec::new();
    for (i, &k) in excited.iter().enumerate() {
        if fits.iter().all(|f| f.fits[i].is_some()) {
            ok.push(i);
        } else {
            bad.push(k);
        }
    }
    (ok, bad)
}

/// FRF from period-averaged spectra, averaged over realizations. The total
/// variance comes from the LPM residuals.
pub fn lpm_frf(spec: &SpectralRecord, cfg: &LpmConfig) -> Result<BlaEstimate> {
    let fits = fit_realizations(spec, cfg)?;
    let excited = &spec.grid.excited;
    let (ok, unestimable) = common_bins(&fits, excited);
    let m = fits.len() as f64;
    let mut est = BlaEstimate {
        fs: spec.fs,
        n: spec.n,
        bins: Vec::with_capacity(ok.len()),
        g: Vec::with_capacity(ok.len()),
        var_total: Vec::with_capacity(ok.len()),
        var_noise: None,
        transient: Vec::with_capacity(ok.len()),
        total_source: TotalVarianceSource::LpmResidual,
        unestimable,
        realizations: fits.len(),
        periods: spec.periods(),
    };
    for i in ok {
        let local: Vec<&LocalFit> = fits.iter().map(|f| f.fits[i].as_ref().unwrap()).collect();
        est.bins.push(excited[i]);
        est.g.push(local.iter().map(|l| l.g).sum::<C64>() / m);
        est.transient.push(local.iter().map(|l| l.transient).sum::<C64>() / m);
        est.var_total.push(local.iter().map(|l| l.residual_var * l.noise_gain).sum::<f64>() / (m * m));
    }
    Ok(est)
}

/// Robust BLA: LPM on the period averages of each realization. Period-to-period
/// scatter gives `var_noise`; with two or more realizations the scatter of the
/// realization estimates gives `var_total`, which then also contains the
/// stochastic nonlinear contributions. `var_total` is never reported below
/// `var_noise`.
pub fn bla_robust(spec: &SpectralRecord, cfg: &LpmConfig) -> Result<BlaEstimate> {
    let periods = spec.periods();
    if periods < 2 {
        return Err(Error::InsufficientData(format!("robust BLA needs at least 2 periods, got {periods}")));
    }
    let fits = fit_realizations(spec, cfg)?;
    let excited = &spec.grid.excited;
    let (ok, unestimable) = common_bins(&fits, excited);
    let mcount = fits.len();
    let m = mcount as f64;
    let p = periods as f64;
    let var_mean: Vec<Vec<f64>> = (0..mcount)
        .map(|r| period_variance(&spec.y[r], &spec.mean_y(r)).into_iter().map(|v| v / p).collect())
        .collect();

    let mut bins = Vec::new();
    let mut g = Vec::new();
    let mut transient = Vec::new();
    let mut var_noise = Vec::new();
    let mut var_total = Vec::new();
    for i in ok {
        let local: Vec<&LocalFit> = fits.iter().map(|f| f.fits[i].as_ref().unwrap()).collect();
        let gm = local.iter().map(|l| l.g).sum::<C64>() / m;
        let vn = local
            .iter()
            .enumerate()
            .map(|(r, l)| {
                let (lo, hi) = l.rows;
                let window_var = excited[lo..hi].iter().map(|&k| var_mean[r][k]).sum::<f64>() / (hi - lo) as f64;
                window_var * l.noise_gain
            })
            .sum::<f64>()
            / (m * m);
        let vt = if mcount >= 2 {
            local.iter().map(|l| (l.g - gm).norm_sqr()).sum::<f64>() / ((m - 1.0) * m)
        } else {
            local.iter().map(|l| l.residual_var * l.noise_gain).sum::<f64>() / (m * m)
        };
        bins.push(excited[i]);
        g.push(gm);
        transient.push(local.iter().map(|l| l.transient).sum::<C64>() / m);
        var_noise.push(vn);
        var_total.push(vt.max(vn));
    }
    if mcount < 2 {
        log::warn!("single realization: total BLA variance falls back to the LPM residual variance");
    }
    Ok(BlaEstimate {
        fs: spec.fs,
        n: spec.n,
        bins,
        g,
        var_total,
        var_noise: Some(var_noise),
        transient,
        total_source: if mcount >= 2 { TotalVarianceSource::Realizations } else { TotalVarianceSource::LpmResidual },
        unestimable,
        realizations: mcount,
        periods,
    })
}
