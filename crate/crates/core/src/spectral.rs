//! Multi-period spectra and nonparametric distortion analysis.
//!
//! Each period of a steady-state record is transformed separately. The
//! period-to-period scatter gives the noise level; the period average on the
//! detection lines gives the even and odd nonlinear distortion levels.

use crate::dft::rfft_unitary_many;
use crate::error::{Error, Result};
use crate::signals::{HarmonicGrid, LineClass};
use crate::C64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Input/output samples laid out as `(realization, period, sample)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeRecord {
    pub u: Vec<f64>,
    pub y: Vec<f64>,
    pub fs: f64,
    /// Samples per period.
    pub n: usize,
    pub periods: usize,
    pub realizations: usize,
}

impl TimeRecord {
    pub fn validate(&self) -> Result<()> {
        let expected = self.realizations * self.periods * self.n;
        if self.n == 0 || self.periods == 0 || self.realizations == 0 {
            return Err(Error::Format("record dimensions must be nonzero".into()));
        }
        if self.u.len() != expected || self.y.len() != expected {
            return Err(Error::Format(format!(
                "record holds {} input / {} output samples, expected R*P*N = {}*{}*{} = {expected}",
                self.u.len(),
                self.y.len(),
                self.realizations,
                self.periods,
                self.n
            )));
        }
        Ok(())
    }

    fn offset(&self, r: usize, p: usize) -> usize {
        (r * self.periods + p) * self.n
    }

    pub fn u_period(&self, r: usize, p: usize) -> &[f64] {
        let o = self.offset(r, p);
        &self.u[o..o + self.n]
    }

    pub fn y_period(&self, r: usize, p: usize) -> &[f64] {
        let o = self.offset(r, p);
        &self.y[o..o + self.n]
    }

    pub fn u_realization(&self, r: usize) -> &[f64] {
        let o = self.offset(r, 0);
        &self.u[o..o + self.n * self.periods]
    }

    pub fn y_realization(&self, r: usize) -> &[f64] {
        let o = self.offset(r, 0);
        &self.y[o..o + self.n * self.periods]
    }

    /// Drops the first `skip` periods of every realization.
    pub fn skip_periods(&self, skip: usize) -> Result<TimeRecord> {
        self.validate()?;
        if skip >= self.periods {
            return Err(Error::InsufficientData(format!(
                "cannot skip {skip} of {} periods",
                self.periods
            )));
        }
        self.select_periods(skip..self.periods)
    }

    /// Keeps the given period range of every realization.
    pub fn select_periods(&self, range: std::ops::Range<usize>) -> Result<TimeRecord> {
        if range.is_empty() || range.end > self.periods {
            return Err(Error::InsufficientData(format!("invalid period range {range:?} of {}", self.periods)));
        }
        let mut u = Vec::with_capacity(self.realizations * range.len() * self.n);
        let mut y = Vec::with_capacity(u.capacity());
        for r in 0..self.realizations {
            for p in range.clone() {
                u.extend_from_slice(self.u_period(r, p));
                y.extend_from_slice(self.y_period(r, p));
            }
        }
        Ok(TimeRecord { u, y, fs: self.fs, n: self.n, periods: range.len(), realizations: self.realizations })
    }

    /// Keeps one realization.
    pub fn select_realization(&self, r: usize) -> TimeRecord {
        TimeRecord {
            u: self.u_realization(r).to_vec(),
            y: self.y_realization(r).to_vec(),
            fs: self.fs,
            n: self.n,
            periods: self.periods,
            realizations: 1,
        }
    }

    /// Period-averaged record: one period per realization.
    pub fn period_average(&self) -> TimeRecord {
        let mut u = vec![0.0; self.realizations * self.n];
        let mut y = vec![0.0; self.realizations * self.n];
        let scale = 1.0 / self.periods as f64;
        for r in 0..self.realizations {
            for p in 0..self.periods {
                let (up, yp) = (self.u_period(r, p), self.y_period(r, p));
                for t in 0..self.n {
                    u[r * self.n + t] += up[t] * scale;
                    y[r * self.n + t] += yp[t] * scale;
                }
            }
        }
        TimeRecord { u, y, fs: self.fs, n: self.n, periods: 1, realizations: self.realizations }
    }
}

/// Spectra indexed `[realization][period][bin]`, one-sided, `1/sqrt(N)` scaled.
#[derive(Debug, Clone)]
pub struct SpectralRecord {
    pub u: Vec<Vec<Vec<C64>>>,
    pub y: Vec<Vec<Vec<C64>>>,
    pub grid: HarmonicGrid,
    pub fs: f64,
    pub n: usize,
}

impl SpectralRecord {
    pub fn realizations(&self) -> usize {
        self.y.len()
    }

    pub fn periods(&self) -> usize {
        self.y.first().map_or(0, |r| r.len())
    }

    pub fn bins(&self) -> usize {
        self.n / 2 + 1
    }

    pub fn freq(&self, k: usize) -> f64 {
        k as f64 * self.fs / self.n as f64
    }

    fn mean_over_periods(spectra: &[Vec<C64>]) -> Vec<C64> {
        let p = spectra.len() as f64;
        let mut acc = vec![C64::new(0.0, 0.0); spectra[0].len()];
        for s in spectra {
            for (a, v) in acc.iter_mut().zip(s) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= p);
        acc
    }

    /// Period-averaged input spectrum of realization `r`.
    pub fn mean_u(&self, r: usize) -> Vec<C64> {
        Self::mean_over_periods(&self.u[r])
    }

    /// Period-averaged output spectrum of realization `r`.
    pub fn mean_y(&self, r: usize) -> Vec<C64> {
        Self::mean_over_periods(&self.y[r])
    }
}

/// Per-period DFTs of every realization. Bin `k` is frequency `k * fs / N`.
pub fn to_spectra(rec: &TimeRecord, grid: &HarmonicGrid) -> Result<SpectralRecord> {
    rec.validate()?;
    if grid.n != rec.n {
        return Err(Error::Format(format!("grid has N = {} but record has N = {}", grid.n, rec.n)));
    }
    let per_real = |x: &[f64]| -> Vec<Vec<C64>> { rfft_unitary_many(x.chunks_exact(rec.n), rec.n) };
    let (u, y): (Vec<_>, Vec<_>) = (0..rec.realizations)
        .into_par_iter()
        .map(|r| (per_real(rec.u_realization(r)), per_real(rec.y_realization(r))))
        .unzip();
    Ok(SpectralRecord { u, y, grid: grid.clone(), fs: rec.fs, n: rec.n })
}

/// Output noise variance per bin.
#[derive(Debug, Clone)]
pub struct NoiseVariance {
    /// Sample variance of a single period's spectrum, pooled over realizations.
    pub per_period: Vec<f64>,
    /// Variance of the period-averaged spectrum (`per_period / P`).
    pub of_mean: Vec<f64>,
    /// `of_mean` for each realization separately.
    pub per_realization: Vec<Vec<f64>>,
    pub periods: usize,
}

/// Sample variance over periods of `spectra[p][k]`, normalized by `P - 1`.
pub(crate) fn period_variance(spectra: &[Vec<C64>], mean: &[C64]) -> Vec<f64> {
    let p = spectra.len();
    let mut var = vec![0.0; mean.len()];
    for s in spectra {
        for ((v, x), m) in var.iter_mut().zip(s).zip(mean) {
            *v += (x - m).norm_sqr();
        }
    }
    var.iter_mut().for_each(|v| *v /= (p - 1) as f64);
    var
}

pub fn noise_variance(spec: &SpectralRecord) -> Result<NoiseVariance> {
    let periods = spec.periods();
    if periods < 2 {
        return Err(Error::InsufficientData(format!("noise variance needs at least 2 periods, got {periods}")));
    }
    let per_realization_pp: Vec<Vec<f64>> = (0..spec.realizations())
        .map(|r| period_variance(&spec.y[r], &spec.mean_y(r)))
        .collect();
    let bins = spec.bins();
    let m = spec.realizations() as f64;
    let mut per_period = vec![0.0; bins];
    for v in &per_realization_pp {
        for (a, b) in per_period.iter_mut().zip(v) {
            *a += b / m;
        }
    }
    let p = periods as f64;
    Ok(NoiseVariance {
        of_mean: per_period.iter().map(|v| v / p).collect(),
        per_realization: per_realization_pp.iter().map(|v| v.iter().map(|x| x / p).collect()).collect(),
        per_period,
        periods,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistortionOptions {
    /// A class is significant when its mean power exceeds the noise by this margin.
    pub margin_db: f64,
    /// Leading periods discarded before the analysis (recorded in the report).
    pub transient_skip: usize,
}

impl Default for DistortionOptions {
    fn default() -> Self {
        Self { margin_db: 6.0, transient_skip: 1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinLevel {
    pub bin: usize,
    pub freq_hz: f64,
    pub class: LineClass,
    /// `|mean_p Y|^2`, averaged over realizations.
    pub power: f64,
    /// Variance of the period-averaged spectrum.
    pub noise: f64,
    pub power_db: f64,
    pub noise_db: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: LineClass,
    pub count: usize,
    pub mean_power: f64,
    pub mean_noise: f64,
    pub mean_power_db: f64,
    pub mean_noise_db: f64,
    /// `mean_power_db - mean_noise_db`.
    pub excess_db: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Behaviour {
    Linear,
    Even,
    Odd,
    EvenDominant,
    OddDominant,
}

impl Behaviour {
    pub fn label(&self) -> &'static str {
        match self {
            Behaviour::Linear => "linear",
            Behaviour::Even => "even",
            Behaviour::Odd => "odd",
            Behaviour::EvenDominant => "even+odd, even dominant",
            Behaviour::OddDominant => "even+odd, odd dominant",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassLevels {
    pub bins: Vec<BinLevel>,
    pub excited: ClassSummary,
    pub odd_detect: Option<ClassSummary>,
    pub even_detect: Option<ClassSummary>,
    pub behaviour: Behaviour,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistortionReport {
    pub fs: f64,
    pub n: usize,
    pub periods: usize,
    pub transient_skip: usize,
    pub margin_db: f64,
    /// Levels pooled over realizations.
    pub pooled: ClassLevels,
    pub per_realization: Vec<ClassLevels>,
}

impl DistortionReport {
    fn class_powers(&self, class: LineClass) -> Vec<(usize, f64)> {
        self.pooled.bins.iter().filter(|b| b.class == class).map(|b| (b.bin, b.power)).collect()
    }

    pub fn linear_power(&self) -> Vec<(usize, f64)> {
        self.class_powers(LineClass::Excited)
    }

    pub fn even_nl_power(&self) -> Vec<(usize, f64)> {
        self.class_powers(LineClass::EvenDetect)
    }

    pub fn odd_nl_power(&self) -> Vec<(usize, f64)> {
        self.class_powers(LineClass::OddDetect)
    }

    pub fn behaviour(&self) -> Behaviour {
        self.pooled.behaviour
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    /// `bin,freq_hz,class,power_db,noise_db` rows for plotting.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        let io = |e| Error::io(path, e);
        writeln!(w, "bin,freq_hz,class,power_db,noise_db").map_err(io)?;
        for b in &self.pooled.bins {
            let class = serde_json::to_value(b.class)?;
            writeln!(w, "{},{},{},{},{}", b.bin, b.freq_hz, class.as_str().unwrap_or(""), b.power_db, b.noise_db)
                .map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

fn db(p: f64) -> f64 {
    10.0 * p.max(1e-300).log10()
}

fn summarize(class: LineClass, bins: &[BinLevel], floor: f64, margin_db: f64) -> Option<ClassSummary> {
    let sel: Vec<&BinLevel> = bins.iter().filter(|b| b.class == class).collect();
    if sel.is_empty() {
        return None;
    }
    let count = sel.len();
    let mean_power = sel.iter().map(|b| b.power).sum::<f64>() / count as f64;
    let mean_noise = sel.iter().map(|b| b.noise).sum::<f64>() / count as f64;
    let excess_db = db(mean_power) - db(mean_noise.max(floor));
    Some(ClassSummary {
        class,
        count,
        mean_power,
        mean_noise,
        mean_power_db: db(mean_power),
        mean_noise_db: db(mean_noise),
        excess_db,
        significant: excess_db > margin_db,
    })
}

fn class_levels(spec: &SpectralRecord, power: &[f64], noise: &[f64], margin_db: f64) -> ClassLevels {
    let grid = &spec.grid;
    let bins: Vec<BinLevel> = grid
        .in_band()
        .into_iter()
        .map(|k| BinLevel {
            bin: k,
            freq_hz: spec.freq(k),
            class: grid.class_of(k),
            power: power[k],
            noise: noise[k],
            power_db: db(power[k]),
            noise_db: db(noise[k]),
        })
        .collect();
    let excited_mean = grid.excited.iter().map(|&k| power[k]).sum::<f64>() / grid.n_k().max(1) as f64;
    // noiseless data: judge against a -220 dB floor relative to the excited lines
    let floor = excited_mean * 1e-22;
    let excited = summarize(LineClass::Excited, &bins, floor, margin_db).unwrap_or(ClassSummary {
        class: LineClass::Excited,
        count: 0,
        mean_power: 0.0,
        mean_noise: 0.0,
        mean_power_db: db(0.0),
        mean_noise_db: db(0.0),
        excess_db: 0.0,
        significant: false,
    });
    let odd_detect = summarize(LineClass::OddDetect, &bins, floor, margin_db);
    let even_detect = summarize(LineClass::EvenDetect, &bins, floor, margin_db);
    let odd_sig = odd_detect.as_ref().is_some_and(|s| s.significant);
    let even_sig = even_detect.as_ref().is_some_and(|s| s.significant);
    let behaviour = match (even_sig, odd_sig) {
        (false, false) => Behaviour::Linear,
        (true, false) => Behaviour::Even,
        (false, true) => Behaviour::Odd,
        (true, true) => {
            let e = even_detect.as_ref().map_or(0.0, |s| s.mean_power);
            let o = odd_detect.as_ref().map_or(0.0, |s| s.mean_power);
            if e >= o {
                Behaviour::EvenDominant
            } else {
                Behaviour::OddDominant
            }
        }
    };
    ClassLevels { bins, excited, odd_detect, even_detect, behaviour }
}

/// Linear, even and odd distortion levels on their line classes, each compared
/// against the noise level of the period-averaged spectrum.
pub fn distortion_analysis(spec: &SpectralRecord, opts: &DistortionOptions) -> Result<DistortionReport> {
    let nv = noise_variance(spec)?;
    let m = spec.realizations();
    let bins = spec.bins();
    let mut pooled_power = vec![0.0; bins];
    let mut per_realization = Vec::with_capacity(m);
    for r in 0..m {
        let power: Vec<f64> = spec.mean_y(r).iter().map(|v| v.norm_sqr()).collect();
        for (a, p) in pooled_power.iter_mut().zip(&power) {
            *a += p / m as f64;
        }
        per_realization.push(class_levels(spec, &power, &nv.per_realization[r], opts.margin_db));
    }
    let pooled = class_levels(spec, &pooled_power, &nv.of_mean, opts.margin_db);
    Ok(DistortionReport {
        fs: spec.fs,
        n: spec.n,
        periods: spec.periods(),
        transient_skip: opts.transient_skip,
        margin_db: opts.margin_db,
        pooled,
        per_realization,
    })
}

/// Skips `opts.transient_skip` periods, transforms and analyzes.
pub fn analyze_record(rec: &TimeRecord, grid: &HarmonicGrid, opts: &DistortionOptions) -> Result<DistortionReport> {
    let steady = if opts.transient_skip > 0 { rec.skip_periods(opts.transient_skip)? } else { rec.clone() };
    distortion_analysis(&to_spectra(&steady, grid)?, opts)
}

/// Time-domain energy recovered from a one-sided unitary spectrum of an `n`-sample block.
pub fn one_sided_energy(spectrum: &[C64], n: usize) -> f64 {
    spectrum
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let w = if k == 0 || (n % 2 == 0 && k == n / 2) { 1.0 } else { 2.0 };
            w * v.norm_sqr()
        })
        .sum()
}
