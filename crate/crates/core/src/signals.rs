//! Odd-random-phase multisine design.
//!
//! A multisine excites a set of odd DFT bins inside a band with flat (or
//! shaped) amplitudes and uniformly random phases. Some odd bins are left
//! unexcited at random so that odd nonlinear distortion becomes visible on
//! them; the even bins in band serve the same purpose for even distortion.

use crate::error::{Error, Result};
use crate::C64;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridKind {
    /// Every odd bin in band is excited.
    FullOdd,
    /// Random odd bins are omitted per group to serve as odd detection lines.
    OddRandom,
}

/// Amplitude shape applied before rms scaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AmplitudeProfile {
    Flat,
    /// `A(f) = (f / f_lo)^exponent`.
    PowerLaw { exponent: f64 },
}

impl AmplitudeProfile {
    pub fn amplitude(&self, freq: f64, f_lo: f64) -> f64 {
        match *self {
            AmplitudeProfile::Flat => 1.0,
            AmplitudeProfile::PowerLaw { exponent } => (freq / f_lo).powf(exponent),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MultisineSpec {
    /// Sample frequency in Hz.
    pub fs: f64,
    /// Samples per period.
    pub n: usize,
    /// Excitation band `[f_lo, f_hi]` in Hz.
    pub band: [f64; 2],
    pub grid_kind: GridKind,
    pub group_size: usize,
    pub omit_per_group: usize,
    pub amplitude_profile: AmplitudeProfile,
    /// Desired time-domain rms; `None` leaves the raw amplitudes untouched.
    pub target_rms: Option<f64>,
    pub seed: u64,
}

impl Default for MultisineSpec {
    fn default() -> Self {
        Self {
            fs: 50.0,
            n: 5000,
            band: [1.0, 5.0],
            grid_kind: GridKind::OddRandom,
            group_size: 4,
            omit_per_group: 1,
            amplitude_profile: AmplitudeProfile::Flat,
            target_rms: Some(20.0),
            seed: 0,
        }
    }
}

impl MultisineSpec {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.band;
        if !(self.fs > 0.0 && self.fs.is_finite()) {
            return Err(Error::Config(format!("fs must be positive, got {}", self.fs)));
        }
        if self.n < 4 {
            return Err(Error::Config(format!("n must be at least 4, got {}", self.n)));
        }
        if !(lo > 0.0) {
            return Err(Error::Config(format!("band lower edge must be > 0, got {lo}")));
        }
        if !(hi < self.fs / 2.0) {
            return Err(Error::Config(format!("band upper edge {hi} must be below fs/2 = {}", self.fs / 2.0)));
        }
        if lo > hi {
            return Err(Error::Config(format!("band [{lo}, {hi}] is reversed")));
        }
        if self.group_size == 0 {
            return Err(Error::Config("group_size must be at least 1".into()));
        }
        if self.omit_per_group >= self.group_size {
            return Err(Error::Config(format!(
                "omit_per_group ({}) must be smaller than group_size ({})",
                self.omit_per_group, self.group_size
            )));
        }
        if let Some(r) = self.target_rms {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::Config(format!("target_rms must be positive, got {r}")));
            }
        }
        Ok(())
    }

    /// Frequency resolution `fs / N`.
    pub fn resolution(&self) -> f64 {
        self.fs / self.n as f64
    }

    pub fn bin_freq(&self, k: usize) -> f64 {
        k as f64 * self.resolution()
    }

    /// Bins `k >= 1` whose frequency lies inside the band.
    pub fn band_bins(&self) -> std::ops::RangeInclusive<usize> {
        let df = self.resolution();
        let eps = 1e-9;
        let lo = ((self.band[0] / df) - eps).ceil().max(1.0) as usize;
        let hi = ((self.band[1] / df) + eps).floor().min((self.n / 2) as f64) as usize;
        lo..=hi
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// Classification of one DFT bin relative to a harmonic grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LineClass {
    Dc,
    Excited,
    OddDetect,
    EvenDetect,
    OutOfBand,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HarmonicGrid {
    /// Samples per period the bins refer to.
    pub n: usize,
    pub excited: Vec<usize>,
    pub odd_detect: Vec<usize>,
    pub even_detect: Vec<usize>,
}

impl HarmonicGrid {
    pub fn n_k(&self) -> usize {
        self.excited.len()
    }

    pub fn class_of(&self, k: usize) -> LineClass {
        if k == 0 {
            LineClass::Dc
        } else if self.excited.binary_search(&k).is_ok() {
            LineClass::Excited
        } else if self.odd_detect.binary_search(&k).is_ok() {
            LineClass::OddDetect
        } else if self.even_detect.binary_search(&k).is_ok() {
            LineClass::EvenDetect
        } else {
            LineClass::OutOfBand
        }
    }

    /// All in-band bins (excited and detection), sorted.
    pub fn in_band(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.excited.iter().chain(&self.odd_detect).chain(&self.even_detect).copied().collect();
        all.sort_unstable();
        all
    }

    /// Checks the structural invariants; used when a grid is loaded from disk.
    pub fn check(&self) -> Result<()> {
        for list in [&self.excited, &self.odd_detect, &self.even_detect] {
            if list.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Format("grid bin lists must be strictly increasing".into()));
            }
            if list.iter().any(|&k| k == 0 || k > self.n / 2) {
                return Err(Error::Format(format!("grid bin outside 1..={}", self.n / 2)));
            }
        }
        if self.excited.iter().any(|k| k % 2 == 0) || self.odd_detect.iter().any(|k| k % 2 == 0) {
            return Err(Error::Format("excited and odd-detection bins must be odd".into()));
        }
        if self.even_detect.iter().any(|k| k % 2 == 1) {
            return Err(Error::Format("even-detection bins must be even".into()));
        }
        if self.excited.iter().any(|k| self.odd_detect.binary_search(k).is_ok()) {
            return Err(Error::Format("excited and odd-detection bins overlap".into()));
        }
        Ok(())
    }
}

/// Builds the harmonic grid. Within each run of `group_size` consecutive
/// in-band odd bins, `omit_per_group` are chosen uniformly at random and left
/// unexcited. A trailing partial group of length `L` omits
/// `floor(omit_per_group * L / group_size)` bins.
pub fn build_grid(spec: &MultisineSpec) -> Result<HarmonicGrid> {
    spec.validate()?;
    let band = spec.band_bins();
    let odd: Vec<usize> = band.clone().filter(|k| k % 2 == 1).collect();
    if odd.is_empty() {
        return Err(Error::Config(format!(
            "band [{}, {}] Hz contains no odd bins at resolution {} Hz",
            spec.band[0],
            spec.band[1],
            spec.resolution()
        )));
    }
    let even_detect: Vec<usize> = band.filter(|k| k % 2 == 0).collect();

    let mut excited = Vec::with_capacity(odd.len());
    let mut odd_detect = Vec::new();
    match spec.grid_kind {
        GridKind::FullOdd => excited = odd,
        GridKind::OddRandom => {
            let mut rng = spec.rng(0);
            for group in odd.chunks(spec.group_size) {
                let omit = spec.omit_per_group * group.len() / spec.group_size;
                let mut drop = vec![false; group.len()];
                for i in sample(&mut rng, group.len(), omit) {
                    drop[i] = true;
                }
                for (&k, d) in group.iter().zip(drop) {
                    if d {
                        odd_detect.push(k)
                    } else {
                        excited.push(k)
                    }
                }
            }
        }
    }
    Ok(HarmonicGrid { n: spec.n, excited, odd_detect, even_detect })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcitationSignal {
    pub spec: MultisineSpec,
    pub grid: HarmonicGrid,
    pub realization: usize,
    /// Phase per excited line, uniform on `[0, 2pi)`.
    pub phases: Vec<f64>,
    /// Per-line cosine amplitude after rms scaling.
    pub amplitudes: Vec<f64>,
    /// One period of the time signal.
    pub samples: Vec<f64>,
    pub realized_rms: f64,
}

impl ExcitationSignal {
    /// Repeats the period `periods` times.
    pub fn tiled(&self, periods: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.samples.len() * periods);
        for _ in 0..periods {
            out.extend_from_slice(&self.samples);
        }
        out
    }
}

pub(crate) fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

/// Sum of cosines `A(k) cos(2 pi k t / N + phi_k)` evaluated by one inverse FFT.
pub fn multisine_from_lines(n: usize, bins: &[usize], amplitudes: &[f64], phases: &[f64]) -> Vec<f64> {
    let mut buf = vec![C64::new(0.0, 0.0); n];
    for ((&k, &a), &p) in bins.iter().zip(amplitudes).zip(phases) {
        buf[k] += C64::from_polar(a, p);
    }
    FftPlanner::new().plan_fft_inverse(n).process(&mut buf);
    buf.into_iter().map(|v| v.re).collect()
}

fn synthesize_realization(spec: &MultisineSpec, grid: &HarmonicGrid, realization: usize) -> ExcitationSignal {
    let mut rng = spec.rng(realization as u64 + 1);
    let phases: Vec<f64> = grid.excited.iter().map(|_| rng.random::<f64>() * 2.0 * PI).collect();
    let mut amplitudes: Vec<f64> = grid
        .excited
        .iter()
        .map(|&k| spec.amplitude_profile.amplitude(spec.bin_freq(k), spec.band[0]))
        .collect();
    let mut samples = multisine_from_lines(spec.n, &grid.excited, &amplitudes, &phases);
    if let Some(target) = spec.target_rms {
        let current = rms(&samples);
        if current > 0.0 {
            let g = target / current;
            samples.iter_mut().for_each(|v| *v *= g);
            amplitudes.iter_mut().for_each(|a| *a *= g);
        }
    }
    let realized_rms = rms(&samples);
    ExcitationSignal {
        spec: spec.clone(),
        grid: grid.clone(),
        realization,
        phases,
        amplitudes,
        samples,
        realized_rms,
    }
}

/// One period of the multisine for the first phase realization.
pub fn synthesize(spec: &MultisineSpec, grid: &HarmonicGrid) -> Result<ExcitationSignal> {
    spec.validate()?;
    if grid.n != spec.n {
        return Err(Error::Config(format!("grid built for N = {} but spec has N = {}", grid.n, spec.n)));
    }
    Ok(synthesize_realization(spec, grid, 0))
}

/// `count` phase realizations on a shared grid. Realization `r` draws its
/// phases from an RNG stream derived from `(seed, r)`, so realization 0 equals
/// [`synthesize`].
pub fn realizations(spec: &MultisineSpec, count: usize) -> Result<Vec<ExcitationSignal>> {
    if count == 0 {
        return Err(Error::Config("realization count must be at least 1".into()));
    }
    let grid = build_grid(spec)?;
    Ok((0..count).map(|r| synthesize_realization(spec, &grid, r)).collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LineInfo {
    pub bin: usize,
    pub freq_hz: f64,
    pub amplitude: f64,
    pub phase: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RealizationLines {
    pub index: usize,
    pub rms: f64,
    pub lines: Vec<LineInfo>,
}

/// On-disk grid description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridFile {
    pub fs: f64,
    pub n: usize,
    pub band: [f64; 2],
    pub excited: Vec<usize>,
    pub odd_detect: Vec<usize>,
    pub even_detect: Vec<usize>,
    #[serde(default)]
    pub realizations: Vec<RealizationLines>,
}

impl GridFile {
    pub fn new(spec: &MultisineSpec, signals: &[ExcitationSignal]) -> Self {
        let grid = signals.first().map(|s| s.grid.clone()).unwrap_or_else(|| HarmonicGrid {
            n: spec.n,
            excited: vec![],
            odd_detect: vec![],
            even_detect: vec![],
        });
        let realizations = signals
            .iter()
            .map(|s| RealizationLines {
                index: s.realization,
                rms: s.realized_rms,
                lines: s
                    .grid
                    .excited
                    .iter()
                    .zip(&s.amplitudes)
                    .zip(&s.phases)
                    .map(|((&bin, &amplitude), &phase)| LineInfo { bin, freq_hz: spec.bin_freq(bin), amplitude, phase })
                    .collect(),
            })
            .collect();
        Self {
            fs: spec.fs,
            n: spec.n,
            band: spec.band,
            excited: grid.excited,
            odd_detect: grid.odd_detect,
            even_detect: grid.even_detect,
            realizations,
        }
    }

    pub fn grid(&self) -> Result<HarmonicGrid> {
        let g = HarmonicGrid {
            n: self.n,
            excited: self.excited.clone(),
            odd_detect: self.odd_detect.clone(),
            even_detect: self.even_detect.clone(),
        };
        g.check()?;
        Ok(g)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
    }
}

/// Writes `sample_index,value` rows.
pub fn write_signal_csv(path: &Path, samples: &[f64]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    writeln!(w, "sample_index,value").map_err(|e| Error::io(path, e))?;
    for (i, v) in samples.iter().enumerate() {
        writeln!(w, "{i},{v}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
