//! Pipeline orchestration behind the `nlid` binary.
//!
//! Every subcommand resolves a [`PipelineConfig`] from defaults, an optional
//! TOML file and command-line overrides, runs deterministically for a fixed
//! seed, and writes its artifacts plus a `manifest.json` into the output
//! directory (`--out`, else `NLID_OUT`, else the config, else `nlid-out`).

use crate::bench::{export_csv, ingest_csv, simulate_cell, RecordMeta, SyntheticCell};
use crate::dft::rfft_unitary;
use crate::error::{Error, Result};
use crate::linmodel::{
    balanced_realization, fit_rational, mdl_select, ml_refine, BalancedRealization, MdlSelection, RationalFit,
    StateSpaceModel,
};
use crate::lm::LmOptions;
use crate::lpm::{bla_robust, BlaEstimate, LpmConfig};
use crate::pnlss::{self, fit, from_linear, init_from_linear, FitOptions, FitReport, PnlssModel};
use crate::signals::{realizations, write_signal_csv, GridFile, HarmonicGrid, MultisineSpec};
use crate::spectral::{analyze_record, to_spectra, DistortionOptions, DistortionReport, TimeRecord};
use crate::trend::{detrend_record, write_trend_csv, LambdaPolicy};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrendConfig {
    pub enabled: bool,
    pub policy: LambdaPolicy,
}

impl Default for TrendConfig {
    fn default() -> Self {
        Self { enabled: true, policy: LambdaPolicy::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Largest numerator/denominator order scanned by MDL.
    pub max_order: usize,
    /// Monomial degrees of the nonlinear state and output maps.
    pub degrees: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { max_order: 4, degrees: vec![2, 3] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Master seed: excitation phases, line selection and synthetic noise.
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub signal: MultisineSpec,
    pub periods: usize,
    pub realizations: usize,
    /// Synthetic cell preset used by `simulate`.
    pub preset: String,
    /// Measured record for `ingest`, `analyze`, `identify` and `validate`.
    pub input: Option<PathBuf>,
    /// Grid file from `design`; otherwise the grid is rebuilt from `signal`.
    pub grid: Option<PathBuf>,
    pub lpm: LpmConfig,
    pub analysis: DistortionOptions,
    pub trend: TrendConfig,
    pub model: ModelConfig,
    pub fit: FitOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: None,
            signal: MultisineSpec::default(),
            periods: 20,
            realizations: 2,
            preset: "soc10".into(),
            input: None,
            grid: None,
            lpm: LpmConfig::default(),
            analysis: DistortionOptions::default(),
            trend: TrendConfig::default(),
            model: ModelConfig::default(),
            fit: FitOptions::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Checks every section and the cross-field rules.
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, e: Error| match e {
            Error::Config(m) => Error::Config(format!("{name}: {m}")),
            other => other,
        };
        self.signal.validate().map_err(|e| field("signal", e))?;
        self.lpm.validate().map_err(|e| field("lpm", e))?;
        if self.periods == 0 {
            return Err(Error::Config("periods: must be >= 1".into()));
        }
        if self.realizations == 0 {
            return Err(Error::Config("realizations: must be >= 1".into()));
        }
        if self.analysis.transient_skip >= self.periods {
            return Err(Error::Config(format!(
                "analysis.transient_skip: {} leaves no periods out of {}",
                self.analysis.transient_skip, self.periods
            )));
        }
        if !(self.analysis.margin_db.is_finite()) {
            return Err(Error::Config("analysis.margin_db: must be finite".into()));
        }
        match self.trend.policy {
            LambdaPolicy::Absolute(v) | LambdaPolicy::FractionOfMax(v) if !(v >= 0.0 && v.is_finite()) => {
                return Err(Error::Config(format!("trend.policy: weight {v} must be finite and >= 0")));
            }
            LambdaPolicy::SubBand { below_bin, margin_db }
                if below_bin < 2 || below_bin > self.signal.n / 2 || !margin_db.is_finite() =>
            {
                return Err(Error::Config(format!(
                    "trend.policy: sub-band edge {below_bin} must lie in 2..={} with a finite margin",
                    self.signal.n / 2
                )));
            }
            _ => {}
        }
        if self.model.max_order == 0 {
            return Err(Error::Config("model.max_order: must be >= 1".into()));
        }
        if let Some(d) = self.model.degrees.iter().find(|d| **d < 2) {
            return Err(Error::Config(format!("model.degrees: degree {d} is below 2")));
        }
        if self.fit.max_iter == 0 {
            return Err(Error::Config("fit.max_iter: must be >= 1".into()));
        }
        if !(self.fit.lambda_init > 0.0 && self.fit.lambda_up > 1.0 && self.fit.lambda_down > 0.0 && self.fit.lambda_down < 1.0) {
            return Err(Error::Config("fit: need lambda_init > 0, lambda_up > 1 and 0 < lambda_down < 1".into()));
        }
        Ok(())
    }

    /// Signal spec with the master seed applied.
    pub fn spec(&self) -> MultisineSpec {
        MultisineSpec { seed: self.seed, ..self.signal.clone() }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).unwrap_or_default();
        hex::encode(Sha256::digest(json))
    }
}

/// Model comparison on held-out periods.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Comparison {
    pub periods: usize,
    /// Plain rms of the output error.
    pub linear_rmse: f64,
    pub pnlss_rmse: f64,
    /// Rms of the output error with its mean removed; the ratio uses these.
    pub linear_rms: f64,
    pub pnlss_rms: f64,
    /// `pnlss_rms / linear_rms`.
    pub ratio: f64,
    /// `20 log10(linear_rms / pnlss_rms)`.
    pub improvement_db: f64,
    pub output_rms: f64,
    pub spectrum: Vec<ErrorLine>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorLine {
    pub bin: usize,
    pub freq_hz: f64,
    pub output_db: f64,
    pub linear_db: f64,
    pub pnlss_db: f64,
}

impl Comparison {
    pub fn linear_adequate(&self) -> bool {
        self.improvement_db < 3.0
    }

    /// CSV with columns `bin,freq_hz,output_db,linear_error_db,pnlss_error_db`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        w.write_record(["bin", "freq_hz", "output_db", "linear_error_db", "pnlss_error_db"])?;
        for l in &self.spectrum {
            w.write_record([
                l.bin.to_string(),
                l.freq_hz.to_string(),
                l.output_db.to_string(),
                l.linear_db.to_string(),
                l.pnlss_db.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn db(p: f64) -> f64 {
    10.0 * p.max(1e-300).log10()
}

fn ac_rms(err: &[Vec<f64>]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0;
    for e in err {
        let mean = e.iter().sum::<f64>() / e.len() as f64;
        sum += e.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
        count += e.len();
    }
    (sum / count as f64).sqrt()
}

fn mean_power_spectrum(blocks: &[Vec<f64>]) -> Vec<f64> {
    let mut acc: Vec<f64> = Vec::new();
    for b in blocks {
        let s = rfft_unitary(b);
        if acc.is_empty() {
            acc = vec![0.0; s.len()];
        }
        for (a, v) in acc.iter_mut().zip(&s) {
            *a += v.norm_sqr() / blocks.len() as f64;
        }
    }
    acc
}

/// Compares a linear model and a PNLSS model on `data` (steady-state periods).
pub fn compare_models(linear: &PnlssModel, model: &PnlssModel, data: &TimeRecord, transient_periods: usize) -> Result<Comparison> {
    let e_lin = pnlss::output_error(linear, data, transient_periods)?;
    let e_nl = pnlss::output_error(model, data, transient_periods)?;
    let rms_all = |e: &[Vec<f64>]| {
        let n: usize = e.iter().map(Vec::len).sum();
        (e.iter().flatten().map(|v| v * v).sum::<f64>() / n as f64).sqrt()
    };
    let avg = data.period_average();
    let outputs: Vec<Vec<f64>> = (0..avg.realizations).map(|r| avg.y_realization(r).to_vec()).collect();
    let (p_out, p_lin, p_nl) = (mean_power_spectrum(&outputs), mean_power_spectrum(&e_lin), mean_power_spectrum(&e_nl));
    let spectrum = (1..p_out.len())
        .map(|k| ErrorLine {
            bin: k,
            freq_hz: k as f64 * data.fs / data.n as f64,
            output_db: db(p_out[k]),
            linear_db: db(p_lin[k]),
            pnlss_db: db(p_nl[k]),
        })
        .collect();
    let (linear_rms, pnlss_rms) = (ac_rms(&e_lin), ac_rms(&e_nl));
    Ok(Comparison {
        periods: data.periods,
        linear_rmse: rms_all(&e_lin),
        pnlss_rmse: rms_all(&e_nl),
        linear_rms,
        pnlss_rms,
        ratio: pnlss_rms / linear_rms,
        improvement_db: 20.0 * (linear_rms / pnlss_rms).log10(),
        output_rms: ac_rms(&outputs),
        spectrum,
    })
}

/// Everything produced by [`identify`].
#[derive(Debug, Clone)]
pub struct Identification {
    pub record: TimeRecord,
    pub trend_lambdas: Vec<f64>,
    pub bla: BlaEstimate,
    pub mdl: MdlSelection,
    pub rational: RationalFit,
    pub balanced: BalancedRealization,
    pub linear: StateSpaceModel,
    pub ml_cost: (f64, f64),
    pub pnlss: PnlssModel,
    pub fit: FitReport,
    pub estimation_periods: usize,
    pub comparison: Comparison,
    pub trends: Vec<crate::trend::TrendResult>,
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{name}: {m}")),
        Error::Format(m) => Error::Format(format!("{name}: {m}")),
        Error::InsufficientData(m) => Error::InsufficientData(format!("{name}: {m}")),
        Error::Numerical(m) => Error::Numerical(format!("{name}: {m}")),
        other => {
            log::error!("stage {name} failed");
            other
        }
    })
}

/// Detrend, BLA, MDL rational fit, balanced realization, ML refinement and
/// PNLSS fit on `record`, followed by a linear-versus-PNLSS comparison on the
/// held-out trailing periods.
pub fn identify(record: &TimeRecord, grid: &HarmonicGrid, cfg: &PipelineConfig) -> Result<Identification> {
    cfg.validate()?;
    record.validate()?;
    if grid.n != record.n {
        return Err(Error::Config(format!("grid period {} does not match record period {}", grid.n, record.n)));
    }
    let (detrended, trends) = if cfg.trend.enabled {
        let d = stage("detrend", detrend_record(record, cfg.trend.policy))?;
        (d.record, d.trends)
    } else {
        (record.clone(), vec![])
    };
    let steady = stage("transient", detrended.skip_periods(cfg.analysis.transient_skip))?;
    let val_periods = if steady.periods > cfg.fit.validation_periods { cfg.fit.validation_periods } else { 0 };
    let est_periods = steady.periods - val_periods;
    let est = steady.select_periods(0..est_periods)?;
    let val = if val_periods > 0 { steady.select_periods(est_periods..steady.periods)? } else { steady.clone() };

    let bla = stage("bla", to_spectra(&est, grid).and_then(|s| bla_robust(&s, &cfg.lpm)))?;
    let mdl = stage("mdl", mdl_select(&bla, cfg.model.max_order))?;
    // fall back along the MDL ranking when an order pair has no stable part
    let mut ranked = mdl.table.clone();
    ranked.sort_by(|x, y| x.mdl.total_cmp(&y.mdl).then((x.n_a + x.n_b).cmp(&(y.n_a + y.n_b))));
    let mut chosen = None;
    let mut first_err = None;
    for e in &ranked {
        let attempt = fit_rational(&bla, e.n_b, e.n_a)
            .and_then(|rat| balanced_realization(&rat.model, record.fs).map(|bal| (rat, bal)));
        match attempt {
            Ok(pair) => {
                if (e.n_b, e.n_a) != (mdl.n_b, mdl.n_a) {
                    log::warn!("MDL choice ({}, {}) has no stable realization; using ({}, {})", mdl.n_b, mdl.n_a, e.n_b, e.n_a);
                }
                chosen = Some(pair);
                break;
            }
            Err(err) => {
                first_err.get_or_insert(err);
            }
        }
    }
    let (rational, balanced) = match chosen {
        Some(pair) => pair,
        None => {
            let err = first_err.unwrap_or_else(|| Error::InsufficientData("empty MDL table".into()));
            return Err(stage("balanced-realization", Err::<(), _>(err)).unwrap_err());
        }
    };
    // ML weights must be strictly positive
    let floor = bla.var_total.iter().copied().filter(|v| *v > 0.0).fold(f64::INFINITY, f64::min);
    let mut bla_ml = bla.clone();
    let floor = if floor.is_finite() { floor } else { 1.0 };
    bla_ml.var_total.iter_mut().for_each(|v| *v = v.max(floor));
    let ml = stage("ml-refine", ml_refine(&balanced.model, &bla_ml, &LmOptions::default()))?;
    let linear = ml.model.clone();
    let init = stage("pnlss-init", init_from_linear(&linear, &cfg.model.degrees, &est))?;
    let fit_opts = FitOptions { validation_periods: val_periods, ..cfg.fit.clone() };
    let (model, report) = stage("pnlss-fit", fit(&init, &steady, grid, &fit_opts))?;
    let lin_pnlss = stage("compare", from_linear(&linear, &[], None))?;
    let comparison = stage("compare", compare_models(&lin_pnlss, &model, &val, cfg.fit.transient_periods))?;
    Ok(Identification {
        record: steady,
        trend_lambdas: trends.iter().map(|t| t.lambda).collect(),
        bla,
        mdl,
        rational,
        balanced,
        linear,
        ml_cost: (ml.report.initial_cost, ml.report.cost),
        pnlss: model,
        fit: report,
        estimation_periods: est_periods,
        comparison,
        trends,
    })
}

#[derive(Debug, Parser)]
#[command(name = "nlid", version, about = "Frequency-domain nonlinear system identification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Design a multisine and write its periods and grid.
    Design,
    /// Simulate a synthetic cell preset and write the record CSV.
    Simulate,
    /// Validate a measured CSV and write it in canonical form.
    Ingest,
    /// Even/odd distortion analysis of a record.
    Analyze,
    /// Full identification pipeline on a record.
    Identify,
    /// Compare saved models on a record.
    Validate {
        /// PNLSS model JSON.
        #[arg(long)]
        model: PathBuf,
        /// Linear model JSON.
        #[arg(long)]
        linear: PathBuf,
    },
}

#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Sample frequency in Hz.
    #[arg(long, global = true)]
    pub fs: Option<f64>,
    /// Samples per period.
    #[arg(long, global = true)]
    pub n: Option<usize>,
    /// Excitation band edges in Hz.
    #[arg(long, global = true, num_args = 2, value_names = ["LO", "HI"])]
    pub band: Option<Vec<f64>>,
    /// Excitation rms.
    #[arg(long, global = true)]
    pub rms: Option<f64>,
    #[arg(long, global = true)]
    pub periods: Option<usize>,
    #[arg(long, global = true)]
    pub realizations: Option<usize>,
    /// Synthetic cell preset.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Record CSV.
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
    /// Grid JSON written by `design`.
    #[arg(long, global = true)]
    pub grid: Option<PathBuf>,
    /// Skip l1 detrending.
    #[arg(long, global = true)]
    pub no_detrend: bool,
    /// Trend weight as a fraction of the largest useful weight.
    #[arg(long, global = true)]
    pub lambda_fraction: Option<f64>,
    #[arg(long, global = true)]
    pub max_order: Option<usize>,
    /// Monomial degrees, e.g. `2,3`.
    #[arg(long, global = true, value_delimiter = ',')]
    pub degrees: Option<Vec<usize>>,
    #[arg(long, global = true)]
    pub max_iter: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, mut cfg: PipelineConfig) -> Result<PipelineConfig> {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.fs {
            cfg.signal.fs = v;
        }
        if let Some(v) = self.n {
            cfg.signal.n = v;
        }
        if let Some(b) = &self.band {
            cfg.signal.band = [b[0], b[1]];
        }
        if let Some(v) = self.rms {
            cfg.signal.target_rms = Some(v);
        }
        if let Some(v) = self.periods {
            cfg.periods = v;
        }
        if let Some(v) = self.realizations {
            cfg.realizations = v;
        }
        if let Some(v) = &self.preset {
            cfg.preset = v.clone();
        }
        if let Some(v) = &self.input {
            cfg.input = Some(v.clone());
        }
        if let Some(v) = &self.grid {
            cfg.grid = Some(v.clone());
        }
        if self.no_detrend {
            cfg.trend.enabled = false;
        }
        if let Some(v) = self.lambda_fraction {
            cfg.trend.policy = LambdaPolicy::FractionOfMax(v);
        }
        if let Some(v) = self.max_order {
            cfg.model.max_order = v;
        }
        if let Some(v) = &self.degrees {
            cfg.model.degrees = v.clone();
        }
        if let Some(v) = self.max_iter {
            cfg.fit.max_iter = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Serialize)]
struct FileDigest {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    config_sha256: String,
    config: &'a PipelineConfig,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
}

fn digest_file(path: &Path) -> Result<FileDigest> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(FileDigest { path: path.display().to_string(), sha256: hex::encode(Sha256::digest(bytes)) })
}

/// Tracks the files a command reads and writes.
struct Session {
    cfg: PipelineConfig,
    out: PathBuf,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Session {
    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.outputs.push(p.clone());
        p
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let p = self.path(name);
        std::fs::write(&p, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    fn finish(self, command: &str) -> Result<()> {
        let manifest = Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            config_sha256: self.cfg.digest(),
            config: &self.cfg,
            inputs: self.inputs.iter().map(|p| digest_file(p)).collect::<Result<_>>()?,
            outputs: self.outputs.iter().map(|p| digest_file(p)).collect::<Result<_>>()?,
        };
        let p = self.out.join("manifest.json");
        std::fs::write(&p, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&p, e))
    }

    fn input_record(&mut self) -> Result<(TimeRecord, Vec<String>)> {
        let path = self.cfg.input.clone().ok_or_else(|| Error::Config("input: a record CSV is required (--input)".into()))?;
        let m = ingest_csv(&path, None)?;
        self.inputs.push(path.clone());
        self.inputs.push(crate::bench::sidecar_path(&path));
        Ok((m.record, m.warnings))
    }

    fn grid_for(&mut self, rec: &TimeRecord) -> Result<HarmonicGrid> {
        let grid = match self.cfg.grid.clone() {
            Some(path) => {
                let g = GridFile::read(&path)?.grid()?;
                self.inputs.push(path);
                g
            }
            None => {
                let spec = self.cfg.spec();
                if spec.n != rec.n || (spec.fs - rec.fs).abs() > 1e-9 * spec.fs {
                    return Err(Error::Config(format!(
                        "record has fs = {}, N = {} but the signal config has fs = {}, N = {}; pass --grid or matching --fs/--n",
                        rec.fs, rec.n, spec.fs, spec.n
                    )));
                }
                crate::signals::build_grid(&spec)?
            }
        };
        if grid.n != rec.n {
            return Err(Error::Config(format!("grid period {} does not match record period {}", grid.n, rec.n)));
        }
        Ok(grid)
    }
}

/// Output directory precedence: flag, `NLID_OUT`, config, `nlid-out`.
pub fn output_dir(flag: Option<&Path>, cfg: &PipelineConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os("NLID_OUT").map(PathBuf::from))
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("nlid-out"))
}

/// Resolves the configuration and runs one subcommand. Returns the lines
/// printed to stdout.
pub fn run(cli: &Cli) -> Result<Vec<String>> {
    let base = match &cli.overrides.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let cfg = cli.overrides.apply(base)?;
    let out = output_dir(cli.overrides.out.as_deref(), &cfg);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut s = Session { cfg, out, inputs: vec![], outputs: vec![] };
    if let Some(p) = &cli.overrides.config {
        s.inputs.push(p.clone());
    }
    let (name, lines) = match &cli.command {
        Command::Design => ("design", cmd_design(&mut s)?),
        Command::Simulate => ("simulate", cmd_simulate(&mut s)?),
        Command::Ingest => ("ingest", cmd_ingest(&mut s)?),
        Command::Analyze => ("analyze", cmd_analyze(&mut s)?),
        Command::Identify => ("identify", cmd_identify(&mut s)?),
        Command::Validate { model, linear } => ("validate", cmd_validate(&mut s, model, linear)?),
    };
    s.finish(name)?;
    Ok(lines)
}

fn cmd_design(s: &mut Session) -> Result<Vec<String>> {
    let spec = s.cfg.spec();
    let signals = realizations(&spec, s.cfg.realizations)?;
    let file = GridFile::new(&spec, &signals);
    let grid_path = s.path("grid.json");
    file.write(&grid_path)?;
    for sig in &signals {
        let p = s.path(&format!("signal_r{}.csv", sig.realization));
        write_signal_csv(&p, &sig.samples)?;
    }
    let grid = &signals[0].grid;
    let mut lines = vec![
        format!("frequency resolution f0 = {} Hz", spec.resolution()),
        format!("band [{}, {}] Hz, fs = {} Hz, N = {}", spec.band[0], spec.band[1], spec.fs, spec.n),
        format!(
            "excited lines: {}, odd detection lines: {}, even detection lines: {}",
            grid.excited.len(),
            grid.odd_detect.len(),
            grid.even_detect.len()
        ),
    ];
    for sig in &signals {
        lines.push(format!("realization {}: rms = {:.6}", sig.realization, sig.realized_rms));
    }
    Ok(lines)
}

fn cmd_simulate(s: &mut Session) -> Result<Vec<String>> {
    let spec = s.cfg.spec();
    let cell = SyntheticCell { seed: s.cfg.seed, ..SyntheticCell::preset(&s.cfg.preset)? };
    let signals = realizations(&spec, s.cfg.realizations)?;
    let rec = simulate_cell(&cell, &signals, s.cfg.periods)?;
    let csv_path = s.path("record.csv");
    s.outputs.push(crate::bench::sidecar_path(&csv_path));
    let labels = BTreeMap::from([
        ("operating_point".to_string(), cell.operating_point.clone()),
        ("rms_level".to_string(), spec.target_rms.map(|v| v.to_string()).unwrap_or_default()),
    ]);
    export_csv(&csv_path, &rec, labels)?;
    GridFile::new(&spec, &signals).write(&s.path("grid.json"))?;
    s.write_json("cell.json", &cell)?;
    Ok(vec![format!(
        "simulated preset '{}': {} realization(s) x {} period(s) x {} samples",
        cell.operating_point, rec.realizations, rec.periods, rec.n
    )])
}

fn cmd_ingest(s: &mut Session) -> Result<Vec<String>> {
    let path = s.cfg.input.clone().ok_or_else(|| Error::Config("input: a record CSV is required (--input)".into()))?;
    let side = crate::bench::sidecar_path(&path);
    let meta = if side.exists() {
        s.inputs.push(side);
        None
    } else {
        let cfg = &s.cfg;
        Some(RecordMeta { fs: None, n: cfg.signal.n, periods: None, realizations: cfg.realizations, labels: BTreeMap::new() })
    };
    let m = ingest_csv(&path, meta)?;
    s.inputs.push(path);
    let out = s.path("record.csv");
    s.outputs.push(crate::bench::sidecar_path(&out));
    export_csv(&out, &m.record, m.meta.labels.clone())?;
    let mut lines = vec![format!(
        "ingested {} realization(s) x {} period(s) x {} samples at fs = {} Hz",
        m.record.realizations, m.record.periods, m.record.n, m.record.fs
    )];
    lines.extend(m.warnings.iter().map(|w| format!("warning: {w}")));
    Ok(lines)
}

fn cmd_analyze(s: &mut Session) -> Result<Vec<String>> {
    let (rec, warnings) = s.input_record()?;
    let grid = s.grid_for(&rec)?;
    let rec = if s.cfg.trend.enabled { detrend_record(&rec, s.cfg.trend.policy)?.record } else { rec };
    let rep: DistortionReport = analyze_record(&rec, &grid, &s.cfg.analysis)?;
    rep.write_json(&s.path("distortion.json"))?;
    rep.write_csv(&s.path("distortion.csv"))?;
    let mut lines: Vec<String> = warnings.into_iter().map(|w| format!("warning: {w}")).collect();
    let p = &rep.pooled;
    lines.push(format!("excited lines: {:.1} dB (noise {:.1} dB)", p.excited.mean_power_db, p.excited.mean_noise_db));
    for (name, c) in [("odd detection", &p.odd_detect), ("even detection", &p.even_detect)] {
        if let Some(c) = c {
            lines.push(format!(
                "{name} lines: {:.1} dB, {:+.1} dB over noise{}",
                c.mean_power_db,
                c.excess_db,
                if c.significant { " (significant)" } else { "" }
            ));
        }
    }
    lines.push(format!("behaviour: {}", rep.behaviour().label()));
    Ok(lines)
}

#[derive(Debug, Serialize)]
struct IdentifySummary<'a> {
    mdl_orders: (usize, usize),
    mdl_table: &'a [crate::linmodel::MdlEntry],
    rational_cost: f64,
    hankel_singular_values: &'a [f64],
    discarded_poles: usize,
    ml_cost: (f64, f64),
    trend_lambdas: &'a [f64],
    estimation_periods: usize,
    pnlss_fit: &'a FitReport,
    comparison_periods: usize,
    linear_rmse: f64,
    pnlss_rmse: f64,
    linear_rms: f64,
    pnlss_rms: f64,
    ratio: f64,
    improvement_db: f64,
    linear_adequate: bool,
    warnings: Vec<String>,
}

fn cmd_identify(s: &mut Session) -> Result<Vec<String>> {
    let (rec, mut warnings) = s.input_record()?;
    let grid = s.grid_for(&rec)?;
    let id = identify(&rec, &grid, &s.cfg)?;
    for (r, t) in id.trends.iter().enumerate() {
        let p = s.path(&format!("trend_r{r}.csv"));
        write_trend_csv(&p, rec.fs, &rec.y[r * rec.n * rec.periods..(r + 1) * rec.n * rec.periods], t)?;
    }
    id.bla.write_csv(&s.path("bla.csv"))?;
    let meta = serde_json::json!({
        "orders": [id.mdl.n_b, id.mdl.n_a],
        "degrees": s.cfg.model.degrees,
        "seed": s.cfg.seed,
    });
    id.linear.write_json(&s.path("linear_model.json"), meta.clone())?;
    id.pnlss.write_json(&s.path("pnlss_model.json"), meta)?;
    id.fit.write_csv(&s.path("fit_iterations.csv"))?;
    id.comparison.write_csv(&s.path("error_spectrum.csv"))?;
    warnings.extend(id.rational.warnings.iter().cloned());
    warnings.extend(id.balanced.warnings.iter().cloned());
    warnings.extend(id.fit.warnings.iter().cloned());
    let c = &id.comparison;
    let summary = IdentifySummary {
        mdl_orders: (id.mdl.n_b, id.mdl.n_a),
        mdl_table: &id.mdl.table,
        rational_cost: id.rational.cost,
        hankel_singular_values: id.balanced.hankel.as_slice(),
        discarded_poles: id.balanced.discarded_poles.len(),
        ml_cost: id.ml_cost,
        trend_lambdas: &id.trend_lambdas,
        estimation_periods: id.estimation_periods,
        pnlss_fit: &id.fit,
        comparison_periods: c.periods,
        linear_rmse: c.linear_rmse,
        pnlss_rmse: c.pnlss_rmse,
        linear_rms: c.linear_rms,
        pnlss_rms: c.pnlss_rms,
        ratio: c.ratio,
        improvement_db: c.improvement_db,
        linear_adequate: c.linear_adequate(),
        warnings: warnings.clone(),
    };
    s.write_json("identify_report.json", &summary)?;
    let mut lines: Vec<String> = warnings.into_iter().map(|w| format!("warning: {w}")).collect();
    lines.push(format!("MDL orders: n_b = {}, n_a = {}", id.mdl.n_b, id.mdl.n_a));
    lines.push(format!("PNLSS fit: cost {:.4e} -> {:.4e} ({})", id.fit.initial_cost, id.fit.final_cost, id.fit.termination));
    lines.push(format!("linear rms error {:.4e}, PNLSS rms error {:.4e}", c.linear_rms, c.pnlss_rms));
    lines.push(format!("PNLSS/linear rmse ratio {:.4} ({:.1} dB improvement)", c.ratio, c.improvement_db));
    if c.linear_adequate() {
        lines.push("linear model adequate (PNLSS improvement < 3 dB)".into());
    }
    Ok(lines)
}

fn cmd_validate(s: &mut Session, model: &Path, linear: &Path) -> Result<Vec<String>> {
    let (rec, _) = s.input_record()?;
    let nl = PnlssModel::read_json(model)?;
    let lin = StateSpaceModel::read_json(linear)?;
    s.inputs.push(model.to_path_buf());
    s.inputs.push(linear.to_path_buf());
    if (nl.fs - rec.fs).abs() > 1e-9 * rec.fs || (lin.fs - rec.fs).abs() > 1e-9 * rec.fs {
        return Err(Error::Config("model sample frequency differs from the record".into()));
    }
    let rec = if s.cfg.trend.enabled { detrend_record(&rec, s.cfg.trend.policy)?.record } else { rec };
    let rec = rec.skip_periods(s.cfg.analysis.transient_skip)?;
    let c = compare_models(&from_linear(&lin, &[], None)?, &nl, &rec, s.cfg.fit.transient_periods)?;
    c.write_csv(&s.path("error_spectrum.csv"))?;
    s.write_json(
        "validation.json",
        &serde_json::json!({
            "periods": c.periods,
            "linear_rmse": c.linear_rmse,
            "pnlss_rmse": c.pnlss_rmse,
            "linear_rms": c.linear_rms,
            "pnlss_rms": c.pnlss_rms,
            "ratio": c.ratio,
            "improvement_db": c.improvement_db,
        }),
    )?;
    Ok(vec![
        format!("linear rms error {:.4e}, PNLSS rms error {:.4e}", c.linear_rms, c.pnlss_rms),
        format!("PNLSS/linear rmse ratio {:.4} ({:.1} dB improvement)", c.ratio, c.improvement_db),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_toml_keeps_defaults() {
        let cfg = PipelineConfig::from_toml("seed = 7\n[signal]\nn = 1000\n[model]\ndegrees = [2]\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.signal.n, 1000);
        assert_eq!(cfg.signal.fs, 50.0);
        assert_eq!(cfg.model.degrees, vec![2]);
        assert_eq!(cfg.model.max_order, 4);
        assert!(PipelineConfig::from_toml("seed = \"x\"").is_err());
    }

    #[test]
    fn validation_names_the_field() {
        let cfg = PipelineConfig { model: ModelConfig { degrees: vec![1], ..Default::default() }, ..Default::default() };
        assert!(cfg.validate().unwrap_err().to_string().contains("model.degrees"));
        let cfg = PipelineConfig { periods: 1, ..Default::default() };
        assert!(cfg.validate().unwrap_err().to_string().contains("transient_skip"));
    }

    #[test]
    fn config_digest_tracks_content() {
        let a = PipelineConfig::default();
        let b = PipelineConfig { seed: 1, ..Default::default() };
        assert_eq!(a.digest(), PipelineConfig::default().digest());
        assert_ne!(a.digest(), b.digest());
    }
}
