//! Polynomial nonlinear state-space models.
//!
//! ```text
//! x(t+1) = A x(t) + B u(t) + E zeta(x(t), u(t))
//! y(t)   = C x(t) + D u(t) + F eta(x(t), u(t))
//! ```
//!
//! `zeta` and `eta` stack all monomials of the chosen total degrees in the
//! normalized state and input. Parameters live in normalized coordinates
//! (`x = x_scale * xn`, `u = u_scale * un`, `y = y_scale * yn`); simulation takes
//! and returns physical signals.

use crate::dft::rfft_unitary;
use crate::error::{Error, Result};
use crate::linmodel::{mat_rows, StateSpaceModel};
use crate::lm::{self, IterationRecord, LeastSquaresProblem, LmOptions, Termination};
use crate::signals::HarmonicGrid;
use crate::spectral::TimeRecord;
use crate::C64;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Monomials over `(x_1..x_nx, u_1..u_nu)` in graded order, lexicographically
/// descending within each degree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonomialBasis {
    pub n_x: usize,
    pub n_u: usize,
    pub degrees: Vec<usize>,
    pub exponents: Vec<Vec<u32>>,
    pub counts: Vec<usize>,
}

fn compositions(total: u32, parts: usize, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if parts == 1 {
        prefix.push(total);
        out.push(prefix.clone());
        prefix.pop();
        return;
    }
    for first in (0..=total).rev() {
        prefix.push(first);
        compositions(total - first, parts - 1, prefix, out);
        prefix.pop();
    }
}

/// `C(n + d - 1, d)`: number of monomials of degree `d` in `n` variables.
pub fn monomial_count(n: usize, d: usize) -> usize {
    if n == 0 {
        return usize::from(d == 0);
    }
    let mut c: u128 = 1;
    for i in 0..d as u128 {
        c = c * (n as u128 + i) / (i + 1);
    }
    c as usize
}

pub fn build_basis(n_x: usize, n_u: usize, degrees: &[usize]) -> Result<MonomialBasis> {
    let mut degrees = degrees.to_vec();
    degrees.sort_unstable();
    degrees.dedup();
    if let Some(d) = degrees.iter().find(|&&d| d < 2) {
        return Err(Error::Config(format!("monomial degrees must be >= 2, got {d}")));
    }
    let vars = n_x + n_u;
    if vars == 0 && !degrees.is_empty() {
        return Err(Error::Config("a basis needs at least one variable".into()));
    }
    let mut exponents = Vec::new();
    let mut counts = Vec::new();
    for &d in &degrees {
        let before = exponents.len();
        compositions(d as u32, vars, &mut Vec::new(), &mut exponents);
        counts.push(exponents.len() - before);
    }
    Ok(MonomialBasis { n_x, n_u, degrees, exponents, counts })
}

impl MonomialBasis {
    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    fn max_degree(&self) -> usize {
        self.degrees.last().copied().unwrap_or(0)
    }

    /// Human-readable monomial, e.g. `x1^2*u1`.
    pub fn label(&self, i: usize) -> String {
        let parts: Vec<String> = self.exponents[i]
            .iter()
            .enumerate()
            .filter(|(_, &e)| e > 0)
            .map(|(v, &e)| {
                let name = if v < self.n_x { format!("x{}", v + 1) } else { format!("u{}", v - self.n_x + 1) };
                if e == 1 {
                    name
                } else {
                    format!("{name}^{e}")
                }
            })
            .collect();
        parts.join("*")
    }

    /// Monomial values and their derivatives with respect to the state
    /// (`dvals` is row-major `len x n_x`).
    fn eval(&self, v: &[f64], pow: &mut Vec<f64>, vals: &mut [f64], dvals: Option<&mut [f64]>) {
        let nv = self.n_x + self.n_u;
        let p = self.max_degree() + 1;
        pow.resize(nv * p, 0.0);
        for j in 0..nv {
            pow[j * p] = 1.0;
            for k in 1..p {
                pow[j * p + k] = pow[j * p + k - 1] * v[j];
            }
        }
        for (m, e) in self.exponents.iter().enumerate() {
            vals[m] = e.iter().enumerate().map(|(j, &ej)| pow[j * p + ej as usize]).product();
        }
        if let Some(d) = dvals {
            for (m, e) in self.exponents.iter().enumerate() {
                for j in 0..self.n_x {
                    let ej = e[j] as usize;
                    d[m * self.n_x + j] = if ej == 0 {
                        0.0
                    } else {
                        ej as f64
                            * e.iter()
                                .enumerate()
                                .map(|(l, &el)| if l == j { pow[l * p + ej - 1] } else { pow[l * p + el as usize] })
                                .product::<f64>()
                    };
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PnlssModel {
    #[serde(with = "mat_rows")]
    pub a: DMatrix<f64>,
    #[serde(with = "mat_rows")]
    pub b: DMatrix<f64>,
    #[serde(with = "mat_rows")]
    pub c: DMatrix<f64>,
    #[serde(with = "mat_rows")]
    pub d: DMatrix<f64>,
    #[serde(with = "mat_rows")]
    pub e: DMatrix<f64>,
    #[serde(with = "mat_rows")]
    pub f: DMatrix<f64>,
    pub basis_state: MonomialBasis,
    pub basis_output: MonomialBasis,
    pub x_scale: Vec<f64>,
    pub u_scale: Vec<f64>,
    pub y_scale: Vec<f64>,
    pub fs: f64,
    /// Simulation aborts when the normalized state norm exceeds this.
    #[serde(default = "default_bound")]
    pub divergence_bound: f64,
}

fn default_bound() -> f64 {
    1e6
}

/// Physical-unit simulation result.
#[derive(Debug, Clone)]
pub struct Simulation {
    /// Output samples, row-major `T x n_y`.
    pub y: Vec<f64>,
    /// Normalized states `x(0..=T)`, row-major `(T + 1) x n_x`.
    pub x: Vec<f64>,
}

struct Run {
    yn: Vec<f64>,
    xn: Vec<f64>,
    /// Output sensitivities from `keep_from` on, row-major `((T - keep_from) * n_y) x n_theta`.
    sens: Option<Vec<f64>>,
}

impl PnlssModel {
    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_y(&self) -> usize {
        self.c.nrows()
    }

    pub fn n_params(&self) -> usize {
        self.a.len() + self.b.len() + self.c.len() + self.d.len() + self.e.len() + self.f.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (nx, nu, ny) = (self.n_x(), self.n_u(), self.n_y());
        let shape_ok = self.a.ncols() == nx
            && self.b.nrows() == nx
            && self.c.ncols() == nx
            && self.d.shape() == (ny, nu)
            && self.e.shape() == (nx, self.basis_state.len())
            && self.f.shape() == (ny, self.basis_output.len());
        if !shape_ok {
            return Err(Error::Format("PNLSS matrix dimensions are inconsistent".into()));
        }
        for basis in [&self.basis_state, &self.basis_output] {
            if basis.n_x != nx || basis.n_u != nu {
                return Err(Error::Format("monomial basis dimensions do not match the model".into()));
            }
        }
        if self.x_scale.len() != nx || self.u_scale.len() != nu || self.y_scale.len() != ny {
            return Err(Error::Format("scale vectors do not match the model dimensions".into()));
        }
        if self.x_scale.iter().chain(&self.u_scale).chain(&self.y_scale).any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Format("scales must be positive and finite".into()));
        }
        let mats = [&self.a, &self.b, &self.c, &self.d, &self.e, &self.f];
        if mats.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numerical("PNLSS model has non-finite entries".into()));
        }
        Ok(())
    }

    /// `[vec(A); vec(B); vec(C); vec(D); vec(E); vec(F)]`, column-major vec.
    pub fn params(&self) -> DVector<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        for m in [&self.a, &self.b, &self.c, &self.d, &self.e, &self.f] {
            v.extend_from_slice(m.as_slice());
        }
        DVector::from_vec(v)
    }

    pub fn with_params(&self, p: &DVector<f64>) -> Self {
        let mut out = self.clone();
        let mut off = 0;
        for m in [&mut out.a, &mut out.b, &mut out.c, &mut out.d, &mut out.e, &mut out.f] {
            let len = m.len();
            m.as_mut_slice().copy_from_slice(&p.as_slice()[off..off + len]);
            off += len;
        }
        out
    }

    /// Nonlinear coefficient norms `(||E||, ||F||)` and linear norm `||[A B; C D]||`.
    pub fn coefficient_norms(&self) -> (f64, f64, f64) {
        let lin = (self.a.norm_squared() + self.b.norm_squared() + self.c.norm_squared() + self.d.norm_squared()).sqrt();
        (self.e.norm(), self.f.norm(), lin)
    }

    fn run(&self, un: &[f64], x0: &[f64], keep_from: Option<usize>) -> Result<Run> {
        let (nx, nu, ny) = (self.n_x(), self.n_u(), self.n_y());
        let t_len = un.len() / nu.max(1);
        let (nz, ne) = (self.basis_state.len(), self.basis_output.len());
        let np = self.n_params();
        let (oa, ob) = (0, nx * nx);
        let oc = ob + nx * nu;
        let od = oc + ny * nx;
        let oe = od + ny * nu;
        let of = oe + nx * nz;

        let mut x = x0.to_vec();
        let mut xn = Vec::with_capacity((t_len + 1) * nx);
        xn.extend_from_slice(&x);
        let mut yn = vec![0.0; t_len * ny];
        let mut v = vec![0.0; nx + nu];
        let mut pow = Vec::new();
        let mut zeta = vec![0.0; nz];
        let mut eta = vec![0.0; ne];
        let want = keep_from.is_some();
        let keep = keep_from.unwrap_or(t_len);
        let mut dzeta = vec![0.0; if want { nz * nx } else { 0 }];
        let mut deta = vec![0.0; if want { ne * nx } else { 0 }];
        // state sensitivities, row-major nx x np
        let mut s = vec![0.0; if want { nx * np } else { 0 }];
        let mut s_next = s.clone();
        let mut sens = if want { vec![0.0; (t_len - keep) * ny * np] } else { vec![] };
        let mut jx = vec![0.0; nx * nx];
        let mut jy = vec![0.0; ny * nx];

        for t in 0..t_len {
            let ut = &un[t * nu..(t + 1) * nu];
            v[..nx].copy_from_slice(&x);
            v[nx..].copy_from_slice(ut);
            self.basis_state.eval(&v, &mut pow, &mut zeta, want.then_some(&mut dzeta[..]));
            self.basis_output.eval(&v, &mut pow, &mut eta, want.then_some(&mut deta[..]));

            for i in 0..ny {
                let mut acc = 0.0;
                for j in 0..nx {
                    acc += self.c[(i, j)] * x[j];
                }
                for j in 0..nu {
                    acc += self.d[(i, j)] * ut[j];
                }
                for j in 0..ne {
                    acc += self.f[(i, j)] * eta[j];
                }
                yn[t * ny + i] = acc;
            }

            if want {
                if t >= keep {
                    for i in 0..ny {
                        for j in 0..nx {
                            let mut acc = self.c[(i, j)];
                            for m in 0..ne {
                                acc += self.f[(i, m)] * deta[m * nx + j];
                            }
                            jy[i * nx + j] = acc;
                        }
                    }
                    let base = (t - keep) * ny * np;
                    for i in 0..ny {
                        let row = &mut sens[base + i * np..base + (i + 1) * np];
                        for (p, r) in row.iter_mut().enumerate() {
                            let mut acc = 0.0;
                            for j in 0..nx {
                                acc += jy[i * nx + j] * s[j * np + p];
                            }
                            *r = acc;
                        }
                        for j in 0..nx {
                            row[oc + i + j * ny] += x[j];
                        }
                        for j in 0..nu {
                            row[od + i + j * ny] += ut[j];
                        }
                        for m in 0..ne {
                            row[of + i + m * ny] += eta[m];
                        }
                    }
                }
                for i in 0..nx {
                    for j in 0..nx {
                        let mut acc = self.a[(i, j)];
                        for m in 0..nz {
                            acc += self.e[(i, m)] * dzeta[m * nx + j];
                        }
                        jx[i * nx + j] = acc;
                    }
                }
                for i in 0..nx {
                    let row = &mut s_next[i * np..(i + 1) * np];
                    for (p, r) in row.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for j in 0..nx {
                            acc += jx[i * nx + j] * s[j * np + p];
                        }
                        *r = acc;
                    }
                    for j in 0..nx {
                        row[oa + i + j * nx] += x[j];
                    }
                    for j in 0..nu {
                        row[ob + i + j * nx] += ut[j];
                    }
                    for m in 0..nz {
                        row[oe + i + m * nx] += zeta[m];
                    }
                }
                std::mem::swap(&mut s, &mut s_next);
            }

            let mut next = vec![0.0; nx];
            for i in 0..nx {
                let mut acc = 0.0;
                for j in 0..nx {
                    acc += self.a[(i, j)] * x[j];
                }
                for j in 0..nu {
                    acc += self.b[(i, j)] * ut[j];
                }
                for m in 0..nz {
                    acc += self.e[(i, m)] * zeta[m];
                }
                next[i] = acc;
            }
            let norm = next.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm <= self.divergence_bound) {
                return Err(Error::Instability { step: t + 1, norm });
            }
            x = next;
            xn.extend_from_slice(&x);
        }
        Ok(Run { yn, xn, sens: want.then_some(sens) })
    }

    fn normalize_input(&self, u: &[f64]) -> Result<Vec<f64>> {
        let nu = self.n_u();
        if nu == 0 || u.len() % nu != 0 {
            return Err(Error::Format(format!("input length {} is not a multiple of n_u = {nu}", u.len())));
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("input contains non-finite samples".into()));
        }
        Ok(u.iter().enumerate().map(|(i, v)| v / self.u_scale[i % nu]).collect())
    }

    /// Simulates from physical input `u` (row-major `T x n_u`) and normalized
    /// initial state `x0` (zero when `None`).
    pub fn simulate(&self, u: &[f64], x0: Option<&[f64]>) -> Result<Simulation> {
        let un = self.normalize_input(u)?;
        let zeros = vec![0.0; self.n_x()];
        let run = self.run(&un, x0.unwrap_or(&zeros), None)?;
        let ny = self.n_y();
        let y = run.yn.iter().enumerate().map(|(i, v)| v * self.y_scale[i % ny]).collect();
        Ok(Simulation { y, x: run.xn })
    }

    /// Physical output sensitivities `dy/dtheta` over the whole horizon,
    /// `(T * n_y) x n_theta` with rows ordered by time, then output.
    pub fn jacobian(&self, u: &[f64], x0: Option<&[f64]>) -> Result<DMatrix<f64>> {
        let un = self.normalize_input(u)?;
        let zeros = vec![0.0; self.n_x()];
        let run = self.run(&un, x0.unwrap_or(&zeros), Some(0))?;
        let np = self.n_params();
        let ny = self.n_y();
        let sens = run.sens.expect("sensitivities requested");
        let rows = sens.len() / np.max(1);
        Ok(DMatrix::from_fn(rows, np, |r, p| sens[r * np + p] * self.y_scale[r % ny]))
    }

    /// Consecutive-period rms difference of the output after `periods` periods
    /// of the periodic input `u_period` (SISO).
    pub fn steady_state_residual(&self, u_period: &[f64], periods: usize) -> Result<f64> {
        let n = u_period.len();
        let u: Vec<f64> = u_period.iter().copied().cycle().take(n * periods).collect();
        let y = self.simulate(&u, None)?.y;
        let last = &y[(periods - 1) * n..];
        let prev = &y[(periods - 2) * n..(periods - 1) * n];
        Ok((last.iter().zip(prev).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64).sqrt())
    }

    pub fn write_json(&self, path: &Path, metadata: serde_json::Value) -> Result<()> {
        #[derive(Serialize)]
        struct File<'a> {
            kind: &'static str,
            model: &'a PnlssModel,
            state_monomials: Vec<String>,
            output_monomials: Vec<String>,
            metadata: serde_json::Value,
        }
        let file = File {
            kind: "pnlss",
            model: self,
            state_monomials: (0..self.basis_state.len()).map(|i| self.basis_state.label(i)).collect(),
            output_monomials: (0..self.basis_output.len()).map(|i| self.basis_output.label(i)).collect(),
            metadata,
        };
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), &file)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct File {
            model: PnlssModel,
        }
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let file: File = serde_json::from_reader(std::io::BufReader::new(f))?;
        file.model.validate()?;
        Ok(file.model)
    }
}

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len().max(1) as f64).sqrt()
}

/// Wraps a linear model with zero nonlinear coefficients in the given
/// normalization (unit scales when `None`).
pub fn from_linear(ss: &StateSpaceModel, degrees: &[usize], scales: Option<(Vec<f64>, f64, f64)>) -> Result<PnlssModel> {
    ss.validate()?;
    let (nx, nu, ny) = (ss.order(), ss.b.ncols(), ss.c.nrows());
    let (x_scale, su, sy) = scales.unwrap_or((vec![1.0; nx], 1.0, 1.0));
    let sx = DMatrix::from_diagonal(&DVector::from_vec(x_scale.clone()));
    let sx_inv = DMatrix::from_diagonal(&DVector::from_iterator(nx, x_scale.iter().map(|v| 1.0 / v)));
    let basis_state = build_basis(nx, nu, degrees)?;
    let basis_output = build_basis(nx, nu, degrees)?;
    let model = PnlssModel {
        a: &sx_inv * &ss.a * &sx,
        b: &sx_inv * &ss.b * su,
        c: &ss.c * &sx / sy,
        d: &ss.d * (su / sy),
        e: DMatrix::zeros(nx, basis_state.len()),
        f: DMatrix::zeros(ny, basis_output.len()),
        basis_state,
        basis_output,
        x_scale,
        u_scale: vec![su; nu],
        y_scale: vec![sy; ny],
        fs: ss.fs,
        divergence_bound: default_bound(),
    };
    model.validate()?;
    Ok(model)
}

/// Initializes a PNLSS model from the linear model, with unit-rms normalization
/// of input, output and simulated linear states on the estimation data.
pub fn init_from_linear(ss: &StateSpaceModel, degrees: &[usize], data: &TimeRecord) -> Result<PnlssModel> {
    data.validate()?;
    let su = rms(&data.u);
    let sy = rms(&data.y);
    if !(su > 0.0) || !(sy > 0.0) {
        return Err(Error::InsufficientData("input and output must be nonconstant to set scales".into()));
    }
    let unit = from_linear(ss, degrees, None)?;
    let mut sum = vec![0.0; ss.order()];
    let mut count = 0usize;
    for r in 0..data.realizations {
        let sim = unit.simulate(data.u_realization(r), None)?;
        for row in sim.x.chunks(ss.order().max(1)).take(data.n * data.periods) {
            for (acc, v) in sum.iter_mut().zip(row) {
                *acc += v * v;
            }
            count += 1;
        }
    }
    let x_scale: Vec<f64> = sum.iter().map(|s| (s / count.max(1) as f64).sqrt()).map(|v| if v > 0.0 { v } else { 1.0 }).collect();
    from_linear(ss, degrees, Some((x_scale, su, sy)))
}

/// Which DFT lines enter the fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BinSelection {
    /// Excited and detection lines inside the band.
    #[default]
    InBand,
    Excited,
    Explicit(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub bins: BinSelection,
    /// Per-bin weights `W(k)` on the selected bins; unit weights when `None`.
    pub weights: Option<Vec<f64>>,
    pub max_iter: usize,
    pub lambda_init: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub rel_tol: f64,
    /// Trailing periods held out for validation (0 disables).
    pub validation_periods: usize,
    /// Periods simulated before the one compared in the cost.
    pub transient_periods: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            bins: BinSelection::InBand,
            weights: None,
            max_iter: 200,
            lambda_init: 1.0,
            lambda_up: 10.0,
            lambda_down: 0.1,
            rel_tol: 1e-10,
            validation_periods: 2,
            transient_periods: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub initial_val_cost: Option<f64>,
    pub final_val_cost: Option<f64>,
    pub history: Vec<IterationRecord>,
    pub termination: String,
    pub bins: Vec<usize>,
    pub estimation_periods: usize,
    pub validation_periods: usize,
    pub warnings: Vec<String>,
}

impl FitReport {
    /// CSV with columns `iter,lambda,est_cost,val_cost`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        w.write_record(["iter", "lambda", "est_cost", "val_cost"])?;
        for h in &self.history {
            w.write_record([
                h.iter.to_string(),
                h.lambda.to_string(),
                h.cost.to_string(),
                h.val_cost.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// One realization's periodic input and averaged output spectrum.
struct Target {
    u_period: Vec<f64>,
    y_bins: Vec<C64>,
}

struct FitProblem {
    template: PnlssModel,
    est: Vec<Target>,
    val: Vec<Target>,
    bins: Vec<usize>,
    inv_sqrt_w: Vec<f64>,
    n: usize,
    transient_periods: usize,
}

impl FitProblem {
    fn tiled(&self, u_period: &[f64]) -> Vec<f64> {
        u_period.iter().copied().cycle().take(self.n * (self.transient_periods + 1)).collect()
    }

    /// Residuals `(Y_mod - Y) / sqrt(W)` stacked as real parts then imaginary parts.
    fn residuals_for(&self, model: &PnlssModel, targets: &[Target]) -> Option<DVector<f64>> {
        let f = self.bins.len();
        let mut r = DVector::zeros(2 * f * targets.len());
        for (ti, tgt) in targets.iter().enumerate() {
            let sim = model.simulate(&self.tiled(&tgt.u_period), None).ok()?;
            let spec = rfft_unitary(&sim.y[self.n * self.transient_periods..]);
            for (i, &k) in self.bins.iter().enumerate() {
                let e = (spec[k] - tgt.y_bins[i]) * self.inv_sqrt_w[i];
                r[2 * f * ti + i] = e.re;
                r[2 * f * ti + f + i] = e.im;
            }
        }
        r.iter().all(|v| v.is_finite()).then_some(r)
    }
}

impl LeastSquaresProblem for FitProblem {
    fn residuals(&mut self, p: &DVector<f64>) -> Option<DVector<f64>> {
        let model = self.template.with_params(p);
        self.residuals_for(&model, &self.est)
    }

    fn jacobian(&mut self, p: &DVector<f64>) -> Option<DMatrix<f64>> {
        let model = self.template.with_params(p);
        let np = model.n_params();
        let f = self.bins.len();
        let mut j = DMatrix::zeros(2 * f * self.est.len(), np);
        let keep = self.n * self.transient_periods;
        for (ti, tgt) in self.est.iter().enumerate() {
            let un = model.normalize_input(&self.tiled(&tgt.u_period)).ok()?;
            let run = model.run(&un, &vec![0.0; model.n_x()], Some(keep)).ok()?;
            let sens = run.sens?;
            let sy = model.y_scale[0];
            let mut col = vec![0.0; self.n];
            for p in 0..np {
                for (t, c) in col.iter_mut().enumerate() {
                    *c = sens[t * np + p] * sy;
                }
                let spec = rfft_unitary(&col);
                for (i, &k) in self.bins.iter().enumerate() {
                    let d = spec[k] * self.inv_sqrt_w[i];
                    j[(2 * f * ti + i, p)] = d.re;
                    j[(2 * f * ti + f + i, p)] = d.im;
                }
            }
        }
        j.iter().all(|v| v.is_finite()).then_some(j)
    }

    fn validation_cost(&mut self, p: &DVector<f64>) -> Option<f64> {
        if self.val.is_empty() {
            return None;
        }
        let model = self.template.with_params(p);
        Some(self.residuals_for(&model, &self.val).map(|r| r.norm_squared()).unwrap_or(f64::INFINITY))
    }
}

fn average_periods(x: &[f64], n: usize, range: std::ops::Range<usize>) -> Vec<f64> {
    let mut out = vec![0.0; n];
    let count = range.len() as f64;
    for p in range {
        for (o, v) in out.iter_mut().zip(&x[p * n..(p + 1) * n]) {
            *o += v / count;
        }
    }
    out
}

fn targets(data: &TimeRecord, range: std::ops::Range<usize>, bins: &[usize]) -> Vec<Target> {
    (0..data.realizations)
        .map(|r| {
            let u_period = average_periods(data.u_realization(r), data.n, range.clone());
            let y = average_periods(data.y_realization(r), data.n, range.clone());
            let spec = rfft_unitary(&y);
            Target { u_period, y_bins: bins.iter().map(|&k| spec[k]).collect() }
        })
        .collect()
}

/// Estimates all PNLSS coefficients by Levenberg-Marquardt on the weighted
/// output-spectrum error of the steady-state simulated response.
pub fn fit(init: &PnlssModel, data: &TimeRecord, grid: &HarmonicGrid, opts: &FitOptions) -> Result<(PnlssModel, FitReport)> {
    init.validate()?;
    data.validate()?;
    if init.n_u() != 1 || init.n_y() != 1 {
        return Err(Error::Config("fitting is implemented for single-input single-output models".into()));
    }
    if grid.n != data.n {
        return Err(Error::Config(format!("grid period {} does not match record period {}", grid.n, data.n)));
    }
    let bins = match &opts.bins {
        BinSelection::InBand => grid.in_band(),
        BinSelection::Excited => grid.excited.clone(),
        BinSelection::Explicit(b) => b.clone(),
    };
    if bins.is_empty() || bins.iter().any(|&k| k == 0 || k > data.n / 2) {
        return Err(Error::Config("fit bins must be non-empty and within 1..=N/2".into()));
    }
    let weights = match &opts.weights {
        Some(w) if w.len() != bins.len() => {
            return Err(Error::Config(format!("{} weights for {} bins", w.len(), bins.len())));
        }
        Some(w) if w.iter().any(|v| !(*v > 0.0)) => return Err(Error::Config("weights must be positive".into())),
        Some(w) => w.clone(),
        None => vec![1.0; bins.len()],
    };
    let mut warnings = Vec::new();
    let (est_periods, val_periods) = if opts.validation_periods > 0 && data.periods > opts.validation_periods {
        (data.periods - opts.validation_periods, opts.validation_periods)
    } else {
        if opts.validation_periods > 0 {
            warnings.push(format!("only {} period(s); fitting without a validation split", data.periods));
        }
        (data.periods, 0)
    };
    let est = targets(data, 0..est_periods, &bins);
    let val = if val_periods > 0 { targets(data, est_periods..data.periods, &bins) } else { vec![] };
    let mut problem = FitProblem {
        template: init.clone(),
        est,
        val,
        bins: bins.clone(),
        inv_sqrt_w: weights.iter().map(|w| 1.0 / w.sqrt()).collect(),
        n: data.n,
        transient_periods: opts.transient_periods,
    };
    let lm_opts = LmOptions {
        lambda_init: opts.lambda_init,
        lambda_up: opts.lambda_up,
        lambda_down: opts.lambda_down,
        max_iter: opts.max_iter,
        rel_tol: opts.rel_tol,
        ..LmOptions::default()
    };
    let rep = lm::minimize(&mut problem, init.params(), &lm_opts);
    match rep.termination {
        Termination::InvalidStart => {
            return Err(Error::Numerical("initial model cannot be simulated on the estimation data".into()));
        }
        Termination::LambdaCap => {
            let msg = "damping reached its cap (likely unstable trial steps); returning the best stable iterate".to_string();
            log::warn!("{msg}");
            warnings.push(msg);
        }
        _ => {}
    }
    let model = init.with_params(&rep.params);
    let final_val_cost = problem.validation_cost(&rep.params);
    let report = FitReport {
        initial_cost: rep.initial_cost,
        final_cost: rep.cost,
        initial_val_cost: rep.history.first().and_then(|h| h.val_cost),
        final_val_cost,
        termination: format!("{:?}", rep.termination),
        history: rep.history,
        bins,
        estimation_periods: est_periods,
        validation_periods: val_periods,
        warnings,
    };
    Ok((model, report))
}

/// Weighted output-spectrum cost of `model` on `data` with unit weights.
pub fn spectral_cost(model: &PnlssModel, data: &TimeRecord, bins: &[usize], transient_periods: usize) -> Result<f64> {
    let problem = FitProblem {
        template: model.clone(),
        est: targets(data, 0..data.periods, bins),
        val: vec![],
        bins: bins.to_vec(),
        inv_sqrt_w: vec![1.0; bins.len()],
        n: data.n,
        transient_periods,
    };
    problem
        .residuals_for(model, &problem.est)
        .map(|r| r.norm_squared())
        .ok_or_else(|| Error::Numerical("model cannot be simulated on the data".into()))
}

/// Steady-state simulated period minus the period-averaged measured output,
/// one vector per realization.
pub fn output_error(model: &PnlssModel, data: &TimeRecord, transient_periods: usize) -> Result<Vec<Vec<f64>>> {
    data.validate()?;
    (0..data.realizations)
        .map(|r| {
            let u_period = average_periods(data.u_realization(r), data.n, 0..data.periods);
            let y_period = average_periods(data.y_realization(r), data.n, 0..data.periods);
            let u: Vec<f64> = u_period.iter().copied().cycle().take(data.n * (transient_periods + 1)).collect();
            let sim = model.simulate(&u, None)?;
            Ok(sim.y[data.n * transient_periods..].iter().zip(&y_period).map(|(a, b)| a - b).collect())
        })
        .collect()
}

/// Time-domain rms error between the steady-state simulated period and the
/// period-averaged measured output, pooled over realizations.
pub fn rmse(model: &PnlssModel, data: &TimeRecord, transient_periods: usize) -> Result<f64> {
    let err = output_error(model, data, transient_periods)?;
    let count: usize = err.iter().map(Vec::len).sum();
    Ok((err.iter().flatten().map(|e| e * e).sum::<f64>() / count as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_order_and_counts() {
        let b = build_basis(1, 1, &[2]).unwrap();
        assert_eq!(b.exponents, vec![vec![2, 0], vec![1, 1], vec![0, 2]]);
        assert_eq!((0..3).map(|i| b.label(i)).collect::<Vec<_>>(), ["x1^2", "x1*u1", "u1^2"]);
        let b = build_basis(2, 1, &[3, 2]).unwrap();
        assert_eq!(b.counts, vec![6, 10]);
        assert_eq!(b.len(), 16);
        assert!(build_basis(2, 1, &[]).unwrap().is_empty());
        assert!(build_basis(2, 1, &[1]).is_err());
    }

    #[test]
    fn monomial_derivatives_match_differences() {
        let b = build_basis(2, 1, &[2, 3]).unwrap();
        let v = [0.3, -0.7, 1.1];
        let mut pow = Vec::new();
        let mut vals = vec![0.0; b.len()];
        let mut d = vec![0.0; b.len() * 2];
        b.eval(&v, &mut pow, &mut vals, Some(&mut d));
        for j in 0..2 {
            let h = 1e-6;
            let mut vp = v;
            vp[j] += h;
            let mut vm = v;
            vm[j] -= h;
            let mut fp = vec![0.0; b.len()];
            let mut fm = vec![0.0; b.len()];
            b.eval(&vp, &mut pow, &mut fp, None);
            b.eval(&vm, &mut pow, &mut fm, None);
            for m in 0..b.len() {
                assert!(((fp[m] - fm[m]) / (2.0 * h) - d[m * 2 + j]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let ss = StateSpaceModel {
            a: DMatrix::from_element(1, 1, 0.5),
            b: DMatrix::from_element(1, 1, 1.0),
            c: DMatrix::from_element(1, 1, 1.0),
            d: DMatrix::zeros(1, 1),
            fs: 1.0,
        };
        let mut m = from_linear(&ss, &[2], None).unwrap();
        m.e[(0, 0)] = 1.0;
        let err = m.simulate(&[3.0, 0.0, 0.0, 0.0, 0.0, 0.0], None).unwrap_err();
        assert!(matches!(err, Error::Instability { step, .. } if step > 1));
    }
}
