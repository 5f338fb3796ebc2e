//! Parametric best linear approximation.
//!
//! A rational model in `q^-1` is fitted to the nonparametric FRF, its order
//! chosen by minimum description length, the stable part realized as a
//! balanced state-space model, and that model refined in maximum likelihood
//! against the FRF and its variance.

use crate::error::{Error, Result};
use crate::lm::{self, LeastSquaresProblem, LmOptions, LmReport};
use crate::lpm::BlaEstimate;
use crate::C64;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Serializes a matrix as a list of rows.
pub mod mat_rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        (m.nrows(), m.ncols(), rows).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let (nr, nc, rows): (usize, usize, Vec<Vec<f64>>) = Deserialize::deserialize(d)?;
        if rows.len() != nr || rows.iter().any(|r| r.len() != nc) {
            return Err(serde::de::Error::custom(format!("matrix rows do not match declared {nr}x{nc}")));
        }
        Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
    }
}

/// `G(q) = (b_0 + b_1 q^-1 + ... ) / (1 + a_1 q^-1 + ...)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RationalModel {
    pub b: Vec<f64>,
    /// Denominator with `a[0] == 1`.
    pub a: Vec<f64>,
}

impl RationalModel {
    pub fn new(b: Vec<f64>, a: Vec<f64>) -> Result<Self> {
        if a.is_empty() || a[0] == 0.0 || b.is_empty() {
            return Err(Error::Config("rational model needs b_0.. and a_0 != 0".into()));
        }
        let a0 = a[0];
        Ok(Self { b: b.iter().map(|v| v / a0).collect(), a: a.iter().map(|v| v / a0).collect() })
    }

    pub fn n_b(&self) -> usize {
        self.b.len() - 1
    }

    pub fn n_a(&self) -> usize {
        self.a.len() - 1
    }

    fn poly(coef: &[f64], x: C64) -> C64 {
        coef.iter().rev().fold(C64::new(0.0, 0.0), |acc, &c| acc * x + c)
    }

    /// Response at `z`, i.e. with `q^-1 = z^-1`.
    pub fn eval(&self, z: C64) -> C64 {
        let x = 1.0 / z;
        Self::poly(&self.b, x) / Self::poly(&self.a, x)
    }

    /// Denominator roots in the `z` plane (poles), including poles at the origin
    /// introduced by `n_b > n_a`.
    pub fn poles(&self) -> Vec<C64> {
        let m = self.n_b().max(self.n_a());
        let mut den = vec![0.0; m + 1];
        den[..self.a.len()].copy_from_slice(&self.a);
        // descending z powers -> ascending
        den.reverse();
        roots(&den)
    }
}

/// Roots of the polynomial with ascending coefficients `c` (leading coefficient last).
fn roots(c: &[f64]) -> Vec<C64> {
    // exact zero roots are split off before the eigenvalue solve
    let zeros = c.iter().take_while(|v| **v == 0.0).count().min(c.len() - 1);
    let c = &c[zeros..];
    let mut out = vec![C64::new(0.0, 0.0); zeros];
    let deg = c.len() - 1;
    if deg == 0 {
        return out;
    }
    let lead = c[deg];
    let mut comp = DMatrix::<f64>::zeros(deg, deg);
    for j in 0..deg {
        comp[(0, j)] = -c[deg - 1 - j] / lead;
    }
    for i in 1..deg {
        comp[(i, i - 1)] = 1.0;
    }
    out.extend(eigenvalues(&comp));
    out
}

/// Eigenvalues of a square real matrix. Falls back to a perturbed Hessenberg
/// iteration when the Schur sweep fails to converge (defective matrices).
pub fn eigenvalues(a: &DMatrix<f64>) -> Vec<C64> {
    if a.is_empty() {
        return vec![];
    }
    let scale = a.amax().max(f64::MIN_POSITIVE);
    if let Some(s) = a.clone().try_schur(f64::EPSILON, 10_000) {
        return s.complex_eigenvalues().iter().copied().collect();
    }
    let n = a.nrows();
    let mut shifted = a.clone();
    for k in 1..=8 {
        let eps = scale * 1e-14 * 10f64.powi(k);
        for i in 0..n {
            shifted[(i, i)] = a[(i, i)] + eps * ((i + 1) as f64 / n as f64);
        }
        if let Some(s) = shifted.clone().try_schur(f64::EPSILON, 10_000) {
            return s.complex_eigenvalues().iter().copied().collect();
        }
    }
    vec![C64::new(f64::NAN, f64::NAN); n]
}

/// Largest eigenvalue modulus; 0 for an empty matrix.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    eigenvalues(a).iter().map(|v| v.norm()).fold(0.0, f64::max)
}

/// Monic real polynomial (ascending coefficients) with the given roots.
fn poly_from_roots(r: &[C64]) -> Vec<f64> {
    let mut p = vec![C64::new(1.0, 0.0)];
    for &root in r {
        let mut next = vec![C64::new(0.0, 0.0); p.len() + 1];
        for (i, &c) in p.iter().enumerate() {
            next[i + 1] += c;
            next[i] -= c * root;
        }
        p = next;
    }
    p.into_iter().map(|c| c.re).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSpaceModel {
    #[serde(with = "mat_rows")]
    pub a: DMatrix<f64>,
    #[serde(with = "mat_rows")]
    pub b: DMatrix<f64>,
    #[serde(with = "mat_rows")]
    pub c: DMatrix<f64>,
    #[serde(with = "mat_rows")]
    pub d: DMatrix<f64>,
    pub fs: f64,
}

impl StateSpaceModel {
    pub fn order(&self) -> usize {
        self.a.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.a.nrows();
        if self.a.ncols() != n || self.b.nrows() != n || self.c.ncols() != n {
            return Err(Error::Format("state-space matrix dimensions are inconsistent".into()));
        }
        if self.d.nrows() != self.c.nrows() || self.d.ncols() != self.b.ncols() {
            return Err(Error::Format("D must be n_y x n_u".into()));
        }
        let finite = |m: &DMatrix<f64>| m.iter().all(|v| v.is_finite());
        if !(finite(&self.a) && finite(&self.b) && finite(&self.c) && finite(&self.d)) {
            return Err(Error::Numerical("state-space model has non-finite entries".into()));
        }
        Ok(())
    }

    /// SISO response `C (zI - A)^-1 B + D`.
    pub fn frf(&self, z: C64) -> C64 {
        let (_, g) = self.resolvents(z);
        g
    }

    /// Returns `((zI - A)^-1 B, G(z))` for the first input/output pair.
    fn resolvents(&self, z: C64) -> (DVector<C64>, C64) {
        let n = self.order();
        let d = C64::new(self.d[(0, 0)], 0.0);
        if n == 0 {
            return (DVector::zeros(0), d);
        }
        let m = DMatrix::<C64>::from_fn(n, n, |i, j| if i == j { z } else { C64::new(0.0, 0.0) } - self.a[(i, j)]);
        let b = DVector::<C64>::from_fn(n, |i, _| C64::new(self.b[(i, 0)], 0.0));
        let x = m.lu().solve(&b).unwrap_or_else(|| DVector::from_element(n, C64::new(f64::NAN, 0.0)));
        let g = (0..n).map(|i| x[i] * self.c[(0, i)]).sum::<C64>() + d;
        (x, g)
    }

    /// Similarity transform `(T^-1 A T, T^-1 B, C T, D)`.
    pub fn transformed(&self, t: &DMatrix<f64>) -> Result<Self> {
        let ti = t.clone().try_inverse().ok_or_else(|| Error::Numerical("singular similarity transform".into()))?;
        Ok(Self { a: &ti * &self.a * t, b: &ti * &self.b, c: &self.c * t, d: self.d.clone(), fs: self.fs })
    }

    /// Simulates from a zero state (SISO).
    pub fn simulate(&self, u: &[f64]) -> Vec<f64> {
        let n = self.order();
        let mut x = DVector::<f64>::zeros(n);
        u.iter()
            .map(|&ut| {
                let y = (&self.c * &x)[0] + self.d[(0, 0)] * ut;
                x = &self.a * &x + self.b.column(0) * ut;
                y
            })
            .collect()
    }

    /// Parameter vector `[vec(A); vec(B); vec(C); vec(D)]` (column-major vec).
    pub fn params(&self) -> DVector<f64> {
        let mut v = Vec::new();
        for m in [&self.a, &self.b, &self.c, &self.d] {
            v.extend_from_slice(m.as_slice());
        }
        DVector::from_vec(v)
    }

    pub fn with_params(&self, p: &DVector<f64>) -> Self {
        let mut out = self.clone();
        let mut off = 0;
        for m in [&mut out.a, &mut out.b, &mut out.c, &mut out.d] {
            let len = m.len();
            m.as_mut_slice().copy_from_slice(&p.as_slice()[off..off + len]);
            off += len;
        }
        out
    }

    pub fn write_json(&self, path: &Path, metadata: serde_json::Value) -> Result<()> {
        #[derive(Serialize)]
        struct File<'a> {
            kind: &'static str,
            order: usize,
            model: &'a StateSpaceModel,
            metadata: serde_json::Value,
        }
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(
            std::io::BufWriter::new(f),
            &File { kind: "linear-state-space", order: self.order(), model: self, metadata },
        )?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct File {
            model: StateSpaceModel,
        }
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let file: File = serde_json::from_reader(std::io::BufReader::new(f))?;
        file.model.validate()?;
        Ok(file.model)
    }
}

fn weights(bla: &BlaEstimate) -> Vec<f64> {
    let positive: Vec<f64> = bla.var_total.iter().copied().filter(|v| *v > 0.0 && v.is_finite()).collect();
    if positive.is_empty() {
        return vec![1.0; bla.var_total.len()];
    }
    let floor = positive.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    bla.var_total.iter().map(|&v| 1.0 / if v > 0.0 && v.is_finite() { v } else { floor }).collect()
}

#[derive(Debug, Clone)]
pub struct RationalFit {
    pub model: RationalModel,
    /// `sum_k |G(z_k) - G_hat(k)|^2 / var_total(k)`.
    pub cost: f64,
    pub bins: usize,
    pub warnings: Vec<String>,
}

struct RationalProblem<'a> {
    x: Vec<C64>,
    g: &'a [C64],
    sw: Vec<f64>,
    n_b: usize,
    n_a: usize,
}

impl RationalProblem<'_> {
    fn split(&self, p: &DVector<f64>) -> (Vec<f64>, Vec<f64>) {
        let b = p.as_slice()[..=self.n_b].to_vec();
        let mut a = vec![1.0];
        a.extend_from_slice(&p.as_slice()[self.n_b + 1..]);
        (b, a)
    }
}

impl LeastSquaresProblem for RationalProblem<'_> {
    fn residuals(&mut self, p: &DVector<f64>) -> Option<DVector<f64>> {
        let (b, a) = self.split(p);
        let f = self.x.len();
        let mut r = DVector::zeros(2 * f);
        for k in 0..f {
            let e = (RationalModel::poly(&b, self.x[k]) / RationalModel::poly(&a, self.x[k]) - self.g[k]) * self.sw[k];
            r[k] = e.re;
            r[f + k] = e.im;
        }
        Some(r)
    }

    fn jacobian(&mut self, p: &DVector<f64>) -> Option<DMatrix<f64>> {
        let (b, a) = self.split(p);
        let f = self.x.len();
        let np = self.n_b + 1 + self.n_a;
        let mut j = DMatrix::zeros(2 * f, np);
        for k in 0..f {
            let x = self.x[k];
            let bv = RationalModel::poly(&b, x);
            let av = RationalModel::poly(&a, x);
            let mut xp = C64::new(1.0, 0.0);
            for i in 0..=self.n_b.max(self.n_a) {
                if i <= self.n_b {
                    let d = xp / av * self.sw[k];
                    j[(k, i)] = d.re;
                    j[(f + k, i)] = d.im;
                }
                if i >= 1 && i <= self.n_a {
                    let d = -bv * xp / (av * av) * self.sw[k];
                    j[(k, self.n_b + i)] = d.re;
                    j[(f + k, self.n_b + i)] = d.im;
                }
                xp *= x;
            }
        }
        Some(j)
    }
}

/// Linearized weighted LS `min sum w |B(x) - G A(x)|^2`, the starting point for
/// the nonlinear fit.
fn linearized_fit(x: &[C64], g: &[C64], w: &[f64], n_b: usize, n_a: usize, warnings: &mut Vec<String>) -> DVector<f64> {
    let f = x.len();
    let np = n_b + 1 + n_a;
    let mut m = DMatrix::<f64>::zeros(2 * f, np);
    let mut rhs = DVector::<f64>::zeros(2 * f);
    for k in 0..f {
        let s = w[k].sqrt();
        let mut xp = C64::new(1.0, 0.0);
        for i in 0..=n_b.max(n_a) {
            if i <= n_b {
                m[(k, i)] = (xp * s).re;
                m[(f + k, i)] = (xp * s).im;
            }
            if i >= 1 && i <= n_a {
                let v = -g[k] * xp * s;
                m[(k, n_b + i)] = v.re;
                m[(f + k, n_b + i)] = v.im;
            }
            xp *= x[k];
        }
        let v = g[k] * s;
        rhs[k] = v.re;
        rhs[f + k] = v.im;
    }
    let svd = m.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let eps = if smin < smax * 1e-12 {
        warnings.push(format!("ill-conditioned rational fit (n_b={n_b}, n_a={n_a}, cond {:.1e}); regularized", smax / smin.max(1e-300)));
        smax * 1e-12
    } else {
        0.0
    };
    svd.solve(&rhs, eps).unwrap_or_else(|_| DVector::zeros(np))
}

/// Weighted rational fit: linearized initialization, Sanathanan-Koerner
/// reweighting, then Levenberg-Marquardt on the true weighted residual.
pub fn fit_rational(bla: &BlaEstimate, n_b: usize, n_a: usize) -> Result<RationalFit> {
    let f = bla.bins.len();
    let np = n_b + n_a + 1;
    if f < np {
        return Err(Error::InsufficientData(format!("{f} bins cannot fit {np} rational parameters")));
    }
    let x: Vec<C64> = bla.z().iter().map(|z| 1.0 / z).collect();
    let w = weights(bla);
    let mut warnings = Vec::new();

    let mut p = linearized_fit(&x, &bla.g, &w, n_b, n_a, &mut warnings);
    for _ in 0..10 {
        let a: Vec<f64> = std::iter::once(1.0).chain(p.iter().skip(n_b + 1).copied()).collect();
        let wsk: Vec<f64> = x.iter().zip(&w).map(|(&xk, &wk)| wk / RationalModel::poly(&a, xk).norm_sqr().max(1e-300)).collect();
        let mut scratch = Vec::new();
        let next = linearized_fit(&x, &bla.g, &wsk, n_b, n_a, &mut scratch);
        let change = (&next - &p).norm() / p.norm().max(1e-300);
        p = next;
        if change < 1e-12 {
            break;
        }
    }

    let mut problem = RationalProblem { x, g: &bla.g, sw: w.iter().map(|v| v.sqrt()).collect(), n_b, n_a };
    let rep = lm::minimize(&mut problem, p, &LmOptions { rel_tol: 1e-12, ..LmOptions::default() });
    if !rep.cost.is_finite() {
        return Err(Error::Numerical(format!("rational fit (n_b={n_b}, n_a={n_a}) did not produce a finite cost")));
    }
    let (b, a) = problem.split(&rep.params);
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(RationalFit { model: RationalModel { b, a }, cost: rep.cost, bins: f, warnings })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MdlEntry {
    pub n_b: usize,
    pub n_a: usize,
    pub cost: f64,
    pub mdl: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MdlSelection {
    pub n_b: usize,
    pub n_a: usize,
    pub table: Vec<MdlEntry>,
}

/// Scans `0 <= n_b, n_a <= max_order` and minimizes
/// `F ln(V / F) + n_theta ln F` with `n_theta = n_b + n_a + 1`.
pub fn mdl_select(bla: &BlaEstimate, max_order: usize) -> Result<MdlSelection> {
    if max_order < 1 {
        return Err(Error::Config("MDL scan needs max_order >= 1".into()));
    }
    let f = bla.bins.len() as f64;
    let mut table = Vec::new();
    for n_a in 0..=max_order {
        for n_b in 0..=max_order {
            let n_theta = (n_b + n_a + 1) as f64;
            if n_theta >= f {
                continue;
            }
            let Ok(fit) = fit_rational(bla, n_b, n_a) else { continue };
            let v = fit.cost.max(f * 1e-300);
            table.push(MdlEntry { n_b, n_a, cost: fit.cost, mdl: f * (v / f).ln() + n_theta * f.ln() });
        }
    }
    let best = table
        .iter()
        .min_by(|x, y| {
            x.mdl
                .partial_cmp(&y.mdl)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then((x.n_a + x.n_b).cmp(&(y.n_a + y.n_b)))
        })
        .ok_or_else(|| Error::InsufficientData("no order pair could be fitted".into()))?;
    Ok(MdlSelection { n_b: best.n_b, n_a: best.n_a, table: table.clone() })
}

/// Solves `A X A^T - X + Q = 0` through the Kronecker form.
pub fn discrete_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let kron = a.kronecker(a);
    let lhs = DMatrix::<f64>::identity(n * n, n * n) - kron;
    let rhs = DVector::from_column_slice(q.as_slice());
    let x = lhs.lu().solve(&rhs).ok_or_else(|| Error::Numerical("Lyapunov equation is singular (|eig| = 1)".into()))?;
    let x = DMatrix::from_column_slice(n, n, x.as_slice());
    Ok((&x + x.transpose()) * 0.5)
}

/// Controllability and observability Gramians `(W_c, W_o)`.
pub fn gramians(ss: &StateSpaceModel) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let wc = discrete_lyapunov(&ss.a, &(&ss.b * ss.b.transpose()))?;
    let wo = discrete_lyapunov(&ss.a.transpose(), &(ss.c.transpose() * &ss.c))?;
    Ok((wc, wo))
}

/// Symmetric PSD square root factor `L` with `W = L L^T`.
fn psd_factor(w: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = w.clone().symmetric_eigen();
    let mut l = eig.eigenvectors.clone();
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        l.column_mut(j).scale_mut(lam.max(0.0).sqrt());
    }
    l
}

#[derive(Debug, Clone)]
pub struct BalancedRealization {
    pub model: StateSpaceModel,
    /// Hankel singular values, descending; equal to the balanced Gramian diagonals.
    pub hankel: Vec<f64>,
    /// Poles on or outside the unit circle that were split off.
    pub discarded_poles: Vec<C64>,
    pub warnings: Vec<String>,
}

/// Balanced realization of the stable part of a rational model.
///
/// The strictly proper part `c(z) / (A_s(z) A_u(z))` is split by solving
/// `c = X A_u + Y A_s`; `D + X / A_s` is realized in controller form and then
/// balanced by the square-root method.
pub fn balanced_realization(rat: &RationalModel, fs: f64) -> Result<BalancedRealization> {
    let m = rat.n_b().max(rat.n_a());
    let mut num = vec![0.0; m + 1];
    num[..rat.b.len()].copy_from_slice(&rat.b);
    let mut den = vec![0.0; m + 1];
    den[..rat.a.len()].copy_from_slice(&rat.a);
    // descending powers of z; den[0] == 1
    let d = num[0];
    let c_desc: Vec<f64> = (1..=m).map(|i| num[i] - d * den[i]).collect();
    let mut warnings = Vec::new();

    let static_model = |d: f64| StateSpaceModel {
        a: DMatrix::zeros(0, 0),
        b: DMatrix::zeros(0, 1),
        c: DMatrix::zeros(1, 0),
        d: DMatrix::from_element(1, 1, d),
        fs,
    };
    if m == 0 {
        return Ok(BalancedRealization { model: static_model(d), hankel: vec![], discarded_poles: vec![], warnings });
    }

    let poles = rat.poles();
    let (stable, unstable): (Vec<C64>, Vec<C64>) = poles.iter().partition(|p| p.norm() < 1.0);
    if stable.is_empty() && !unstable.is_empty() {
        return Err(Error::Numerical("all poles are on or outside the unit circle".into()));
    }
    let mut c_asc: Vec<f64> = c_desc.iter().rev().copied().collect();
    let mut den_s: Vec<f64> = den.iter().rev().copied().collect();
    if !unstable.is_empty() {
        let a_s = poly_from_roots(&stable);
        let a_u = poly_from_roots(&unstable);
        let (ms, mu) = (stable.len(), unstable.len());
        let mut sys = DMatrix::<f64>::zeros(m, m);
        for j in 0..ms {
            for (i, &v) in a_u.iter().enumerate() {
                sys[(i + j, j)] += v;
            }
        }
        for j in 0..mu {
            for (i, &v) in a_s.iter().enumerate() {
                sys[(i + j, ms + j)] += v;
            }
        }
        let sol = sys
            .lu()
            .solve(&DVector::from_vec(c_asc.clone()))
            .ok_or_else(|| Error::Numerical("stable/unstable split failed".into()))?;
        c_asc = sol.as_slice()[..ms].to_vec();
        den_s = a_s;
        let msg = format!("discarded {} unstable pole(s): {:?}", unstable.len(), unstable);
        log::warn!("{msg}");
        warnings.push(msg);
    }

    let ms = den_s.len() - 1;
    let mut a = DMatrix::<f64>::zeros(ms, ms);
    for j in 0..ms {
        a[(0, j)] = -den_s[ms - 1 - j];
    }
    for i in 1..ms {
        a[(i, i - 1)] = 1.0;
    }
    let mut b = DMatrix::<f64>::zeros(ms, 1);
    b[(0, 0)] = 1.0;
    let c = DMatrix::from_fn(1, ms, |_, j| c_asc[ms - 1 - j]);
    let ctrl = StateSpaceModel { a, b, c, d: DMatrix::from_element(1, 1, d), fs };

    let (wc, wo) = gramians(&ctrl)?;
    let lc = psd_factor(&wc);
    let lo = psd_factor(&wo);
    let svd = (lo.transpose() * &lc).svd(true, true);
    let u = svd.u.ok_or_else(|| Error::Numerical("balancing SVD failed".into()))?;
    let vt = svd.v_t.ok_or_else(|| Error::Numerical("balancing SVD failed".into()))?;
    let sv = svd.singular_values;
    let smax = sv.max();
    // nalgebra sorts singular values in descending order
    let keep = sv.iter().take_while(|&&s| s > smax * 1e-12).count();
    if keep < ms {
        let msg = format!("removed {} non-minimal state(s) with negligible Hankel singular value", ms - keep);
        log::warn!("{msg}");
        warnings.push(msg);
    }
    if keep == 0 {
        return Ok(BalancedRealization { model: static_model(d), hankel: vec![], discarded_poles: unstable, warnings });
    }
    let s_inv_half = DMatrix::from_diagonal(&DVector::from_iterator(keep, sv.iter().take(keep).map(|s| 1.0 / s.sqrt())));
    let t = &lc * vt.transpose().columns(0, keep) * &s_inv_half;
    let ti = &s_inv_half * u.columns(0, keep).transpose() * lo.transpose();
    let model = StateSpaceModel { a: &ti * &ctrl.a * &t, b: &ti * &ctrl.b, c: &ctrl.c * &t, d: ctrl.d.clone(), fs };
    Ok(BalancedRealization { model, hankel: sv.iter().take(keep).copied().collect(), discarded_poles: unstable, warnings })
}

struct SsProblem<'a> {
    template: StateSpaceModel,
    z: Vec<C64>,
    g: &'a [C64],
    sw: Vec<f64>,
}

impl LeastSquaresProblem for SsProblem<'_> {
    fn residuals(&mut self, p: &DVector<f64>) -> Option<DVector<f64>> {
        let ss = self.template.with_params(p);
        let f = self.z.len();
        let mut r = DVector::zeros(2 * f);
        for k in 0..f {
            let e = (ss.frf(self.z[k]) - self.g[k]) * self.sw[k];
            if !e.re.is_finite() || !e.im.is_finite() {
                return None;
            }
            r[k] = e.re;
            r[f + k] = e.im;
        }
        Some(r)
    }

    fn jacobian(&mut self, p: &DVector<f64>) -> Option<DMatrix<f64>> {
        let ss = self.template.with_params(p);
        let n = ss.order();
        let f = self.z.len();
        let np = p.len();
        let mut j = DMatrix::zeros(2 * f, np);
        for k in 0..f {
            let z = self.z[k];
            // right = (zI - A)^-1 B, left = C (zI - A)^-1
            let (right, _) = ss.resolvents(z);
            let mt = DMatrix::<C64>::from_fn(n, n, |i, jj| if i == jj { z } else { C64::new(0.0, 0.0) } - ss.a[(jj, i)]);
            let ct = DVector::<C64>::from_fn(n, |i, _| C64::new(ss.c[(0, i)], 0.0));
            let left = if n == 0 { DVector::zeros(0) } else { mt.lu().solve(&ct)? };
            let s = self.sw[k];
            let mut put = |idx: usize, v: C64| {
                j[(k, idx)] = v.re * s;
                j[(f + k, idx)] = v.im * s;
            };
            // vec(A) is column-major: index = row + col * n
            for col in 0..n {
                for row in 0..n {
                    put(row + col * n, left[row] * right[col]);
                }
            }
            for i in 0..n {
                put(n * n + i, left[i]);
                put(n * n + n + i, right[i]);
            }
            put(n * n + 2 * n, C64::new(1.0, 0.0));
        }
        Some(j)
    }
}

#[derive(Debug, Clone)]
pub struct MlRefinement {
    pub model: StateSpaceModel,
    pub report: LmReport,
}

/// `V_ss = sum_k |G_hat(k) - G_ss(z_k)|^2 / var_total(k)`.
pub fn ml_cost(ss: &StateSpaceModel, bla: &BlaEstimate) -> f64 {
    bla.z()
        .iter()
        .zip(&bla.g)
        .zip(&bla.var_total)
        .map(|((&z, &g), &v)| (ss.frf(z) - g).norm_sqr() / v)
        .sum()
}

/// Maximum-likelihood refinement of a SISO state-space model against the BLA.
pub fn ml_refine(ss: &StateSpaceModel, bla: &BlaEstimate, opts: &LmOptions) -> Result<MlRefinement> {
    ss.validate()?;
    if ss.b.ncols() != 1 || ss.c.nrows() != 1 {
        return Err(Error::Config("ML refinement expects a SISO model".into()));
    }
    if let Some((i, v)) = bla.var_total.iter().enumerate().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::Config(format!("variance at bin {} must be positive, got {v}", bla.bins[i])));
    }
    let mut problem = SsProblem {
        template: ss.clone(),
        z: bla.z(),
        g: &bla.g,
        sw: bla.var_total.iter().map(|v| 1.0 / v.sqrt()).collect(),
    };
    let report = lm::minimize(&mut problem, ss.params(), opts);
    if report.termination == lm::Termination::LambdaCap {
        log::warn!("ML refinement stopped on the damping cap; keeping the best model found");
    }
    Ok(MlRefinement { model: ss.with_params(&report.params), report })
}
