//! The scalar indicial operator I_{s,nu}, the Sturm-Liouville operator L_s,
//! its spectrum and the boundary-value solver for I_{s,nu} u = f.
//!
//! Solves run on v = sin^{s-n} u, where I u = sin^{n-s} P v with
//! P v = sin^2 v'' + b sin cos v' + c sin^2 v, b = n+1-2s and
//! c = lambda_nu - (s-1)(s-n). The exponents of P at 0 are 0 and 1-b = 2s-n.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::specfun::{gegenbauer, hyp2f1, hyp2f1_deriv, HypParams};
use crate::thetagrid::{sin_over_theta, theta_over_sin, LogThetaSeries, ThetaFn, ThetaGrid, DEFAULT_N};
use crate::{Error, Result};

pub const ROOT_TOL: f64 = 1e-8;
const SCAN_STEP: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndicialParams {
    pub n: usize,
    pub s: f64,
    pub theta0: f64,
    pub nu: f64,
}

impl IndicialParams {
    pub fn new(n: usize, s: f64, theta0: f64, nu: f64) -> Result<Self> {
        let p = Self { n, s, theta0, nu };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidParams(format!("n = {} below 2", self.n)));
        }
        if !(self.s > self.n as f64 / 2.0) {
            return Err(Error::InvalidParams(format!("s = {} not above n/2", self.s)));
        }
        if !(self.theta0 > 0.0 && self.theta0 < PI) {
            return Err(Error::InvalidParams(format!("theta0 = {} outside (0, pi)", self.theta0)));
        }
        if !self.nu.is_finite() {
            return Err(Error::InvalidParams("nu not finite".into()));
        }
        Ok(())
    }

    pub fn lambda(&self) -> f64 {
        self.nu * (self.nu + 1.0 - self.n as f64)
    }

    /// n - s, the exponent relating u and v.
    pub fn a(&self) -> f64 {
        self.n as f64 - self.s
    }

    pub fn beta(&self) -> f64 {
        2.0 * self.s - self.n as f64
    }

    pub fn vop(&self) -> VOp {
        let (n, s) = (self.n as f64, self.s);
        VOp::new(n + 1.0 - 2.0 * s, self.lambda() - (s - 1.0) * (s - n))
    }
}

fn sin_pow_over_theta_fn(grid: &Arc<ThetaGrid>, p: f64) -> ThetaFn {
    ThetaFn::from_fn(grid, |t| sin_over_theta(t).powf(p))
}

/// sin^2 u'' + (1-n) sin cos u' + lambda sin^2 u + s(n-s) u.
pub fn apply_indicial(p: &IndicialParams, u: &LogThetaSeries) -> LogThetaSeries {
    let g = u.grid().clone();
    let n = p.n as f64;
    let d1 = u.differentiate();
    let d2 = d1.differentiate();
    let s2 = sin_pow_over_theta_fn(&g, 2.0);
    let sc = ThetaFn::from_fn(&g, |t| sin_over_theta(t) * t.cos());
    let t1 = d2.mul_theta_pow(2.0).mul_fn(&s2);
    let t2 = d1.mul_theta_pow(1.0).mul_fn(&sc).scale(1.0 - n);
    let t3 = u.mul_theta_pow(2.0).mul_fn(&s2).scale(p.lambda());
    let t4 = u.scale(p.s * (n - p.s));
    t4.add(&t1).add(&t2).add(&t3)
}

/// L_s v = -v'' + (2s-n-1) cot v' + (s-1)(s-n) v.
pub fn apply_ls(n: usize, s: f64, v: &LogThetaSeries) -> LogThetaSeries {
    let g = v.grid().clone();
    let nf = n as f64;
    let d1 = v.differentiate();
    let d2 = d1.differentiate();
    let tcot = ThetaFn::from_fn(&g, |t| if t == 0.0 { 1.0 } else { t * t.cos() / t.sin() });
    let t2 = d1.mul_theta_pow(-1.0).mul_fn(&tcot).scale(2.0 * s - nf - 1.0);
    d2.scale(-1.0).add(&t2).add(&v.scale((s - 1.0) * (s - nf)))
}

fn hyp_abc(n: usize, s: f64, nu: f64) -> (f64, f64, f64) {
    let n = n as f64;
    (s - nu, nu + s - n + 1.0, s - n / 2.0 + 1.0)
}

/// LHS - RHS of the contiguous form of the Robin characteristic equation.
pub fn eigen_char(n: usize, s: f64, theta0: f64, nu: f64) -> Result<f64> {
    let (a, b, c) = hyp_abc(n, s, nu);
    let x = (0.5 * theta0).sin().powi(2);
    let nf = n as f64;
    let lhs = (2.0 * s - nf) * theta0.cos() / theta0.sin().powi(2) * hyp2f1(HypParams::new(a, b, c, x))?;
    let rhs = (nu - s) * (nu + s - nf + 1.0) / (2.0 * s - nf + 2.0)
        * hyp2f1(HypParams::new(a + 1.0, b + 1.0, c + 1.0, x))?;
    Ok(lhs - rhs)
}

#[derive(Debug, Clone)]
pub struct SpectrumEntry {
    pub nu: f64,
    pub lambda: f64,
    /// w = sin^{2s-n} F, the L_s eigenfunction in v-form.
    pub eigenfunction: LogThetaSeries,
}

#[derive(Debug, Clone)]
pub struct SpectrumResult {
    pub entries: Vec<SpectrumEntry>,
    pub char_residuals: Vec<f64>,
}

pub fn is_half_pi(theta0: f64) -> bool {
    (theta0 - PI / 2.0).abs() < 1e-12
}

fn bisect(f: &impl Fn(f64) -> Result<f64>, mut lo: f64, mut hi: f64, mut flo: f64) -> Result<f64> {
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid)?;
        if fm == 0.0 {
            return Ok(mid);
        }
        if (fm > 0.0) == (flo > 0.0) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Roots of eigen_char in [(n-1)/2, nu_max] by sign-change scan and bisection.
pub fn scan_roots(n: usize, s: f64, theta0: f64, nu_max: f64) -> Result<Vec<f64>> {
    let start = (n as f64 - 1.0) / 2.0;
    let f = |nu: f64| eigen_char(n, s, theta0, nu);
    let steps = ((nu_max - start) / SCAN_STEP).ceil() as usize;
    let mut roots = Vec::new();
    let mut prev_nu = start;
    let mut prev = f(start)?;
    if prev == 0.0 {
        roots.push(start);
    }
    for k in 1..=steps {
        let nu = start + k as f64 * SCAN_STEP;
        let v = f(nu)?;
        if v == 0.0 {
            roots.push(nu);
        } else if prev != 0.0 && (v > 0.0) != (prev > 0.0) {
            roots.push(bisect(&f, prev_nu, nu, prev)?);
        }
        prev = v;
        prev_nu = nu;
    }
    Ok(roots)
}

/// Lowest `count` spectral parameters by scanning, doubling the window up to four times.
pub fn scan_spectrum(n: usize, s: f64, theta0: f64, count: usize) -> Result<Vec<f64>> {
    let start = (n as f64 - 1.0) / 2.0;
    let mut nu_max = s.max(start) + 2.5 * count as f64 + 2.0;
    for attempt in 0..5 {
        let roots = scan_roots(n, s, theta0, nu_max)?;
        if roots.len() >= count {
            return Ok(roots[..count].to_vec());
        }
        if attempt == 4 {
            return Err(Error::RootScanExhausted { found: roots.len(), wanted: count, nu_max });
        }
        nu_max = start + 2.0 * (nu_max - start);
    }
    unreachable!()
}

fn char_scale(n: usize, s: f64, theta0: f64, nu: f64) -> f64 {
    let (a, b, c) = hyp_abc(n, s, nu);
    let x = (0.5 * theta0).sin().powi(2);
    let nf = n as f64;
    let t1 = ((2.0 * s - nf) * theta0.cos() / theta0.sin().powi(2)).abs() * hyp2f1(HypParams::new(a, b, c, x)).map_or(1.0, f64::abs);
    let t2 = ((nu - s) * (nu + s - nf + 1.0) / (2.0 * s - nf + 2.0)).abs()
        * hyp2f1(HypParams::new(a + 1.0, b + 1.0, c + 1.0, x)).map_or(1.0, f64::abs);
    t1.max(t2).max(1.0)
}

pub fn spectrum(n: usize, s: f64, theta0: f64, count: usize) -> Result<SpectrumResult> {
    let grid = ThetaGrid::new(theta0, DEFAULT_N)?;
    spectrum_on(&grid, n, s, count)
}

pub fn spectrum_on(grid: &Arc<ThetaGrid>, n: usize, s: f64, count: usize) -> Result<SpectrumResult> {
    let theta0 = grid.theta0;
    IndicialParams::new(n, s, theta0, s)?;
    if count == 0 {
        return Err(Error::InvalidParams("count must be at least 1".into()));
    }
    let beta = 2.0 * s - n as f64;
    let nus: Vec<f64> = if is_half_pi(theta0) {
        (0..count).map(|k| s + 2.0 * k as f64).collect()
    } else {
        scan_spectrum(n, s, theta0, count)?
    };
    let mut entries = Vec::with_capacity(count);
    let mut residuals = Vec::with_capacity(count);
    for (k, &nu) in nus.iter().enumerate() {
        residuals.push(eigen_char(n, s, theta0, nu)?.abs() / char_scale(n, s, theta0, nu));
        let c = if is_half_pi(theta0) {
            let al = s + (1.0 - n as f64) / 2.0;
            ThetaFn::from_fn(grid, |t| sin_over_theta(t).powf(beta) * gegenbauer(2 * k, al, t.cos()))
        } else {
            let (a, b, cc) = hyp_abc(n, s, nu);
            ThetaFn::from_fn(grid, |t| {
                sin_over_theta(t).powf(beta) * hyp2f1(HypParams::new(a, b, cc, (0.5 * t).sin().powi(2))).unwrap_or(f64::NAN)
            })
        };
        entries.push(SpectrumEntry {
            nu,
            lambda: nu * (nu + 1.0 - n as f64),
            eigenfunction: LogThetaSeries::smooth(beta, c),
        });
    }
    Ok(SpectrumResult { entries, char_residuals: residuals })
}

/// Distance from nu to the nearest spectral parameter (nu reflected into
/// nu >= (n-1)/2 first, since lambda_nu is symmetric about that point).
pub fn root_distance(n: usize, s: f64, theta0: f64, nu: f64) -> Result<f64> {
    let half = (n as f64 - 1.0) / 2.0;
    let nu = if nu < half { n as f64 - 1.0 - nu } else { nu };
    if is_half_pi(theta0) {
        let k = ((nu - s) / 2.0).round().max(0.0);
        return Ok((nu - (s + 2.0 * k)).abs());
    }
    let roots = scan_roots(n, s, theta0, nu + 1.0)?;
    Ok(roots.iter().map(|r| (r - nu).abs()).fold(f64::INFINITY, f64::min))
}

pub fn at_root(p: &IndicialParams) -> Result<bool> {
    Ok(root_distance(p.n, p.s, p.theta0, p.nu)? < ROOT_TOL)
}

/// P v = sin^2 v'' + b sin cos v' + c sin^2 v.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VOp {
    pub b: f64,
    pub c: f64,
}

impl VOp {
    pub fn new(b: f64, c: f64) -> Self {
        Self { b, c }
    }

    pub fn beta(&self) -> f64 {
        1.0 - self.b
    }

    /// Parameters of q = sin^beta 2F1(ha, hb; hc; sin^2(theta/2)), the
    /// solution of P q = 0 with q ~ theta^beta.
    pub fn hyp(&self) -> Result<(f64, f64, f64)> {
        let beta = self.beta();
        let disc = (beta - 1.0).powi(2) + 4.0 * self.c;
        if disc < 0.0 {
            return Err(Error::InvalidParams("complex hypergeometric parameters".into()));
        }
        let r = disc.sqrt();
        Ok((0.5 * (beta + 1.0 - r), 0.5 * (beta + 1.0 + r), 1.0 + 0.5 * beta))
    }

    pub fn apply(&self, grid: &ThetaGrid, v: &[f64]) -> Vec<f64> {
        let d1 = grid.deriv(v);
        let d2 = grid.deriv2(v);
        grid.nodes
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let (s, c) = t.sin_cos();
                s * s * d2[i] + self.b * s * c * d1[i] + self.c * s * s * v[i]
            })
            .collect()
    }

    /// A d = 2 (sin/theta) sin d' - (sin/theta)^2 d + b cos (sin/theta) d,
    /// the coefficient of log^{i-1} in P(log^i d) divided by i.
    pub fn apply_a(&self, grid: &ThetaGrid, d: &[f64]) -> Vec<f64> {
        let d1 = grid.deriv(d);
        grid.nodes
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let so = sin_over_theta(t);
                2.0 * so * t.sin() * d1[i] - so * so * d[i] + self.b * t.cos() * so * d[i]
            })
            .collect()
    }

    /// B d = (sin/theta)^2 d.
    pub fn apply_b(&self, grid: &ThetaGrid, d: &[f64]) -> Vec<f64> {
        grid.nodes.iter().zip(d).map(|(&t, v)| sin_over_theta(t).powi(2) * v).collect()
    }
}

/// Values of q, q' and q / theta^beta at the grid nodes.
pub struct KernelData {
    pub q: Vec<f64>,
    pub dq: Vec<f64>,
    pub q_reduced: Vec<f64>,
}

pub fn kernel_data(grid: &ThetaGrid, op: &VOp) -> Result<KernelData> {
    let beta = op.beta();
    let (ha, hb, hc) = op.hyp()?;
    let mut q = Vec::with_capacity(grid.len());
    let mut dq = Vec::with_capacity(grid.len());
    let mut qr = Vec::with_capacity(grid.len());
    for &t in &grid.nodes {
        let x = (0.5 * t).sin().powi(2);
        let f = hyp2f1(HypParams::new(ha, hb, hc, x))?;
        let fp = hyp2f1_deriv(HypParams::new(ha, hb, hc, x))?;
        let (s, c) = t.sin_cos();
        qr.push(sin_over_theta(t).powf(beta) * f);
        q.push(s.powf(beta) * f);
        let d = if t == 0.0 {
            if (beta - 1.0).abs() < 1e-12 {
                1.0
            } else if beta > 1.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            beta * s.powf(beta - 1.0) * c * f + s.powf(beta) * 0.5 * s * fp
        };
        dq.push(d);
    }
    Ok(KernelData { q, dq, q_reduced: qr })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EndRow {
    Neumann,
    Dirichlet,
}

/// Collocation solver for P v = F with v(0) = 0 and v'(theta0) = 0, prepared
/// once per (grid, operator) and reused across right-hand sides.
pub struct GreensSolver {
    pub grid: Arc<ThetaGrid>,
    pub op: VOp,
    pub at_root: bool,
    kernel: KernelData,
    mat: DMatrix<f64>,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    end: EndRow,
    resonant: Option<usize>,
    /// Relative size below which a theta^beta coefficient of the data is
    /// treated as noise rather than the source of a log term.
    pub resonance_tol: f64,
}

/// v = sum_i log(theta)^i levels[i]; q_mult[i] is the multiple of q inside levels[i].
#[derive(Debug, Clone)]
pub struct VSolution {
    pub levels: Vec<Vec<f64>>,
    pub q_mult: Vec<f64>,
}

impl VSolution {
    /// Values of v at the nodes with the log powers evaluated (node 0 takes the limit 0).
    pub fn materialize(&self, grid: &ThetaGrid) -> Vec<f64> {
        let mut out = self.levels[0].clone();
        for (i, lv) in self.levels.iter().enumerate().skip(1) {
            for (j, &t) in grid.nodes.iter().enumerate() {
                if t > 0.0 {
                    out[j] += t.ln().powi(i as i32) * lv[j];
                }
            }
        }
        out
    }

    pub fn log_free(&self) -> bool {
        self.levels.iter().skip(1).all(|l| l.iter().all(|v| *v == 0.0))
    }
}

impl GreensSolver {
    pub fn new(grid: &Arc<ThetaGrid>, op: VOp, at_root: bool) -> Result<Self> {
        let n = grid.len();
        let kernel = kernel_data(grid, &op)?;
        let end = if at_root { EndRow::Dirichlet } else { EndRow::Neumann };
        let (d1, d2) = (grid.d1(), grid.d2());
        let mut mat = DMatrix::<f64>::zeros(n, n);
        for i in 1..n - 1 {
            let (s, c) = grid.nodes[i].sin_cos();
            for j in 0..n {
                mat[(i, j)] = s * s * d2[i * n + j] + op.b * s * c * d1[i * n + j];
            }
            mat[(i, i)] += op.c * s * s;
        }
        mat[(0, 0)] = 1.0;
        match end {
            EndRow::Neumann => {
                for j in 0..n {
                    mat[(n - 1, j)] = d1[(n - 1) * n + j];
                }
            }
            EndRow::Dirichlet => mat[(n - 1, n - 1)] = 1.0,
        }
        let lu = mat.clone().lu();
        let beta = op.beta();
        let resonant = if beta > 0.5 && (beta - beta.round()).abs() < 1e-9 { Some(beta.round() as usize) } else { None };
        Ok(Self { grid: grid.clone(), op, at_root, kernel, mat, lu, end, resonant, resonance_tol: 1e-9 })
    }

    pub fn for_params(grid: &Arc<ThetaGrid>, p: &IndicialParams) -> Result<Self> {
        p.validate()?;
        Self::new(grid, p.vop(), at_root(p)?)
    }

    pub fn with_resonance_tol(mut self, tol: f64) -> Self {
        self.resonance_tol = tol;
        self
    }

    pub fn kernel(&self) -> &KernelData {
        &self.kernel
    }

    fn solve_particular(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = self.grid.len();
        let mut b = DVector::from_column_slice(rhs);
        b[0] = 0.0;
        b[n - 1] = 0.0;
        let x = self.lu.solve(&b).ok_or(Error::IllConditioned { residual: f64::INFINITY })?;
        let r = &self.mat * &x - &b;
        let scale = b.amax().max(x.amax()).max(1e-300);
        let res = r.amax() / scale;
        if !(res <= 1e-7) {
            return Err(Error::IllConditioned { residual: res });
        }
        Ok(x.as_slice().to_vec())
    }

    /// [theta^beta] of g when beta is a positive integer.
    fn resonance(&self, g: &[f64]) -> f64 {
        match self.resonant {
            Some(k) => {
                let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let r = self.grid.taylor_at_zero(g, k + 1)[k];
                if r.abs() <= self.resonance_tol * scale.max(1e-300) {
                    0.0
                } else {
                    r
                }
            }
            None => 0.0,
        }
    }

    /// <g, q> under the v-space weight sin^{b-2} (the u-space weight
    /// sin^{-(n+1)}), for g vanishing at 0.
    pub fn project(&self, g: &[f64]) -> f64 {
        let grid = &self.grid;
        let gt = grid.div_theta_pow(g, 1);
        let beta = self.op.beta();
        let integrand: Vec<f64> = grid
            .nodes
            .iter()
            .enumerate()
            .map(|(j, &t)| gt[j] * self.kernel.q_reduced[j] * theta_over_sin(t).powf(beta + 1.0))
            .collect();
        grid.integral(&integrand)
    }

    pub fn q_norm2(&self) -> f64 {
        self.project(&self.kernel.q)
    }

    /// Solves P(sum_i log^i d_i) = sum_i log^i F_i.
    pub fn solve_levels(&self, rhs: &[Vec<f64>]) -> Result<VSolution> {
        let grid = &self.grid;
        let n = grid.len();
        let k = rhs.len().max(1) - 1;
        let mut d = vec![vec![0.0; n]; k + 3];
        let mut qm = vec![0.0; k + 3];
        let zero = vec![0.0; n];
        for i in (0..=k).rev() {
            let fi = rhs.get(i).unwrap_or(&zero);
            let ad = self.op.apply_a(grid, &d[i + 1]);
            let bd = self.op.apply_b(grid, &d[i + 2]);
            let i1 = (i + 1) as f64;
            let mut g: Vec<f64> = (0..n).map(|j| fi[j] - i1 * ad[j] - i1 * (i1 + 1.0) * bd[j]).collect();
            let r = self.resonance(&g);
            if r != 0.0 {
                let beta = self.op.beta();
                let t = r / (i1 * beta);
                for j in 0..n {
                    d[i + 1][j] += t * self.kernel.q[j];
                }
                qm[i + 1] += t;
                let aq = self.op.apply_a(grid, &self.kernel.q);
                for j in 0..n {
                    g[j] -= i1 * t * aq[j];
                }
            }
            d[i] = self.solve_particular(&g)?;
        }
        while d.len() > 1 && d.last().unwrap().iter().all(|v| *v == 0.0) {
            d.pop();
            qm.pop();
        }

        let t0 = grid.theta0;
        let l0 = t0.ln();
        let mut dv = 0.0;
        for (i, lv) in d.iter().enumerate() {
            let der = grid.deriv(lv)[n - 1];
            dv += l0.powi(i as i32) * der;
            if i > 0 {
                dv += i as f64 * l0.powi(i as i32 - 1) * lv[n - 1] / t0;
            }
        }
        if !self.at_root {
            let bq = -dv / self.kernel.dq[n - 1];
            for j in 0..n {
                d[0][j] += bq * self.kernel.q[j];
            }
            qm[0] += bq;
        } else {
            let sol = VSolution { levels: d.clone(), q_mult: qm.clone() };
            let v = sol.materialize(grid);
            let c = self.project(&v) / self.q_norm2();
            for j in 0..n {
                d[0][j] -= c * self.kernel.q[j];
            }
            qm[0] -= c;
        }
        Ok(VSolution { levels: d, q_mult: qm })
    }

    /// Single log-free right-hand side; at a root the kernel projection of
    /// the data is checked first.
    pub fn solve(&self, rhs: &[f64]) -> Result<VSolution> {
        if self.at_root {
            let proj = self.project(rhs);
            if proj.abs() > 1e-8 {
                return Err(Error::ObstructedRHS { projection: proj });
            }
        }
        self.solve_levels(std::slice::from_ref(&rhs.to_vec()))
    }

    pub fn end_row_is_neumann(&self) -> bool {
        self.end == EndRow::Neumann
    }
}

/// v-space levels F_i = f_i / sin^a written in powers of log(theta).
fn to_v_levels(p: &IndicialParams, f: &LogThetaSeries) -> Result<Vec<Vec<f64>>> {
    let grid = f.grid();
    let a = p.a();
    let beta = p.beta();
    if f.has_logs() && (f.beta - beta).abs() > 1e-9 {
        return Err(Error::InvalidParams(format!("log base {} differs from 2s-n = {}", f.beta, beta)));
    }
    let k = f.max_log();
    let mut out = vec![vec![0.0; grid.len()]; k + 1];
    for (&i, c) in &f.terms {
        let e = f.alpha - a + i as f64 * f.beta;
        if e < -1e-9 {
            return Err(Error::InvalidParams(format!("right-hand side exponent {e} below the B-form bound")));
        }
        for (j, &t) in grid.nodes.iter().enumerate() {
            out[i][j] = if t == 0.0 {
                if e.abs() < 1e-9 {
                    c.values[0]
                } else {
                    0.0
                }
            } else {
                t.powf(e) * c.values[j] * theta_over_sin(t).powf(a)
            };
        }
    }
    Ok(out)
}

fn from_v_solution(p: &IndicialParams, solver: &GreensSolver, sol: &VSolution) -> LogThetaSeries {
    let grid = &solver.grid;
    let a = p.a();
    let beta = p.beta();
    let kq = &solver.kernel;
    let sa = ThetaFn::from_fn(grid, |t| sin_over_theta(t).powf(a));
    let mut terms = BTreeMap::new();
    for (i, lv) in sol.levels.iter().enumerate() {
        let c = if i == 0 {
            ThetaFn::new(grid, lv.clone())
        } else {
            let part: Vec<f64> = lv.iter().zip(&kq.q).map(|(v, q)| v - sol.q_mult[i] * q).collect();
            let e = i as f64 * beta;
            let mut reduced = if (e - e.round()).abs() < 1e-9 {
                grid.div_theta_pow(&part, e.round() as usize)
            } else {
                let mut r: Vec<f64> = part.iter().zip(&grid.nodes).map(|(v, &t)| v / t.powf(e)).collect();
                r[0] = 0.0;
                r
            };
            if i == 1 {
                for (r, qr) in reduced.iter_mut().zip(&kq.q_reduced) {
                    *r += sol.q_mult[1] * qr;
                }
            }
            ThetaFn::new(grid, reduced)
        };
        terms.insert(i, c.mul(&sa));
    }
    LogThetaSeries::with_terms(a, beta, terms)
}

/// Solves I_{s,nu} u = f with sin^{s-n} u -> 0 at 0 and the Robin condition at theta0.
pub fn greens_solve(p: &IndicialParams, f: &LogThetaSeries) -> Result<LogThetaSeries> {
    let solver = GreensSolver::for_params(f.grid(), p)?;
    greens_solve_with(&solver, p, f)
}

pub fn greens_solve_with(solver: &GreensSolver, p: &IndicialParams, f: &LogThetaSeries) -> Result<LogThetaSeries> {
    let levels = to_v_levels(p, f)?;
    if solver.at_root {
        let proj = project_obstruction(f, p)?;
        if proj.abs() > 1e-8 {
            return Err(Error::ObstructedRHS { projection: proj });
        }
    }
    let sol = solver.solve_levels(&levels)?;
    Ok(from_v_solution(p, solver, &sol))
}

/// beta_{s,nu} = sin^{n-s} q with q / theta^{2s-n} -> 1.
pub fn kernel_fn(p: &IndicialParams, grid: &Arc<ThetaGrid>) -> Result<LogThetaSeries> {
    p.validate()?;
    if !at_root(p)? {
        return Err(Error::NotAtRoot { nu: p.nu });
    }
    Ok(kernel_series(p, grid)?)
}

fn kernel_series(p: &IndicialParams, grid: &Arc<ThetaGrid>) -> Result<LogThetaSeries> {
    let kd = kernel_data(grid, &p.vop())?;
    let a = p.a();
    let c: Vec<f64> = kd.q_reduced.iter().zip(&grid.nodes).map(|(v, &t)| v * sin_over_theta(t).powf(a)).collect();
    Ok(LogThetaSeries::smooth(p.s, ThetaFn::new(grid, c)))
}

/// <f, beta_{s,nu}> under sin^{-(n+1)} d theta.
pub fn project_obstruction(f: &LogThetaSeries, p: &IndicialParams) -> Result<f64> {
    p.validate()?;
    let k = kernel_series(p, f.grid())?;
    f.mul(&k).integrate_weighted(-(p.n as f64 + 1.0), 0.0, p.theta0)
}
