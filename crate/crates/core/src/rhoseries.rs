//! Truncated expansions sum_{j,k} rho^j log(rho)^k c_{jk} whose coefficients
//! are sampled on (theta nodes) x (torus collocation points).

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::thetagrid::ThetaGrid;
use crate::{Error, Result};

pub const DEFAULT_M_MAX: usize = 8;

/// One Fourier amplitude of one tensor component of a field on S.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeEntry {
    pub mode: Vec<i32>,
    #[serde(default)]
    pub component: Vec<usize>,
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

/// Flat torus (R / 2 pi Z)^dim sampled at p points per axis.
#[derive(Debug)]
pub struct Torus {
    pub dim: usize,
    pub m_max: usize,
    pub p: usize,
    d1: Vec<f64>,
}

impl Torus {
    pub fn new(dim: usize, m_max: usize) -> Arc<Self> {
        // odd point count so the interpolant has no Nyquist mode
        let mut p = 3 * m_max + 1;
        if p % 2 == 0 {
            p += 1;
        }
        let h = 2.0 * PI / p as f64;
        let mut d1 = vec![0.0; p * p];
        for i in 0..p {
            for j in 0..p {
                if i != j {
                    let k = i as f64 - j as f64;
                    let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
                    d1[i * p + j] = 0.5 * sign / (0.5 * k * h).sin();
                }
            }
        }
        Arc::new(Self { dim, m_max, p, d1 })
    }

    pub fn len(&self) -> usize {
        self.p.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, q: usize) -> Vec<f64> {
        let h = 2.0 * PI / self.p as f64;
        let mut r = q;
        (0..self.dim)
            .map(|_| {
                let i = r % self.p;
                r /= self.p;
                i as f64 * h
            })
            .collect()
    }

    pub fn from_fn(&self, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        (0..self.len()).map(|q| f(&self.point(q))).collect()
    }

    /// d/dx^axis of values laid out as v[i * len + q] for each of `rows` rows.
    pub fn deriv(&self, v: &[f64], rows: usize, axis: usize) -> Vec<f64> {
        let nq = self.len();
        let p = self.p;
        let stride = p.pow(axis as u32);
        let mut out = vec![0.0; v.len()];
        for r in 0..rows {
            let base = r * nq;
            for q in 0..nq {
                let i = (q / stride) % p;
                let q0 = q - i * stride;
                let mut acc = 0.0;
                for j in 0..p {
                    acc += self.d1[i * p + j] * v[base + q0 + j * stride];
                }
                out[base + q] = acc;
            }
        }
        out
    }

    fn modes(&self) -> Vec<Vec<i32>> {
        let m = self.m_max as i32;
        let mut out = vec![vec![]];
        for _ in 0..self.dim {
            let mut next = Vec::new();
            for v in &out {
                for k in -m..=m {
                    let mut w = v.clone();
                    w.push(k);
                    next.push(w);
                }
            }
            out = next;
        }
        out
    }

    /// Amplitudes with |m|_inf <= m_max, conjugate-symmetric for real data.
    pub fn analyze(&self, v: &[f64]) -> Vec<(Vec<i32>, Complex64)> {
        let pts: Vec<Vec<f64>> = (0..self.len()).map(|q| self.point(q)).collect();
        let norm = 1.0 / self.len() as f64;
        self.modes()
            .into_iter()
            .map(|m| {
                let mut acc = Complex64::new(0.0, 0.0);
                for (x, &f) in pts.iter().zip(v) {
                    let ph: f64 = m.iter().zip(x).map(|(&k, &xi)| k as f64 * xi).sum();
                    acc += f * Complex64::new(0.0, -ph).exp();
                }
                (m, acc * norm)
            })
            .collect()
    }

    /// Re sum_m c_m e^{i m.x}.
    pub fn synthesize(&self, modes: &[(Vec<i32>, Complex64)]) -> Vec<f64> {
        self.from_fn(|x| {
            modes
                .iter()
                .map(|(m, c)| {
                    let ph: f64 = m.iter().zip(x).map(|(&k, &xi)| k as f64 * xi).sum();
                    (c * Complex64::new(0.0, ph).exp()).re
                })
                .sum()
        })
    }
}

/// Field on S given by Fourier amplitudes; `component` indexes a tensor
/// slot (empty for scalars, [mu, nu] for symmetric 2-tensors).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SField {
    pub entries: Vec<ModeEntry>,
}

impl SField {
    pub fn scalar(modes: &[(Vec<i32>, f64, f64)]) -> Self {
        let entries = modes
            .iter()
            .map(|(m, re, im)| ModeEntry { mode: m.clone(), component: vec![], re: *re, im: *im })
            .collect();
        Self { entries }
    }

    pub fn values(&self, torus: &Torus, component: &[usize]) -> Vec<f64> {
        let modes: Vec<(Vec<i32>, Complex64)> = self
            .entries
            .iter()
            .filter(|e| component_matches(&e.component, component))
            .map(|e| (e.mode.clone(), Complex64::new(e.re, e.im)))
            .collect();
        torus.synthesize(&modes)
    }

    /// Symmetric (dim x dim) tensor values over the S-indices.
    pub fn sym2_values(&self, torus: &Torus, dim: usize) -> Vec<Vec<Vec<f64>>> {
        (0..dim).map(|a| (0..dim).map(|b| self.values(torus, &[a, b])).collect()).collect()
    }

    pub fn from_values(torus: &Torus, component: Vec<usize>, v: &[f64], tol: f64) -> Self {
        let entries = torus
            .analyze(v)
            .into_iter()
            .filter(|(_, c)| c.norm() > tol)
            .map(|(m, c)| ModeEntry { mode: m, component: component.clone(), re: c.re, im: c.im })
            .collect();
        Self { entries }
    }

    pub fn extend(&mut self, other: SField) {
        self.entries.extend(other.entries);
    }

    pub fn max_amplitude(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.re.hypot(e.im)))
    }

    pub fn validate(&self, dim: usize, m_max: usize) -> Result<()> {
        for e in &self.entries {
            if e.mode.len() != dim {
                return Err(Error::RankMismatch(format!("mode {:?} on a {dim}-torus", e.mode)));
            }
            if e.mode.iter().any(|k| k.unsigned_abs() as usize > m_max) {
                return Err(Error::InvalidParams(format!("mode {:?} above the cutoff {m_max}", e.mode)));
            }
            if !(e.re.is_finite() && e.im.is_finite()) {
                return Err(Error::InvalidParams("non-finite amplitude".into()));
            }
        }
        Ok(())
    }
}

// A symmetric pair matches either ordering.
fn component_matches(stored: &[usize], wanted: &[usize]) -> bool {
    if stored == wanted {
        return true;
    }
    stored.len() == 2 && wanted.len() == 2 && stored[0] == wanted[1] && stored[1] == wanted[0]
}

/// Values on nt theta-rows times the torus points, v[i * nq + q]. A field
/// with nt = 1 is constant in theta and broadcasts against full fields.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub nt: usize,
    pub nq: usize,
    pub v: Vec<f64>,
}

impl Field {
    pub fn constant_s(v: Vec<f64>) -> Self {
        Self { nt: 1, nq: v.len(), v }
    }

    pub fn broadcast(&self, nt: usize) -> Self {
        if self.nt == nt {
            return self.clone();
        }
        assert_eq!(self.nt, 1, "cannot broadcast a theta-dependent field");
        let mut v = Vec::with_capacity(nt * self.nq);
        for _ in 0..nt {
            v.extend_from_slice(&self.v);
        }
        Self { nt, nq: self.nq, v }
    }

    fn zip(&self, o: &Field, f: impl Fn(f64, f64) -> f64) -> Field {
        assert_eq!(self.nq, o.nq);
        if self.nt == o.nt {
            let v = self.v.iter().zip(&o.v).map(|(a, b)| f(*a, *b)).collect();
            return Field { nt: self.nt, nq: self.nq, v };
        }
        let nt = self.nt.max(o.nt);
        let nq = self.nq;
        let mut v = vec![0.0; nt * nq];
        for i in 0..nt {
            let ia = if self.nt == 1 { 0 } else { i };
            let ib = if o.nt == 1 { 0 } else { i };
            for q in 0..nq {
                v[i * nq + q] = f(self.v[ia * nq + q], o.v[ib * nq + q]);
            }
        }
        Field { nt, nq, v }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field { nt: self.nt, nq: self.nq, v: self.v.iter().map(|a| f(*a)).collect() }
    }

    pub fn max_abs(&self) -> f64 {
        self.v.iter().fold(0.0, |m, a| m.max(a.abs()))
    }

    pub fn plus(&self, o: &Field) -> Field {
        self.zip(o, |a, b| a + b)
    }

    pub fn times(&self, o: &Field) -> Field {
        self.zip(o, |a, b| a * b)
    }

    /// max |self - o|
    pub fn dist(&self, o: &Field) -> f64 {
        self.zip(o, |a, b| a - b).max_abs()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let i = if self.nt == 1 { 0 } else { i };
        &self.v[i * self.nq..(i + 1) * self.nq]
    }

    pub fn column(&self, q: usize, nt: usize) -> Vec<f64> {
        (0..nt).map(|i| self.v[if self.nt == 1 { q } else { i * self.nq + q }]).collect()
    }

    pub fn from_columns(cols: &[Vec<f64>]) -> Field {
        let nq = cols.len();
        let nt = cols[0].len();
        let mut v = vec![0.0; nt * nq];
        for (q, c) in cols.iter().enumerate() {
            for i in 0..nt {
                v[i * nq + q] = c[i];
            }
        }
        Field { nt, nq, v }
    }
}

/// Coefficient algebra used by the series.
pub trait Coef: Clone {
    fn add(&self, o: &Self) -> Self;
    fn scale(&self, a: f64) -> Self;
    fn mul(&self, o: &Self) -> Self;
    fn norm(&self) -> f64;
}

impl Coef for f64 {
    fn add(&self, o: &Self) -> Self {
        self + o
    }
    fn scale(&self, a: f64) -> Self {
        self * a
    }
    fn mul(&self, o: &Self) -> Self {
        self * o
    }
    fn norm(&self) -> f64 {
        self.abs()
    }
}

impl Coef for Field {
    fn add(&self, o: &Self) -> Self {
        self.zip(o, |a, b| a + b)
    }
    fn scale(&self, a: f64) -> Self {
        self.map(|x| a * x)
    }
    fn mul(&self, o: &Self) -> Self {
        self.zip(o, |a, b| a * b)
    }
    fn norm(&self) -> f64 {
        self.max_abs()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RhoLogExpansion<C> {
    pub order: usize,
    pub terms: BTreeMap<(usize, usize), C>,
}

pub type Series = RhoLogExpansion<Field>;
pub type Tensor = Vec<Vec<Series>>;

impl<C: Coef> RhoLogExpansion<C> {
    pub fn zero(order: usize) -> Self {
        Self { order, terms: BTreeMap::new() }
    }

    pub fn monomial(order: usize, j: usize, k: usize, c: C) -> Self {
        let mut s = Self::zero(order);
        if j <= order {
            s.terms.insert((j, k), c);
        }
        s
    }

    pub fn insert_add(&mut self, j: usize, k: usize, c: C) {
        if j > self.order {
            return;
        }
        match self.terms.get_mut(&(j, k)) {
            Some(e) => *e = e.add(&c),
            None => {
                self.terms.insert((j, k), c);
            }
        }
    }

    pub fn get(&self, j: usize, k: usize) -> Option<&C> {
        self.terms.get(&(j, k))
    }

    /// Coefficient of rho^j log^k, or None when it is absent (i.e. zero).
    pub fn extract_order(&self, j: usize, k: usize) -> Option<&C> {
        self.get(j, k)
    }

    pub fn max_log(&self, j: usize) -> usize {
        self.terms.keys().filter(|(a, _)| *a == j).map(|(_, k)| *k).max().unwrap_or(0)
    }

    pub fn add(&self, o: &Self) -> Self {
        let mut out = Self::zero(self.order.min(o.order));
        for (&(j, k), c) in self.terms.iter().chain(o.terms.iter()) {
            out.insert_add(j, k, c.clone());
        }
        out
    }

    pub fn scale(&self, a: f64) -> Self {
        let terms = self.terms.iter().map(|(key, c)| (*key, c.scale(a))).collect();
        Self { order: self.order, terms }
    }

    pub fn sub(&self, o: &Self) -> Self {
        self.add(&o.scale(-1.0))
    }

    /// Cauchy product truncated at the smaller order.
    pub fn mul(&self, o: &Self) -> Self {
        let mut out = Self::zero(self.order.min(o.order));
        for (&(j1, k1), a) in &self.terms {
            for (&(j2, k2), b) in &o.terms {
                if j1 + j2 <= out.order {
                    out.insert_add(j1 + j2, k1 + k2, a.mul(b));
                }
            }
        }
        out
    }

    pub fn mul_coef(&self, c: &C) -> Self {
        let terms = self.terms.iter().map(|(key, a)| (*key, a.mul(c))).collect();
        Self { order: self.order, terms }
    }

    /// Multiplication by rho^p (higher terms dropped).
    pub fn mul_rho(&self, p: usize) -> Self {
        let mut out = Self::zero(self.order);
        for (&(j, k), c) in &self.terms {
            out.insert_add(j + p, k, c.clone());
        }
        out
    }

    /// Division by rho^p; fails if a term of order < p is present.
    pub fn div_rho(&self, p: usize) -> Result<Self> {
        let mut out = Self::zero(self.order.saturating_sub(p));
        for (&(j, k), c) in &self.terms {
            if j < p {
                return Err(Error::NegativePowerProduced);
            }
            out.insert_add(j - p, k, c.clone());
        }
        Ok(out)
    }

    /// (rho d/drho + shift) applied termwise.
    pub fn euler(&self, shift: f64) -> Self {
        let mut out = Self::zero(self.order);
        for (&(j, k), c) in &self.terms {
            let f = j as f64 + shift;
            if f != 0.0 {
                out.insert_add(j, k, c.scale(f));
            }
            if k > 0 {
                out.insert_add(j, k - 1, c.scale(k as f64));
            }
        }
        out
    }

    pub fn rho_derivative(&self) -> Result<Self> {
        for &(j, k) in self.terms.keys() {
            if j == 0 && k > 0 {
                return Err(Error::NegativePowerProduced);
            }
        }
        let e = self.euler(0.0);
        let mut out = Self::zero(self.order.saturating_sub(1));
        for (&(j, k), c) in &e.terms {
            if j == 0 {
                continue;
            }
            out.insert_add(j - 1, k, c.clone());
        }
        Ok(out)
    }

    pub fn truncate(&self, order: usize) -> Self {
        let terms = self.terms.iter().filter(|((j, _), _)| *j <= order).map(|(k, c)| (*k, c.clone())).collect();
        Self { order: order.min(self.order), terms }
    }

    pub fn with_order(&self, order: usize) -> Self {
        let mut s = self.truncate(order);
        s.order = order;
        s
    }

    pub fn map(&self, f: impl Fn(&C) -> C) -> Self {
        let terms = self.terms.iter().map(|(key, c)| (*key, f(c))).collect();
        Self { order: self.order, terms }
    }

    /// Terms of order exactly j as a map k -> coefficient.
    pub fn slice(&self, j: usize) -> BTreeMap<usize, C> {
        self.terms.iter().filter(|((a, _), _)| *a == j).map(|((_, k), c)| (*k, c.clone())).collect()
    }

    pub fn max_norm_at(&self, j: usize) -> f64 {
        self.terms.iter().filter(|((a, _), _)| *a == j).fold(0.0, |m, (_, c)| m.max(c.norm()))
    }

    /// sum_{j,k} rho^j log(rho)^k c_{jk} with a caller-supplied combinator.
    pub fn sum_at(&self, rho: f64, zero: C) -> C {
        let l = rho.ln();
        let mut acc = zero;
        for (&(j, k), c) in &self.terms {
            let w = rho.powi(j as i32) * if k == 0 { 1.0 } else { l.powi(k as i32) };
            acc = acc.add(&c.scale(w));
        }
        acc
    }
}

impl RhoLogExpansion<f64> {
    pub fn eval(&self, rho: f64) -> f64 {
        self.sum_at(rho, 0.0)
    }
}

/// Theta grid plus torus; owns the spectral operators that act on fields.
#[derive(Debug, Clone)]
pub struct Ctx {
    pub grid: Arc<ThetaGrid>,
    pub torus: Arc<Torus>,
}

impl Ctx {
    pub fn new(grid: Arc<ThetaGrid>, torus: Arc<Torus>) -> Self {
        Self { grid, torus }
    }

    pub fn nt(&self) -> usize {
        self.grid.len()
    }

    pub fn nq(&self) -> usize {
        self.torus.len()
    }

    pub fn constant(&self, c: f64) -> Field {
        Field { nt: 1, nq: self.nq(), v: vec![c; self.nq()] }
    }

    pub fn zero_full(&self) -> Field {
        Field { nt: self.nt(), nq: self.nq(), v: vec![0.0; self.nt() * self.nq()] }
    }

    pub fn theta_fn(&self, f: impl Fn(f64) -> f64) -> Field {
        let nq = self.nq();
        let mut v = Vec::with_capacity(self.nt() * nq);
        for &t in &self.grid.nodes {
            let y = f(t);
            v.extend(std::iter::repeat(y).take(nq));
        }
        Field { nt: self.nt(), nq, v }
    }

    pub fn s_fn(&self, f: impl Fn(&[f64]) -> f64) -> Field {
        Field::constant_s(self.torus.from_fn(f))
    }

    pub fn full_fn(&self, f: impl Fn(f64, &[f64]) -> f64) -> Field {
        let pts: Vec<Vec<f64>> = (0..self.nq()).map(|q| self.torus.point(q)).collect();
        let mut v = Vec::with_capacity(self.nt() * self.nq());
        for &t in &self.grid.nodes {
            for x in &pts {
                v.push(f(t, x));
            }
        }
        Field { nt: self.nt(), nq: self.nq(), v }
    }

    pub fn dtheta(&self, f: &Field) -> Field {
        if f.nt == 1 {
            return Field { nt: 1, nq: f.nq, v: vec![0.0; f.nq] };
        }
        let n = self.nt();
        let nq = f.nq;
        let d = self.grid.d1();
        let mut v = vec![0.0; n * nq];
        for i in 0..n {
            let out = &mut v[i * nq..(i + 1) * nq];
            for k in 0..n {
                let w = d[i * n + k];
                if w == 0.0 {
                    continue;
                }
                let src = &f.v[k * nq..(k + 1) * nq];
                for (o, s) in out.iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
        Field { nt: n, nq, v }
    }

    pub fn dx(&self, f: &Field, axis: usize) -> Field {
        Field { nt: f.nt, nq: f.nq, v: self.torus.deriv(&f.v, f.nt, axis) }
    }

    /// Row theta = 0 as a theta-independent field.
    pub fn at_zero(&self, f: &Field) -> Field {
        Field::constant_s(f.row(0).to_vec())
    }

    pub fn at_end(&self, f: &Field) -> Field {
        Field::constant_s(f.row(self.nt() - 1).to_vec())
    }

    /// f / sin(theta) for f vanishing at theta = 0 (Taylor value at the node 0).
    pub fn div_sin(&self, f: &Field) -> Field {
        if f.nt == 1 {
            return self.zero_full();
        }
        let cols: Vec<Vec<f64>> = (0..f.nq).map(|q| self.grid.div_sin_pow(&f.column(q, f.nt), 1)).collect();
        Field::from_columns(&cols)
    }

    /// Applies a per-column theta map in parallel.
    pub fn map_columns(&self, f: &Field, g: impl Fn(&[f64]) -> Result<Vec<f64>> + Sync) -> Result<Field> {
        use rayon::prelude::*;
        let full = f.broadcast(self.nt());
        let cols: Vec<Vec<f64>> =
            (0..full.nq).into_par_iter().map(|q| g(&full.column(q, full.nt))).collect::<Result<_>>()?;
        Ok(Field::from_columns(&cols))
    }

    pub fn series_dtheta(&self, s: &Series) -> Series {
        let mut out = Series::zero(s.order);
        for (&key, c) in &s.terms {
            if c.nt > 1 {
                out.terms.insert(key, self.dtheta(c));
            }
        }
        out
    }

    pub fn series_dx(&self, s: &Series, axis: usize) -> Series {
        s.map(|c| self.dx(c, axis))
    }

    pub fn scalar(&self, order: usize, c: f64) -> Series {
        Series::monomial(order, 0, 0, self.constant(c))
    }
}

pub fn theta_derivative(ctx: &Ctx, s: &Series) -> Series {
    ctx.series_dtheta(s)
}

pub fn tangential_derivative(ctx: &Ctx, s: &Series, axis: usize) -> Series {
    ctx.series_dx(s, axis)
}

pub fn series_mul<C: Coef>(a: &RhoLogExpansion<C>, b: &RhoLogExpansion<C>) -> RhoLogExpansion<C> {
    a.mul(b)
}

pub fn zero_tensor(n: usize, order: usize) -> Tensor {
    vec![vec![Series::zero(order); n]; n]
}

pub fn tensor_order(a: &Tensor) -> usize {
    a.iter().flatten().map(|s| s.order).min().unwrap_or(0)
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = a.len();
    if b.len() != n || a.iter().chain(b.iter()).any(|r| r.len() != n) {
        return Err(Error::RankMismatch("matrix series of different sizes".into()));
    }
    let order = tensor_order(a).min(tensor_order(b));
    let mut out = zero_tensor(n, order);
    for i in 0..n {
        for j in 0..n {
            let mut acc = Series::zero(order);
            for k in 0..n {
                if a[i][k].terms.is_empty() || b[k][j].terms.is_empty() {
                    continue;
                }
                acc = acc.add(&a[i][k].mul(&b[k][j]));
            }
            out[i][j] = acc;
        }
    }
    Ok(out)
}

/// Truncated Neumann-series inverse of a symmetric matrix series.
pub fn series_inverse_sym2(a: &Tensor) -> Result<Tensor> {
    let n = a.len();
    if a.iter().any(|r| r.len() != n) {
        return Err(Error::RankMismatch("inverse of a non-square tensor".into()));
    }
    let order = tensor_order(a);
    let mut lead: Vec<Vec<Option<Field>>> = vec![vec![None; n]; n];
    let mut nt = 1;
    let mut nq = 0;
    for (i, row) in a.iter().enumerate() {
        for (j, s) in row.iter().enumerate() {
            if s.terms.keys().any(|&(jj, k)| jj == 0 && k > 0) {
                return Err(Error::SingularLeadingTerm);
            }
            if let Some(c) = s.get(0, 0) {
                nt = nt.max(c.nt);
                nq = c.nq;
                lead[i][j] = Some(c.clone());
            }
        }
    }
    if nq == 0 {
        return Err(Error::SingularLeadingTerm);
    }
    let mut inv: Vec<Vec<Vec<f64>>> = vec![vec![vec![0.0; nt * nq]; n]; n];
    let mut m = DMatrix::<f64>::zeros(n, n);
    for p in 0..nt * nq {
        let (i_t, q) = (p / nq, p % nq);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = match &lead[i][j] {
                    Some(f) => f.v[if f.nt == 1 { q } else { i_t * nq + q }],
                    None => 0.0,
                };
            }
        }
        let scale = m.amax();
        let mi = m.clone().try_inverse().ok_or(Error::SingularLeadingTerm)?;
        if !(scale > 0.0) || mi.amax() * scale > 1e12 {
            return Err(Error::SingularLeadingTerm);
        }
        for i in 0..n {
            for j in 0..n {
                inv[i][j][p] = mi[(i, j)];
            }
        }
    }
    let b0: Tensor = inv
        .into_iter()
        .map(|row| row.into_iter().map(|v| Series::monomial(order, 0, 0, Field { nt, nq, v })).collect())
        .collect();
    let rest: Tensor = a
        .iter()
        .map(|row| {
            row.iter()
                .map(|s| {
                    let mut r = s.clone();
                    r.terms.remove(&(0, 0));
                    r
                })
                .collect()
        })
        .collect();
    // X = sum_m (-B0 R)^m B0
    let mut x = b0.clone();
    let mut t = b0.clone();
    let step = matmul(&b0, &rest)?;
    for _ in 0..order {
        t = matmul(&step, &t)?;
        t = t.iter().map(|r| r.iter().map(|s| s.scale(-1.0)).collect()).collect();
        if t.iter().flatten().all(|s| s.terms.is_empty()) {
            break;
        }
        for i in 0..n {
            for j in 0..n {
                x[i][j] = x[i][j].add(&t[i][j]);
            }
        }
    }
    Ok(x)
}
