//! Functions on [0, theta0]: Chebyshev-Gauss-Lobatto collocation, quadrature
//! and the log-augmented series u = theta^alpha sum_i (theta^beta log theta)^i c_i.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use crate::{Error, Result};

pub const DEFAULT_N: usize = 64;
const EXP_TOL: f64 = 1e-9;

/// Ascending CGL points on [-1, 1].
pub fn cgl_points(m: usize) -> Vec<f64> {
    let d = (m - 1) as f64;
    (0..m)
        .map(|j| {
            let t = PI * j as f64 / d;
            // -cos(t), written to stay accurate near both ends
            if 2 * j <= m - 1 {
                -1.0 + 2.0 * (0.5 * t).sin().powi(2)
            } else {
                1.0 - 2.0 * (0.5 * (PI - t)).sin().powi(2)
            }
        })
        .collect()
}

/// Chebyshev coefficients of the interpolant through values at ascending CGL points.
pub fn cheb_coeffs(values: &[f64]) -> Vec<f64> {
    let m = values.len();
    let d = (m - 1) as f64;
    let mut a = vec![0.0; m];
    for (k, ak) in a.iter_mut().enumerate() {
        let mut s = 0.0;
        for (j, &f) in values.iter().enumerate() {
            let w = if j == 0 || j == m - 1 { 0.5 } else { 1.0 };
            // T_k(x_j) with x_j = cos(pi - t_j)
            let arg = ((k * (m - 1 - j)) % (2 * (m - 1))) as f64 * PI / d;
            s += w * f * arg.cos();
        }
        *ak = 2.0 * s / d;
    }
    a[0] *= 0.5;
    a[m - 1] *= 0.5;
    a
}

pub fn cheb_eval(a: &[f64], x: f64) -> f64 {
    let (mut b1, mut b2) = (0.0, 0.0);
    for &c in a.iter().skip(1).rev() {
        let b0 = 2.0 * x * b1 - b2 + c;
        b2 = b1;
        b1 = b0;
    }
    x * b1 - b2 + a[0]
}

/// Clenshaw-Curtis weights on ascending CGL points of [-1, 1].
pub fn cc_weights(m: usize) -> Vec<f64> {
    let mut w = vec![0.0; m];
    let mut e = vec![0.0; m];
    for j in 0..m {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[j] = 1.0;
        let a = cheb_coeffs(&e);
        w[j] = a.iter().enumerate().step_by(2).map(|(k, c)| c * 2.0 / (1.0 - (k * k) as f64)).sum();
    }
    w
}

fn bary_weights(m: usize) -> Vec<f64> {
    (0..m)
        .map(|j| {
            let s = if j % 2 == 0 { 1.0 } else { -1.0 };
            if j == 0 || j == m - 1 {
                0.5 * s
            } else {
                s
            }
        })
        .collect()
}

fn bary_eval(x: &[f64], w: &[f64], f: &[f64], t: f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for j in 0..x.len() {
        let d = t - x[j];
        if d == 0.0 {
            return f[j];
        }
        let c = w[j] / d;
        num += c * f[j];
        den += c;
    }
    num / den
}

/// k-th derivative of T_m at x = -1.
fn cheb_deriv_at_minus_one(m: usize, k: usize) -> f64 {
    let mut v = if (m + k) % 2 == 0 { 1.0 } else { -1.0 };
    let m2 = (m * m) as f64;
    for i in 0..k {
        v *= (m2 - (i * i) as f64) / (2 * i + 1) as f64;
    }
    v
}

#[derive(Debug)]
pub struct ThetaGrid {
    pub theta0: f64,
    pub nodes: Vec<f64>,
    x: Vec<f64>,
    bary: Vec<f64>,
    d1: Vec<f64>,
    d2: Vec<f64>,
    cc: Vec<f64>,
    cumint: Vec<f64>,
}

impl ThetaGrid {
    pub fn new(theta0: f64, n: usize) -> Result<Arc<Self>> {
        if !(theta0 > 0.0 && theta0 < PI) {
            return Err(Error::InvalidParams(format!("theta0 = {theta0} outside (0, pi)")));
        }
        if n < 16 {
            return Err(Error::InvalidParams(format!("grid size {n} below 16")));
        }
        let x = cgl_points(n);
        let nodes: Vec<f64> = x.iter().map(|&xi| 0.5 * theta0 * (xi + 1.0)).collect();
        let bary = bary_weights(n);
        let dn = (n - 1) as f64;
        let mut d1 = vec![0.0; n * n];
        for i in 0..n {
            let ti = PI * i as f64 / dn;
            let mut diag = 0.0;
            for j in 0..n {
                if i == j {
                    continue;
                }
                let tj = PI * j as f64 / dn;
                // x_i - x_j = cos t_j - cos t_i
                let diff = 2.0 * (0.5 * (ti + tj)).sin() * (0.5 * (ti - tj)).sin();
                let v = bary[j] / bary[i] / diff;
                d1[i * n + j] = v;
                diag -= v;
            }
            d1[i * n + i] = diag;
        }
        let scale = 2.0 / theta0;
        d1.iter_mut().for_each(|v| *v *= scale);
        let mut d2 = matmul(&d1, &d1, n);
        for i in 0..n {
            let off: f64 = (0..n).filter(|&j| j != i).map(|j| d2[i * n + j]).sum();
            d2[i * n + i] = -off;
        }
        let cc: Vec<f64> = cc_weights(n).into_iter().map(|w| 0.5 * theta0 * w).collect();

        let mut cumint = vec![0.0; n * n];
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            let a = cheb_coeffs(&e);
            let mut b = vec![0.0; n + 1];
            for k in 1..=n {
                let am = a[k - 1] * if k == 1 { 2.0 } else { 1.0 };
                let ap = if k + 1 < n { a[k + 1] } else { 0.0 };
                b[k] = (am - ap) / (2.0 * k as f64);
            }
            b[0] = -(1..=n).map(|k| if k % 2 == 0 { b[k] } else { -b[k] }).sum::<f64>();
            for i in 0..n {
                let ti = PI * (n - 1 - i) as f64 / dn; // x_i = cos(ti)
                let v: f64 = b.iter().enumerate().map(|(k, bk)| bk * (k as f64 * ti).cos()).sum();
                cumint[i * n + j] = 0.5 * theta0 * v;
            }
        }
        Ok(Arc::new(Self { theta0, nodes, x, bary, d1, d2, cc, cumint }))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn d1(&self) -> &[f64] {
        &self.d1
    }

    pub fn d2(&self) -> &[f64] {
        &self.d2
    }

    pub fn cc_weights(&self) -> &[f64] {
        &self.cc
    }

    pub fn same(&self, other: &ThetaGrid) -> bool {
        std::ptr::eq(self, other) || (self.theta0 == other.theta0 && self.len() == other.len())
    }

    pub fn interp(&self, f: &[f64], theta: f64) -> f64 {
        bary_eval(&self.x, &self.bary, f, 2.0 * theta / self.theta0 - 1.0)
    }

    pub fn apply(&self, mat: &[f64], f: &[f64]) -> Vec<f64> {
        let n = self.len();
        (0..n).map(|i| (0..n).map(|j| mat[i * n + j] * f[j]).sum()).collect()
    }

    pub fn deriv(&self, f: &[f64]) -> Vec<f64> {
        self.apply(&self.d1, f)
    }

    pub fn deriv2(&self, f: &[f64]) -> Vec<f64> {
        self.apply(&self.d2, f)
    }

    pub fn integral(&self, f: &[f64]) -> f64 {
        f.iter().zip(&self.cc).map(|(a, b)| a * b).sum()
    }

    /// F(theta_i) = int_0^theta_i f.
    pub fn cumulative(&self, f: &[f64]) -> Vec<f64> {
        self.apply(&self.cumint, f)
    }

    /// f / theta^k for f vanishing to order k at 0. Interior nodes divide
    /// pointwise; the value at theta = 0 is the k-th Taylor coefficient.
    pub fn div_theta_pow(&self, f: &[f64], k: usize) -> Vec<f64> {
        if k == 0 {
            return f.to_vec();
        }
        let mut out: Vec<f64> = f.iter().zip(&self.nodes).map(|(v, &t)| v / t.powi(k as i32)).collect();
        out[0] = self.taylor_at_zero(f, k + 1)[k];
        out
    }

    /// f / sin^k theta for f vanishing to order k at 0.
    pub fn div_sin_pow(&self, f: &[f64], k: usize) -> Vec<f64> {
        let g = self.div_theta_pow(f, k);
        g.iter()
            .zip(&self.nodes)
            .map(|(v, &t)| v * theta_over_sin(t).powi(k as i32))
            .collect()
    }

    /// Taylor coefficients f(0), f'(0), f''(0)/2, ... read off a local
    /// Chebyshev fit on a short interval at theta = 0.
    pub fn taylor_at_zero(&self, f: &[f64], count: usize) -> Vec<f64> {
        // Higher coefficients prefer a longer window and a lower degree;
        // both choices were tuned on sin^3 and cos test functions.
        let (m, h) = if count <= 5 {
            (16, (self.theta0 / 4.0).min(0.35))
        } else {
            (14.max(count + 4), (self.theta0 / 2.0).min(0.16 * count as f64))
        };
        let xs = cgl_points(m);
        let vals: Vec<f64> = xs.iter().map(|&x| self.interp(f, 0.5 * h * (x + 1.0))).collect();
        let a = cheb_coeffs(&vals);
        let mut out = Vec::with_capacity(count);
        let mut fact = 1.0;
        for j in 0..count {
            if j > 0 {
                fact *= j as f64;
            }
            let d: f64 = a.iter().enumerate().map(|(k, ak)| ak * cheb_deriv_at_minus_one(k, j)).sum();
            out.push(d * (2.0 / h).powi(j as i32) / fact);
        }
        out
    }
}

pub fn theta_over_sin(t: f64) -> f64 {
    if t.abs() < 1e-8 {
        1.0 + t * t / 6.0
    } else {
        t / t.sin()
    }
}

pub fn sin_over_theta(t: f64) -> f64 {
    1.0 / theta_over_sin(t)
}

fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                c[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    c
}

#[derive(Debug, Clone)]
pub struct ThetaFn {
    pub grid: Arc<ThetaGrid>,
    pub values: Vec<f64>,
}

impl ThetaFn {
    pub fn new(grid: &Arc<ThetaGrid>, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), grid.len());
        Self { grid: grid.clone(), values }
    }

    pub fn zeros(grid: &Arc<ThetaGrid>) -> Self {
        Self::new(grid, vec![0.0; grid.len()])
    }

    pub fn from_fn(grid: &Arc<ThetaGrid>, f: impl Fn(f64) -> f64) -> Self {
        Self::new(grid, grid.nodes.iter().map(|&t| f(t)).collect())
    }

    pub fn map(&self, f: impl Fn(f64, f64) -> f64) -> Self {
        let v = self.values.iter().zip(&self.grid.nodes).map(|(&v, &t)| f(t, v)).collect();
        Self::new(&self.grid, v)
    }

    pub fn add(&self, o: &ThetaFn) -> Self {
        Self::new(&self.grid, self.values.iter().zip(&o.values).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, o: &ThetaFn) -> Self {
        Self::new(&self.grid, self.values.iter().zip(&o.values).map(|(a, b)| a - b).collect())
    }

    pub fn mul(&self, o: &ThetaFn) -> Self {
        Self::new(&self.grid, self.values.iter().zip(&o.values).map(|(a, b)| a * b).collect())
    }

    pub fn scale(&self, a: f64) -> Self {
        Self::new(&self.grid, self.values.iter().map(|v| a * v).collect())
    }

    pub fn deriv(&self) -> Self {
        Self::new(&self.grid, self.grid.deriv(&self.values))
    }

    pub fn div_theta_pow(&self, k: usize) -> Self {
        Self::new(&self.grid, self.grid.div_theta_pow(&self.values, k))
    }

    pub fn eval(&self, theta: f64) -> f64 {
        self.grid.interp(&self.values, theta)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn taylor(&self, count: usize) -> Vec<f64> {
        self.grid.taylor_at_zero(&self.values, count)
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < EXP_TOL
}

fn int_offset(d: f64) -> Option<usize> {
    let r = d.round();
    if close(d, r) && r >= 0.0 {
        Some(r as usize)
    } else {
        None
    }
}

/// u(theta) = theta^alpha sum_i (theta^beta log theta)^i c_i(theta).
#[derive(Debug, Clone)]
pub struct LogThetaSeries {
    pub alpha: f64,
    pub beta: f64,
    pub terms: BTreeMap<usize, ThetaFn>,
}

impl LogThetaSeries {
    pub fn smooth(alpha: f64, c: ThetaFn) -> Self {
        let mut terms = BTreeMap::new();
        terms.insert(0, c);
        Self { alpha, beta: 0.0, terms }
    }

    pub fn zero(grid: &Arc<ThetaGrid>) -> Self {
        Self::smooth(0.0, ThetaFn::zeros(grid))
    }

    pub fn with_terms(alpha: f64, beta: f64, terms: BTreeMap<usize, ThetaFn>) -> Self {
        let mut s = Self { alpha, beta, terms };
        if !s.terms.contains_key(&0) {
            let g = s.grid().clone();
            s.terms.insert(0, ThetaFn::zeros(&g));
        }
        s
    }

    pub fn grid(&self) -> &Arc<ThetaGrid> {
        &self.terms.values().next().expect("series has a term").grid
    }

    pub fn max_log(&self) -> usize {
        *self.terms.keys().next_back().unwrap_or(&0)
    }

    pub fn has_logs(&self) -> bool {
        self.terms.iter().any(|(&i, c)| i > 0 && c.max_abs() > 0.0)
    }

    pub fn c(&self, i: usize) -> Option<&ThetaFn> {
        self.terms.get(&i)
    }

    /// Same function written with prefactor theta^(alpha - k).
    pub fn lower_alpha(&self, k: usize) -> Self {
        let terms = self
            .terms
            .iter()
            .map(|(&i, c)| (i, c.map(|t, v| v * t.powi(k as i32))))
            .collect();
        Self { alpha: self.alpha - k as f64, beta: self.beta, terms }
    }

    /// Same function with prefactor theta^(alpha + k); the coefficients
    /// must vanish to order k at 0.
    pub fn raise_alpha(&self, k: usize) -> Self {
        let terms = self.terms.iter().map(|(&i, c)| (i, c.div_theta_pow(k))).collect();
        Self { alpha: self.alpha + k as f64, beta: self.beta, terms }
    }

    fn common_beta(&self, o: &Self) -> f64 {
        match (self.has_logs(), o.has_logs()) {
            (true, true) => {
                assert!(close(self.beta, o.beta), "log bases differ: {} vs {}", self.beta, o.beta);
                self.beta
            }
            (true, false) => self.beta,
            (false, true) => o.beta,
            (false, false) => self.beta.max(o.beta),
        }
    }

    fn aligned(&self, o: &Self) -> (Self, Self) {
        let d = self.alpha - o.alpha;
        if let Some(k) = int_offset(d) {
            (self.lower_alpha(k), o.clone())
        } else if let Some(k) = int_offset(-d) {
            (self.clone(), o.lower_alpha(k))
        } else {
            panic!("prefactor exponents {} and {} differ by a non-integer", self.alpha, o.alpha);
        }
    }

    pub fn add(&self, o: &Self) -> Self {
        let beta = self.common_beta(o);
        let (a, b) = self.aligned(o);
        let mut terms = a.terms.clone();
        for (i, c) in b.terms {
            match terms.get_mut(&i) {
                Some(t) => *t = t.add(&c),
                None => {
                    terms.insert(i, c);
                }
            }
        }
        Self { alpha: a.alpha, beta, terms }
    }

    pub fn scale(&self, s: f64) -> Self {
        let terms = self.terms.iter().map(|(&i, c)| (i, c.scale(s))).collect();
        Self { alpha: self.alpha, beta: self.beta, terms }
    }

    pub fn sub(&self, o: &Self) -> Self {
        self.add(&o.scale(-1.0))
    }

    pub fn mul(&self, o: &Self) -> Self {
        let beta = self.common_beta(o);
        let mut terms: BTreeMap<usize, ThetaFn> = BTreeMap::new();
        for (&i, a) in &self.terms {
            for (&j, b) in &o.terms {
                let p = a.mul(b);
                match terms.get_mut(&(i + j)) {
                    Some(t) => *t = t.add(&p),
                    None => {
                        terms.insert(i + j, p);
                    }
                }
            }
        }
        Self { alpha: self.alpha + o.alpha, beta, terms }
    }

    /// Multiply by a smooth function of theta.
    pub fn mul_fn(&self, g: &ThetaFn) -> Self {
        let terms = self.terms.iter().map(|(&i, c)| (i, c.mul(g))).collect();
        Self { alpha: self.alpha, beta: self.beta, terms }
    }

    pub fn mul_theta_pow(&self, k: f64) -> Self {
        Self { alpha: self.alpha + k, beta: self.beta, terms: self.terms.clone() }
    }

    pub fn differentiate(&self) -> Self {
        let g = self.grid().clone();
        if close(self.alpha, 0.0) && !self.has_logs() {
            return Self::smooth(0.0, self.terms[&0].deriv());
        }
        let mut out: BTreeMap<usize, ThetaFn> = BTreeMap::new();
        let tb = ThetaFn::from_fn(&g, |t| t.powf(self.beta));
        for (&i, c) in &self.terms {
            let e = self.alpha + i as f64 * self.beta;
            let lvl = c.scale(e).add(&c.deriv().map(|t, v| t * v));
            accumulate(&mut out, i, lvl);
            if i > 0 {
                accumulate(&mut out, i - 1, c.mul(&tb).scale(i as f64));
            }
        }
        Self::with_terms(self.alpha - 1.0, self.beta, out)
    }

    pub fn eval(&self, theta: f64) -> f64 {
        if theta == 0.0 {
            return self.value_at_zero();
        }
        let l = theta.powf(self.beta) * theta.ln();
        let s: f64 = self.terms.iter().map(|(&i, c)| l.powi(i as i32) * c.eval(theta)).sum();
        theta.powf(self.alpha) * s
    }

    fn value_at_zero(&self) -> f64 {
        let c0 = self.terms[&0].values[0];
        if self.alpha > EXP_TOL {
            0.0
        } else if self.alpha > -EXP_TOL {
            c0
        } else if c0 == 0.0 {
            0.0
        } else {
            f64::NAN
        }
    }

    pub fn node_values(&self) -> Vec<f64> {
        let g = self.grid();
        let mut v: Vec<f64> = g.nodes.iter().map(|&t| if t == 0.0 { 0.0 } else { self.eval(t) }).collect();
        v[0] = self.value_at_zero();
        v
    }

    pub fn max_abs_interior(&self) -> f64 {
        let v = self.node_values();
        v[1..].iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// int_lower^upper u sin^p.
    pub fn integrate_weighted(&self, p: f64, lower: f64, upper: f64) -> Result<f64> {
        let g = self.grid();
        let theta_c = (0.1f64).min(g.theta0 / 8.0);
        let split = theta_c.min(upper);
        let mut total = 0.0;
        if lower < split {
            total += self.local_integral(p, lower, split)?;
        }
        let a = lower.max(split);
        if upper > a {
            const M: usize = 96;
            let xs = cgl_points(M);
            let ws = cc_weights(M);
            let half = 0.5 * (upper - a);
            for (x, w) in xs.iter().zip(&ws) {
                let t = a + half * (x + 1.0);
                total += w * half * self.eval(t) * t.sin().powf(p);
            }
        }
        Ok(total)
    }

    fn local_integral(&self, p: f64, a: f64, b: f64) -> Result<f64> {
        const TERMS: usize = 8;
        let sp = sinc_pow_series(p, TERMS);
        let mut total = 0.0;
        for (&i, c) in &self.terms {
            let tc = c.taylor(TERMS);
            let scale = c.max_abs();
            for k in 0..TERMS {
                let e: f64 = (0..=k).map(|j| tc[j] * sp[k - j]).sum();
                if e.abs() <= 1e-11 * scale {
                    // a vanishing leading coefficient lowers the singularity
                    continue;
                }
                let m = self.alpha + p + i as f64 * self.beta + k as f64;
                total += e * pow_log_integral(m, i, a, b)?;
            }
        }
        Ok(total)
    }

    /// Nonzero local coefficients (exponent, log power, value) at theta = 0,
    /// sorted by exponent then log power.
    pub fn leading_coefficients(&self, count: usize) -> Result<Vec<(f64, usize, f64)>> {
        const TERMS: usize = 12;
        let mut out = Vec::new();
        for (&i, c) in &self.terms {
            let tc = c.taylor(TERMS);
            let scale = c.max_abs().max(1e-300);
            let h = (c.grid.theta0 / 16.0).min(0.05);
            let mut resid = 0.0f64;
            for j in 0..=8 {
                let t = h * j as f64 / 8.0;
                let poly: f64 = tc.iter().enumerate().map(|(k, a)| a * t.powi(k as i32)).sum();
                resid = resid.max((poly - c.eval(t)).abs());
            }
            if resid > 1e-6 * scale {
                return Err(Error::IllConditioned { residual: resid / scale });
            }
            for (k, &v) in tc.iter().enumerate() {
                if v.abs() > 1e-9 * scale {
                    out.push((self.alpha + i as f64 * self.beta + k as f64, i, v));
                }
            }
        }
        out.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        out.truncate(count);
        Ok(out)
    }

    /// Largest |coefficient| of an odd power of theta below `order` in the
    /// log-free part.
    pub fn parity_defect(&self, order: usize) -> f64 {
        let c = &self.terms[&0];
        let tc = c.taylor(order.max(1));
        let mut worst = 0.0f64;
        for (k, v) in tc.iter().enumerate() {
            let e = self.alpha + k as f64;
            let r = e.round();
            if close(e, r) && (r as i64).rem_euclid(2) == 1 && e < order as f64 {
                worst = worst.max(v.abs());
            }
        }
        worst
    }
}

fn accumulate(out: &mut BTreeMap<usize, ThetaFn>, i: usize, c: ThetaFn) {
    match out.get_mut(&i) {
        Some(t) => *t = t.add(&c),
        None => {
            out.insert(i, c);
        }
    }
}

/// Taylor coefficients of (sin t / t)^p in powers of t.
pub fn sinc_pow_series(p: f64, terms: usize) -> Vec<f64> {
    // log(sin t / t) = -t^2/6 - t^4/180 - t^6/2835 - t^8/37800 - ...
    let mut lg = vec![0.0; terms];
    let known = [(2, -1.0 / 6.0), (4, -1.0 / 180.0), (6, -1.0 / 2835.0), (8, -1.0 / 37800.0), (10, -1.0 / 467775.0)];
    for (k, v) in known {
        if k < terms {
            lg[k] = p * v;
        }
    }
    series_exp(&lg)
}

fn series_exp(a: &[f64]) -> Vec<f64> {
    // b' = a' b with a[0] = 0
    let n = a.len();
    let mut b = vec![0.0; n];
    b[0] = 1.0;
    for k in 1..n {
        let mut s = 0.0;
        for j in 1..=k {
            s += j as f64 * a[j] * b[k - j];
        }
        b[k] = s / k as f64;
    }
    b
}

/// int_a^b t^m log^i t dt.
pub fn pow_log_integral(m: f64, i: usize, a: f64, b: f64) -> Result<f64> {
    let anti = |t: f64| -> f64 {
        if t == 0.0 {
            return 0.0;
        }
        let l = t.ln();
        if close(m, -1.0) {
            return l.powi(i as i32 + 1) / (i as f64 + 1.0);
        }
        let mp = m + 1.0;
        let mut s = 0.0;
        let mut fall = 1.0;
        for j in 0..=i {
            if j > 0 {
                fall *= (i + 1 - j) as f64;
            }
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            s += sign * fall * l.powi((i - j) as i32) / mp.powi(j as i32 + 1);
        }
        t.powf(mp) * s
    };
    if a == 0.0 && m <= -1.0 + EXP_TOL {
        return Err(Error::DivergentIntegral { exponent: m });
    }
    Ok(anti(b) - anti(a))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> Arc<ThetaGrid> {
        ThetaGrid::new(PI / 2.0, n).unwrap()
    }

    #[test]
    fn nodes_and_derivative() {
        let g = grid(32);
        assert_eq!(g.nodes[0], 0.0);
        assert!((g.nodes[31] - PI / 2.0).abs() < 1e-15);
        assert!(g.nodes.windows(2).all(|w| w[1] > w[0]));
        let u = LogThetaSeries::smooth(0.0, ThetaFn::from_fn(&g, f64::sin));
        let d = u.differentiate();
        let err = g.nodes.iter().map(|&t| (d.eval(t) - t.cos()).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn log_derivative_structure() {
        let g = grid(32);
        let beta = 2.0;
        let mut terms = BTreeMap::new();
        terms.insert(1, ThetaFn::from_fn(&g, |_| 1.0));
        let u = LogThetaSeries::with_terms(0.0, beta, terms);
        let d = u.differentiate();
        assert!(d.terms.contains_key(&0) && d.terms.contains_key(&1));
        for &t in &g.nodes[1..] {
            let want = t.powf(beta - 1.0) * (beta * t.ln() + 1.0);
            assert!((d.eval(t) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn polynomial_derivative_exact() {
        let g = grid(24);
        let f = ThetaFn::from_fn(&g, |t| 1.0 - 2.0 * t + 0.5 * t.powi(7) - t.powi(22));
        let d = f.deriv();
        for (&t, &v) in g.nodes.iter().zip(&d.values) {
            let want = -2.0 + 3.5 * t.powi(6) - 22.0 * t.powi(21);
            assert!((v - want).abs() < 1e-10 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn weighted_integrals() {
        let g = grid(48);
        let one = LogThetaSeries::smooth(0.0, ThetaFn::from_fn(&g, |_| 1.0));
        assert!((one.integrate_weighted(1.0, 0.0, PI / 2.0).unwrap() - 1.0).abs() < 1e-10);
        let s2 = LogThetaSeries::smooth(0.0, ThetaFn::from_fn(&g, |t| t.sin().powi(2)));
        assert!((s2.integrate_weighted(-1.0, 0.0, PI / 2.0).unwrap() - 1.0).abs() < 1e-10);
        let t2 = LogThetaSeries::smooth(2.0, ThetaFn::from_fn(&g, |_| 1.0));
        assert!(matches!(t2.integrate_weighted(-3.0, 0.0, PI / 2.0), Err(Error::DivergentIntegral { .. })));
        // theta^3 / sin^3 is bounded; compare with a fine midpoint rule
        let t3 = LogThetaSeries::smooth(3.0, ThetaFn::from_fn(&g, |_| 1.0));
        let v = t3.integrate_weighted(-3.0, 0.0, PI / 2.0).unwrap();
        let m = 200_000;
        let h = PI / 2.0 / m as f64;
        let r: f64 = (0..m)
            .map(|k| {
                let t = (k as f64 + 0.5) * h;
                (t / t.sin()).powi(3) * h
            })
            .sum();
        assert!((v - r).abs() < 1e-9, "{v} {r}");
    }

    #[test]
    fn log_weighted_integral() {
        let g = grid(48);
        let mut terms = BTreeMap::new();
        terms.insert(0, ThetaFn::from_fn(&g, f64::cos));
        terms.insert(1, ThetaFn::from_fn(&g, |t| 1.0 + t));
        let u = LogThetaSeries::with_terms(1.0, 1.0, terms);
        let v = u.integrate_weighted(-0.5, 0.0, 1.2).unwrap();
        let m = 400_000;
        let h = 1.2 / m as f64;
        let r: f64 = (0..m)
            .map(|k| {
                let t = (k as f64 + 0.5) * h;
                t * (t.cos() + t * t.ln() * (1.0 + t)) * t.sin().powf(-0.5) * h
            })
            .sum();
        assert!((v - r).abs() < 1e-8, "{v} {r}");
        let a = u.integrate_weighted(-0.5, 0.0, 0.4).unwrap() + u.integrate_weighted(-0.5, 0.4, 1.2).unwrap();
        assert!((a - v).abs() < 1e-10);
    }

    #[test]
    fn leading_and_parity() {
        let g = grid(48);
        let n = 3.0;
        let s = 2.4;
        let u = LogThetaSeries::smooth(n - s, ThetaFn::from_fn(&g, |t| sin_over_theta(t).powf(n - s)));
        let lc = u.leading_coefficients(1).unwrap();
        assert!((lc[0].0 - (n - s)).abs() < 1e-12 && lc[0].1 == 0 && (lc[0].2 - 1.0).abs() < 1e-10);
        let s2 = LogThetaSeries::smooth(0.0, ThetaFn::from_fn(&g, |t| t.sin().powi(2)));
        let lc = s2.leading_coefficients(2).unwrap();
        assert!((lc[0].0 - 2.0).abs() < 1e-12 && (lc[0].2 - 1.0).abs() < 1e-9);
        assert!((lc[1].0 - 4.0).abs() < 1e-12 && (lc[1].2 + 1.0 / 3.0).abs() < 1e-7);
        let mut terms = BTreeMap::new();
        terms.insert(1, ThetaFn::from_fn(&g, |_| 1.0));
        let tl = LogThetaSeries::with_terms(0.0, 3.0, terms);
        let lc = tl.leading_coefficients(1).unwrap();
        assert_eq!(lc[0].1, 1);
        assert!((lc[0].0 - 3.0).abs() < 1e-12);

        let c = LogThetaSeries::smooth(0.0, ThetaFn::from_fn(&g, f64::cos));
        assert!(c.parity_defect(6) < 1e-7);
        let s = LogThetaSeries::smooth(0.0, ThetaFn::from_fn(&g, f64::sin));
        assert!((s.parity_defect(2) - 1.0).abs() < 1e-9);
        let c3 = LogThetaSeries::smooth(0.0, ThetaFn::from_fn(&g, |t| t.cos() + 1e-3 * t.powi(3)));
        assert!((c3.parity_defect(4) - 1e-3).abs() < 1e-8, "{}", c3.parity_defect(4));
    }

    #[test]
    fn division_and_cumulative() {
        let g = grid(40);
        let f = ThetaFn::from_fn(&g, |t| t.sin().powi(3) * (1.0 + t));
        let q = g.div_sin_pow(&f.values, 3);
        for (&t, v) in g.nodes.iter().zip(&q) {
            let tol = if t == 0.0 { 1e-9 } else { 1e-13 };
            assert!((v - (1.0 + t)).abs() < tol, "{t} {v}");
        }
        let c = g.cumulative(&ThetaFn::from_fn(&g, f64::cos).values);
        for (&t, v) in g.nodes.iter().zip(&c) {
            assert!((v - t.sin()).abs() < 1e-13);
        }
    }
}
