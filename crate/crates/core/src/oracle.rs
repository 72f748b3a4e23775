//! Independent reference computations used only for verification: a
//! finite-volume eigen-solver for L_s, the explicit Green's formula for
//! I_{s,nu}, and pointwise curvature of explicit metrics by forward-mode
//! automatic differentiation.

use num_complex::Complex64;

use crate::specfun::{hyp2f1, hyp2f1_deriv, HypParams};
use crate::Result;

/// Eigenvalues of L_s v = -(1/p)(p v')' + (s-1)(s-n) v, p = sin^{n+1-2s},
/// with v(0) = 0 and v'(theta0) = 0 on a mesh graded quadratically toward 0.
pub fn fd_eigenvalues(n: usize, s: f64, theta0: f64, m: usize, count: usize) -> Vec<f64> {
    let nf = n as f64;
    let pw = nf + 1.0 - 2.0 * s;
    let p = |t: f64| t.sin().powf(pw);
    let th: Vec<f64> = (0..=m).map(|i| theta0 * (i as f64 / m as f64).powi(2)).collect();
    // unknowns v_1..v_m
    let mut diag = vec![0.0; m];
    let mut off = vec![0.0; m.saturating_sub(1)];
    let mut mass = vec![0.0; m];
    let shift = (s - 1.0) * (s - nf);
    for i in 1..=m {
        let hl = th[i] - th[i - 1];
        let fl = p(0.5 * (th[i] + th[i - 1])) / hl;
        let (hr, fr) = if i < m {
            let hr = th[i + 1] - th[i];
            (hr, p(0.5 * (th[i + 1] + th[i])) / hr)
        } else {
            (0.0, 0.0)
        };
        let mi = p(th[i]) * 0.5 * (hl + hr);
        mass[i - 1] = mi;
        diag[i - 1] = fl + fr + shift * mi;
        if i < m {
            off[i - 1] = -fr;
        }
    }
    // symmetric scaling M^{-1/2} A M^{-1/2}
    let d: Vec<f64> = (0..m).map(|i| diag[i] / mass[i]).collect();
    let e: Vec<f64> = (0..m - 1).map(|i| off[i] / (mass[i] * mass[i + 1]).sqrt()).collect();
    let below = |x: f64| -> usize {
        let mut cnt = 0;
        let mut q = d[0] - x;
        if q < 0.0 {
            cnt += 1;
        }
        for i in 1..m {
            let qq = if q == 0.0 { 1e-300 } else { q };
            q = d[i] - x - e[i - 1] * e[i - 1] / qq;
            if q < 0.0 {
                cnt += 1;
            }
        }
        cnt
    };
    let mut lo = d.iter().zip(0..).map(|(di, i)| di - e.get(i).map_or(0.0, |v: &f64| v.abs()) - if i > 0 { e[i - 1].abs() } else { 0.0 }).fold(f64::INFINITY, f64::min);
    lo = lo.min(shift) - 1.0;
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let (mut a, mut b) = (lo, lo.abs() + 10.0);
        while below(b) <= k {
            b *= 2.0;
        }
        while b - a > 1e-13 * b.abs().max(1.0) {
            let mid = 0.5 * (a + b);
            if below(mid) > k {
                b = mid;
            } else {
                a = mid;
            }
        }
        out.push(0.5 * (a + b));
    }
    out
}

/// Richardson-extrapolated finite-volume eigenvalues (meshes m/2 and m).
pub fn fd_eigenvalues_extrapolated(n: usize, s: f64, theta0: f64, m: usize, count: usize) -> Vec<f64> {
    let fine = fd_eigenvalues(n, s, theta0, m, count);
    let coarse = fd_eigenvalues(n, s, theta0, m / 2, count);
    fine.iter().zip(&coarse).map(|(f, c)| (4.0 * f - c) / 3.0).collect()
}

pub fn nu_from_lambda(n: usize, lambda: f64) -> f64 {
    let h = (n as f64 - 1.0) / 2.0;
    h + (h * h + lambda).sqrt()
}

/// Solution of I_{s,nu} u = f (u = sin^{n-s} v, F = f / sin^{n-s}) by the
/// explicit Green's formula with y1 = q and y2 integrated backward from
/// theta0. Returns (theta, v(theta)) at theta = theta0 (m/8)^2, m = 2..=7.
pub fn green_formula(n: usize, s: f64, theta0: f64, nu: f64, rhs_v: impl Fn(f64) -> f64) -> Result<Vec<(f64, f64)>> {
    let nf = n as f64;
    let b = nf + 1.0 - 2.0 * s;
    let c = nu * (nu + 1.0 - nf) - (s - 1.0) * (s - nf);
    let beta = 1.0 - b;
    let (ha, hb, hc) = (s - nu, nu + s - nf + 1.0, s - nf / 2.0 + 1.0);
    let y1 = |t: f64| -> Result<(f64, f64)> {
        let x = (0.5 * t).sin().powi(2);
        let f = hyp2f1(HypParams::new(ha, hb, hc, x))?;
        let fp = hyp2f1_deriv(HypParams::new(ha, hb, hc, x))?;
        let (sn, cs) = t.sin_cos();
        Ok((sn.powf(beta) * f, beta * sn.powf(beta - 1.0) * cs * f + sn.powf(beta) * 0.5 * sn * fp))
    };
    // xi-mesh with theta = theta0 xi^2
    let k = 64_000usize;
    let xi_min_idx = k / 8;
    let th = |i: usize| theta0 * (i as f64 / k as f64).powi(2);
    let dth = |i: usize| 2.0 * theta0 * i as f64 / k as f64;
    let h = 1.0 / k as f64;
    // y2 backward: y'' = -b cot y' - c y, in xi
    let rhs = |xi: f64, y: f64, yp: f64| -> (f64, f64) {
        let t = theta0 * xi * xi;
        let j = 2.0 * theta0 * xi;
        (yp * j, (-b * t.cos() / t.sin() * yp - c * y) * j)
    };
    let mut y2 = vec![0.0; k + 1];
    y2[k] = 1.0;
    let (mut y, mut yp) = (1.0, 0.0);
    for i in (xi_min_idx + 1..=k).rev() {
        let xi = i as f64 * h;
        let hh = -h;
        let k1 = rhs(xi, y, yp);
        let k2 = rhs(xi + 0.5 * hh, y + 0.5 * hh * k1.0, yp + 0.5 * hh * k1.1);
        let k3 = rhs(xi + 0.5 * hh, y + 0.5 * hh * k2.0, yp + 0.5 * hh * k2.1);
        let k4 = rhs(xi + hh, y + hh * k3.0, yp + hh * k3.1);
        y += hh / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
        yp += hh / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        y2[i - 1] = y;
    }
    // weight sin^b, g = F sin^{b-2}; C = sin^b (y1 y2' - y1' y2)
    let g = |t: f64| rhs_v(t) * t.sin().powf(b - 2.0);
    let mut inner1 = vec![0.0; k + 1]; // int_0^theta y1 g
    let mut acc = 0.0;
    let node = |i: usize| -> Result<f64> {
        if i == 0 {
            return Ok(0.0);
        }
        let t = th(i);
        Ok(y1(t)?.0 * g(t) * dth(i))
    };
    let mut prev = node(0)?;
    for i in 1..=k {
        // trapezoid in xi; the integrand is smooth in xi
        let cur = node(i)?;
        acc += 0.5 * h * (prev + cur);
        inner1[i] = acc;
        prev = cur;
    }
    let mut inner2 = vec![0.0; k + 1]; // int_theta^theta0 y2 g
    let mut acc = 0.0;
    let node2 = |i: usize| y2[i] * g(th(i)) * dth(i);
    for i in (xi_min_idx..k).rev() {
        acc += 0.5 * h * (node2(i) + node2(i + 1));
        inner2[i] = acc;
    }
    let (q0, dq0) = y1(theta0)?;
    let cst = theta0.sin().powf(b) * (q0 * 0.0 - dq0 * 1.0);
    let mut out = Vec::new();
    for m in 2..=7 {
        let i = k * m / 8;
        let t = th(i);
        let v = (y2[i] * inner1[i] + y1(t)?.0 * inner2[i]) / cst;
        out.push((t, v));
    }
    Ok(out)
}

/// Value, gradient and Hessian in `dim` real variables, over complex numbers
/// so that complex rho can be used for coefficient extraction.
#[derive(Debug, Clone, PartialEq)]
pub struct Dual2 {
    pub v: Complex64,
    pub g: [Complex64; 6],
    pub h: [[Complex64; 6]; 6],
}

const CZ: Complex64 = Complex64 { re: 0.0, im: 0.0 };

impl Dual2 {
    pub fn constant(v: Complex64) -> Self {
        Self { v, g: [CZ; 6], h: [[CZ; 6]; 6] }
    }

    pub fn var(v: Complex64, i: usize) -> Self {
        let mut d = Self::constant(v);
        d.g[i] = Complex64::new(1.0, 0.0);
        d
    }

    pub fn add(&self, o: &Self) -> Self {
        let mut r = self.clone();
        r.v += o.v;
        for i in 0..6 {
            r.g[i] += o.g[i];
            for j in 0..6 {
                r.h[i][j] += o.h[i][j];
            }
        }
        r
    }

    pub fn sub(&self, o: &Self) -> Self {
        self.add(&o.scale(Complex64::new(-1.0, 0.0)))
    }

    pub fn scale(&self, a: Complex64) -> Self {
        let mut r = self.clone();
        r.v *= a;
        for i in 0..6 {
            r.g[i] *= a;
            for j in 0..6 {
                r.h[i][j] *= a;
            }
        }
        r
    }

    pub fn mul(&self, o: &Self) -> Self {
        let mut r = Self::constant(self.v * o.v);
        for i in 0..6 {
            r.g[i] = self.g[i] * o.v + self.v * o.g[i];
            for j in 0..6 {
                r.h[i][j] = self.h[i][j] * o.v + self.v * o.h[i][j] + self.g[i] * o.g[j] + self.g[j] * o.g[i];
            }
        }
        r
    }

    /// f(self) given f, f', f'' at self.v.
    pub fn chain(&self, f0: Complex64, f1: Complex64, f2: Complex64) -> Self {
        let mut r = Self::constant(f0);
        for i in 0..6 {
            r.g[i] = f1 * self.g[i];
            for j in 0..6 {
                r.h[i][j] = f1 * self.h[i][j] + f2 * self.g[i] * self.g[j];
            }
        }
        r
    }

    pub fn recip(&self) -> Self {
        let x = self.v;
        self.chain(1.0 / x, -1.0 / (x * x), 2.0 / (x * x * x))
    }

    pub fn sin(&self) -> Self {
        self.chain(self.v.sin(), self.v.cos(), -self.v.sin())
    }

    pub fn cos(&self) -> Self {
        self.chain(self.v.cos(), -self.v.sin(), -self.v.cos())
    }

    pub fn exp(&self) -> Self {
        let e = self.v.exp();
        self.chain(e, e, e)
    }

    pub fn ln(&self) -> Self {
        let x = self.v;
        self.chain(x.ln(), 1.0 / x, -1.0 / (x * x))
    }

    pub fn powf(&self, p: f64) -> Self {
        let x = self.v;
        self.chain(x.powf(p), p * x.powf(p - 1.0), p * (p - 1.0) * x.powf(p - 2.0))
    }
}

/// A metric given pointwise as a matrix of Dual2 entries.
pub type MetricFn<'a> = dyn Fn(&[Dual2]) -> Vec<Vec<Dual2>> + 'a;

fn invert(m: &[Vec<Complex64>]) -> Option<Vec<Vec<Complex64>>> {
    let d = m.len();
    let mut a: Vec<Vec<Complex64>> = m.to_vec();
    let mut inv: Vec<Vec<Complex64>> = (0..d)
        .map(|i| (0..d).map(|j| if i == j { Complex64::new(1.0, 0.0) } else { CZ }).collect())
        .collect();
    for c in 0..d {
        let piv = (c..d).max_by(|&i, &j| a[i][c].norm().partial_cmp(&a[j][c].norm()).unwrap())?;
        if a[piv][c].norm() < 1e-300 {
            return None;
        }
        a.swap(c, piv);
        inv.swap(c, piv);
        let p = a[c][c];
        for j in 0..d {
            a[c][j] /= p;
            inv[c][j] /= p;
        }
        for i in 0..d {
            if i != c {
                let f = a[i][c];
                for j in 0..d {
                    let (ac, ic) = (a[c][j], inv[c][j]);
                    a[i][j] -= f * ac;
                    inv[i][j] -= f * ic;
                }
            }
        }
    }
    Some(inv)
}

/// Ricci tensor of a metric at a point, from first and second derivatives
/// of the metric components (textbook Christoffel formula).
pub fn ricci_at(metric: &MetricFn, point: &[Complex64]) -> Option<Vec<Vec<Complex64>>> {
    let d = point.len();
    assert!(d <= 6);
    let vars: Vec<Dual2> = point.iter().enumerate().map(|(i, &x)| Dual2::var(x, i)).collect();
    let g = metric(&vars);
    let g0: Vec<Vec<Complex64>> = g.iter().map(|r| r.iter().map(|e| e.v).collect()).collect();
    let gi = invert(&g0)?;
    // dg[k][i][j] = d_k g_ij, ddg[k][l][i][j]
    let dg = |k: usize, i: usize, j: usize| g[i][j].g[k];
    let ddg = |k: usize, l: usize, i: usize, j: usize| g[i][j].h[k][l];
    // Gamma^a_{bc} and its derivatives
    let mut gam = vec![vec![vec![CZ; d]; d]; d];
    let mut low = vec![vec![vec![CZ; d]; d]; d]; // Gamma_{a bc} lowered on first index
    let mut dlow = vec![vec![vec![vec![CZ; d]; d]; d]; d]; // d_k Gamma_{a bc}
    for a in 0..d {
        for b in 0..d {
            for c in 0..d {
                low[a][b][c] = 0.5 * (dg(b, a, c) + dg(c, a, b) - dg(a, b, c));
                for k in 0..d {
                    dlow[k][a][b][c] = 0.5 * (ddg(k, b, a, c) + ddg(k, c, a, b) - ddg(k, a, b, c));
                }
            }
        }
    }
    for a in 0..d {
        for b in 0..d {
            for c in 0..d {
                gam[a][b][c] = (0..d).map(|e| gi[a][e] * low[e][b][c]).sum();
            }
        }
    }
    // d_k g^{ae} = -g^{ap} d_k g_pq g^{qe}
    let mut dgi = vec![vec![vec![CZ; d]; d]; d];
    for k in 0..d {
        for a in 0..d {
            for e in 0..d {
                let mut s = CZ;
                for p in 0..d {
                    for q in 0..d {
                        s -= gi[a][p] * dg(k, p, q) * gi[q][e];
                    }
                }
                dgi[k][a][e] = s;
            }
        }
    }
    let dgam = |k: usize, a: usize, b: usize, c: usize| -> Complex64 {
        (0..d).map(|e| dgi[k][a][e] * low[e][b][c] + gi[a][e] * dlow[k][e][b][c]).sum()
    };
    let mut ric = vec![vec![CZ; d]; d];
    for b in 0..d {
        for c in 0..d {
            let mut s = CZ;
            for a in 0..d {
                s += dgam(a, a, b, c) - dgam(c, a, b, a);
                for e in 0..d {
                    s += gam[a][a][e] * gam[e][b][c] - gam[a][c][e] * gam[e][b][a];
                }
            }
            ric[b][c] = s;
        }
    }
    Some(ric)
}

/// Laplacian of a scalar at a point: g^{-1/2} d_i (g^{ij} g^{1/2} d_j u),
/// evaluated as g^{ij}(d_ij u - Gamma^k_ij d_k u).
pub fn laplacian_at(metric: &MetricFn, u: &dyn Fn(&[Dual2]) -> Dual2, point: &[Complex64]) -> Option<Complex64> {
    let d = point.len();
    let vars: Vec<Dual2> = point.iter().enumerate().map(|(i, &x)| Dual2::var(x, i)).collect();
    let g = metric(&vars);
    let uu = u(&vars);
    let g0: Vec<Vec<Complex64>> = g.iter().map(|r| r.iter().map(|e| e.v).collect()).collect();
    let gi = invert(&g0)?;
    let mut out = CZ;
    for i in 0..d {
        for j in 0..d {
            let mut t = uu.h[i][j];
            for k in 0..d {
                let gam: Complex64 =
                    (0..d).map(|e| gi[k][e] * 0.5 * (g[e][i].g[j] + g[e][j].g[i] - g[i][j].g[e])).sum();
                t -= gam * uu.g[k];
            }
            out += gi[i][j] * t;
        }
    }
    Some(out)
}

/// Taylor coefficients a_0..a_{m-1} of an analytic f at 0 from samples on
/// the circle |z| = r (trapezoid rule on the Cauchy integral).
pub fn cauchy_coefficients(f: impl Fn(Complex64) -> Complex64, r: f64, k: usize, m: usize) -> Vec<Complex64> {
    let samples: Vec<Complex64> = (0..k)
        .map(|j| f(Complex64::from_polar(r, 2.0 * std::f64::consts::PI * j as f64 / k as f64)))
        .collect();
    (0..m)
        .map(|p| {
            let s: Complex64 = samples
                .iter()
                .enumerate()
                .map(|(j, v)| v * Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * (p * j) as f64 / k as f64))
                .sum();
            s / (k as f64 * r.powi(p as i32))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn fd_matches_half_pi_closed_form() {
        for &(n, s) in &[(3usize, 3.0), (2, 2.0), (3, 2.5)] {
            let lam = fd_eigenvalues_extrapolated(n, s, PI / 2.0, 4000, 3);
            for (k, l) in lam.iter().enumerate() {
                let nu = s + 2.0 * k as f64;
                let want = nu * (nu + 1.0 - n as f64);
                assert!((l - want).abs() < 1e-6 * want.abs().max(1.0), "{n} {s} {k}: {l} vs {want}");
            }
        }
    }

    #[test]
    fn green_formula_matches_collocation() {
        use crate::sturm::{greens_solve, IndicialParams};
        use crate::thetagrid::{sin_over_theta, LogThetaSeries, ThetaFn, ThetaGrid};
        for &(n, s, t0, nu) in &[(3usize, 3.0, PI / 2.0, 2.5), (3, 2.5, 1.2, 3.7), (2, 2.0, 2.0, 1.3)] {
            let p = IndicialParams::new(n, s, t0, nu).unwrap();
            let a = p.a();
            let g = ThetaGrid::new(t0, 64).unwrap();
            let rhs_v = |t: f64| t.sin() * (1.0 + t.cos());
            let f = LogThetaSeries::smooth(a, ThetaFn::from_fn(&g, |t| sin_over_theta(t).powf(a) * rhs_v(t)));
            let u = greens_solve(&p, &f).unwrap();
            for (t, v) in green_formula(n, s, t0, nu, rhs_v).unwrap() {
                let got = u.eval(t) / t.sin().powf(a);
                assert!((got - v).abs() < 1e-8, "{n} {s} {t}: {got} vs {v}");
            }
        }
    }

    #[test]
    fn ricci_of_hyperbolic_space() {
        // upper half-space metric |dx|^2 / y^2 in 3 dims: Ric = -2 g
        let metric = |x: &[Dual2]| -> Vec<Vec<Dual2>> {
            let inv_y2 = x[2].mul(&x[2]).recip();
            (0..3)
                .map(|i| (0..3).map(|j| if i == j { inv_y2.clone() } else { Dual2::constant(CZ) }).collect())
                .collect()
        };
        let p = [Complex64::new(0.3, 0.0), Complex64::new(-0.2, 0.0), Complex64::new(0.7, 0.0)];
        let r = ricci_at(&metric, &p).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { -2.0 / 0.49 } else { 0.0 };
                assert!((r[i][j] - want).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn cauchy_extracts_taylor() {
        let c = cauchy_coefficients(|z| (z * 2.0).exp(), 0.25, 32, 5);
        let want = [1.0, 2.0, 2.0, 4.0 / 3.0, 2.0 / 3.0];
        for (a, b) in c.iter().zip(want) {
            assert!((a.re - b).abs() < 1e-12 && a.im.abs() < 1e-12);
        }
    }
}
