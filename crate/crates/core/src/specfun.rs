//! Gauss hypergeometric function on [0, 1) and Gegenbauer polynomials.

use crate::{Error, Result};

const MAX_TERMS: usize = 10_000;
const REL_TOL: f64 = 1e-16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HypParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub x: f64,
}

impl HypParams {
    pub fn new(a: f64, b: f64, c: f64, x: f64) -> Self {
        Self { a, b, c, x }
    }
}

/// Evaluation diagnostics. `degraded` is set for x > 0.9 where the
/// 1e-12 accuracy target is not guaranteed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quality {
    pub terms: usize,
    pub degraded: bool,
    pub euler: bool,
}

fn nonpositive_integer(c: f64) -> bool {
    c <= 0.0 && c == c.round()
}

fn check(p: &HypParams) -> Result<()> {
    if !(p.a.is_finite() && p.b.is_finite() && p.c.is_finite() && p.x.is_finite()) {
        return Err(Error::InvalidParams("non-finite hypergeometric parameter".into()));
    }
    if nonpositive_integer(p.c) {
        return Err(Error::InvalidParams(format!("c = {} is a non-positive integer", p.c)));
    }
    if !(0.0..1.0).contains(&p.x) {
        return Err(Error::InvalidParams(format!("x = {} outside [0, 1)", p.x)));
    }
    Ok(())
}

fn series(a: f64, b: f64, c: f64, x: f64) -> Result<(f64, usize)> {
    let mut sum = 1.0;
    let mut term = 1.0;
    let mut small = 0;
    for k in 0..MAX_TERMS {
        let kf = k as f64;
        term *= (a + kf) * (b + kf) / ((c + kf) * (kf + 1.0)) * x;
        sum += term;
        if term == 0.0 {
            return Ok((sum, k + 1));
        }
        if term.abs() <= REL_TOL * sum.abs() {
            small += 1;
            if small >= 2 {
                return Ok((sum, k + 1));
            }
        } else {
            small = 0;
        }
    }
    Err(Error::NonConvergence { terms: MAX_TERMS })
}

pub fn hyp2f1_with_quality(p: HypParams) -> Result<(f64, Quality)> {
    check(&p)?;
    let HypParams { a, b, c, x } = p;
    if x == 0.0 {
        return Ok((1.0, Quality { terms: 0, degraded: false, euler: false }));
    }
    // A terminating series is summed directly whatever x is.
    let terminating = nonpositive_integer(a) || nonpositive_integer(b);
    let (value, terms, euler) = if x <= 0.5 || terminating {
        let (v, t) = series(a, b, c, x)?;
        (v, t, false)
    } else {
        let (v, t) = series(c - a, c - b, c, x)?;
        ((1.0 - x).powf(c - a - b) * v, t, true)
    };
    if !value.is_finite() {
        return Err(Error::NonConvergence { terms });
    }
    Ok((value, Quality { terms, degraded: x > 0.9, euler }))
}

pub fn hyp2f1(p: HypParams) -> Result<f64> {
    hyp2f1_with_quality(p).map(|(v, _)| v)
}

pub fn hyp2f1_deriv(p: HypParams) -> Result<f64> {
    check(&p)?;
    let HypParams { a, b, c, x } = p;
    if a == 0.0 || b == 0.0 {
        return Ok(0.0);
    }
    Ok(a * b / c * hyp2f1(HypParams::new(a + 1.0, b + 1.0, c + 1.0, x))?)
}

/// C_k^alpha(x) by the three-term recurrence.
pub fn gegenbauer(k: usize, alpha: f64, x: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    let mut prev = 1.0;
    let mut cur = 2.0 * alpha * x;
    for m in 2..=k {
        let mf = m as f64;
        let next = (2.0 * x * (mf + alpha - 1.0) * cur - (mf + 2.0 * alpha - 2.0) * prev) / mf;
        prev = cur;
        cur = next;
    }
    cur
}

/// d/dx C_k^alpha = 2 alpha C_{k-1}^{alpha+1}.
pub fn gegenbauer_deriv(k: usize, alpha: f64, x: f64) -> f64 {
    if k == 0 {
        0.0
    } else {
        2.0 * alpha * gegenbauer(k - 1, alpha + 1.0, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(a: f64, b: f64, c: f64, x: f64, terms: usize) -> f64 {
        let mut sum = 1.0;
        let mut t = 1.0;
        for k in 0..terms {
            let kf = k as f64;
            t *= (a + kf) * (b + kf) / ((c + kf) * (kf + 1.0)) * x;
            sum += t;
        }
        sum
    }

    #[test]
    fn trivial_values() {
        assert_eq!(hyp2f1(HypParams::new(0.3, 1.7, 2.2, 0.0)).unwrap(), 1.0);
        let v = hyp2f1(HypParams::new(-1.0, 2.5, 1.5, 0.7)).unwrap();
        assert!((v - (1.0 - 2.5 / 1.5 * 0.7)).abs() < 1e-15);
        let v = hyp2f1(HypParams::new(1.0, 1.0, 2.0, 0.5)).unwrap();
        assert!((v - 1.386_294_361_119_890_6).abs() < 1e-13);
        assert!((v - brute(1.0, 1.0, 2.0, 0.5, 200)).abs() < 1e-13);
    }

    #[test]
    fn euler_branch_matches_brute_force() {
        for &(a, b, c, x) in &[(0.5, 1.5, 2.5, 0.75), (-0.3, 2.2, 1.4, 0.6), (2.0, 3.0, 4.5, 0.85)] {
            let v = hyp2f1(HypParams::new(a, b, c, x)).unwrap();
            let r = brute(a, b, c, x, 2000);
            assert!(((v - r) / r).abs() < 1e-12, "{a} {b} {c} {x}: {v} vs {r}");
        }
    }

    #[test]
    fn quality_flag() {
        let (_, q) = hyp2f1_with_quality(HypParams::new(0.5, 0.5, 1.5, 0.95)).unwrap();
        assert!(q.degraded);
        let (_, q) = hyp2f1_with_quality(HypParams::new(0.5, 0.5, 1.5, 0.5)).unwrap();
        assert!(!q.degraded);
    }

    #[test]
    fn invalid_c() {
        assert!(matches!(hyp2f1(HypParams::new(1.0, 1.0, -2.0, 0.1)), Err(Error::InvalidParams(_))));
        assert!(matches!(hyp2f1(HypParams::new(1.0, 1.0, 2.0, 1.0)), Err(Error::InvalidParams(_))));
    }

    #[test]
    fn derivative() {
        assert!((hyp2f1_deriv(HypParams::new(1.5, 2.0, 3.0, 0.0)).unwrap() - 1.0).abs() < 1e-15);
        for &x in &[0.1, 0.6] {
            let d = hyp2f1_deriv(HypParams::new(-1.0, 2.0, 3.0, x)).unwrap();
            assert!((d + 2.0 / 3.0).abs() < 1e-15);
        }
        let d = hyp2f1_deriv(HypParams::new(1.0, 1.0, 2.0, 0.5)).unwrap();
        let h = 1e-6;
        let fd = (hyp2f1(HypParams::new(1.0, 1.0, 2.0, 0.5 + h)).unwrap()
            - hyp2f1(HypParams::new(1.0, 1.0, 2.0, 0.5 - h)).unwrap())
            / (2.0 * h);
        assert!((d - fd).abs() < 1e-6);
        assert!((d - 0.5 * hyp2f1(HypParams::new(2.0, 2.0, 3.0, 0.5)).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn termination() {
        let a = -3.0;
        let full = hyp2f1(HypParams::new(a, 1.3, 0.7, 0.4)).unwrap();
        assert_eq!(full, brute(a, 1.3, 0.7, 0.4, 3));
        assert_eq!(full, brute(a, 1.3, 0.7, 0.4, 40));
    }

    #[test]
    fn gegenbauer_values() {
        assert_eq!(gegenbauer(0, 0.7, 0.2), 1.0);
        assert!((gegenbauer(1, 0.7, 0.2) - 0.28).abs() < 1e-15);
        assert!((gegenbauer(2, 1.0, 0.3) + 0.64).abs() < 1e-15);
        let (al, x) = (1.3, -0.4);
        assert!((gegenbauer(2, al, x) - (2.0 * al * (al + 1.0) * x * x - al)).abs() < 1e-14);
    }

    #[test]
    fn gegenbauer_parity() {
        for k in 0..=12 {
            for i in 0..=20 {
                let x = -1.0 + 0.1 * i as f64;
                let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                let d = gegenbauer(k, 1.5, -x) - sign * gegenbauer(k, 1.5, x);
                assert!(d.abs() < 1e-12);
            }
        }
    }
}
