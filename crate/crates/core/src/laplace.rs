//! Formal corner expansions of Laplace eigenfunctions at theta0 = pi/2.
//!
//! We write u = rho^{n-s} sin^{n-s}(theta) V with
//! V = sum_{j,k} rho^j log(rho)^k V_{jk}(theta, x), and solve for V order by
//! order. On the rho^j slice the leading part of the residual is J_nu with
//! nu = n - s + j:
//!
//!   (J_nu b)_k = P_nu b_k + (k+1)(2nu+1-n) sin^2 b_{k+1} + (k+2)(k+1) sin^2 b_{k+2}
//!
//! where P_nu is the v-space indicial operator from `sturm`.

use serde::{Deserialize, Serialize};

use crate::geometry::{laplace_residual, CornerProblem, NormalFormMetricJet};
use crate::rhoseries::{Ctx, Field, Series};
use crate::sturm::{at_root, is_half_pi, GreensSolver, IndicialParams};
use crate::{Error, Result};

/// theta^{2s-n} coefficients below this (relative) are treated as
/// quadrature noise rather than the source of a log(theta) term.
const RESONANCE_TOL: f64 = 1e-6;

/// Kernel projections below this are taken to vanish at a root order.
const PROJECTION_TOL: f64 = 1e-12;

fn vop_params(n: usize, s: f64, nu: f64) -> Result<IndicialParams> {
    IndicialParams::new(n, s, std::f64::consts::FRAC_PI_2, nu)
}

fn pv(ctx: &Ctx, b: f64, c: f64, v: &Field) -> Field {
    let s2 = ctx.theta_fn(|t| t.sin().powi(2));
    let sc = ctx.theta_fn(|t| t.sin() * t.cos());
    let d1 = ctx.dtheta(v);
    let d2 = ctx.dtheta(&d1);
    d2.times(&s2).plus(&d1.times(&sc).map(|x| b * x)).plus(&v.times(&s2).map(|x| c * x))
}

/// J_nu on a log-level slice eta[k] (coefficient of log(rho)^k, v-space).
pub fn apply_j(ctx: &Ctx, n: usize, s: f64, nu: f64, eta: &[Field]) -> Result<Vec<Field>> {
    let op = vop_params(n, s, nu)?.vop();
    let s2 = ctx.theta_fn(|t| t.sin().powi(2));
    let a = 2.0 * nu + 1.0 - n as f64;
    let full: Vec<Field> = eta.iter().map(|e| e.broadcast(ctx.nt())).collect();
    let mut out = Vec::with_capacity(full.len());
    for k in 0..full.len() {
        let mut acc = pv(ctx, op.b, op.c, &full[k]);
        let k1 = (k + 1) as f64;
        if let Some(b1) = full.get(k + 1) {
            acc = acc.plus(&b1.times(&s2).map(|x| k1 * a * x));
        }
        if let Some(b2) = full.get(k + 2) {
            acc = acc.plus(&b2.times(&s2).map(|x| k1 * (k1 + 1.0) * x));
        }
        out.push(acc);
    }
    Ok(out)
}

/// Solution of J_nu eta = f. At a spectral parameter one extra log level
/// appears; `log_amplitude` is its multiple of the kernel function per point
/// of S.
#[derive(Debug, Clone)]
pub struct JSolution {
    pub levels: Vec<Field>,
    pub at_root: bool,
    pub log_amplitude: Vec<f64>,
}

fn sub_scaled(a: &mut [f64], k: f64, b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x -= k * y;
    }
}

fn solve_column(solver: &GreensSolver, a: f64, f: &[Vec<f64>], upsilon: f64) -> Result<(Vec<Vec<f64>>, f64)> {
    let grid = &solver.grid;
    let nt = grid.len();
    let top = f.len();
    let mut b = vec![vec![0.0; nt]; top + 2];
    let s2: Vec<f64> = grid.nodes.iter().map(|t| t.sin().powi(2)).collect();
    let mut amp = 0.0;
    for k in (0..top).rev() {
        let k1 = (k + 1) as f64;
        let mut rhs = f[k].clone();
        for j in 0..nt {
            rhs[j] -= s2[j] * (k1 * a * b[k + 1][j] + k1 * (k1 + 1.0) * b[k + 2][j]);
        }
        if solver.at_root {
            let p = solver.project(&rhs);
            let scale = rhs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if p.abs() > PROJECTION_TOL * scale.max(1.0) {
                if a == 0.0 {
                    return Err(Error::ObstructedRHS { projection: p });
                }
                let q = &solver.kernel().q;
                let s2q: Vec<f64> = q.iter().zip(&s2).map(|(x, y)| x * y).collect();
                let t = p / (k1 * a * solver.project(&s2q));
                for j in 0..nt {
                    b[k + 1][j] += t * q[j];
                }
                sub_scaled(&mut rhs, k1 * a * t, &s2q);
                if k + 1 == top {
                    amp = t;
                }
            }
            b[k] = solver.solve(&rhs)?.materialize(grid);
        } else {
            b[k] = solver.solve_levels(&[rhs])?.materialize(grid);
        }
    }
    if solver.at_root && upsilon != 0.0 {
        for (x, q) in b[0].iter_mut().zip(&solver.kernel().q) {
            *x += upsilon * q;
        }
    }
    while b.len() > 1 && b.last().unwrap().iter().all(|v| *v == 0.0) {
        b.pop();
    }
    Ok((b, amp))
}

fn solve_j_with(ctx: &Ctx, n: usize, s: f64, nu: f64, f: &[Field], upsilon: Option<&[f64]>) -> Result<JSolution> {
    let p = vop_params(n, s, nu)?;
    let root = at_root(&p)?;
    let solver = GreensSolver::new(&ctx.grid, p.vop(), root)?.with_resonance_tol(RESONANCE_TOL);
    let a = 2.0 * nu + 1.0 - n as f64;
    let nq = ctx.nq();
    let nt = ctx.nt();
    let full: Vec<Field> = f.iter().map(|e| e.broadcast(nt)).collect();
    use rayon::prelude::*;
    let cols: Vec<(Vec<Vec<f64>>, f64)> = (0..nq)
        .into_par_iter()
        .map(|q| {
            let fc: Vec<Vec<f64>> = full.iter().map(|e| e.column(q, nt)).collect();
            let ups = upsilon.map(|u| u[q]).unwrap_or(0.0);
            solve_column(&solver, a, &fc, ups)
        })
        .collect::<Result<_>>()?;
    let depth = cols.iter().map(|c| c.0.len()).max().unwrap_or(1);
    let zero = vec![0.0; nt];
    let levels = (0..depth)
        .map(|k| {
            let c: Vec<Vec<f64>> = cols.iter().map(|(b, _)| b.get(k).unwrap_or(&zero).clone()).collect();
            Field::from_columns(&c)
        })
        .collect();
    Ok(JSolution { levels, at_root: root, log_amplitude: cols.iter().map(|c| c.1).collect() })
}

/// Solves J_nu eta = f with eta(0) = 0 and the Neumann condition at pi/2.
/// Off the spectrum this is back-substitution in the log power; at a root
/// each level's kernel projection is absorbed by the next log level up and
/// the kernel multiple of eta_0 is set to zero.
pub fn solve_j(ctx: &Ctx, n: usize, s: f64, nu: f64, f: &[Field]) -> Result<JSolution> {
    solve_j_with(ctx, n, s, nu, f, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogOnset {
    /// rho-offset from n - s.
    pub j: usize,
    pub k: usize,
    pub rho_power: f64,
}

#[derive(Debug, Clone)]
pub struct LaplaceExpansion {
    pub n: usize,
    pub s: f64,
    /// V coefficients; u = rho^{n-s} sin^{n-s} V.
    pub v: Series,
    pub order_achieved: usize,
    pub log_onset: Option<LogOnset>,
    /// (offset, max |log coefficient / q|) at each root order.
    pub root_logs: Vec<(usize, f64)>,
    /// max |R_j| over log levels, j = 0..=order.
    pub residual_by_order: Vec<f64>,
}

impl LaplaceExpansion {
    pub fn sigma(&self) -> f64 {
        self.n as f64 - self.s
    }

    pub fn residual(&self, jet: &NormalFormMetricJet) -> Result<Series> {
        let v = self.v.with_order(jet.order);
        laplace_residual(jet, self.s, self.sigma(), &v)
    }

    /// Neumann defect of every slice at pi/2.
    pub fn neumann_defect(&self, ctx: &Ctx) -> f64 {
        self.v.terms.values().fold(0.0f64, |m, c| m.max(ctx.at_end(&ctx.dtheta(c)).max_abs()))
    }

    /// Largest log power above the bound max(0, floor((j + n - 2s)/2) + 1).
    pub fn log_bound_excess(&self) -> usize {
        let mut worst = 0;
        for j in 0..=self.v.order {
            let kmax = self.v.max_log(j);
            let x = (j as f64 + self.n as f64 - 2.0 * self.s) / 2.0;
            let bound = if x < 0.0 { 0 } else { x.floor() as usize + 1 };
            worst = worst.max(kmax.saturating_sub(bound));
        }
        worst
    }
}

fn dirichlet_data(problem: &CornerProblem, ctx: &Ctx, j: usize) -> Option<Vec<f64>> {
    let f = if j == 0 { Some(&problem.psi_boundary) } else { problem.psi_rho_jet.get(j - 1) };
    f.filter(|f| !f.entries.is_empty()).map(|f| f.values(&ctx.torus, &[]))
}

pub fn expand_eigenfunction(
    problem: &CornerProblem,
    metric: &NormalFormMetricJet,
    order: usize,
) -> Result<LaplaceExpansion> {
    if !is_half_pi(problem.theta0) {
        return Err(Error::NotHalfPi(problem.theta0));
    }
    let s = problem.s.ok_or_else(|| Error::InvalidParams("Laplace expansion needs s".into()))?;
    let n = problem.n;
    if !(s > n as f64 / 2.0) {
        return Err(Error::InvalidParams(format!("s = {s} must exceed n/2")));
    }
    if metric.order < order {
        return Err(Error::TruncationInsufficient { have: metric.order, need: order });
    }
    let ctx = &metric.ctx;
    let sigma = n as f64 - s;
    let mut v = Series::zero(order);
    let mut root_logs = vec![];
    let mut residual_by_order = vec![];
    let mut root_index = 0;
    for j in 0..=order {
        if let Some(psi) = dirichlet_data(problem, ctx, j) {
            v.insert_add(j, 0, Field::constant_s(psi));
        }
        let jet = metric.truncated(j);
        let r = laplace_residual(&jet, s, sigma, &v.with_order(j))?;
        let k_top = r.max_log(j);
        let f: Vec<Field> = (0..=k_top)
            .map(|k| r.get(j, k).map(|c| c.broadcast(ctx.nt()).map(|x| -x)).unwrap_or_else(|| ctx.zero_full()))
            .collect();
        let nu = sigma + j as f64;
        let p = vop_params(n, s, nu)?;
        let upsilon = if at_root(&p)? {
            let u = problem.upsilon.get(root_index).map(|f| f.values(&ctx.torus, &[]));
            root_index += 1;
            u
        } else {
            None
        };
        let sol = solve_j_with(ctx, n, s, nu, &f, upsilon.as_deref())?;
        if sol.at_root {
            root_logs.push((j, sol.log_amplitude.iter().fold(0.0f64, |m, x| m.max(x.abs()))));
        }
        for (k, c) in sol.levels.into_iter().enumerate() {
            if c.max_abs() > 0.0 {
                v.insert_add(j, k, c);
            }
        }
    }
    let r = laplace_residual(&metric.truncated(order), s, sigma, &v)?;
    for j in 0..=order {
        residual_by_order.push(r.max_norm_at(j));
    }
    let scale = v.terms.values().fold(1e-300f64, |m, c| m.max(c.max_abs()));
    let log_onset = v
        .terms
        .iter()
        .filter(|(&(_, k), c)| k > 0 && c.max_abs() > 1e-10 * scale)
        .map(|(&(j, k), _)| LogOnset { j, k, rho_power: sigma + j as f64 })
        .next();
    Ok(LaplaceExpansion { n, s, v, order_achieved: order, log_onset, root_logs, residual_by_order })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rhoseries::SField;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::{FRAC_PI_2, PI};

    fn problem(s: f64, m: usize) -> CornerProblem {
        let mut p = CornerProblem::new(3, FRAC_PI_2);
        p.s = Some(s);
        p.m_max = m;
        p.grid_n = 48;
        p
    }

    fn trig_psi() -> SField {
        SField::scalar(&[(vec![0, 0], 1.0, 0.0), (vec![1, 0], 0.3, 0.1), (vec![0, 1], -0.2, 0.25)])
    }

    fn random_levels(ctx: &Ctx, k: usize, seed: u64) -> Vec<Field> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..k)
            .map(|_| {
                let c: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let w: f64 = rng.gen_range(-1.0..1.0);
                ctx.full_fn(|t, x| t.sin().powi(2) * (c[0] + c[1] * t.cos().powi(2) + c[2] * x[0].cos() * (w * t).cos()))
            })
            .collect()
    }

    #[test]
    fn zero_data_gives_zero() {
        let p = problem(PI, 2);
        let ctx = p.ctx().unwrap();
        let jet = NormalFormMetricJet::model(3, &ctx, 4);
        let e = expand_eigenfunction(&p, &jet, 4).unwrap();
        assert!(e.v.terms.values().all(|c| c.max_abs() == 0.0));
        assert!(e.log_onset.is_none());
    }

    #[test]
    fn not_half_pi_rejected() {
        let mut p = problem(PI, 2);
        p.theta0 = 1.0;
        let ctx = p.ctx().unwrap();
        let jet = NormalFormMetricJet::model(3, &ctx, 2);
        assert!(matches!(expand_eigenfunction(&p, &jet, 2), Err(Error::NotHalfPi(_))));
    }

    #[test]
    fn apply_j_matches_residual_linearization() {
        let p = problem(3.0, 2);
        let ctx = p.ctx().unwrap();
        let jet = NormalFormMetricJet::model(3, &ctx, 3);
        let sigma = 0.0;
        let eta = random_levels(&ctx, 3, 5);
        let mut v = Series::zero(3);
        for (k, e) in eta.iter().enumerate() {
            v.insert_add(3, k, e.clone());
        }
        let r = laplace_residual(&jet, 3.0, sigma, &v).unwrap();
        let j = apply_j(&ctx, 3, 3.0, 3.0, &eta).unwrap();
        for (k, jk) in j.iter().enumerate() {
            let rk = r.get(3, k).unwrap();
            assert!(rk.dist(jk) < 1e-9 * jk.max_abs().max(1.0), "level {k}");
        }
    }

    #[test]
    fn j_round_trip_off_root() {
        let p = problem(3.0, 2);
        let ctx = p.ctx().unwrap();
        let f = random_levels(&ctx, 3, 11);
        // nu = s + 1 lies between spectral parameters
        let sol = solve_j(&ctx, 3, 3.0, 4.0, &f).unwrap();
        assert!(!sol.at_root);
        let back = apply_j(&ctx, 3, 3.0, 4.0, &sol.levels).unwrap();
        for (a, b) in back.iter().zip(&f) {
            assert!(a.dist(b) < 1e-8);
        }
    }

    #[test]
    fn j_root_adds_one_log_level() {
        let p = problem(3.0, 2);
        let ctx = p.ctx().unwrap();
        let f = random_levels(&ctx, 2, 3);
        let sol = solve_j(&ctx, 3, 3.0, 3.0, &f).unwrap();
        assert!(sol.at_root);
        assert_eq!(sol.levels.len(), 3);
        let back = apply_j(&ctx, 3, 3.0, 3.0, &sol.levels).unwrap();
        for (a, b) in back.iter().zip(&f) {
            assert!(a.dist(b) < 1e-8);
        }
        assert!(back[2].max_abs() < 1e-8);
    }

    #[test]
    fn j_root_defining_ratio() {
        // f_0 = sin^2 q gives log coefficient q / (2 nu + 1 - n)
        let ctx = problem(3.0, 1).ctx().unwrap();
        let solver = GreensSolver::for_params(&ctx.grid, &vop_params(3, 3.0, 3.0).unwrap()).unwrap();
        let q = solver.kernel().q.clone();
        let col: Vec<f64> = q.iter().zip(&ctx.grid.nodes).map(|(q, t)| q * t.sin().powi(2)).collect();
        let f = Field::from_columns(&vec![col; ctx.nq()]);
        let sol = solve_j(&ctx, 3, 3.0, 3.0, &[f]).unwrap();
        for a in &sol.log_amplitude {
            assert!((a - 1.0 / 4.0).abs() < 1e-10, "{a}");
        }
    }

    #[test]
    fn non_integer_s_is_log_free_and_decays() {
        let mut p = problem(PI, 2);
        p.psi_boundary = trig_psi();
        let ctx = p.ctx().unwrap();
        let jet = NormalFormMetricJet::model(3, &ctx, 8);
        let e = expand_eigenfunction(&p, &jet, 6).unwrap();
        assert!(e.log_onset.is_none());
        for (j, r) in e.residual_by_order.iter().enumerate() {
            assert!(*r < 1e-6, "order {j}: {r}");
        }
        assert!(e.neumann_defect(&ctx) < 1e-8);
        let v0 = e.v.get(0, 0).unwrap();
        let psi = p.psi_boundary.values(&ctx.torus, &[]);
        assert!(ctx.at_zero(&v0.broadcast(ctx.nt())).dist(&Field::constant_s(psi)) < 1e-12);
    }

    #[test]
    fn integer_s_log_onset_at_root() {
        let mut p = problem(3.0, 2);
        p.psi_boundary = trig_psi();
        p.psi_rho_jet = vec![SField::default(), SField::default(), SField::scalar(&[(vec![0, 0], 0.5, 0.0)])];
        let ctx = p.ctx().unwrap();
        let jet = NormalFormMetricJet::model(3, &ctx, 8);
        let e = expand_eigenfunction(&p, &jet, 6).unwrap();
        let onset = e.log_onset.expect("log term");
        assert_eq!((onset.j, onset.k), (3, 1));
        assert!((onset.rho_power - 3.0).abs() < 1e-12);
        assert!(e.root_logs[0].1 > 1e-6);
        assert_eq!(e.log_bound_excess(), 0);
        for (j, r) in e.residual_by_order.iter().enumerate() {
            assert!(*r < 1e-6, "order {j}: {r}");
        }
    }

    #[test]
    fn constant_psi_at_integer_s_has_no_log() {
        let mut p = problem(3.0, 1);
        p.psi_boundary = SField::scalar(&[(vec![0, 0], 1.0, 0.0)]);
        let ctx = p.ctx().unwrap();
        let jet = NormalFormMetricJet::model(3, &ctx, 6);
        let e = expand_eigenfunction(&p, &jet, 5).unwrap();
        assert!(e.log_onset.is_none());
        assert!(e.root_logs.iter().all(|(_, a)| *a == 0.0));
    }
}
