//! Order-by-order formal Einstein solver in polar normal form, the contracted
//! Bianchi residuals and the obstruction tensor at a right-angled corner.
//!
//! Index convention as in `geometry`: tensor slots 0..n-1 with the last slot
//! the rho direction, the others tangent to S.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::geometry::{
    christoffel, dop, einstein_residual, k_tensor_from_problem, trace, CornerProblem, NormalFormMetricJet,
};
use crate::rhoseries::{zero_tensor, Ctx, Field, ModeEntry, SField, Series, Tensor, Torus};
use crate::sturm::{at_root, is_half_pi, GreensSolver, IndicialParams, VOp};
use crate::{Error, Result};

pub type FieldTensor = Vec<Vec<Field>>;

/// Relative size of the theta0 values of f_{0 sigma} tolerated before the
/// step is declared inconsistent.
pub const CONSISTENCY_TOL: f64 = 1e-7;
pub const OBSTRUCTION_TOL: f64 = 1e-8;
const GENERIC_RESONANCE_TOL: f64 = 1e-5;

fn coef(ctx: &Ctx, s: &Series, j: usize) -> Field {
    match s.get(j, 0) {
        Some(c) => c.broadcast(ctx.nt()),
        None => ctx.zero_full(),
    }
}

fn lin(a: f64, x: &Field, b: f64, y: &Field) -> Field {
    x.map(|v| a * v).plus(&y.map(|v| b * v))
}

/// k_0 and its inverse at every point of S, indexed [a][b][q].
#[derive(Debug, Clone)]
pub struct Background {
    pub k0: Vec<Vec<Vec<f64>>>,
    pub k0inv: Vec<Vec<Vec<f64>>>,
}

impl Background {
    pub fn of(jet: &NormalFormMetricJet) -> Result<Self> {
        let dim = jet.n - 1;
        let nq = jet.ctx.nq();
        let k0: Vec<Vec<Vec<f64>>> = (0..dim)
            .map(|a| {
                (0..dim)
                    .map(|b| match jet.hbar[a][b].get(0, 0) {
                        Some(c) => c.row(0).to_vec(),
                        None => vec![0.0; nq],
                    })
                    .collect()
            })
            .collect();
        let mut k0inv = vec![vec![vec![0.0; nq]; dim]; dim];
        for q in 0..nq {
            let m = DMatrix::from_fn(dim, dim, |a, b| k0[a][b][q]);
            let inv = m.try_inverse().ok_or(Error::SingularLeadingTerm)?;
            for a in 0..dim {
                for b in 0..dim {
                    k0inv[a][b][q] = inv[(a, b)];
                }
            }
        }
        Ok(Self { k0, k0inv })
    }

    fn dim(&self) -> usize {
        self.k0.len()
    }

    fn k(&self, a: usize, b: usize) -> Field {
        Field::constant_s(self.k0[a][b].clone())
    }

    /// k0^{ab} f_ab over the tangential block of f.
    pub fn trace(&self, f: &FieldTensor) -> Field {
        let d = self.dim();
        let mut acc = Field::constant_s(vec![0.0; self.k0[0][0].len()]);
        for a in 0..d {
            for b in 0..d {
                acc = acc.plus(&Field::constant_s(self.k0inv[a][b].clone()).times(&f[a][b]));
            }
        }
        acc
    }

    pub fn tracefree(&self, f: &FieldTensor) -> FieldTensor {
        let d = self.dim();
        let tr = self.trace(f).map(|v| v / d as f64);
        (0..d).map(|a| (0..d).map(|b| f[a][b].plus(&tr.times(&self.k(a, b)).map(|v| -v))).collect()).collect()
    }

    /// drho^2 + k_0 as an n x n field tensor.
    pub fn h0(&self) -> FieldTensor {
        let d = self.dim();
        let nq = self.k0[0][0].len();
        let mut out = vec![vec![Field::constant_s(vec![0.0; nq]); d + 1]; d + 1];
        for a in 0..d {
            for b in 0..d {
                out[a][b] = self.k(a, b);
            }
        }
        out[d][d] = Field::constant_s(vec![1.0; nq]);
        out
    }

    /// h0^{mu nu} f_{mu nu}.
    pub fn full_trace(&self, f: &FieldTensor) -> Field {
        let d = self.dim();
        self.trace(f).plus(&f[d][d])
    }
}

/// The order-gamma coefficients f = rho^-gamma E(g^(gamma-1)) at rho = 0 in
/// the omega frame, with f00 / sin^2 and f0 / sin^2.
#[derive(Debug, Clone)]
pub struct IndicialSystemRHS {
    pub gamma: usize,
    pub f00: Field,
    pub f00_red: Field,
    pub f0_red: Vec<Field>,
    pub f: FieldTensor,
}

impl IndicialSystemRHS {
    pub fn max_abs(&self) -> f64 {
        let mut m = self.f00.max_abs();
        for x in self.f0_red.iter().chain(self.f.iter().flatten()) {
            m = m.max(x.max_abs());
        }
        m
    }
}

pub fn indicial_rhs(jet: &NormalFormMetricJet, gamma: usize) -> Result<IndicialSystemRHS> {
    if gamma > jet.order {
        return Err(Error::TruncationInsufficient { have: jet.order, need: gamma });
    }
    let ctx = &jet.ctx;
    let res = einstein_residual(&jet.truncated(gamma))?;
    Ok(IndicialSystemRHS {
        gamma,
        f00: coef(ctx, &res.e00, gamma),
        f00_red: coef(ctx, &res.e00_red, gamma),
        f0_red: res.e0_red.iter().map(|s| coef(ctx, s, gamma)).collect(),
        f: res.e.iter().map(|r| r.iter().map(|s| coef(ctx, s, gamma)).collect()).collect(),
    })
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct OrderReport {
    pub gamma: usize,
    pub rhs_norm: f64,
    pub psi_max: f64,
    /// max |psi - (closed-form affine solution)|.
    pub psi_formula_defect: f64,
    /// max |c(1) - c(0) - (1-n)(gamma-n)(gamma+1)|.
    pub psi_slope_defect: f64,
    pub theta0_defect: f64,
    pub kernel_projection: f64,
    /// max |E_j| for j = 0..=gamma+1 after the step.
    pub residual_by_order: Vec<f64>,
    pub bianchi_max: f64,
    pub parity_defect: f64,
}

#[derive(Debug, Clone)]
pub struct OrderSolution {
    pub gamma: usize,
    pub phi: FieldTensor,
    pub psi: Vec<f64>,
    pub obstruction: Option<FieldTensor>,
    pub report: OrderReport,
}

fn cumulative(ctx: &Ctx, f: &Field) -> Result<Field> {
    let g = &ctx.grid;
    ctx.map_columns(f, |c| Ok(g.cumulative(c)))
}

/// The trace l with l(0) = 0, l'(theta0) = 0 from sin^2 l'' - sin cos l' = 2 f00,
/// i.e. l' = -2 sin(theta) int_theta^theta0 f00 / sin^3. Solving the ODE avoids
/// dividing noisy data by sin near theta = 0.
fn trace_from_f00(ctx: &Ctx, f00: &Field) -> Result<Field> {
    let solver = GreensSolver::new(&ctx.grid, VOp::new(-1.0, 0.0), false)?.with_resonance_tol(GENERIC_RESONANCE_TOL);
    solve_columns(ctx, &solver, f00, 2.0, false)
}

fn solve_columns(ctx: &Ctx, solver: &GreensSolver, f: &Field, factor: f64, levels: bool) -> Result<Field> {
    let g = &ctx.grid;
    ctx.map_columns(f, |c| {
        let rhs: Vec<f64> = c.iter().map(|v| factor * v).collect();
        let sol = if levels { solver.solve_levels(&[rhs])? } else { solver.solve(&rhs)? };
        Ok(sol.materialize(g))
    })
}

fn solve_tracefree(
    ctx: &Ctx,
    solver: &GreensSolver,
    ftf: &FieldTensor,
    levels: bool,
) -> Result<FieldTensor> {
    let d = ftf.len();
    let mut out = vec![vec![ctx.zero_full(); d]; d];
    for a in 0..d {
        for b in a..d {
            let v = solve_columns(ctx, solver, &ftf[a][b], 2.0, levels)?;
            out[a][b] = v.clone();
            out[b][a] = v;
        }
    }
    Ok(out)
}

/// phi from its tracefree tangential part, trace l and phi_nn, phi_ns.
fn assemble(bg: &Background, tf: &FieldTensor, ell: &Field, nn: &Field, ns: &[Field]) -> FieldTensor {
    let d = bg.dim();
    let share = lin(1.0 / d as f64, ell, -1.0 / d as f64, nn);
    let mut phi = vec![vec![Field::constant_s(vec![0.0; ell.nq]); d + 1]; d + 1];
    for a in 0..d {
        for b in 0..d {
            phi[a][b] = tf[a][b].plus(&share.times(&bg.k(a, b)));
        }
        phi[a][d] = ns[a].clone();
        phi[d][a] = ns[a].clone();
    }
    phi[d][d] = nn.clone();
    phi
}

fn add_phi(jet: &mut NormalFormMetricJet, gamma: usize, phi: &FieldTensor) {
    for (row, prow) in jet.hbar.iter_mut().zip(phi) {
        for (s, p) in row.iter_mut().zip(prow) {
            if p.max_abs() > 0.0 {
                s.insert_add(gamma, 0, p.clone());
            }
        }
    }
}

/// h0^{mu nu} E_{mu nu} / sin^2 at theta0, order gamma, per point of S.
fn end_trace(jet: &NormalFormMetricJet, bg: &Background, gamma: usize, phi: &FieldTensor) -> Result<Vec<f64>> {
    let mut j = jet.truncated(gamma);
    add_phi(&mut j, gamma, phi);
    let res = einstein_residual(&j)?;
    let ctx = &jet.ctx;
    let f: FieldTensor = res.e.iter().map(|r| r.iter().map(|s| ctx.at_end(&coef(ctx, s, gamma))).collect()).collect();
    let s2 = jet.theta0.sin().powi(2);
    Ok(bg.full_trace(&f).v.iter().map(|v| v / s2).collect())
}

fn zero_solution(ctx: &Ctx, n: usize, gamma: usize) -> OrderSolution {
    OrderSolution {
        gamma,
        phi: vec![vec![ctx.zero_full(); n]; n],
        psi: vec![0.0; ctx.nq()],
        obstruction: None,
        report: OrderReport { gamma, ..Default::default() },
    }
}

fn theta0_check(ctx: &Ctx, rhs: &IndicialSystemRHS) -> Result<f64> {
    let scale = rhs.max_abs().max(1.0);
    let d = rhs.f0_red.iter().map(|f| ctx.at_end(f).max_abs()).fold(0.0, f64::max);
    if d > CONSISTENCY_TOL * scale {
        return Err(Error::ConsistencyFailure(format!(
            "f_0sigma = {d:e} at theta0 at order {}",
            rhs.gamma
        )));
    }
    Ok(d)
}

/// One step of the induction for gamma != n.
pub fn solve_order(jet: &NormalFormMetricJet, gamma: usize) -> Result<OrderSolution> {
    let n = jet.n;
    if gamma == 0 || gamma == n {
        return Err(Error::InvalidParams(format!("solve_order at gamma = {gamma}")));
    }
    let ctx = &jet.ctx;
    let (g, nf) = (gamma as f64, n as f64);
    let d = n - 1;
    let bg = Background::of(jet)?;
    let rhs = indicial_rhs(jet, gamma)?;
    let mut report = OrderReport { gamma, rhs_norm: rhs.max_abs(), ..Default::default() };
    if report.rhs_norm == 0.0 {
        return Ok(zero_solution(ctx, n, gamma));
    }
    report.theta0_defect = theta0_check(ctx, &rhs)?;

    let tf = if d >= 2 {
        let p = IndicialParams::new(n, nf, jet.theta0, g)?;
        if at_root(&p)? {
            return Err(Error::IndicialRootHit { gamma: g });
        }
        // the data is even in theta below order n, so a theta^n coefficient is noise
        let solver = GreensSolver::for_params(&ctx.grid, &p)?.with_resonance_tol(GENERIC_RESONANCE_TOL);
        let sub: FieldTensor = (0..d).map(|a| rhs.f[a][..d].to_vec()).collect();
        solve_tracefree(ctx, &solver, &bg.tracefree(&sub), false)?
    } else {
        vec![vec![ctx.zero_full(); d]; d]
    };

    let ell = trace_from_f00(ctx, &rhs.f00)?;
    let nn = lin(1.0, &cumulative(ctx, &rhs.f0_red[d].map(|v| -2.0 * v / (g - nf)))?, (g - 1.0) / (g - nf), &ell);
    let ns: Vec<Field> =
        (0..d).map(|a| cumulative(ctx, &rhs.f0_red[a].map(|v| -2.0 * v / (g - nf)))).collect::<Result<_>>()?;
    let phi0 = assemble(&bg, &tf, &ell, &nn, &ns);

    // psi from two evaluations of the trace at theta0; the response is affine
    let h0 = bg.h0();
    let phi1: FieldTensor = phi0.iter().zip(&h0).map(|(r, h)| r.iter().zip(h).map(|(a, b)| a.plus(b)).collect()).collect();
    let c0 = end_trace(jet, &bg, gamma, &phi0)?;
    let c1 = end_trace(jet, &bg, gamma, &phi1)?;
    let expect = (1.0 - nf) * (g - nf) * (g + 1.0);
    let mut psi = Vec::with_capacity(c0.len());
    for (a, b) in c0.iter().zip(&c1) {
        let slope = b - a;
        report.psi_slope_defect = report.psi_slope_defect.max((slope - expect).abs());
        let p = -a / slope;
        report.psi_formula_defect = report.psi_formula_defect.max((p + a / expect).abs());
        psi.push(p);
    }
    if report.psi_slope_defect > 1e-6 * expect.abs() {
        return Err(Error::ConsistencyFailure(format!(
            "trace response {} differs from {expect}",
            report.psi_slope_defect
        )));
    }
    report.psi_max = psi.iter().fold(0.0, |m, v| m.max(v.abs()));
    let pf = Field::constant_s(psi.clone());
    let phi = phi0.iter().zip(&h0).map(|(r, h)| r.iter().zip(h).map(|(a, b)| a.plus(&b.times(&pf))).collect()).collect();
    Ok(OrderSolution { gamma, phi, psi, obstruction: None, report })
}

/// The order-n step: kernel projection of the tracefree data, the order-n
/// trace equation, and the free scalar psi_free.
pub fn solve_order_n(jet: &NormalFormMetricJet, psi_free: &[f64]) -> Result<OrderSolution> {
    let n = jet.n;
    let ctx = &jet.ctx;
    let grid = &ctx.grid;
    let nf = n as f64;
    let d = n - 1;
    let bg = Background::of(jet)?;
    let rhs = indicial_rhs(jet, n)?;
    let mut report = OrderReport { gamma: n, rhs_norm: rhs.max_abs(), ..Default::default() };
    let psi_f = Field::constant_s(psi_free.to_vec());

    let tf = if d >= 2 {
        let p = IndicialParams::new(n, nf, jet.theta0, nf)?;
        let root = at_root(&p)?;
        let solver = GreensSolver::for_params(grid, &p)?;
        let sub: FieldTensor = (0..d).map(|a| rhs.f[a][..d].to_vec()).collect();
        let ftf = bg.tracefree(&sub);
        if root {
            let k = project_tracefree(ctx, &solver, &ftf);
            report.kernel_projection = k.iter().flatten().fold(0.0, |m, f| m.max(f.max_abs()));
            if report.kernel_projection > OBSTRUCTION_TOL {
                let mut sol = zero_solution(ctx, n, n);
                sol.obstruction = Some(k);
                sol.report = report;
                return Ok(sol);
            }
        }
        solve_tracefree(ctx, &solver, &ftf, root)?
    } else {
        vec![vec![ctx.zero_full(); d]; d]
    };

    // trace: sin^2 l'' - (2n-1) sin cos l' = 2 h0^{mu nu} f_{mu nu}
    let tr_solver = GreensSolver::new(grid, VOp::new(-(2.0 * nf - 1.0), 0.0), false)?;
    let m = solve_columns(ctx, &tr_solver, &bg.full_trace(&rhs.f), 2.0, false)?;
    let ell = m.plus(&psi_f.map(|v| nf * v));
    let lp = ctx.dtheta(&ell);

    let p_nn = IndicialParams::new(n, nf, jet.theta0, nf - 2.0)?;
    if at_root(&p_nn)? {
        return Err(Error::IndicialRootHit { gamma: nf - 2.0 });
    }
    let nn_solver = GreensSolver::for_params(grid, &p_nn)?;
    let s2 = ctx.theta_fn(|t| t.sin().powi(2));
    let sc = ctx.theta_fn(|t| t.sin() * t.cos());
    let nn_rhs = rhs.f[d][d]
        .map(|v| 2.0 * v)
        .plus(&sc.times(&lp))
        .plus(&s2.times(&lin(nf - 2.0, &psi_f, -nf * (nf - 2.0), &ell)));
    let nn = solve_columns(ctx, &nn_solver, &nn_rhs, 1.0, false)?.plus(&psi_f);

    let sn_solver = GreensSolver::new(grid, VOp::new(-(nf - 1.0), 0.0), false)?;
    let ns: Vec<Field> =
        (0..d).map(|a| solve_columns(ctx, &sn_solver, &rhs.f[a][d], 2.0, false)).collect::<Result<_>>()?;

    let phi = assemble(&bg, &tf, &ell, &nn, &ns);
    Ok(OrderSolution { gamma: n, phi, psi: psi_free.to_vec(), obstruction: None, report })
}

/// int_0^theta0 csc f under the kernel pairing, per tracefree component.
fn project_tracefree(ctx: &Ctx, solver: &GreensSolver, ftf: &FieldTensor) -> FieldTensor {
    let d = ftf.len();
    let nt = ctx.nt();
    let mut out = vec![vec![Field::constant_s(vec![0.0; ctx.nq()]); d]; d];
    for a in 0..d {
        for b in a..d {
            let f = ftf[a][b].broadcast(nt);
            let v: Vec<f64> = (0..ctx.nq()).map(|q| solver.project(&f.column(q, nt))).collect();
            out[a][b] = Field::constant_s(v.clone());
            out[b][a] = Field::constant_s(v);
        }
    }
    out
}

/// Adds rho^gamma phi, rho^gamma psi to chi and the theta-independent
/// correction psi rho^gamma (k_rho - k_0) that keeps hbar(theta = 0) = chi (drho^2 + k_rho).
pub fn apply_solution(jet: &mut NormalFormMetricJet, sol: &OrderSolution, k_rho: &Tensor) {
    let gamma = sol.gamma;
    add_phi(jet, gamma, &sol.phi);
    if sol.psi.iter().all(|v| *v == 0.0) {
        return;
    }
    let psi = Field::constant_s(sol.psi.clone());
    jet.chi.insert_add(gamma, 0, psi.clone());
    let d = jet.n - 1;
    for a in 0..d {
        for b in 0..d {
            for (&(j, k), c) in &k_rho[a][b].terms {
                if j >= 1 && k == 0 {
                    jet.hbar[a][b].insert_add(gamma + j, 0, c.times(&psi));
                }
            }
        }
    }
}

/// Largest odd Taylor coefficient below theta^n over the theta-dependent
/// coefficients of hbar (sampled on a few S-points).
pub fn parity_defect(jet: &NormalFormMetricJet) -> f64 {
    let ctx = &jet.ctx;
    let nt = ctx.nt();
    let stride = (ctx.nq() / 7).max(1);
    let mut worst: f64 = 0.0;
    for s in jet.hbar.iter().flatten() {
        for c in s.terms.values() {
            if c.nt == 1 {
                continue;
            }
            for q in (0..ctx.nq()).step_by(stride) {
                let tc = ctx.grid.taylor_at_zero(&c.column(q, nt), jet.n + 1);
                let scale = c.max_abs().max(1.0);
                for (k, v) in tc.iter().enumerate() {
                    if k % 2 == 1 && k < jet.n {
                        worst = worst.max(v.abs() / scale);
                    }
                }
            }
        }
    }
    worst
}

#[derive(Debug, Clone)]
pub struct EinsteinExpansion {
    pub problem: CornerProblem,
    pub solved_order: usize,
    pub jet: NormalFormMetricJet,
    pub reports: Vec<OrderReport>,
}

/// Drives the induction for gamma = 1..=order. The returned jet carries one
/// unsolved order beyond `order` for residual slope tests.
pub fn expand_einstein(problem: &CornerProblem, order: usize) -> Result<EinsteinExpansion> {
    problem.validate()?;
    let ctx = problem.ctx()?;
    expand_einstein_on(problem, &ctx, order)
}

pub fn expand_einstein_on(problem: &CornerProblem, ctx: &Ctx, order: usize) -> Result<EinsteinExpansion> {
    let n = problem.n;
    let jorder = order + 1;
    let k_rho = k_tensor_from_problem(problem, ctx, jorder);
    let mut jet = NormalFormMetricJet::initial(problem, ctx, jorder);
    let psi_free = problem.psi_free_at_n.values(&ctx.torus, &[]);
    let mut reports = Vec::with_capacity(order);
    for gamma in 1..=order {
        let sol = if gamma == n { solve_order_n(&jet, &psi_free)? } else { solve_order(&jet, gamma)? };
        if let Some(k) = &sol.obstruction {
            let modes = obstruction_modes(&ctx.torus, k);
            return Err(Error::Obstructed { norm: sol.report.kernel_projection, modes });
        }
        let mut report = sol.report.clone();
        apply_solution(&mut jet, &sol, &k_rho);
        let check = jet.truncated(gamma + 1);
        let res = einstein_residual(&check)?;
        report.residual_by_order = (0..=gamma + 1).map(|j| res.max_at(j)).collect();
        let b = bianchi_residual(&check)?;
        report.bianchi_max = b.max_below(gamma);
        report.parity_defect = parity_defect(&jet);
        reports.push(report);
    }
    Ok(EinsteinExpansion { problem: problem.clone(), solved_order: order, jet, reports })
}

fn obstruction_modes(torus: &Torus, k: &FieldTensor) -> Vec<ModeEntry> {
    let mut out = SField::default();
    for a in 0..k.len() {
        for b in a..k.len() {
            out.extend(SField::from_values(torus, vec![a, b], &k[a][b].v, 1e-13));
        }
    }
    out.entries
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Obstruction {
    pub n: usize,
    /// K_ab at the torus points, [a][b][q].
    pub values: Vec<Vec<Vec<f64>>>,
    pub modes: Vec<ModeEntry>,
    pub norm: f64,
    /// max |k0^{ab} K_ab|.
    pub trace_defect: f64,
}

/// The obstruction tensor K of a right-angled corner problem.
pub fn obstruction_tensor(problem: &CornerProblem) -> Result<Obstruction> {
    problem.validate()?;
    let ctx = problem.ctx()?;
    obstruction_tensor_on(problem, &ctx)
}

pub fn obstruction_tensor_on(problem: &CornerProblem, ctx: &Ctx) -> Result<Obstruction> {
    let n = problem.n;
    if !is_half_pi(problem.theta0) {
        return Err(Error::NotHalfPi(problem.theta0));
    }
    let exp = expand_einstein_on(problem, ctx, n - 1)?;
    let jet = &exp.jet;
    let bg = Background::of(jet)?;
    let d = n - 1;
    let nq = ctx.nq();
    let rhs = indicial_rhs(jet, n)?;
    let sub: FieldTensor = (0..d).map(|a| rhs.f[a][..d].to_vec()).collect();
    let ftf = bg.tracefree(&sub);
    let scale = rhs.max_abs().max(1.0);
    let at0 = ftf.iter().flatten().map(|f| f.row(0).iter().fold(0.0f64, |m, v| m.max(v.abs()))).fold(0.0, f64::max);
    if at0 > 1e-6 * scale {
        return Err(Error::DivergentIntegral { exponent: -1.0 });
    }
    let p = IndicialParams::new(n, n as f64, problem.theta0, n as f64)?;
    let solver = GreensSolver::for_params(&ctx.grid, &p)?;
    let k = project_tracefree(ctx, &solver, &ftf);
    let values: Vec<Vec<Vec<f64>>> = k.iter().map(|r| r.iter().map(|f| f.v.clone()).collect()).collect();
    let norm = values.iter().flatten().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let tr = if d >= 1 { bg.trace(&k).max_abs() } else { 0.0 };
    let _ = nq;
    Ok(Obstruction { n, values, modes: obstruction_modes(&ctx.torus, &k), norm, trace_defect: tr })
}

/// The components of the indicial operator I^gamma applied to a
/// theta-dependent phi over the background k_0 of `jet`.
#[derive(Debug, Clone)]
pub struct IndicialComponents {
    pub i00: Field,
    pub i0: Vec<Field>,
    pub i: FieldTensor,
}

pub fn apply_indicial_einstein(jet: &NormalFormMetricJet, gamma: f64, phi: &FieldTensor) -> Result<IndicialComponents> {
    let ctx = &jet.ctx;
    let n = jet.n;
    let nf = n as f64;
    let d = n - 1;
    let g = gamma;
    let bg = Background::of(jet)?;
    let s2 = ctx.theta_fn(|t| t.sin().powi(2));
    let sc = ctx.theta_fn(|t| t.sin() * t.cos());
    let phi: FieldTensor = phi.iter().map(|r| r.iter().map(|f| f.broadcast(ctx.nt())).collect()).collect();
    let dt = |f: &Field| ctx.dtheta(f);
    let ell = bg.full_trace(&phi);
    let (lp, lpp) = (dt(&ell), dt(&dt(&ell)));
    let half = |f: Field| f.map(|v| 0.5 * v);

    let i00 = half(s2.times(&lpp).map(|v| -v).plus(&sc.times(&lp)));
    let mut i0 = Vec::with_capacity(n);
    for sg in 0..n {
        let mut x = dt(&phi[d][sg]).map(|v| (g - nf) * v);
        if sg == d {
            x = x.plus(&lp.map(|v| -(g - 1.0) * v));
        }
        i0.push(half(s2.times(&x)));
    }
    // -sin^2 f'' + (n-1) sin cos f'
    let lead = |f: &Field| s2.times(&dt(&dt(f))).map(|v| -v).plus(&sc.times(&dt(f)).map(|v| (nf - 1.0) * v));
    let nn = &phi[d][d];
    let inn = half(
        lead(nn)
            .plus(&sc.times(&lp))
            .plus(&s2.times(&lin((g - 2.0) * (g + 1.0 - nf), nn, g * (2.0 - g), &ell))),
    );
    let itr = half(
        s2.times(&lpp)
            .map(|v| -v)
            .plus(&sc.times(&lp).map(|v| (2.0 * nf - 1.0) * v))
            .plus(&s2.times(&lin(2.0 * (g - nf) * (g + 1.0 - nf), nn, -2.0 * g * (g - nf), &ell))),
    );
    let mut i = vec![vec![ctx.zero_full(); n]; n];
    i[d][d] = inn.clone();
    for a in 0..d {
        let v = half(lead(&phi[a][d]));
        i[a][d] = v.clone();
        i[d][a] = v;
    }
    if d >= 1 {
        let sub: FieldTensor = (0..d).map(|a| phi[a][..d].to_vec()).collect();
        let tf = bg.tracefree(&sub);
        let share = lin(1.0 / d as f64, &itr, -1.0 / d as f64, &inn);
        for a in 0..d {
            for b in 0..d {
                let t = half(lead(&tf[a][b]).plus(&s2.times(&tf[a][b]).map(|v| -g * (g + 1.0 - nf) * v)));
                i[a][b] = t.plus(&share.times(&bg.k(a, b)));
            }
        }
    }
    Ok(IndicialComponents { i00, i0, i })
}

/// Contracted Bianchi combinations B_0 and rho B_sigma of the Einstein
/// residual (coordinate frame, rho powers absorbed).
#[derive(Debug, Clone)]
pub struct BianchiResidual {
    pub b0: Series,
    pub b: Vec<Series>,
}

impl BianchiResidual {
    pub fn max_below(&self, order: usize) -> f64 {
        let mut m: f64 = 0.0;
        for s in std::iter::once(&self.b0).chain(&self.b) {
            for j in 0..=order.min(s.order) {
                m = m.max(s.max_norm_at(j));
            }
        }
        m
    }
}

pub fn bianchi_residual(jet: &NormalFormMetricJet) -> Result<BianchiResidual> {
    let ctx = &jet.ctx;
    let n = jet.n;
    let r = n - 1;
    let nf = n as f64;
    let order = jet.order;
    let res = einstein_residual(jet)?;
    let ch = christoffel(jet)?;
    let h = &ch.hinv;
    let low = &ch.low;
    let a = &res.e00_red;
    let c = &res.e0_red;
    let f = &res.e_red;
    let t: Tensor = jet.hbar.iter().map(|row| row.iter().map(|s| ctx.series_dtheta(s)).collect()).collect();
    let tr_t = trace(h, &t);
    let s2 = ctx.theta_fn(|x| x.sin().powi(2));
    let sc = ctx.theta_fn(|x| x.sin() * x.cos());
    let nz = |x: &Series| !x.terms.is_empty();
    let prod = |x: &Series, y: &Series| if nz(x) && nz(y) { x.mul(y) } else { Series::zero(order) };

    // w^eta = h^{mu nu} low[eta][mu][nu], then u^lambda = h^{eta lambda} w_eta
    let w: Vec<Series> = (0..n).map(|e| trace(h, &low[e])).collect();
    let u: Vec<Series> =
        (0..n).map(|l| (0..n).fold(Series::zero(order), |acc, e| acc.add(&prod(&h[e][l], &w[e])))).collect();

    let mut b0 = ctx.series_dtheta(a).add(&prod(&tr_t, a));
    for m in 0..n {
        for v in 0..n {
            if !nz(&h[m][v]) {
                continue;
            }
            let mut dc = dop(ctx, &c[m], v, n);
            if v == r {
                dc = dc.sub(&c[m]);
            }
            b0 = b0.add(&h[m][v].mul(&dc).scale(2.0));
            b0 = b0.sub(&prod(&h[m][v], &ctx.series_dtheta(&f[m][v])));
        }
    }
    for l in 0..n {
        b0 = b0.add(&prod(&h[l][r], &c[l]).scale(2.0 * (2.0 - nf)));
        b0 = b0.sub(&prod(&u[l], &c[l]).scale(2.0));
    }
    let b0 = b0.mul_coef(&s2).add(&a.mul_coef(&sc).scale(2.0 * (1.0 - nf)));

    let mut bs = Vec::with_capacity(n);
    for sg in 0..n {
        let mut acc = ctx.series_dtheta(&c[sg]).scale(2.0).sub(&dop(ctx, a, sg, n)).add(&prod(&tr_t, &c[sg]));
        for m in 0..n {
            for v in 0..n {
                if !nz(&h[m][v]) {
                    continue;
                }
                let mut x = dop(ctx, &f[m][sg], v, n);
                if v == r {
                    x = x.sub(&f[m][sg].scale(2.0));
                }
                acc = acc.add(&h[m][v].mul(&x).scale(2.0));
                let mut y = dop(ctx, &f[m][v], sg, n);
                if sg == r {
                    y = y.sub(&f[m][v].scale(2.0));
                }
                acc = acc.sub(&h[m][v].mul(&y));
            }
        }
        for l in 0..n {
            acc = acc.add(&prod(&h[l][r], &f[sg][l]).scale(2.0 * (2.0 - nf)));
            acc = acc.sub(&prod(&u[l], &f[sg][l]).scale(2.0));
        }
        bs.push(acc.mul_coef(&s2).add(&c[sg].mul_coef(&sc).scale(2.0 * (1.0 - nf))));
    }
    Ok(BianchiResidual { b0, b: bs })
}

/// Serialized form of a jet: every nonzero coefficient with its values on
/// the (theta node, torus point) grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionRecord {
    pub n: usize,
    pub theta0: f64,
    pub grid_n: usize,
    pub m_max: usize,
    pub order: usize,
    pub hbar: Vec<CoefRecord>,
    pub chi: Vec<CoefRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefRecord {
    #[serde(default)]
    pub component: Vec<usize>,
    pub rho_power: usize,
    #[serde(default)]
    pub log_power: usize,
    /// nt = 1 for theta-independent coefficients.
    pub nt: usize,
    pub values: Vec<f64>,
}

const MAX_RECORD_POINTS: usize = 1 << 22;

fn coef_records(s: &Series, component: Vec<usize>) -> Vec<CoefRecord> {
    s.terms
        .iter()
        .map(|(&(j, k), c)| CoefRecord { component: component.clone(), rho_power: j, log_power: k, nt: c.nt, values: c.v.clone() })
        .collect()
}

impl ExpansionRecord {
    pub fn from_jet(jet: &NormalFormMetricJet) -> Self {
        let mut hbar = Vec::new();
        for a in 0..jet.n {
            for b in a..jet.n {
                hbar.extend(coef_records(&jet.hbar[a][b], vec![a, b]));
            }
        }
        Self {
            n: jet.n,
            theta0: jet.theta0,
            grid_n: jet.ctx.nt(),
            m_max: jet.ctx.torus.m_max,
            order: jet.order,
            hbar,
            chi: coef_records(&jet.chi, vec![]),
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let rec: Self = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        rec.validate()?;
        Ok(rec)
    }

    fn point_count(&self) -> Option<usize> {
        let mut p = 3 * self.m_max + 1;
        if p % 2 == 0 {
            p += 1;
        }
        p.checked_pow(self.n.checked_sub(1)? as u32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=5).contains(&self.n) {
            return Err(Error::InvalidParams(format!("n = {}", self.n)));
        }
        if !(self.theta0 > 0.0 && self.theta0 < std::f64::consts::PI) {
            return Err(Error::InvalidParams(format!("theta0 = {}", self.theta0)));
        }
        if !(16..=512).contains(&self.grid_n) || !(1..=32).contains(&self.m_max) || self.order > 64 {
            return Err(Error::InvalidParams("grid, cutoff or order out of range".into()));
        }
        let nq = self.point_count().filter(|&q| q * self.grid_n <= MAX_RECORD_POINTS).ok_or_else(|| {
            Error::InvalidParams("expansion grid too large".into())
        })?;
        for (c, rank) in self.hbar.iter().map(|c| (c, 2)).chain(self.chi.iter().map(|c| (c, 0))) {
            if c.component.len() != rank || c.component.iter().any(|&i| i >= self.n) {
                return Err(Error::RankMismatch(format!("component {:?}", c.component)));
            }
            if c.rho_power > self.order || c.log_power > 64 {
                return Err(Error::InvalidParams(format!("term ({}, {}) beyond order", c.rho_power, c.log_power)));
            }
            if !(c.nt == 1 || c.nt == self.grid_n) || c.values.len() != c.nt * nq {
                return Err(Error::InvalidParams("coefficient shape mismatch".into()));
            }
            if c.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParams("non-finite coefficient".into()));
            }
        }
        Ok(())
    }

    pub fn to_jet(&self) -> Result<NormalFormMetricJet> {
        self.validate()?;
        let grid = crate::thetagrid::ThetaGrid::new(self.theta0, self.grid_n)?;
        let ctx = Ctx::new(grid, Torus::new(self.n - 1, self.m_max));
        let nq = ctx.nq();
        let mut hbar = zero_tensor(self.n, self.order);
        let mut chi = Series::zero(self.order);
        for c in &self.hbar {
            let f = Field { nt: c.nt, nq, v: c.values.clone() };
            let (a, b) = (c.component[0], c.component[1]);
            hbar[a][b].insert_add(c.rho_power, c.log_power, f.clone());
            if a != b {
                hbar[b][a].insert_add(c.rho_power, c.log_power, f);
            }
        }
        for c in &self.chi {
            chi.insert_add(c.rho_power, c.log_power, Field { nt: c.nt, nq, v: c.values.clone() });
        }
        Ok(NormalFormMetricJet { n: self.n, theta0: self.theta0, order: self.order, ctx, hbar, chi })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rhoseries::Torus;
    use crate::thetagrid::ThetaGrid;
    use std::f64::consts::FRAC_PI_2;

    fn ctx(theta0: f64, nt: usize, dim: usize, m: usize) -> Ctx {
        Ctx::new(ThetaGrid::new(theta0, nt).unwrap(), Torus::new(dim, m))
    }

    fn entry(mode: Vec<i32>, comp: [usize; 2], re: f64, im: f64) -> ModeEntry {
        ModeEntry { mode, component: comp.to_vec(), re, im }
    }

    fn n3_problem(theta0: f64, k1: f64) -> CornerProblem {
        let mut p = CornerProblem::new(3, theta0);
        p.m_max = 2;
        p.grid_n = 64;
        p.k_jet = vec![
            SField { entries: vec![entry(vec![0, 0], [0, 0], 1.0, 0.0), entry(vec![0, 0], [1, 1], 1.0, 0.0)] },
            SField {
                entries: vec![
                    entry(vec![1, 0], [0, 0], k1, 0.0),
                    entry(vec![0, 1], [0, 1], 0.5 * k1, 0.2 * k1),
                    entry(vec![0, 0], [1, 1], -0.7 * k1, 0.0),
                ],
            },
            SField { entries: vec![entry(vec![1, 1], [1, 1], 0.3 * k1, 0.0), entry(vec![0, 0], [0, 1], 0.2, 0.0)] },
        ];
        p
    }

    #[test]
    fn model_is_fixed_point() {
        let c = ctx(FRAC_PI_2, 32, 2, 2);
        let jet = NormalFormMetricJet::model(3, &c, 3);
        let sol = solve_order(&jet, 1).unwrap();
        assert!(sol.phi.iter().flatten().all(|f| f.max_abs() == 0.0));
        assert!(sol.psi.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn indicial_matches_linearized_residual() {
        let c = ctx(1.2, 40, 2, 2);
        let mut p = CornerProblem::new(3, 1.2);
        p.k_jet = vec![SField {
            entries: vec![
                entry(vec![0, 0], [0, 0], 1.0, 0.0),
                entry(vec![0, 0], [1, 1], 1.3, 0.0),
                entry(vec![1, 0], [0, 1], 0.2, 0.0),
            ],
        }];
        let base = NormalFormMetricJet::initial(&p, &c, 3);
        let n = 3;
        for gamma in [1usize, 2, 3] {
            let mut phi = vec![vec![c.zero_full(); n]; n];
            for a in 0..n {
                for b in a..n {
                    let v = c.full_fn(|t, x| {
                        let w = (a + 2 * b) as f64;
                        (t * t) * (0.3 + 0.1 * w) * (1.0 + 0.2 * (x[0] + w).sin()) + 0.05 * w * t.powi(4)
                    });
                    phi[a][b] = v.clone();
                    phi[b][a] = v;
                }
            }
            let mut jet = base.truncated(gamma);
            let r0 = einstein_residual(&jet).unwrap();
            add_phi(&mut jet, gamma, &phi);
            let r1 = einstein_residual(&jet).unwrap();
            let ind = apply_indicial_einstein(&base, gamma as f64, &phi).unwrap();
            let lin = |s1: &Series, s0: &Series| coef(&c, s1, gamma).plus(&coef(&c, s0, gamma).map(|v| -v));
            let mut worst: f64 = lin(&r1.e00, &r0.e00).dist(&ind.i00);
            for s in 0..n {
                worst = worst.max(lin(&r1.e0[s], &r0.e0[s]).dist(&ind.i0[s]));
                for t in 0..n {
                    worst = worst.max(lin(&r1.e[s][t], &r0.e[s][t]).dist(&ind.i[s][t]));
                }
            }
            assert!(worst < 1e-8, "gamma {gamma}: {worst}");
        }
    }

    #[test]
    fn tracefree_slice_is_scalar_indicial() {
        use crate::sturm::apply_indicial;
        use crate::thetagrid::{sin_over_theta, LogThetaSeries, ThetaFn};
        let c = ctx(1.3, 40, 2, 1);
        let jet = NormalFormMetricJet::model(3, &c, 2);
        let gamma = 1.5;
        let mut phi = vec![vec![c.zero_full(); 3]; 3];
        let v = c.theta_fn(|t| t * t * (1.0 + 0.3 * t * t));
        phi[0][1] = v.clone();
        phi[1][0] = v;
        let ind = apply_indicial_einstein(&jet, gamma, &phi).unwrap();
        let p = IndicialParams::new(3, 3.0, 1.3, gamma).unwrap();
        let u = LogThetaSeries::smooth(0.0, ThetaFn::from_fn(&c.grid, |t| t * t * (1.0 + 0.3 * t * t)));
        let scalar = apply_indicial(&p, &u).node_values();
        let _ = sin_over_theta;
        let mine = ind.i[0][1].column(0, c.nt());
        let worst = mine.iter().zip(&scalar).map(|(a, b)| (2.0 * a + b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-10, "{worst}");
    }

    #[test]
    fn psi_shift_response() {
        let c = ctx(1.1, 32, 2, 1);
        let jet = NormalFormMetricJet::model(3, &c, 2);
        let bg = Background::of(&jet).unwrap();
        for gamma in [1.0, 2.0, 4.0] {
            let h0 = bg.h0();
            let ind = apply_indicial_einstein(&jet, gamma, &h0).unwrap();
            let tr = bg.full_trace(&ind.i);
            let s2 = c.theta_fn(|t| t.sin().powi(2));
            let want = s2.map(|v| (1.0 - 3.0) * (gamma - 3.0) * (gamma + 1.0) * v);
            let dd = tr.dist(&want);
            assert!(dd < 1e-10, "gamma {gamma}: {dd} {:?} {:?}", tr.column(0, c.nt()), want.column(0, c.nt()));
        }
    }

    #[test]
    fn bianchi_vanishes_on_random_jet() {
        let c = ctx(1.2, 40, 2, 2);
        let mut jet = NormalFormMetricJet::initial(&n3_problem(1.2, 0.3), &c, 3);
        let bump = c.full_fn(|t, x| 0.2 * t * t * (1.0 + 0.3 * x[1].cos()));
        jet.hbar[0][1].insert_add(1, 0, bump.clone());
        jet.hbar[1][0].insert_add(1, 0, bump.clone());
        jet.hbar[2][2].insert_add(2, 0, bump.map(|v| 0.5 * v));
        jet.hbar[0][2].insert_add(2, 0, bump.map(|v| -0.4 * v));
        jet.hbar[2][0].insert_add(2, 0, bump.map(|v| -0.4 * v));
        let res = einstein_residual(&jet).unwrap();
        let b = bianchi_residual(&jet).unwrap();
        let scale = (0..=3).map(|j| res.max_at(j)).fold(0.0, f64::max);
        assert!(scale > 1e-3);
        assert!(b.max_below(3) < 1e-8 * scale.max(1.0), "{} vs {scale}", b.max_below(3));
    }

    #[test]
    fn n3_orders_close_residual() {
        let p = n3_problem(FRAC_PI_2, 0.4);
        let exp = expand_einstein(&p, 2).unwrap();
        for r in &exp.reports {
            for j in 0..=r.gamma {
                assert!(r.residual_by_order[j] < 1e-8, "gamma {} order {j}: {:?}", r.gamma, r.residual_by_order);
            }
            assert!(r.residual_by_order[r.gamma + 1] > 1e-6);
            assert!(r.psi_formula_defect < 1e-10, "{:?}", r);
            // B differentiates E once more, so it sees the node noise of E amplified
            assert!(r.bianchi_max < 1e-6, "{}", r.bianchi_max);
        }
        assert!(exp.jet.invariant_defect() < 1e-9, "{}", exp.jet.invariant_defect());
    }

    #[test]
    fn n2_through_order_two() {
        let mut p = CornerProblem::new(2, FRAC_PI_2);
        p.m_max = 3;
        p.grid_n = 40;
        p.k_jet = vec![
            SField { entries: vec![entry(vec![0], [0, 0], 1.0, 0.0), entry(vec![1], [0, 0], 0.2, 0.1)] },
            SField { entries: vec![entry(vec![2], [0, 0], 0.3, 0.0)] },
            SField { entries: vec![entry(vec![1], [0, 0], -0.2, 0.0)] },
        ];
        let exp = expand_einstein(&p, 2).unwrap();
        // the order-2 step carries theta^2 log(theta) in phi_sn, which the
        // nodal residual resolves only algebraically
        for (r, tol) in exp.reports.iter().zip([1e-9, 1e-6]) {
            for j in 0..=r.gamma {
                assert!(r.residual_by_order[j] < tol, "gamma {} order {j}: {:?}", r.gamma, r.residual_by_order);
            }
        }
    }

    #[test]
    fn obstruction_coefficient_n3() {
        let mut p = CornerProblem::new(3, FRAC_PI_2);
        p.m_max = 2;
        p.grid_n = 40;
        let kappa = vec![
            entry(vec![1, 0], [0, 0], 0.3, 0.0),
            entry(vec![0, 1], [0, 1], 0.2, -0.1),
            entry(vec![1, 1], [1, 1], -0.25, 0.05),
        ];
        p.k_jet = vec![
            SField { entries: vec![entry(vec![0, 0], [0, 0], 1.0, 0.0), entry(vec![0, 0], [1, 1], 1.0, 0.0)] },
            SField::default(),
            SField::default(),
            SField { entries: kappa.clone() },
        ];
        let ob = obstruction_tensor(&p).unwrap();
        let c = p.ctx().unwrap();
        let k3 = SField { entries: kappa }.sym2_values(&c.torus, 2);
        // tracefree part of kappa = 3! k_3 with respect to the identity
        let mut worst: f64 = 0.0;
        for q in 0..c.nq() {
            let tr = 0.5 * (k3[0][0][q] + k3[1][1][q]);
            for a in 0..2 {
                for b in 0..2 {
                    let tf = 6.0 * (k3[a][b][q] - if a == b { tr } else { 0.0 });
                    worst = worst.max((ob.values[a][b][q] + tf / 4.0).abs());
                }
            }
        }
        assert!(worst < 1e-6, "{worst}");
        assert!(ob.trace_defect < 1e-9);
    }

    #[test]
    fn record_round_trip() {
        let c = ctx(1.0, 24, 1, 2);
        let mut jet = NormalFormMetricJet::model(2, &c, 2);
        jet.hbar[0][1].insert_add(2, 0, c.full_fn(|t, x| t * x[0].sin()));
        jet.hbar[1][0] = jet.hbar[0][1].clone();
        let rec = ExpansionRecord::from_jet(&jet);
        let s = serde_json::to_string(&rec).unwrap();
        let back = ExpansionRecord::from_json(&s).unwrap();
        assert_eq!(back, rec);
        let j2 = back.to_jet().unwrap();
        assert_eq!(j2.hbar, jet.hbar);
        assert_eq!(j2.chi, jet.chi);
    }
    #[test]
    fn obstruction_conformal_covariance() {
        use crate::geometry::boundary_normal_form;
        let mut p = n3_problem(FRAC_PI_2, 0.3);
        p.k_jet.push(SField { entries: vec![entry(vec![1, 0], [0, 1], 0.2, 0.1), entry(vec![0, 1], [0, 0], -0.15, 0.0)] });
        let ob = obstruction_tensor(&p).unwrap();
        let c = p.ctx().unwrap();
        let k = k_tensor_from_problem(&p, &c, 3);
        let w = c.s_fn(|x| 0.3 * x[0].cos() + 0.2 * (x[1] + 0.4).sin());
        let mut omega = c.scalar(3, 1.0);
        omega.insert_add(2, 0, w);
        let kh = boundary_normal_form(&c, &k, &omega).unwrap();
        let mut q = p.clone();
        q.k_jet = (0..=3)
            .map(|j| {
                let mut f = SField::default();
                for a in 0..2 {
                    for b in a..2 {
                        let v = kh[a][b].get(j, 0).map(|f| f.v.clone()).unwrap_or(vec![0.0; c.nq()]);
                        f.extend(SField::from_values(&c.torus, vec![a, b], &v, 1e-14));
                    }
                }
                f
            })
            .collect();
        assert!(kh[1][1].get(2, 0).unwrap().dist(k[1][1].get(2, 0).unwrap()) > 0.1);
        let ob2 = obstruction_tensor(&q).unwrap();
        let mut worst: f64 = 0.0;
        for a in 0..2 {
            for b in 0..2 {
                for i in 0..c.nq() {
                    worst = worst.max((ob.values[a][b][i] - ob2.values[a][b][i]).abs());
                }
            }
        }
        assert!(ob.norm > 1e-3, "{}", ob.norm);
        assert!(worst / ob.norm < 1e-5, "{worst} {}", ob.norm);
    }
}
