//! Acceptance suites. Each criterion returns a report with the measured
//! quantity, the pinned tolerance and a one-line PASS/FAIL summary.

use std::f64::consts::{FRAC_PI_2, PI};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::einstein::{
    apply_solution, obstruction_tensor_on, parity_defect, solve_order, Background, Obstruction,
};
use crate::geometry::{
    conformal_rescale, corner_angle, corner_sff, einstein_residual, k_tensor_from_problem, smooth_jet_constraints,
    CornerProblem, EinsteinResidual, NormalFormMetricJet,
};
use crate::laplace::expand_eigenfunction;
use crate::oracle::fd_eigenvalues_extrapolated;
use crate::rhoseries::{Ctx, ModeEntry, SField, Series, Torus};
use crate::sturm::{apply_indicial, greens_solve, root_distance, scan_spectrum, spectrum, GreensSolver, IndicialParams};
use crate::thetagrid::{sin_over_theta, LogThetaSeries, ThetaFn, ThetaGrid};
use crate::{Error, Result};

pub const CRITERIA: [usize; 10] = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10];

/// Series coefficients smaller than this are treated as numerically zero
/// by the slope test.
pub const NOISE_FLOOR: f64 = 1e-8;

pub fn rho_points() -> Vec<f64> {
    (0..6).map(|i| 0.2 * 0.5f64.powi(i)).collect()
}

/// Least-squares slope of log y against log x.
pub fn slope_fit(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.max(1e-300).ln()).collect();
    let m = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / m;
    let my = ly.iter().sum::<f64>() / m;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// max over theta and S of |rho^shift sum_{j,k} rho^j log^k rho c_jk| over
/// several series, dropping coefficients below `floor`.
pub fn envelope(series: &[&Series], rho: f64, shift: f64, floor: f64) -> f64 {
    let mut worst = 0.0f64;
    for s in series {
        let kept: Vec<_> = s.terms.iter().filter(|(_, c)| c.max_abs() >= floor).collect();
        let Some(nq) = kept.first().map(|(_, c)| c.nq) else { continue };
        let nt = kept.iter().map(|(_, c)| c.nt).max().unwrap_or(1);
        let mut acc = vec![0.0; nt * nq];
        for (&(j, k), c) in kept {
            let w = rho.powi(j as i32) * rho.ln().powi(k as i32);
            for (i, x) in acc.iter_mut().enumerate() {
                *x += w * if c.nt == 1 { c.v[i % nq] } else { c.v[i] };
            }
        }
        worst = acc.iter().fold(worst, |m, x| m.max(x.abs()));
    }
    worst * rho.powf(shift)
}

/// Dropped-coefficient size: the largest coefficient below the floor.
fn noise_level(series: &[&Series], floor: f64) -> f64 {
    series
        .iter()
        .flat_map(|s| s.terms.values())
        .map(|c| c.max_abs())
        .filter(|m| *m < floor)
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Serialize)]
pub struct SlopeTable {
    /// (rho, envelope) pairs, envelope already divided by |log rho|^K.
    pub points: Vec<(f64, f64)>,
    pub slope: f64,
    /// Largest coefficient dropped by the floor.
    pub dropped: f64,
}

/// Fitted rho-exponent of the envelope. When the leading surviving order
/// carries log(rho)^K the envelope is divided by |log rho|^K first, so a
/// residual O(rho^p log^K rho) reports exponent p.
pub fn slope_table(series: &[&Series], shift: f64, xs: &[f64], floor: f64) -> SlopeTable {
    let dropped = noise_level(series, floor);
    let kept = || series.iter().flat_map(|s| s.terms.iter()).filter(|(_, c)| c.max_abs() >= floor);
    let Some(jmin) = kept().map(|(&(j, _), _)| j).min() else {
        return SlopeTable { points: xs.iter().map(|&r| (r, 0.0)).collect(), slope: f64::INFINITY, dropped };
    };
    let logs = kept().filter(|(&(j, _), _)| j == jmin).map(|(&(_, k), _)| k).max().unwrap_or(0);
    let ys: Vec<f64> =
        xs.iter().map(|&r| envelope(series, r, shift, floor) / r.ln().abs().powi(logs as i32)).collect();
    SlopeTable { slope: slope_fit(xs, &ys), points: xs.iter().copied().zip(ys).collect(), dropped }
}

pub fn residual_slope(series: &[&Series], shift: f64) -> (f64, f64) {
    let t = slope_table(series, shift, &rho_points(), NOISE_FLOOR);
    (t.slope, t.dropped)
}

/// Every component of an Einstein residual, for slope tests.
pub fn einstein_components(res: &EinsteinResidual) -> Vec<&Series> {
    std::iter::once(&res.e00).chain(res.e0.iter()).chain(res.e.iter().flatten()).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct CriterionReport {
    pub id: usize,
    pub title: String,
    pub pass: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CriterionReport {
    pub fn line(&self) -> String {
        format!(
            "criterion {:>2} {} {} ({:.1}s): {}",
            self.id,
            if self.pass { "PASS" } else { "FAIL" },
            self.title,
            self.seconds,
            self.detail
        )
    }
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

pub fn title(id: usize) -> &'static str {
    match id {
        1 => "spectrum closed form",
        2 => "spectrum vs finite-volume oracle",
        3 => "Green's operator round trip",
        4 => "Laplace expansion residual",
        5 => "Einstein expansion",
        6 => "exact model residual",
        7 => "obstruction coefficient",
        8 => "obstruction conformal covariance",
        9 => "corner compatibility",
        10 => "uniqueness below order n",
        _ => "unknown",
    }
}

pub fn run_criterion(id: usize) -> Result<CriterionReport> {
    let start = Instant::now();
    let res = match id {
        1 => c1_spectrum_closed_form(),
        2 => c2_spectrum_oracle(),
        3 => c3_green_round_trip(),
        4 => c4_laplace(),
        5 => c5_einstein(),
        6 => c6_exact_model(),
        7 => c7_obstruction_coefficient(),
        8 => c8_covariance(),
        9 => c9_corner(),
        10 => c10_uniqueness(),
        _ => return Err(Error::InvalidParams(format!("no criterion {id}"))),
    };
    let o = res.unwrap_or_else(|e| Outcome { pass: false, detail: format!("error: {e}") });
    Ok(CriterionReport {
        id,
        title: title(id).into(),
        pass: o.pass,
        detail: o.detail,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn run(ids: &[usize]) -> Result<Vec<CriterionReport>> {
    ids.iter().map(|&i| run_criterion(i)).collect()
}

fn c1_spectrum_closed_form() -> Result<Outcome> {
    let mut worst = 0.0f64;
    for &(n, s) in &[(2, 2.0), (3, 3.0), (3, 2.5), (4, 4.0), (5, 5.0)] {
        // root-found, not the closed-form branch of `spectrum`
        let nus = scan_spectrum(n, s, FRAC_PI_2, 5)?;
        for (k, nu) in nus.iter().enumerate() {
            worst = worst.max((nu - (s + 2.0 * k as f64)).abs());
        }
    }
    outcome(worst < 1e-8, format!("max |nu_k - (s + 2k)| = {worst:.2e} (tol 1e-8)"))
}

fn c2_spectrum_oracle() -> Result<Outcome> {
    let mut worst = 0.0f64;
    let mut branch_ok = true;
    for &(n, s) in &[(2usize, 1.5), (3, 2.5), (3, 3.0), (4, 3.2)] {
        for &t0 in &[PI / 3.0, FRAC_PI_2, 2.0 * PI / 3.0] {
            let r = spectrum(n, s, t0, 3)?;
            let fd = fd_eigenvalues_extrapolated(n, s, t0, 4000, 3);
            for (e, l) in r.entries.iter().zip(&fd) {
                worst = worst.max((e.lambda - l).abs() / l.abs().max(1.0));
            }
            let lam0 = r.entries[0].lambda;
            let nf = n as f64;
            let (lo, hi) = ((s - 1.0) * (s - nf), s * (s + 1.0 - nf));
            let ok = if t0 > FRAC_PI_2 + 1e-12 {
                lam0 > lo && lam0 < hi
            } else if t0 < FRAC_PI_2 - 1e-12 {
                lam0 > hi
            } else {
                (lam0 - hi).abs() < 1e-10
            };
            branch_ok &= ok;
        }
    }
    outcome(
        worst < 1e-6 && branch_ok,
        format!("12 triples: max rel |lambda - lambda_fd| = {worst:.2e} (tol 1e-6), lowest-eigenvalue branch {}", if branch_ok { "ok" } else { "violated" }),
    )
}

fn v_err(u: &LogThetaSeries, a: f64) -> f64 {
    u.grid().nodes[1..].iter().map(|&t| (u.eval(t) / t.sin().powf(a)).abs()).fold(0.0, f64::max)
}

fn c3_green_round_trip() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut e_gi, mut e_ig, mut e_bc) = (0.0f64, 0.0f64, 0.0f64);
    let mut count = 0;
    while count < 50 {
        let n = rng.gen_range(2..=4usize);
        let s = n as f64 / 2.0 + rng.gen_range(0.2..2.0);
        let t0 = rng.gen_range(0.7..2.3);
        let nu = rng.gen_range(s - 0.5..s + 3.0);
        if root_distance(n, s, t0, nu)? < 0.05 {
            continue;
        }
        count += 1;
        let p = IndicialParams::new(n, s, t0, nu)?;
        let a = p.a();
        let g = ThetaGrid::new(t0, 64)?;
        let sa = ThetaFn::from_fn(&g, |t| sin_over_theta(t).powf(a));
        let (c1, c2) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        // v(0) = 0 and v'(theta0) = 0 for each polynomial piece
        let v = ThetaFn::from_fn(&g, |t| {
            let x = t / t0;
            x - 0.5 * x * x + c1 * (x * x - 2.0 * x.powi(3) / 3.0) + c2 * (x.powi(3) - 0.75 * x.powi(4))
        });
        let u0 = LogThetaSeries::smooth(a, v.mul(&sa));
        let back = greens_solve(&p, &apply_indicial(&p, &u0))?;
        e_gi = e_gi.max(v_err(&back.sub(&u0), a));

        let (d0, d1, w) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.5..3.0));
        let rhs_v = |t: f64| t * (d0 + d1 * (w * t).cos());
        let beta = p.beta();
        if (beta - beta.round()).abs() > 1e-9 {
            // The theta^beta kernel part has no exact LogThetaSeries form, so
            // check on the collocation solution: P q = 0 holds analytically.
            let solver = GreensSolver::for_params(&g, &p)?;
            let big_f: Vec<f64> = g.nodes.iter().map(|&t| rhs_v(t)).collect();
            let sol = solver.solve_levels(&[big_f.clone()])?;
            let kq = solver.kernel();
            let vp: Vec<f64> = sol.levels[0].iter().zip(&kq.q).map(|(v, q)| v - sol.q_mult[0] * q).collect();
            let pv = solver.op.apply(&g, &vp);
            let last = g.len() - 1;
            e_ig = e_ig.max(pv[1..last].iter().zip(&big_f[1..last]).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
            let dv = g.deriv(&vp)[last] + sol.q_mult[0] * kq.dq[last];
            e_bc = e_bc.max(dv.abs()).max(sol.levels[0][0].abs());
        } else {
            let f = LogThetaSeries::smooth(a, ThetaFn::from_fn(&g, rhs_v).mul(&sa));
            let u = greens_solve(&p, &f)?;
            e_ig = e_ig.max(v_err(&apply_indicial(&p, &u).sub(&f), a));
            let robin = u.differentiate().eval(t0) + (s - n as f64) / t0.tan() * u.eval(t0);
            e_bc = e_bc.max(robin.abs());
            // sin^{s-n} u at 0 is the theta^a coefficient of the leading level
            let dirichlet = if (u.alpha - a).abs() < 1e-12 { u.terms[&0].values[0].abs() } else { 0.0 };
            e_bc = e_bc.max(dirichlet);
        }
    }
    outcome(
        e_gi < 1e-8 && e_ig < 1e-8 && e_bc < 1e-8,
        format!("50 inputs: |G(Iu) - u| = {e_gi:.2e}, |I(Gf) - f| = {e_ig:.2e}, boundary = {e_bc:.2e} (tol 1e-8)"),
    )
}

fn trig_psi() -> SField {
    SField::scalar(&[(vec![0, 0], 1.0, 0.0), (vec![1, 0], 0.3, 0.1), (vec![0, 1], -0.2, 0.25)])
}

fn c4_laplace() -> Result<Outcome> {
    let order = 6;
    let mut details = vec![];
    let mut pass = true;
    let cases: [(f64, bool); 3] = [(PI, false), (3.0, false), (3.0, true)];
    for (s, forced) in cases {
        let mut p = CornerProblem::new(3, FRAC_PI_2);
        p.s = Some(s);
        p.m_max = 2;
        p.grid_n = 48;
        p.psi_boundary = trig_psi();
        if forced {
            // theta-independent Dirichlet data at the root order rho^3
            p.psi_rho_jet = vec![SField::default(), SField::default(), SField::scalar(&[(vec![0, 0], 0.5, 0.0), (vec![1, 1], 0.2, 0.0)])];
        }
        let ctx = p.ctx()?;
        let jet = NormalFormMetricJet::model(3, &ctx, order + 2);
        let e = expand_eigenfunction(&p, &jet, order)?;
        let r = e.residual(&jet)?;
        let (slope, noise) = residual_slope(&[&r], e.sigma());
        let want = e.sigma() + order as f64 + 1.0 - 0.1;
        pass &= slope >= want;
        let label = if s == PI { "s=pi".to_string() } else if forced { "s=3 forced".into() } else { "s=3".into() };
        let mut d = format!("{label}: slope {slope:.3} >= {want:.2} (floor {NOISE_FLOOR:.0e}, dropped <= {noise:.1e})");
        if s == PI {
            pass &= e.log_onset.is_none();
            d += &format!(", logs {}", if e.log_onset.is_none() { "none" } else { "present" });
        } else if !forced {
            // no forcing: the projection vanishes and only the free kernel coefficient remains
            let amp = e.root_logs.iter().map(|x| x.1).fold(0.0, f64::max);
            pass &= e.log_onset.is_none() && amp < 1e-10;
            d += &format!(", root projection {amp:.1e}");
        } else {
            let onset = e.log_onset;
            let ok = onset.map_or(false, |o| o.k == 1 && (o.rho_power - s).abs() < 1e-12);
            let amp = e.root_logs.first().map_or(0.0, |x| x.1);
            let prop = kernel_proportionality(&ctx, &e.v, onset.map_or(0, |o| o.j), s)?;
            pass &= ok && amp > 1e-6 && prop < 1e-8;
            d += &format!(
                ", onset rho^{:.0} log^1 {}, projection {amp:.2e} (> 1e-6), |V_log - t w0| = {prop:.1e}",
                onset.map_or(f64::NAN, |o| o.rho_power),
                if ok { "ok" } else { "wrong" }
            );
        }
        details.push(d);
    }
    outcome(pass, details.join("; "))
}

/// Relative distance of the V_{j,1} columns from multiples of the kernel function.
fn kernel_proportionality(ctx: &Ctx, v: &Series, j: usize, s: f64) -> Result<f64> {
    let c = match v.get(j, 1) {
        Some(c) => c.broadcast(ctx.nt()),
        None => return Ok(f64::INFINITY),
    };
    let p = IndicialParams::new(3, s, FRAC_PI_2, s)?;
    let solver = GreensSolver::for_params(&ctx.grid, &p)?;
    let q = &solver.kernel().q;
    let qq: f64 = q.iter().map(|x| x * x).sum();
    let mut worst = 0.0f64;
    for i in 0..ctx.nq() {
        let col = c.column(i, ctx.nt());
        let t = col.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() / qq;
        worst = worst.max(col.iter().zip(q).map(|(a, b)| (a - t * b).abs()).fold(0.0, f64::max));
    }
    Ok(worst / c.max_abs().max(1e-300))
}

fn mode(m: &[i32], comp: [usize; 2], re: f64, im: f64) -> ModeEntry {
    ModeEntry { mode: m.to_vec(), component: comp.to_vec(), re, im }
}

/// k_0 positive definite plus random k_1, k_2, k_3 on low Fourier modes.
pub fn random_k_problem(n: usize, seed: u64, grid_n: usize) -> CornerProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = n - 1;
    let mut p = CornerProblem::new(n, FRAC_PI_2);
    p.m_max = 2;
    p.grid_n = grid_n;
    let modes: Vec<Vec<i32>> = if dim == 1 { vec![vec![0], vec![1], vec![2]] } else { vec![vec![0, 0], vec![1, 0], vec![0, 1], vec![1, 1]] };
    let mut k0 = SField::default();
    for a in 0..dim {
        k0.entries.push(mode(&modes[0], [a, a], 1.0 + 0.2 * rng.gen_range(0.0..1.0), 0.0));
    }
    if dim > 1 {
        k0.entries.push(mode(&modes[0], [0, 1], 0.1 * rng.gen_range(-1.0..1.0), 0.0));
    }
    p.k_jet.push(k0);
    for j in 1..=3 {
        let mut f = SField::default();
        for a in 0..dim {
            for b in a..dim {
                for m in modes.iter().skip(if j == 1 { 1 } else { 0 }) {
                    let amp = 0.3 / j as f64;
                    let im = if m.iter().all(|x| *x == 0) { 0.0 } else { amp * rng.gen_range(-1.0..1.0) };
                    f.entries.push(mode(m, [a, b], amp * rng.gen_range(-1.0..1.0), im));
                }
            }
        }
        p.k_jet.push(f);
    }
    p
}

fn c5_einstein() -> Result<Outcome> {
    let mut pass = true;
    let (mut min_margin, mut bianchi, mut parity, mut psi) = (f64::INFINITY, 0.0f64, 0.0f64, 0.0f64);
    let mut runs = 0;
    for n in [2usize, 3] {
        for seed in 1..=3u64 {
            // collocation round-off grows like N^4 and the odd-Taylor
            // estimate reaches 1e-9 near N = 48; these jets are resolved at 32
            let p = random_k_problem(n, seed, 32);
            let ctx = p.ctx()?;
            let top = n - 1;
            let jorder = top + 3;
            let k_rho = k_tensor_from_problem(&p, &ctx, jorder);
            let mut jet = NormalFormMetricJet::initial(&p, &ctx, jorder);
            for gamma in 1..=top {
                let sol = solve_order(&jet, gamma)?;
                psi = psi.max(sol.report.psi_formula_defect);
                apply_solution(&mut jet, &sol, &k_rho);
                let res = einstein_residual(&jet)?;
                let all = einstein_components(&res);
                let (slope, _) = residual_slope(&all, 0.0);
                min_margin = min_margin.min(slope - (gamma as f64 + 1.0));
                bianchi = bianchi.max(bianchi_derived(&jet, &res, gamma)?);
                parity = parity.max(parity_defect(&jet));
                runs += 1;
            }
        }
    }
    pass &= min_margin >= -0.1 && bianchi < 1e-8 && parity < 1e-9 && psi < 1e-10;
    outcome(
        pass,
        format!(
            "{runs} steps: min(slope - (gamma+1)) = {min_margin:.3} (>= -0.1), Bianchi-derived components {bianchi:.1e} (tol 1e-8), parity {parity:.1e} (tol 1e-9), chi affine {psi:.1e} (tol 1e-10)"
        ),
    )
}

/// Components fixed only through the Bianchi identities (the h0-trace and
/// the rho-row E_{n mu}) at orders <= gamma.
fn bianchi_derived(jet: &NormalFormMetricJet, res: &EinsteinResidual, gamma: usize) -> Result<f64> {
    let bg = Background::of(jet)?;
    let r = jet.n - 1;
    let ctx = &jet.ctx;
    let mut worst = 0.0f64;
    for j in 0..=gamma {
        let at = |s: &Series| s.get(j, 0).map(|c| c.broadcast(ctx.nt()));
        for mu in 0..jet.n {
            if let Some(c) = at(&res.e[r][mu]) {
                worst = worst.max(c.max_abs());
            }
        }
        let comps: Vec<Vec<crate::rhoseries::Field>> = (0..jet.n)
            .map(|a| (0..jet.n).map(|b| at(&res.e[a][b]).unwrap_or_else(|| ctx.zero_full())).collect())
            .collect();
        worst = worst.max(bg.full_trace(&comps).max_abs());
    }
    Ok(worst)
}

fn c6_exact_model() -> Result<Outcome> {
    let mut worst = 0.0f64;
    for n in [2usize, 3, 4] {
        let ctx = Ctx::new(ThetaGrid::new(FRAC_PI_2, 32)?, Torus::new(n - 1, 2));
        let jet = NormalFormMetricJet::model(n, &ctx, 4);
        let res = einstein_residual(&jet)?;
        for j in 0..=4 {
            worst = worst.max(res.max_at(j));
        }
    }
    outcome(worst < 1e-10, format!("n = 2, 3, 4 through order 4: max |E| = {worst:.2e} (tol 1e-10)"))
}

fn kappa_problem(kappa: &[ModeEntry]) -> CornerProblem {
    let mut p = CornerProblem::new(3, FRAC_PI_2);
    p.m_max = 2;
    p.grid_n = 40;
    p.k_jet = vec![
        SField { entries: vec![mode(&[0, 0], [0, 0], 1.0, 0.0), mode(&[0, 0], [1, 1], 1.0, 0.0)] },
        SField::default(),
        SField::default(),
        SField { entries: kappa.to_vec() },
    ];
    p
}

fn c7_obstruction_coefficient() -> Result<Outcome> {
    let kappa = vec![mode(&[1, 0], [0, 0], 0.3, 0.0), mode(&[0, 1], [0, 1], 0.2, -0.1), mode(&[1, 1], [1, 1], -0.25, 0.05)];
    let p = kappa_problem(&kappa);
    let ctx = p.ctx()?;
    let ob = obstruction_tensor_on(&p, &ctx)?;
    let k3 = SField { entries: kappa }.sym2_values(&ctx.torus, 2);
    let mut worst = 0.0f64;
    for q in 0..ctx.nq() {
        let tr = 0.5 * (k3[0][0][q] + k3[1][1][q]);
        for a in 0..2 {
            for b in 0..2 {
                // kappa = 3! k_3, tracefree against the identity
                let tf = 6.0 * (k3[a][b][q] - if a == b { tr } else { 0.0 });
                worst = worst.max((ob.values[a][b][q] + tf / 4.0).abs());
            }
        }
    }
    outcome(
        worst < 1e-6 && ob.trace_defect < 1e-9,
        format!("max |K + tf(kappa)/4| = {worst:.2e} (tol 1e-6), trace {:.1e} (tol 1e-9)", ob.trace_defect),
    )
}

fn max_diff(a: &Obstruction, b: &Obstruction) -> f64 {
    a.values
        .iter()
        .flatten()
        .zip(b.values.iter().flatten())
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

fn c8_covariance() -> Result<Outcome> {
    let mut p = random_k_problem(3, 7, 64);
    p.k_jet.truncate(4);
    let ctx = p.ctx()?;
    let base = obstruction_tensor_on(&p, &ctx)?;
    let ws: [&dyn Fn(&[f64]) -> f64; 2] =
        [&|x| 0.3 * x[0].cos() + 0.2 * (x[1] + 0.4).sin(), &|x| -0.25 * (x[0] + x[1]).sin() + 0.1];
    let mut worst = 0.0f64;
    for w in ws {
        let q = conformal_rescale(&p, &ctx, &ctx.torus.from_fn(w))?;
        // Omega|_S = 1, so the weight 2 - n factor is 1
        let ob = obstruction_tensor_on(&q, &ctx)?;
        worst = worst.max(max_diff(&base, &ob) / base.norm);
    }
    outcome(
        worst < 1e-5 && base.norm > 1e-3,
        format!("two conformal factors: max relative deviation {worst:.2e} (tol 1e-5), |K| = {:.3}", base.norm),
    )
}

fn c9_corner() -> Result<Outcome> {
    let mut worst = 0.0f64;
    for (lam, want) in [(0.0, FRAC_PI_2), (-0.5, PI / 3.0), (-(0.5f64).sqrt(), PI / 4.0)] {
        worst = worst.max((corner_angle(lam)? - want).abs());
    }
    // unit hemisphere over the flat half-space: K_M = 0, K_Q = g|_TQ, dot_QS = 1
    let g = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let ks = corner_sff(&g, &vec![vec![0.0; 2]; 2], 0.0, 1.0)?;
    for i in 0..2 {
        for j in 0..2 {
            worst = worst.max((ks[i][j] - g[i][j]).abs());
        }
    }
    let t = Torus::new(2, 3);
    let zero = vec![vec![0.0; t.len()]; 2];
    let zero2 = vec![vec![vec![0.0; t.len()]; 2]; 2];
    let r = smooth_jet_constraints(&t, 0.0, &vec![0.8; t.len()], &zero, &zero2)?;
    worst = worst.max(r.dphi_dr.abs());
    worst = worst.max(r.umb_gradient_residual.iter().flatten().fold(0.0, |m, v| m.max(v.abs())));
    worst = worst.max(r.d2phi_dr2.iter().fold(0.0, |m, v| m.max((v - 0.8).abs())));
    let lam = 0.3;
    let eta = t.from_fn(|x| 1.0 + 0.2 * x[0].sin());
    let r = smooth_jet_constraints(&t, lam, &eta, &zero, &zero2)?;
    let want = t.from_fn(|x| 0.2 * x[0].cos());
    worst = worst.max(r.umb_gradient_residual[0].iter().zip(&want).fold(0.0, |m, (a, b)| m.max((a - b).abs())));
    worst = worst.max((r.dphi_dr + lam / (1.0f64 - lam * lam).sqrt()).abs());
    let incompatible = r.umb_gradient_residual[0].iter().any(|v| v.abs() > 0.1);
    outcome(
        worst < 1e-12 && incompatible,
        format!("max deviation from closed forms {worst:.1e} (tol 1e-12), non-constant eta flagged {incompatible}"),
    )
}

fn reversed(p: &CornerProblem) -> CornerProblem {
    let mut q = p.clone();
    for f in &mut q.k_jet {
        f.entries.reverse();
    }
    q
}

fn c10_uniqueness() -> Result<Outcome> {
    let mut worst = 0.0f64;
    let mut comps = 0;
    for n in [2usize, 3] {
        let a = random_k_problem(n, 11, 64);
        let mut b = reversed(&a);
        b.grid_n = 96;
        let ea = crate::einstein::expand_einstein(&a, n - 1)?;
        let eb = crate::einstein::expand_einstein(&b, n - 1)?;
        let ga = &ea.jet.ctx.grid;
        let gb = &eb.jet.ctx.grid;
        let samples: Vec<f64> = (0..=16).map(|i| FRAC_PI_2 * i as f64 / 16.0).collect();
        let nt_a = ga.len();
        let nt_b = gb.len();
        let mut pairs: Vec<(&Series, &Series)> = vec![(&ea.jet.chi, &eb.jet.chi)];
        for (ra, rb) in ea.jet.hbar.iter().zip(&eb.jet.hbar) {
            for (sa, sb) in ra.iter().zip(rb) {
                pairs.push((sa, sb));
            }
        }
        for (sa, sb) in pairs {
            for j in 0..n {
                let keys: std::collections::BTreeSet<usize> =
                    sa.terms.keys().chain(sb.terms.keys()).filter(|(jj, _)| *jj == j).map(|k| k.1).collect();
                for k in keys {
                    let ca = sa.get(j, k).map(|c| c.broadcast(nt_a)).unwrap_or_else(|| ea.jet.ctx.zero_full());
                    let cb = sb.get(j, k).map(|c| c.broadcast(nt_b)).unwrap_or_else(|| eb.jet.ctx.zero_full());
                    for q in 0..ea.jet.ctx.nq() {
                        let (xa, xb) = (ca.column(q, nt_a), cb.column(q, nt_b));
                        for &t in &samples {
                            worst = worst.max((ga.interp(&xa, t) - gb.interp(&xb, t)).abs());
                        }
                    }
                    comps += 1;
                }
            }
        }
    }
    outcome(
        worst < 1e-7,
        format!("grid 64 vs 96 with reversed mode order, {comps} coefficients below order n: max diff {worst:.2e} (tol 1e-7)"),
    )
}
