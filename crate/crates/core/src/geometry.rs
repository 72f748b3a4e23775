//! Normal-form metric jets g = csc^2(theta)[dtheta^2 + rho^-2 hbar], the
//! Einstein and Laplace residuals in series arithmetic, and the boundary
//! compatibility calculators.

use serde::{Deserialize, Serialize};

use crate::rhoseries::{
    matmul, series_inverse_sym2, zero_tensor, Ctx, Field, RhoLogExpansion, SField, Series, Tensor,
};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CornerProblem {
    pub n: usize,
    pub theta0: f64,
    /// Defaults to -cos(theta0) when omitted.
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub s: Option<f64>,
    /// Entry j is the rho^j Taylor coefficient of k_rho, components [s, t].
    #[serde(default)]
    pub k_jet: Vec<SField>,
    #[serde(default)]
    pub psi_boundary: SField,
    /// Higher rho-orders of the Dirichlet data, entry i is the rho^{i+1} term.
    #[serde(default)]
    pub psi_rho_jet: Vec<SField>,
    #[serde(default)]
    pub psi_free_at_n: SField,
    /// Kernel coefficients at the Laplace root orders s + 2k (default 0).
    #[serde(default)]
    pub upsilon: Vec<SField>,
    #[serde(default = "default_m_max")]
    pub m_max: usize,
    #[serde(default = "default_grid_n")]
    pub grid_n: usize,
}

fn default_m_max() -> usize {
    crate::rhoseries::DEFAULT_M_MAX
}

fn default_grid_n() -> usize {
    crate::thetagrid::DEFAULT_N
}

impl CornerProblem {
    pub fn new(n: usize, theta0: f64) -> Self {
        Self {
            n,
            theta0,
            lambda: None,
            s: None,
            k_jet: vec![],
            psi_boundary: SField::default(),
            psi_rho_jet: vec![],
            psi_free_at_n: SField::default(),
            upsilon: vec![],
            m_max: default_m_max(),
            grid_n: default_grid_n(),
        }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda.unwrap_or(-self.theta0.cos())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.n > 5 {
            return Err(Error::InvalidParams(format!("n = {} outside 2..=5", self.n)));
        }
        if !(self.theta0 > 0.0 && self.theta0 < std::f64::consts::PI) {
            return Err(Error::InvalidParams(format!("theta0 = {} outside (0, pi)", self.theta0)));
        }
        let lam = self.lambda();
        if !(lam.abs() < 1.0) {
            return Err(Error::LambdaOutOfRange(lam));
        }
        if (corner_angle(lam)? - self.theta0).abs() > 1e-9 {
            return Err(Error::InvalidParams(format!("lambda = {lam} inconsistent with theta0 = {}", self.theta0)));
        }
        if let Some(s) = self.s {
            if !(s.is_finite() && s > self.n as f64 / 2.0) {
                return Err(Error::InvalidParams(format!("s = {s} must exceed n/2")));
            }
        }
        if self.m_max == 0 || self.m_max > 32 {
            return Err(Error::InvalidParams(format!("fourier cutoff {} outside 1..=32", self.m_max)));
        }
        if self.grid_n < 16 || self.grid_n > 512 {
            return Err(Error::InvalidParams(format!("grid size {} outside 16..=512", self.grid_n)));
        }
        let dim = self.n - 1;
        for f in self.k_jet.iter().chain(self.psi_rho_jet.iter()) {
            f.validate(dim, self.m_max)?;
        }
        self.psi_boundary.validate(dim, self.m_max)?;
        self.psi_free_at_n.validate(dim, self.m_max)?;
        for f in &self.upsilon {
            f.validate(dim, self.m_max)?;
        }
        for f in &self.k_jet {
            for e in &f.entries {
                if e.component.len() != 2 || e.component.iter().any(|&c| c >= dim) {
                    return Err(Error::RankMismatch(format!("k_jet component {:?}", e.component)));
                }
            }
        }
        Ok(())
    }

    pub fn ctx(&self) -> Result<Ctx> {
        let grid = crate::thetagrid::ThetaGrid::new(self.theta0, self.grid_n)?;
        Ok(Ctx::new(grid, crate::rhoseries::Torus::new(self.n - 1, self.m_max)))
    }

    /// k_j as S-only symmetric matrices of values; k_0 defaults to the identity.
    pub fn k_values(&self, ctx: &Ctx, j: usize) -> Vec<Vec<Vec<f64>>> {
        let dim = self.n - 1;
        let mut k = match self.k_jet.get(j) {
            Some(f) => f.sym2_values(&ctx.torus, dim),
            None => vec![vec![vec![0.0; ctx.nq()]; dim]; dim],
        };
        if j == 0 && self.k_jet.is_empty() {
            for (a, row) in k.iter_mut().enumerate() {
                row[a].iter_mut().for_each(|v| *v = 1.0);
            }
        }
        k
    }
}

pub fn corner_angle(lambda: f64) -> Result<f64> {
    if !(lambda.abs() < 1.0) {
        return Err(Error::LambdaOutOfRange(lambda));
    }
    Ok((-lambda).acos())
}

pub type Sym2 = Vec<Vec<f64>>;

pub fn corner_sff(k_q: &Sym2, k_m: &Sym2, dot_qm: f64, dot_qs: f64) -> Result<Sym2> {
    if dot_qs.abs() < 1e-12 {
        return Err(Error::NonTransverse);
    }
    Ok(k_q
        .iter()
        .zip(k_m)
        .map(|(rq, rm)| rq.iter().zip(rm).map(|(a, b)| (a - dot_qm * b) / dot_qs).collect())
        .collect())
}

/// Fields on the torus as collocation values.
#[derive(Debug, Clone, PartialEq)]
pub struct JetConstraints {
    pub dphi_dr: f64,
    pub d2phi_dr2: Vec<f64>,
    pub d3phi_dr2dxs: Vec<Vec<f64>>,
    pub umb_gradient_residual: Vec<Vec<f64>>,
    pub tracefree_constraint: Vec<Vec<Vec<f64>>>,
}

/// Low-order data of the hypersurface Q = {x^n = phi(r, x)} forced by
/// smoothness. Curvature inputs are supplied by the caller in the
/// coordinate frame; the mixed input is Rbar_{0st0} - Rbar_{nstn}, and its
/// tracefree part is taken against the flat metric of S.
pub fn smooth_jet_constraints(
    torus: &crate::rhoseries::Torus,
    lambda: f64,
    eta: &[f64],
    rbar_0s0n: &[Vec<f64>],
    rbar_mixed: &[Vec<Vec<f64>>],
) -> Result<JetConstraints> {
    if !(lambda.abs() < 1.0) {
        return Err(Error::LambdaOutOfRange(lambda));
    }
    let dim = torus.dim;
    let w = 1.0 - lambda * lambda;
    let d2 = eta.iter().map(|e| e / w).collect();
    let d3 = rbar_0s0n.iter().map(|r| r.iter().map(|v| -v / w).collect()).collect();
    let umb = (0..dim)
        .map(|s| {
            let de = torus.deriv(eta, 1, s);
            de.iter().zip(&rbar_0s0n[s]).map(|(a, b)| a + b).collect()
        })
        .collect();
    let nq = eta.len();
    let mut tf = vec![vec![vec![0.0; nq]; dim]; dim];
    for q in 0..nq {
        let tr: f64 = (0..dim).map(|a| rbar_mixed[a][a][q]).sum::<f64>() / dim as f64;
        for a in 0..dim {
            for b in 0..dim {
                let v = rbar_mixed[a][b][q] - if a == b { tr } else { 0.0 };
                tf[a][b][q] = lambda * v;
            }
        }
    }
    Ok(JetConstraints {
        dphi_dr: -lambda / w.sqrt(),
        d2phi_dr2: d2,
        d3phi_dr2dxs: d3,
        umb_gradient_residual: umb,
        tracefree_constraint: tf,
    })
}

/// hbar (indices 0..n-1, the last one being rho) and chi, truncated at `order`.
#[derive(Debug, Clone)]
pub struct NormalFormMetricJet {
    pub n: usize,
    pub theta0: f64,
    pub order: usize,
    pub ctx: Ctx,
    pub hbar: Tensor,
    pub chi: Series,
}

impl NormalFormMetricJet {
    /// hbar = drho^2 + k_rho, chi = 1.
    pub fn initial(problem: &CornerProblem, ctx: &Ctx, order: usize) -> Self {
        let n = problem.n;
        let mut hbar = zero_tensor(n, order);
        hbar[n - 1][n - 1] = ctx.scalar(order, 1.0);
        for j in 0..=order {
            let k = problem.k_values(ctx, j);
            for a in 0..n - 1 {
                for b in 0..n - 1 {
                    if j > 0 && k[a][b].iter().all(|v| *v == 0.0) {
                        continue;
                    }
                    hbar[a][b].insert_add(j, 0, Field::constant_s(k[a][b].clone()));
                }
            }
        }
        Self { n, theta0: problem.theta0, order, ctx: ctx.clone(), hbar, chi: ctx.scalar(order, 1.0) }
    }

    pub fn model(n: usize, ctx: &Ctx, order: usize) -> Self {
        Self::initial(&CornerProblem::new(n, ctx.grid.theta0), ctx, order)
    }

    pub fn truncated(&self, order: usize) -> Self {
        let hbar = self.hbar.iter().map(|r| r.iter().map(|s| s.with_order(order)).collect()).collect();
        Self { order, hbar, chi: self.chi.with_order(order), ..self.clone() }
    }

    /// Largest violation of the structural invariants: dtheta hbar at
    /// rho = 0, dtheta hbar at theta0, and chi(0) - 1.
    pub fn invariant_defect(&self) -> f64 {
        let ctx = &self.ctx;
        let mut worst: f64 = 0.0;
        for row in &self.hbar {
            for s in row {
                let d = ctx.series_dtheta(s);
                for (&(j, _), c) in &d.terms {
                    if j == 0 {
                        worst = worst.max(c.max_abs());
                    }
                    worst = worst.max(ctx.at_end(c).max_abs());
                }
            }
        }
        let c0 = self.chi.get(0, 0).map(|c| c.map(|v| v - 1.0).max_abs()).unwrap_or(1.0);
        worst.max(c0)
    }
}

pub(crate) fn trace(hinv: &Tensor, x: &Tensor) -> Series {
    let n = hinv.len();
    let mut acc = Series::zero(hinv[0][0].order.min(x[0][0].order));
    for a in 0..n {
        for b in 0..n {
            if hinv[a][b].terms.is_empty() || x[b][a].terms.is_empty() {
                continue;
            }
            acc = acc.add(&hinv[a][b].mul(&x[b][a]));
        }
    }
    acc
}

pub(crate) fn map_tensor(t: &Tensor, f: impl Fn(&Series) -> Series) -> Tensor {
    t.iter().map(|r| r.iter().map(&f).collect()).collect()
}

fn symmetrize(t: &Tensor) -> Tensor {
    let n = t.len();
    let mut out = t.clone();
    for a in 0..n {
        for b in a + 1..n {
            let s = t[a][b].add(&t[b][a]).scale(0.5);
            out[a][b] = s.clone();
            out[b][a] = s;
        }
    }
    out
}

/// rho * d/dx^alpha; the last index is rho itself.
pub(crate) fn dop(ctx: &Ctx, s: &Series, alpha: usize, n: usize) -> Series {
    if alpha == n - 1 {
        s.euler(0.0)
    } else {
        ctx.series_dx(s, alpha).mul_rho(1)
    }
}

/// Christoffel data in rescaled form, free of negative powers. `gbar[k][a][b]`
/// is rho * Gammabar^k_{ab} of hbar.
pub struct Christoffel {
    /// sin^3 Gamma_000 (= -cos) at the theta nodes.
    pub g000: Vec<f64>,
    /// rho^2 sin^3 Gamma_{mu nu 0} = cos hbar - sin dtheta hbar / 2;
    /// Gamma_{0 mu sigma} is its negative, Gamma_{0 mu 0} = Gamma_{00 sigma} = 0.
    pub gmn0: Tensor,
    /// rho^3 sin^2 Gamma_{mu nu sigma}, indexed [sigma][mu][nu].
    pub gmns: Vec<Tensor>,
    pub gbar: Vec<Tensor>,
    /// rho Gammabar_{ab c} with the lowered index first: low[c][a][b].
    pub low: Vec<Tensor>,
    pub hinv: Tensor,
}

pub fn christoffel(jet: &NormalFormMetricJet) -> Result<Christoffel> {
    let ctx = &jet.ctx;
    let n = jet.n;
    let order = jet.order;
    let h = &jet.hbar;
    let hinv = series_inverse_sym2(h)?;
    let dh: Vec<Tensor> = (0..n).map(|a| map_tensor(h, |s| dop(ctx, s, a, n))).collect();
    // lowered: low[c][a][b] = (D_a h_bc + D_b h_ac - D_c h_ab) / 2
    let mut low = vec![zero_tensor(n, order); n];
    for c in 0..n {
        for a in 0..n {
            for b in a..n {
                let v = dh[a][b][c].add(&dh[b][a][c]).sub(&dh[c][a][b]).scale(0.5);
                low[c][a][b] = v.clone();
                low[c][b][a] = v;
            }
        }
    }
    let mut gbar = vec![zero_tensor(n, order); n];
    for k in 0..n {
        for a in 0..n {
            for b in a..n {
                let mut acc = Series::zero(order);
                for c in 0..n {
                    if !hinv[k][c].terms.is_empty() && !low[c][a][b].terms.is_empty() {
                        acc = acc.add(&hinv[k][c].mul(&low[c][a][b]));
                    }
                }
                gbar[k][a][b] = acc.clone();
                gbar[k][b][a] = acc;
            }
        }
    }
    let cos = ctx.theta_fn(f64::cos);
    let sin = ctx.theta_fn(f64::sin);
    let dth = map_tensor(h, |s| ctx.series_dtheta(s));
    let hc = map_tensor(h, |s| s.mul_coef(&cos));
    let gmn0: Tensor = hc
        .iter()
        .zip(&dth)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(a, b)| a.sub(&b.mul_coef(&sin).scale(0.5))).collect())
        .collect();
    let mut gmns = vec![zero_tensor(n, order); n];
    for sg in 0..n {
        for a in 0..n {
            for b in 0..n {
                let mut v = low[sg][a][b].clone();
                if a == n - 1 {
                    v = v.sub(&h[sg][b]);
                }
                if b == n - 1 {
                    v = v.sub(&h[sg][a]);
                }
                if sg == n - 1 {
                    v = v.add(&h[a][b]);
                }
                gmns[sg][a][b] = v;
            }
        }
    }
    let g000 = ctx.grid.nodes.iter().map(|t| -t.cos()).collect();
    Ok(Christoffel { g000, gmn0, gmns, gbar, low, hinv })
}

/// E = Ric(g) + n g in the frame omega^0 = dtheta / sin, omega^mu = dx^mu / (rho sin),
/// with E00 / sin^2 and E0s / sin^2 alongside.
#[derive(Debug, Clone)]
pub struct EinsteinResidual {
    pub e00: Series,
    pub e0: Vec<Series>,
    pub e: Tensor,
    pub e00_red: Series,
    pub e0_red: Vec<Series>,
    /// E_munu / sin^2.
    pub e_red: Tensor,
}

impl EinsteinResidual {
    pub fn order(&self) -> usize {
        self.e00.order
    }

    /// Largest coefficient over all components at rho-order j.
    pub fn max_at(&self, j: usize) -> f64 {
        let mut m = self.e00.max_norm_at(j);
        for s in self.e0.iter().chain(self.e.iter().flatten()) {
            m = m.max(s.max_norm_at(j));
        }
        m
    }
}

/// rho^2 ric(hbar) from the rescaled symbols G = rho Gammabar.
fn rho2_ricci(ctx: &Ctx, g: &[Tensor], n: usize, order: usize) -> Tensor {
    let r = n - 1;
    // contracted symbols v_b = G^k_{bk}
    let v: Vec<Series> = (0..n)
        .map(|b| (0..n).fold(Series::zero(order), |acc, k| acc.add(&g[k][b][k])))
        .collect();
    let mut out = zero_tensor(n, order);
    for b in 0..n {
        for c in b..n {
            let mut acc = Series::zero(order);
            for k in 0..n {
                acc = acc.add(&dop(ctx, &g[k][b][c], k, n));
            }
            acc = acc.sub(&g[r][b][c]);
            acc = acc.sub(&dop(ctx, &v[b], c, n));
            if c == r {
                acc = acc.add(&v[b]);
            }
            for k in 0..n {
                for l in 0..n {
                    if !g[k][k][l].terms.is_empty() && !g[l][b][c].terms.is_empty() {
                        acc = acc.add(&g[k][k][l].mul(&g[l][b][c]));
                    }
                    if !g[k][c][l].terms.is_empty() && !g[l][b][k].terms.is_empty() {
                        acc = acc.sub(&g[k][c][l].mul(&g[l][b][k]));
                    }
                }
            }
            out[b][c] = acc;
        }
    }
    // the c <-> b version differs only by rounding; average the two
    let mut sym = out.clone();
    for b in 0..n {
        for c in 0..b {
            sym[b][c] = out[c][b].clone();
        }
    }
    symmetrize(&sym)
}

pub fn einstein_residual(jet: &NormalFormMetricJet) -> Result<EinsteinResidual> {
    let ctx = &jet.ctx;
    let n = jet.n;
    let order = jet.order;
    let r = n - 1;
    let nf = n as f64;
    let h = &jet.hbar;
    let ch = christoffel(jet)?;
    let hinv = &ch.hinv;
    let g = &ch.gbar;
    let t = map_tensor(h, |s| ctx.series_dtheta(s));
    let tt = map_tensor(&t, |s| ctx.series_dtheta(s));
    let s2 = ctx.theta_fn(|x| x.sin().powi(2));
    let sc = ctx.theta_fn(|x| x.sin() * x.cos());
    let cos = ctx.theta_fn(f64::cos);

    let tr_t = trace(hinv, &t);
    let tr_tt = trace(hinv, &tt);
    let hit = matmul(hinv, &t)?;
    let norm_t = trace(&hit, &hit);

    // E00 / sin^2 = -tr(h^-1 T')/2 + cos (tr(h^-1 T)/sin)/2 + |T|^2/4
    let tr_t_over_sin = tr_t.map(|c| ctx.div_sin(c));
    let e00_red = tr_tt.scale(-0.5).add(&tr_t_over_sin.mul_coef(&cos).scale(0.5)).add(&norm_t.scale(0.25));
    let e00 = e00_red.mul_coef(&s2);

    let mut e0_red = Vec::with_capacity(n);
    let tr_t_d: Vec<Series> = (0..n).map(|a| dop(ctx, &tr_t, a, n)).collect();
    for sg in 0..n {
        let mut acc = Series::zero(order);
        if sg == r {
            acc = acc.add(&tr_t);
        }
        for m in 0..n {
            if !hinv[m][r].terms.is_empty() {
                acc = acc.sub(&hinv[m][r].mul(&t[sg][m]).scale(nf));
            }
        }
        // rho nabla^mu T_{sigma mu}
        for m in 0..n {
            for a in 0..n {
                if hinv[m][a].terms.is_empty() {
                    continue;
                }
                let mut cov = dop(ctx, &t[sg][m], a, n);
                for l in 0..n {
                    if !g[l][a][sg].terms.is_empty() && !t[l][m].terms.is_empty() {
                        cov = cov.sub(&g[l][a][sg].mul(&t[l][m]));
                    }
                    if !g[l][a][m].terms.is_empty() && !t[sg][l].terms.is_empty() {
                        cov = cov.sub(&g[l][a][m].mul(&t[sg][l]));
                    }
                }
                acc = acc.add(&hinv[m][a].mul(&cov));
            }
        }
        acc = acc.sub(&tr_t_d[sg]);
        e0_red.push(acc.scale(0.5));
    }
    let e0: Vec<Series> = e0_red.iter().map(|s| s.mul_coef(&s2)).collect();

    let ric = rho2_ricci(ctx, g, n, order);
    let th_t = matmul(&t, &hit)?; // T h^-1 T
    let drho2 = hinv[r][r].sub(&ctx.scalar(order, 1.0));
    let div_rho = (0..n).fold(Series::zero(order), |acc, a| {
        (0..n).fold(acc, |acc, b| {
            if hinv[a][b].terms.is_empty() || g[r][a][b].terms.is_empty() {
                acc
            } else {
                acc.sub(&hinv[a][b].mul(&g[r][a][b]))
            }
        })
    });
    let mut e = zero_tensor(n, order);
    let mut e_red = zero_tensor(n, order);
    for a in 0..n {
        for b in a..n {
            let s2_part = tt[a][b]
                .scale(-0.5)
                .add(&th_t[a][b].scale(0.5))
                .sub(&tr_t.mul(&t[a][b]).scale(0.25))
                .add(&drho2.mul(&h[a][b]).scale(1.0 - nf))
                .sub(&g[r][a][b].scale(nf - 2.0))
                .add(&div_rho.mul(&h[a][b]))
                .add(&ric[a][b]);
            let sc_part = t[a][b].scale(0.5 * (nf - 1.0)).add(&tr_t.mul(&h[a][b]).scale(0.5));
            let v = s2_part.mul_coef(&s2).add(&sc_part.mul_coef(&sc));
            let red = s2_part.add(&sc_part.map(|c| ctx.div_sin(c)).mul_coef(&cos));
            e[a][b] = v.clone();
            e[b][a] = v;
            e_red[a][b] = red.clone();
            e_red[b][a] = red;
        }
    }
    Ok(EinsteinResidual { e00, e0, e, e00_red, e0_red, e_red })
}

/// omega-frame component -> coordinate component, dividing by
/// sin^2 rho^w (w = 0, 1, 2 for the 00, 0mu and munu blocks).
pub fn omega_to_coordinate(value: f64, rho_weight: usize, theta: f64, rho: f64) -> f64 {
    value / (theta.sin().powi(2) * rho.powi(rho_weight as i32))
}

pub fn coordinate_to_omega(value: f64, rho_weight: usize, theta: f64, rho: f64) -> f64 {
    value * theta.sin().powi(2) * rho.powi(rho_weight as i32)
}

/// For u = rho^sigma sin^a V with a = n - s, returns R with
/// (Delta_g + s(n - s)) u = rho^sigma sin^a R.
pub fn laplace_residual(jet: &NormalFormMetricJet, s: f64, sigma: f64, v: &Series) -> Result<Series> {
    let ctx = &jet.ctx;
    let n = jet.n;
    let r = n - 1;
    let nf = n as f64;
    let a = nf - s;
    let b = nf + 1.0 - 2.0 * s;
    let order = jet.order.min(v.order);
    let h = &jet.hbar;
    let hinv = series_inverse_sym2(h)?;
    let s2 = ctx.theta_fn(|x| x.sin().powi(2));
    let sc = ctx.theta_fn(|x| x.sin() * x.cos());
    let v = v.with_order(order);
    let vt = ctx.series_dtheta(&v);
    let vtt = ctx.series_dtheta(&vt);
    let t = map_tensor(h, |x| ctx.series_dtheta(x));
    let tr_t = trace(&hinv, &t);

    let mut out = vtt.mul_coef(&s2).add(&vt.mul_coef(&sc).scale(b)).add(&v.mul_coef(&s2).scale((nf - s) * (s - 1.0)));
    out = out.add(&tr_t.mul(&vt).mul_coef(&s2).scale(0.5));
    out = out.add(&tr_t.mul(&v).mul_coef(&sc).scale(0.5 * a));

    let dshift = |x: &Series, al: usize| -> Series {
        if al == r {
            x.euler(sigma)
        } else {
            ctx.series_dx(x, al).mul_rho(1)
        }
    };
    let dv: Vec<Series> = (0..n).map(|al| dshift(&v, al)).collect();
    let z: Vec<Series> = (0..n)
        .map(|m| {
            (0..n).fold(Series::zero(order), |acc, nu| {
                if hinv[m][nu].terms.is_empty() || dv[nu].terms.is_empty() {
                    acc
                } else {
                    acc.add(&hinv[m][nu].mul(&dv[nu]))
                }
            })
        })
        .collect();
    let mut tang = z[r].scale(1.0 - nf);
    for m in 0..n {
        tang = tang.add(&dshift(&z[m], m));
        let dh = map_tensor(h, |x| dop(ctx, x, m, n));
        let dlog = trace(&hinv, &dh).scale(0.5);
        if !dlog.terms.is_empty() {
            tang = tang.add(&dlog.mul(&z[m]));
        }
    }
    Ok(out.add(&tang.mul_coef(&s2)))
}

/// Re-expresses Omega^2 (drho^2 + k_rho) in geodesic normal form
/// drho'^2 + k'_{rho'} and returns the Taylor coefficients of k'. Inputs are
/// theta-independent series: `k` is (n-1)x(n-1), `omega` scalar with positive
/// leading term.
pub fn boundary_normal_form(ctx: &Ctx, k: &Tensor, omega: &Series) -> Result<Tensor> {
    let d = k.len();
    let order = crate::rhoseries::tensor_order(k).min(omega.order);
    let big = order + 1;
    let one = || ctx.scalar(big, 1.0);
    let kb: Tensor = map_tensor(k, |s| s.with_order(big));
    let om = omega.with_order(big);
    let om2 = om.mul(&om);
    let kinv = series_inverse_sym2(&kb)?;
    let r1 = om.get(0, 0).cloned().ok_or(Error::SingularLeadingTerm)?;
    if r1.v.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::SingularLeadingTerm);
    }
    let grad = |f: &Series| -> (Series, Vec<Series>) {
        (f.rho_derivative().unwrap_or_else(|_| Series::zero(big)), (0..d).map(|a| ctx.series_dx(f, a)).collect())
    };
    let quad = |x: &[Series], y: &[Series]| -> Series {
        let mut acc = Series::zero(big);
        for a in 0..d {
            for b in 0..d {
                if !kinv[a][b].terms.is_empty() && !x[a].terms.is_empty() && !y[b].terms.is_empty() {
                    acc = acc.add(&kinv[a][b].mul(&x[a]).mul(&y[b]));
                }
            }
        }
        acc
    };
    // eikonal |d rho'|^2 = 1 for rho' = sum_{j>=1} r_j rho^j
    let mut rho_new = Series::monomial(big, 1, 0, r1.clone());
    let inv_r1 = r1.map(|v| 1.0 / v);
    for j in 2..=big {
        let (dr, dx) = grad(&rho_new);
        let f = dr.mul(&dr).add(&quad(&dx, &dx)).sub(&om2);
        if let Some(c) = f.get(j - 1, 0) {
            rho_new.insert_add(j, 0, c.times(&inv_r1).map(|v| -0.5 * v / j as f64));
        }
    }
    // x'^a = x^a + xi^a, constant along the gradient lines of rho'
    let (dr, drx) = grad(&rho_new);
    let mut xi = vec![Series::zero(big); d];
    for _ in 0..big {
        for a in 0..d {
            let (dxi, dxix) = grad(&xi[a]);
            let mut col: Vec<Series> = dxix.clone();
            col[a] = col[a].add(&one());
            let f = dr.mul(&dxi).add(&quad(&drx, &col));
            let mut upd = Series::zero(big);
            for j in 1..=big {
                if let Some(c) = f.get(j - 1, 0) {
                    if c.max_abs() > 0.0 {
                        upd.insert_add(j, 0, c.times(&inv_r1).map(|v| -v / j as f64));
                    }
                }
            }
            xi[a] = xi[a].add(&upd);
        }
    }
    // Jacobian d(x', rho')/d(x, rho), then the metric in the new coordinates
    let mut jac = zero_tensor(d + 1, big);
    for a in 0..d {
        let (dxi, dxix) = grad(&xi[a]);
        for b in 0..d {
            jac[a][b] = dxix[b].clone();
            if a == b {
                jac[a][b] = jac[a][b].add(&one());
            }
        }
        jac[a][d] = dxi;
    }
    for b in 0..d {
        jac[d][b] = drx[b].clone();
    }
    jac[d][d] = dr.clone();
    let kjac = series_inverse_sym2(&jac)?;
    let mut tau = zero_tensor(d + 1, big);
    for a in 0..d {
        for b in 0..d {
            tau[a][b] = om2.mul(&kb[a][b]);
        }
    }
    tau[d][d] = om2.clone();
    let kt: Tensor = (0..=d).map(|a| (0..=d).map(|b| kjac[b][a].clone()).collect()).collect();
    let tau_new = matmul(&matmul(&kt, &tau)?, &kjac)?;
    // inverse coordinate map x = x' + chi(x', rho'), rho = R(x', rho')
    let inv_r1s = Series::monomial(big, 0, 0, inv_r1.clone());
    let mut chi = vec![Series::zero(big); d];
    let mut rr = Series::monomial(big, 1, 0, inv_r1.clone());
    for _ in 0..=big {
        let mut higher = rho_new.clone();
        higher.terms.remove(&(1, 0));
        let h_c = compose(ctx, &higher, &chi, &rr, big);
        let g_c = compose(ctx, &inv_r1s, &chi, &rr, big);
        let rr_next = Series::monomial(big, 1, 0, ctx.constant(1.0)).sub(&h_c).mul(&g_c);
        let chi_next: Vec<Series> = xi.iter().map(|x| compose(ctx, x, &chi, &rr, big).scale(-1.0)).collect();
        rr = rr_next;
        chi = chi_next;
    }
    let mut out = zero_tensor(d, order);
    for a in 0..d {
        for b in 0..d {
            out[a][b] = compose(ctx, &tau_new[a][b], &chi, &rr, big).with_order(order);
        }
    }
    Ok(out)
}

/// F(x + chi, R) as a series in the new rho, by Taylor expansion in x.
fn compose(ctx: &Ctx, f: &Series, chi: &[Series], rr: &Series, order: usize) -> Series {
    let d = chi.len();
    let mut pows = vec![Series::monomial(order, 0, 0, ctx.constant(1.0))];
    for _ in 0..order {
        let last = pows.last().unwrap().mul(rr);
        pows.push(last);
    }
    let mut out = Series::zero(order);
    for (&(j, k), c) in &f.terms {
        if k > 0 || j > order {
            continue;
        }
        let base = &pows[j];
        // multi-indices of total degree <= order - j via depth-first expansion
        let mut stack: Vec<(Vec<usize>, Field, Series, f64)> =
            vec![(vec![0; d], c.clone(), base.clone(), 1.0)];
        while let Some((alpha, deriv, term, fact)) = stack.pop() {
            out = out.add(&term.mul_coef(&deriv).scale(1.0 / fact));
            let deg: usize = alpha.iter().sum();
            if j + deg >= order {
                continue;
            }
            let last = alpha.iter().rposition(|&x| x > 0).unwrap_or(0);
            for a in last..d {
                if chi[a].terms.is_empty() {
                    continue;
                }
                let mut al = alpha.clone();
                al[a] += 1;
                let nd = ctx.dx(&deriv, a);
                let nt = term.mul(&chi[a]);
                stack.push((al.clone(), nd, nt, fact * al[a] as f64));
            }
        }
    }
    out
}

/// The rho-coefficient tensors of k' from `boundary_normal_form` as plain
/// per-order matrices of S-values.
pub fn k_coefficients(k: &Tensor, j: usize, nq: usize) -> Vec<Vec<Vec<f64>>> {
    k.iter()
        .map(|row| {
            row.iter()
                .map(|s| match s.get(j, 0) {
                    Some(c) => c.broadcast(1).v.clone(),
                    None => vec![0.0; nq],
                })
                .collect()
        })
        .collect()
}

pub fn k_tensor_from_problem(problem: &CornerProblem, ctx: &Ctx, order: usize) -> Tensor {
    let d = problem.n - 1;
    let mut k = zero_tensor(d, order);
    for j in 0..=order {
        let kv = problem.k_values(ctx, j);
        for a in 0..d {
            for b in 0..d {
                if kv[a][b].iter().any(|v| *v != 0.0) {
                    k[a][b].insert_add(j, 0, Field::constant_s(kv[a][b].clone()));
                }
            }
        }
    }
    k
}

pub type ScalarSeries = RhoLogExpansion<f64>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{cauchy_coefficients, ricci_at, Dual2};
    use crate::rhoseries::Torus;
    use crate::thetagrid::ThetaGrid;
    use num_complex::Complex64;
    use std::f64::consts::PI;

    fn ctx(theta0: f64, nt: usize, dim: usize, m: usize) -> Ctx {
        Ctx::new(ThetaGrid::new(theta0, nt).unwrap(), Torus::new(dim, m))
    }

    #[test]
    fn corner_angles() {
        assert!((corner_angle(0.0).unwrap() - PI / 2.0).abs() < 1e-15);
        assert!((corner_angle(-0.5).unwrap() - PI / 3.0).abs() < 1e-15);
        assert!((corner_angle(-(0.5f64).sqrt()).unwrap() - PI / 4.0).abs() < 1e-15);
        assert!(matches!(corner_angle(1.0), Err(Error::LambdaOutOfRange(_))));
    }

    #[test]
    fn sff_identities() {
        let kq = vec![vec![1.0, 0.2], vec![0.2, 3.0]];
        let zero = vec![vec![0.0; 2]; 2];
        assert_eq!(corner_sff(&kq, &zero, 0.3, 1.0).unwrap(), kq);
        let km = vec![vec![0.5, -0.1], vec![-0.1, 0.7]];
        let a = corner_sff(&kq, &km, 0.4, 0.8).unwrap();
        let kq2: Sym2 = kq.iter().map(|r| r.iter().map(|v| 2.0 * v).collect()).collect();
        let km2: Sym2 = km.iter().map(|r| r.iter().map(|v| 2.0 * v).collect()).collect();
        let b = corner_sff(&kq2, &km2, 0.4, 0.8).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((b[i][j] - 2.0 * a[i][j]).abs() < 1e-15);
                assert!((a[i][j] - (kq[i][j] - 0.4 * km[i][j]) / 0.8).abs() < 1e-15);
            }
        }
        assert!(matches!(corner_sff(&kq, &km, 0.4, 1e-13), Err(Error::NonTransverse)));
    }

    #[test]
    fn model_christoffel_and_zero_residual() {
        let c = ctx(PI / 2.0, 24, 2, 2);
        let jet = NormalFormMetricJet::model(3, &c, 4);
        let ch = christoffel(&jet).unwrap();
        for (v, t) in ch.g000.iter().zip(&c.grid.nodes) {
            assert!((v + t.cos()).abs() < 1e-15);
        }
        // theta-independent hbar: rho^2 sin^3 Gamma_{mu nu 0} = cos hbar
        let cosf = c.theta_fn(f64::cos);
        let want = jet.hbar[0][0].mul_coef(&cosf);
        assert!(ch.gmn0[0][0].sub(&want).terms.values().all(|f| f.max_abs() < 1e-14));
        let e = einstein_residual(&jet).unwrap();
        for j in 0..=4 {
            assert!(e.max_at(j) < 1e-10);
        }
        assert!(jet.invariant_defect() < 1e-12);
    }

    /// A theta- and x-dependent jet with closed-form coefficients, shared by
    /// the series evaluator and the automatic-differentiation oracle.
    fn test_h(mu: usize, nu: usize, t: &Dual2, x: &[Dual2], rho: &Dual2) -> Dual2 {
        let one = Complex64::new(1.0, 0.0);
        let c = |v: f64| Dual2::constant(one * v);
        let base = if mu == nu { c(1.0 + 0.1 * mu as f64) } else { c(0.05) };
        let th = t.cos().scale(one * 0.2);
        let xs = x[0].sin().scale(one * 0.15).add(&x[1].cos().scale(one * (0.1 * (mu + nu) as f64)));
        let a1 = th.add(&xs).scale(one * (1.0 / (1 + mu + nu) as f64));
        let a2 = t.mul(t).cos().mul(&x[1].sin()).scale(one * 0.1);
        base.add(&rho.mul(&a1)).add(&rho.mul(rho).mul(&a2))
    }

    fn test_h_real(mu: usize, nu: usize, t: f64, x: &[f64], j: usize) -> f64 {
        let one = Complex64::new(1.0, 0.0);
        let dt = Dual2::constant(one * t);
        let dx: Vec<Dual2> = x.iter().map(|v| Dual2::constant(one * *v)).collect();
        let z = Dual2::constant(Complex64::new(0.0, 0.0));
        let o = Dual2::constant(one);
        let h0 = test_h(mu, nu, &dt, &dx, &z).v.re;
        let h1 = test_h(mu, nu, &dt, &dx, &o).v.re;
        let hm = test_h(mu, nu, &dt, &dx, &o.scale(-one)).v.re;
        match j {
            0 => h0,
            1 => 0.5 * (h1 - hm),
            _ => 0.5 * (h1 + hm) - h0,
        }
    }

    #[test]
    fn einstein_matches_ad_oracle() {
        let n = 3;
        let order = 3;
        let c = ctx(1.1, 28, 2, 10);
        let mut jet = NormalFormMetricJet::model(n, &c, order);
        for mu in 0..n {
            for nu in 0..n {
                let mut s = Series::zero(order);
                for j in 0..=2 {
                    s.insert_add(j, 0, c.full_fn(|t, x| test_h_real(mu.min(nu), mu.max(nu), t, x, j)));
                }
                jet.hbar[mu][nu] = s;
            }
        }
        let e = einstein_residual(&jet).unwrap();
        let nq = c.nq();
        for &(it, q) in &[(7usize, 5usize), (15, 40), (22, 300)] {
            let t = c.grid.nodes[it];
            let x = c.torus.point(q);
            let comp = |rho: Complex64, i: usize, j: usize| -> Complex64 {
                let metric = |v: &[Dual2]| -> Vec<Vec<Dual2>> {
                    let csc2 = v[0].sin().mul(&v[0].sin()).recip();
                    let r2 = v[3].mul(&v[3]).recip();
                    let mut g = vec![vec![Dual2::constant(Complex64::new(0.0, 0.0)); 4]; 4];
                    g[0][0] = csc2.clone();
                    for a in 0..3 {
                        for b in 0..3 {
                            let hv = test_h(a.min(b), a.max(b), &v[0], &v[1..3], &v[3]);
                            g[a + 1][b + 1] = csc2.mul(&r2).mul(&hv);
                        }
                    }
                    g
                };
                let p = [Complex64::new(t, 0.0), Complex64::new(x[0], 0.0), Complex64::new(x[1], 0.0), rho];
                let ric = ricci_at(&metric, &p).unwrap();
                let gv = metric(&p.iter().enumerate().map(|(k, z)| Dual2::var(*z, k)).collect::<Vec<_>>());
                let ehat = ric[i][j] + gv[i][j].v * 3.0;
                let w = (i > 0) as i32 + (j > 0) as i32;
                ehat * t.sin().powi(2) * rho.powi(w)
            };
            let idx = it * nq + q;
            let check = |s: &Series, i: usize, j: usize| {
                let coef = cauchy_coefficients(|z| comp(z, i, j), 0.05, 48, order + 1);
                for (jj, cf) in coef.iter().enumerate() {
                    let mine = s.get(jj, 0).map(|f| f.broadcast(c.nt()).v[idx]).unwrap_or(0.0);
                    assert!((mine - cf.re).abs() < 1e-8, "comp ({i},{j}) order {jj}: {mine} vs {}", cf.re);
                }
            };
            check(&e.e00, 0, 0);
            for a in 0..3 {
                check(&e.e0[a], 0, a + 1);
                for b in a..3 {
                    check(&e.e[a][b], a + 1, b + 1);
                }
            }
        }
    }

    #[test]
    fn frame_round_trip() {
        for &(w, t, r) in &[(0usize, 0.3, 0.1), (1, 1.2, 0.05), (2, 2.0, 0.3)] {
            let v = 0.7;
            let back = coordinate_to_omega(omega_to_coordinate(v, w, t, r), w, t, r);
            assert!((back - v).abs() < 1e-12);
        }
    }

    #[test]
    fn laplace_residual_matches_indicial_operator() {
        use crate::sturm::{apply_indicial, IndicialParams};
        use crate::thetagrid::{LogThetaSeries, ThetaFn};
        let (n, s) = (3usize, 2.6);
        let c = ctx(PI / 2.0, 32, 2, 2);
        let jet = NormalFormMetricJet::model(n, &c, 3);
        let a = n as f64 - s;
        let nu = 1.7;
        let vf = |t: f64| (2.0 * t).cos() + t * t;
        let v = Series::monomial(3, 0, 0, c.theta_fn(vf));
        let r = laplace_residual(&jet, s, nu, &v).unwrap();
        let p = IndicialParams::new(n, s, PI / 2.0, nu).unwrap();
        let u = LogThetaSeries::smooth(a, ThetaFn::from_fn(&c.grid, |t| crate::thetagrid::sin_over_theta(t).powf(a) * vf(t)));
        let iu = apply_indicial(&p, &u).node_values();
        let got = r.get(0, 0).unwrap().broadcast(c.nt());
        for (i, &t) in c.grid.nodes.iter().enumerate().skip(1) {
            let mine = got.v[i * c.nq()] * t.sin().powf(a);
            assert!((mine - iu[i]).abs() < 1e-9, "{t}: {mine} vs {}", iu[i]);
        }
        let z = laplace_residual(&jet, s, nu, &Series::zero(3)).unwrap();
        assert!(z.terms.values().all(|f| f.max_abs() == 0.0));
    }

    #[test]
    fn laplace_residual_matches_ad_oracle() {
        use crate::oracle::laplacian_at;
        let (n, s, order) = (3usize, 2.4, 3usize);
        let c = ctx(1.3, 28, 2, 10);
        let mut jet = NormalFormMetricJet::model(n, &c, order);
        for mu in 0..n {
            for nu in 0..n {
                let mut sr = Series::zero(order);
                for j in 0..=2 {
                    sr.insert_add(j, 0, c.full_fn(|t, x| test_h_real(mu.min(nu), mu.max(nu), t, x, j)));
                }
                jet.hbar[mu][nu] = sr;
            }
        }
        let sigma = 0.6;
        let a = n as f64 - s;
        let vfun = |t: f64, x: &[f64], j: usize| (1.0 + j as f64) * (t * t + 0.3 * x[0].cos() * t.cos() + 0.1 * j as f64 * x[1].sin());
        let mut v = Series::zero(order);
        for j in 0..=1 {
            v.insert_add(j, 0, c.full_fn(|t, x| vfun(t, x, j)));
        }
        let r = laplace_residual(&jet, s, sigma, &v).unwrap();
        let (it, q) = (11usize, 77usize);
        let t = c.grid.nodes[it];
        let x = c.torus.point(q);
        let one = Complex64::new(1.0, 0.0);
        let f = |rho: Complex64| -> Complex64 {
            let metric = |w: &[Dual2]| -> Vec<Vec<Dual2>> {
                let csc2 = w[0].sin().mul(&w[0].sin()).recip();
                let r2 = w[3].mul(&w[3]).recip();
                let mut g = vec![vec![Dual2::constant(one * 0.0); 4]; 4];
                g[0][0] = csc2.clone();
                for a in 0..3 {
                    for b in 0..3 {
                        g[a + 1][b + 1] = csc2.mul(&r2).mul(&test_h(a.min(b), a.max(b), &w[0], &w[1..3], &w[3]));
                    }
                }
                g
            };
            let u = |w: &[Dual2]| -> Dual2 {
                let t2 = w[0].mul(&w[0]);
                let base = t2.add(&w[1].cos().mul(&w[0].cos()).scale(one * 0.3));
                let v0 = base.clone();
                let v1 = base.add(&w[2].sin().scale(one * 0.1)).scale(one * 2.0);
                let vv = v0.add(&w[3].mul(&v1));
                w[0].sin().powf(a).mul(&w[3].powf(sigma)).mul(&vv)
            };
            let p = [one * t, one * x[0], one * x[1], rho];
            let lap = laplacian_at(&metric, &u, &p).unwrap();
            let uv = u(&p.iter().map(|z| Dual2::constant(*z)).collect::<Vec<_>>()).v;
            (lap + uv * (s * (n as f64 - s))) / (rho.powf(sigma) * t.sin().powf(a))
        };
        let coef = cauchy_coefficients(f, 0.05, 48, order + 1);
        let idx = it * c.nq() + q;
        for (j, cf) in coef.iter().enumerate() {
            let mine = r.get(j, 0).map(|fl| fl.broadcast(c.nt()).v[idx]).unwrap_or(0.0);
            assert!((mine - cf.re).abs() < 1e-8, "order {j}: {mine} vs {}", cf.re);
        }
    }

    #[test]
    fn normal_form_identities() {
        let c = ctx(PI / 2.0, 16, 2, 6);
        let order = 3;
        let mut k = zero_tensor(2, order);
        for a in 0..2 {
            for b in 0..2 {
                for j in 0..=order {
                    let base = if a == b && j == 0 { 1.0 } else { 0.0 };
                    let amp = 0.05 * (1 + j + a + b) as f64;
                    k[a][b].insert_add(j, 0, c.s_fn(|x| base + amp * ((j + 1) as f64 * 0.3 + x[0]).cos() * (x[1] + a as f64 + b as f64).sin()));
                }
            }
        }
        let kn = boundary_normal_form(&c, &k, &c.scalar(order, 1.0)).unwrap();
        for a in 0..2 {
            for b in 0..2 {
                assert!(kn[a][b].sub(&k[a][b]).terms.values().all(|f| f.max_abs() < 1e-12));
            }
        }
        // constant factor: k'_j = c^{2-j} k_j
        let kc = boundary_normal_form(&c, &k, &c.scalar(order, 1.5)).unwrap();
        for j in 0..=order {
            let want = 1.5f64.powi(2 - j as i32);
            let d = kc[0][1].get(j, 0).unwrap().dist(&k[0][1].get(j, 0).unwrap().map(|v| v * want));
            assert!(d < 1e-12, "order {j}: {d}");
        }
        // Omega = 1 + rho^2 w: k'_2 = k_2 + 2 w k_0, k'_3 = k_3 + (5/3) w k_1
        let w = c.s_fn(|x| 0.3 * x[0].sin() + 0.2 * (x[0] + x[1]).cos());
        let mut om = c.scalar(order, 1.0);
        om.insert_add(2, 0, w.clone());
        let kw = boundary_normal_form(&c, &k, &om).unwrap();
        for a in 0..2 {
            for b in 0..2 {
                let g = |j: usize| k[a][b].get(j, 0).unwrap().clone();
                let want2 = g(2).plus(&w.times(&g(0)).map(|v| 2.0 * v));
                let want3 = g(3).plus(&w.times(&g(1)).map(|v| 5.0 / 3.0 * v));
                assert!(kw[a][b].get(2, 0).unwrap().dist(&want2) < 1e-10);
                assert!(kw[a][b].get(3, 0).unwrap().dist(&want3) < 1e-10);
            }
        }
    }

    #[test]
    fn jet_constraints_flat_model() {
        let t = Torus::new(2, 3);
        let zero = vec![vec![0.0; t.len()]; 2];
        let zero2 = vec![vec![vec![0.0; t.len()]; 2]; 2];
        let eta = vec![0.8; t.len()];
        let r = smooth_jet_constraints(&t, 0.0, &eta, &zero, &zero2).unwrap();
        assert_eq!(r.dphi_dr, 0.0);
        assert!(r.umb_gradient_residual.iter().flatten().all(|v| v.abs() < 1e-12));
        let eta = t.from_fn(|x| 1.0 + 0.2 * x[0].sin());
        let r = smooth_jet_constraints(&t, 0.3, &eta, &zero, &zero2).unwrap();
        let want = t.from_fn(|x| 0.2 * x[0].cos());
        for (a, b) in r.umb_gradient_residual[0].iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((r.dphi_dr + 0.3 / (1.0f64 - 0.09).sqrt()).abs() < 1e-15);
        assert!(matches!(smooth_jet_constraints(&t, 1.2, &eta, &zero, &zero2), Err(Error::LambdaOutOfRange(_))));
    }
}

/// Re-expresses the problem in the geodesic normal form of Omega^2 (drho^2 + k)
/// with Omega = 1 + rho^2 w, w given by its values on the torus points.
pub fn conformal_rescale(p: &CornerProblem, ctx: &Ctx, w: &[f64]) -> Result<CornerProblem> {
    let order = p.k_jet.len().max(p.n + 1) - 1;
    let k = k_tensor_from_problem(p, ctx, order);
    let mut omega = ctx.scalar(order, 1.0);
    omega.insert_add(2, 0, Field::constant_s(w.to_vec()));
    let kh = boundary_normal_form(ctx, &k, &omega)?;
    let dim = p.n - 1;
    let mut q = p.clone();
    q.k_jet = (0..=order)
        .map(|j| {
            let mut f = SField::default();
            for a in 0..dim {
                for b in a..dim {
                    let v = kh[a][b].get(j, 0).map(|f| f.v.clone()).unwrap_or(vec![0.0; ctx.nq()]);
                    f.extend(SField::from_values(&ctx.torus, vec![a, b], &v, 1e-14));
                }
            }
            f
        })
        .collect();
    Ok(q)
}
