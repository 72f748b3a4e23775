//! Command-line front end: JSON run configs in, JSON reports out.

use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::einstein::{expand_einstein, obstruction_tensor_on, ExpansionRecord, Obstruction};
use crate::geometry::{conformal_rescale, einstein_residual, CornerProblem, NormalFormMetricJet};
use crate::laplace::expand_eigenfunction;
use crate::oracle::{fd_eigenvalues_extrapolated, green_formula};
use crate::rhoseries::{SField, Series};
use crate::sturm::{at_root, greens_solve, project_obstruction, spectrum_on, GreensSolver, IndicialParams};
use crate::thetagrid::{sin_over_theta, LogThetaSeries, ThetaFn, ThetaGrid};
use crate::verify::{self, einstein_components, rho_points, slope_table, SlopeTable};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_OBSTRUCTED: i32 = 4;

pub const THREADS_ENV: &str = "CORNER_EXPAND_THREADS";

#[derive(Debug, Parser)]
#[command(name = "corner-expand", version, about = "Formal corner expansions for asymptotically hyperbolic spaces")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Report path (stdout when omitted).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Also write the spectrum or slope table as CSV.
    #[arg(long, global = true)]
    pub csv: Option<PathBuf>,
    #[arg(long, global = true)]
    pub grid_n: Option<usize>,
    #[arg(long, global = true)]
    pub fourier_max: Option<usize>,
    #[arg(long, global = true)]
    pub tol: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ProblemArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub s: Option<f64>,
    #[arg(long)]
    pub theta0: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Spectral parameters of the indicial Sturm-Liouville problem.
    Spectrum {
        #[command(flatten)]
        problem: ProblemArgs,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Solve I_{s,nu} u = f for a polynomial right-hand side.
    Greens {
        #[command(flatten)]
        problem: ProblemArgs,
        #[arg(long)]
        nu: Option<f64>,
    },
    /// Formal Laplace eigenfunction expansion.
    LaplaceExpand {
        #[command(flatten)]
        problem: ProblemArgs,
        #[arg(long)]
        order: Option<usize>,
    },
    /// Order-by-order Einstein expansion.
    EinsteinExpand {
        #[command(flatten)]
        problem: ProblemArgs,
        #[arg(long)]
        order: Option<usize>,
        /// Write the full expansion record here.
        #[arg(long)]
        record: Option<PathBuf>,
    },
    /// Obstruction tensor at a right-angled corner.
    Obstruction {
        #[command(flatten)]
        problem: ProblemArgs,
    },
    /// Run acceptance criteria (all by default).
    Verify {
        #[arg(long, value_delimiter = ',')]
        criteria: Vec<usize>,
    },
}

/// One term of F(theta) = sum coef theta^power.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RhsTerm {
    pub power: f64,
    pub coef: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub problem: Option<CornerProblem>,
    #[serde(default)]
    pub count: Option<usize>,
    #[serde(default)]
    pub nu: Option<f64>,
    #[serde(default)]
    pub order: Option<usize>,
    #[serde(default)]
    pub tol: Option<f64>,
    /// Greens right-hand side in v-form, u = sin^{n-s} v.
    #[serde(default)]
    pub rhs: Vec<RhsTerm>,
    /// Conformal factors Omega = 1 + rho^2 w for the covariance summary.
    #[serde(default)]
    pub conformal_w: Vec<SField>,
    #[serde(default)]
    pub slope_points: Option<Vec<f64>>,
    #[serde(default)]
    pub criteria: Vec<usize>,
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.tol {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("tol = {t} must be positive")));
            }
        }
        if let Some(p) = &self.problem {
            p.validate()?;
        }
        if let Some(nu) = self.nu {
            if !nu.is_finite() {
                return Err(Error::Config("nu must be finite".into()));
            }
        }
        for t in &self.rhs {
            if !(t.power >= 0.0 && t.power <= 64.0 && t.coef.is_finite()) {
                return Err(Error::Config(format!("rhs term {t:?}")));
            }
        }
        if let Some(pts) = &self.slope_points {
            if pts.len() < 2 || pts.iter().any(|r| !(*r > 0.0 && *r < 1.0)) {
                return Err(Error::Config("slope_points need >= 2 values in (0, 1)".into()));
            }
        }
        if self.order.is_some_and(|o| o > 32) {
            return Err(Error::Config("order above 32".into()));
        }
        if self.criteria.iter().any(|c| !verify::CRITERIA.contains(c)) {
            return Err(Error::Config(format!("unknown criterion in {:?}", self.criteria)));
        }
        Ok(())
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::InvalidParams(_)
        | Error::LambdaOutOfRange(_)
        | Error::RankMismatch(_)
        | Error::NonTransverse
        | Error::NotHalfPi(_) => EXIT_CONFIG,
        Error::Obstructed { .. } => EXIT_OBSTRUCTED,
        _ => EXIT_NUMERIC,
    }
}

/// Writes floats with 17 significant digits.
struct Digits17;

impl serde_json::ser::Formatter for Digits17 {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, v: f64) -> io::Result<()> {
        write!(w, "{v:.16e}")
    }
}

/// Deterministic JSON: keys sorted (serde_json's default map) and fixed float format.
pub fn to_json(v: &Value) -> String {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Digits17);
    v.serialize(&mut ser).expect("serializing a Value cannot fail");
    buf.push(b'\n');
    String::from_utf8(buf).expect("serde_json writes UTF-8")
}

fn value<T: Serialize>(x: &T) -> Value {
    serde_json::to_value(x).unwrap_or(Value::Null)
}

/// A finished command: report plus exit code (nonzero reports are still written).
pub struct Outcome {
    pub report: Value,
    pub code: i32,
    csv: Option<String>,
}

impl Outcome {
    fn ok(report: Value) -> Self {
        Self { report, code: EXIT_OK, csv: None }
    }
}

struct Knobs {
    cfg: RunConfig,
    tol: Option<f64>,
}

fn problem_from(cfg: &RunConfig, cli: &Cli, args: &ProblemArgs) -> Result<CornerProblem> {
    let mut p = match (&cfg.problem, args.n) {
        (Some(p), _) => p.clone(),
        (None, Some(n)) => CornerProblem::new(n, args.theta0.unwrap_or(std::f64::consts::FRAC_PI_2)),
        (None, None) => return Err(Error::Config("need --n or a problem in --config".into())),
    };
    if let Some(n) = args.n {
        p.n = n;
    }
    if let Some(t) = args.theta0 {
        p.theta0 = t;
        p.lambda = None;
    }
    if args.s.is_some() {
        p.s = args.s;
    }
    if let Some(g) = cli.grid_n {
        p.grid_n = g;
    }
    if let Some(m) = cli.fourier_max {
        p.m_max = m;
    }
    p.validate()?;
    Ok(p)
}

fn knobs(cli: &Cli) -> Result<Knobs> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let tol = cli.tol.or(cfg.tol);
    if let Some(t) = tol {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::Config(format!("tol = {t} must be positive")));
        }
    }
    Ok(Knobs { cfg, tol })
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    let k = knobs(cli)?;
    match &cli.command {
        Command::Spectrum { problem, count } => cmd_spectrum(cli, &k, problem, count.or(k.cfg.count)),
        Command::Greens { problem, nu } => cmd_greens(cli, &k, problem, nu.or(k.cfg.nu)),
        Command::LaplaceExpand { problem, order } => cmd_laplace(cli, &k, problem, order.or(k.cfg.order)),
        Command::EinsteinExpand { problem, order, record } => {
            cmd_einstein(cli, &k, problem, order.or(k.cfg.order), record.as_deref())
        }
        Command::Obstruction { problem } => cmd_obstruction(cli, &k, problem),
        Command::Verify { criteria } => {
            let ids = if !criteria.is_empty() {
                criteria.clone()
            } else if !k.cfg.criteria.is_empty() {
                k.cfg.criteria.clone()
            } else {
                verify::CRITERIA.to_vec()
            };
            cmd_verify(&ids)
        }
    }
}

/// Runs the command and writes its report; returns the process exit code.
pub fn main_with(cli: &Cli) -> i32 {
    match run(cli) {
        Ok(out) => {
            let text = to_json(&out.report);
            if let Err(e) = write_text(cli.out.as_deref(), &text) {
                eprintln!("error: {e}");
                return EXIT_CONFIG;
            }
            if let (Some(path), Some(csv)) = (&cli.csv, &out.csv) {
                if let Err(e) = std::fs::write(path, csv) {
                    eprintln!("error: {}: {e}", path.display());
                    return EXIT_CONFIG;
                }
            }
            out.code
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn write_text(path: Option<&Path>, text: &str) -> io::Result<()> {
    match path {
        Some(p) => std::fs::write(p, text),
        None => io::stdout().write_all(text.as_bytes()),
    }
}

fn csv_string(header: &[&str], rows: &[Vec<f64>]) -> String {
    let mut w = csv::Writer::from_writer(vec![]);
    w.write_record(header).expect("in-memory csv");
    for r in rows {
        w.write_record(r.iter().map(|v| format!("{v:.16e}"))).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is UTF-8")
}

fn slope_csv(t: &SlopeTable) -> String {
    csv_string(&["rho", "envelope"], &t.points.iter().map(|&(r, e)| vec![r, e]).collect::<Vec<_>>())
}

fn cmd_spectrum(cli: &Cli, k: &Knobs, args: &ProblemArgs, count: Option<usize>) -> Result<Outcome> {
    let p = problem_from(&k.cfg, cli, args)?;
    let s = p.s.ok_or_else(|| Error::Config("spectrum needs s".into()))?;
    let count = count.unwrap_or(4);
    if count == 0 || count > 64 {
        return Err(Error::Config(format!("count = {count} outside 1..=64")));
    }
    let grid = ThetaGrid::new(p.theta0, p.grid_n)?;
    let r = spectrum_on(&grid, p.n, s, count)?;
    let fd = fd_eigenvalues_extrapolated(p.n, s, p.theta0, 4000, count);
    let mut rows = vec![];
    let mut table = vec![];
    for (i, e) in r.entries.iter().enumerate() {
        let oracle = fd.get(i).copied().unwrap_or(f64::NAN);
        let dev = (e.lambda - oracle).abs() / oracle.abs().max(1.0);
        rows.push(json!({
            "k": i,
            "nu": e.nu,
            "lambda": e.lambda,
            "char_residual": r.char_residuals[i],
            "oracle_lambda": oracle,
            "oracle_deviation": dev,
        }));
        table.push(vec![i as f64, e.nu, e.lambda, r.char_residuals[i], oracle, dev]);
    }
    let report = json!({
        "command": "spectrum",
        "n": p.n,
        "s": s,
        "theta0": p.theta0,
        "grid_n": p.grid_n,
        "rows": rows,
    });
    let csv = csv_string(&["k", "nu", "lambda", "char_residual", "oracle_lambda", "oracle_deviation"], &table);
    Ok(Outcome { csv: Some(csv), ..Outcome::ok(report) })
}

fn cmd_greens(cli: &Cli, k: &Knobs, args: &ProblemArgs, nu: Option<f64>) -> Result<Outcome> {
    let p = problem_from(&k.cfg, cli, args)?;
    let s = p.s.ok_or_else(|| Error::Config("greens needs s".into()))?;
    let nu = nu.ok_or_else(|| Error::Config("greens needs nu".into()))?;
    let ip = IndicialParams::new(p.n, s, p.theta0, nu)?;
    let terms = if k.cfg.rhs.is_empty() { vec![RhsTerm { power: 1.0, coef: 1.0 }] } else { k.cfg.rhs.clone() };
    let rhs_v = |t: f64| terms.iter().map(|r| r.coef * t.powf(r.power)).sum::<f64>();
    let grid = ThetaGrid::new(p.theta0, p.grid_n)?;
    let a = ip.a();
    let f = LogThetaSeries::smooth(a, ThetaFn::from_fn(&grid, |t| sin_over_theta(t).powf(a) * rhs_v(t)));
    let root = at_root(&ip)?;
    let projection = if root { Some(project_obstruction(&f, &ip)?) } else { None };
    let u = greens_solve(&ip, &f)?;
    let v_at = |t: f64| if t == 0.0 { 0.0 } else { u.eval(t) / t.sin().powf(a) };
    let t0 = p.theta0;
    let samples: Vec<Value> = (0..=16)
        .map(|i| {
            let t = t0 * i as f64 / 16.0;
            json!({ "theta": t, "v": v_at(t) })
        })
        .collect();
    // Robin for u is v'(theta0) = 0; evaluated on the collocation solution
    // so a non-integer theta^beta kernel part is differentiated exactly
    let solver = GreensSolver::for_params(&grid, &ip)?;
    let big_f: Vec<f64> = grid.nodes.iter().map(|&t| rhs_v(t)).collect();
    let sol = solver.solve_levels(&[big_f])?;
    let kq = solver.kernel();
    let vp: Vec<f64> = sol.levels[0].iter().zip(&kq.q).map(|(v, q)| v - sol.q_mult[0] * q).collect();
    let last = grid.len() - 1;
    let robin = grid.deriv(&vp)[last] + sol.q_mult[0] * kq.dq[last];
    let oracle = if root {
        None
    } else {
        let pts = green_formula(p.n, s, t0, nu, rhs_v)?;
        Some(pts.iter().map(|&(t, v)| (v_at(t) - v).abs()).fold(0.0, f64::max))
    };
    let tol = k.tol.unwrap_or(1e-8);
    let report = json!({
        "command": "greens",
        "n": p.n,
        "s": s,
        "nu": nu,
        "theta0": t0,
        "at_root": root,
        "kernel_projection": projection,
        "log_power": u.max_log(),
        "robin_defect": robin.abs(),
        "oracle_deviation": oracle,
        "oracle_within_tol": oracle.map(|d| d < tol),
        "v": samples,
    });
    Ok(Outcome::ok(report))
}

fn coefficient_summary(s: &Series, shift: f64) -> Vec<Value> {
    s.terms
        .iter()
        .map(|(&(j, k), c)| json!({ "rho_power": shift + j as f64, "log_power": k, "max_abs": c.max_abs() }))
        .collect()
}

fn points(k: &Knobs) -> Vec<f64> {
    k.cfg.slope_points.clone().unwrap_or_else(rho_points)
}

fn cmd_laplace(cli: &Cli, k: &Knobs, args: &ProblemArgs, order: Option<usize>) -> Result<Outcome> {
    let p = problem_from(&k.cfg, cli, args)?;
    let order = order.unwrap_or(6);
    let ctx = p.ctx()?;
    let metric = NormalFormMetricJet::initial(&p, &ctx, order + 2);
    let e = expand_eigenfunction(&p, &metric, order)?;
    let r = e.residual(&metric)?;
    let floor = k.tol.unwrap_or(verify::NOISE_FLOOR);
    let t = slope_table(&[&r], e.sigma(), &points(k), floor);
    let expected = e.sigma() + order as f64 + 1.0;
    let report = json!({
        "command": "laplace-expand",
        "n": e.n,
        "s": e.s,
        "order": order,
        "order_achieved": e.order_achieved,
        "log_onset": value(&e.log_onset),
        "root_logs": value(&e.root_logs),
        "residual_by_order": e.residual_by_order,
        "log_bound_excess": e.log_bound_excess(),
        "neumann_defect": e.neumann_defect(&ctx),
        "coefficients": coefficient_summary(&e.v, e.sigma()),
        "slope": { "table": value(&t), "expected": expected, "pass": t.slope >= expected - 0.1 },
    });
    Ok(Outcome { csv: Some(slope_csv(&t)), ..Outcome::ok(report) })
}

fn cmd_einstein(cli: &Cli, k: &Knobs, args: &ProblemArgs, order: Option<usize>, record: Option<&Path>) -> Result<Outcome> {
    let p = problem_from(&k.cfg, cli, args)?;
    let order = order.unwrap_or(p.n - 1);
    if order == 0 {
        return Err(Error::Config("order must be at least 1".into()));
    }
    let e = expand_einstein(&p, order)?;
    let res = einstein_residual(&e.jet)?;
    let floor = k.tol.unwrap_or(verify::NOISE_FLOOR);
    let t = slope_table(&einstein_components(&res), 0.0, &points(k), floor);
    let mut hbar = vec![];
    for a in 0..p.n {
        for b in a..p.n {
            for c in coefficient_summary(&e.jet.hbar[a][b], 0.0) {
                let mut c = c;
                c["component"] = json!([a, b]);
                hbar.push(c);
            }
        }
    }
    let bianchi: Vec<Value> =
        e.reports.iter().map(|r| json!({ "gamma": r.gamma, "bianchi_max": r.bianchi_max })).collect();
    let report = json!({
        "command": "einstein-expand",
        "n": p.n,
        "theta0": p.theta0,
        "order": order,
        "orders": value(&e.reports),
        "chi": coefficient_summary(&e.jet.chi, 0.0),
        "hbar": hbar,
        "bianchi": bianchi,
        "slope": { "table": value(&t), "expected": order as f64 + 1.0, "pass": t.slope >= order as f64 + 0.9 },
    });
    if let Some(path) = record {
        let rec = ExpansionRecord::from_jet(&e.jet);
        let text = to_json(&value(&rec));
        std::fs::write(path, text).map_err(|err| Error::Config(format!("{}: {err}", path.display())))?;
    }
    Ok(Outcome { csv: Some(slope_csv(&t)), ..Outcome::ok(report) })
}

/// max |K + (n/2) tf(k_n)| for a jet whose orders 1..n-1 vanish and k_0 = id.
fn kappa_check(p: &CornerProblem, ctx: &crate::rhoseries::Ctx, ob: &Obstruction) -> Option<f64> {
    let n = p.n;
    let d = n - 1;
    let flat_below = (1..n).all(|j| p.k_jet.get(j).map_or(true, |f| f.entries.iter().all(|e| e.re == 0.0 && e.im == 0.0)));
    let k0 = p.k_values(ctx, 0);
    let identity = (0..d).all(|a| (0..d).all(|b| k0[a][b].iter().all(|v| *v == if a == b { 1.0 } else { 0.0 })));
    if !(flat_below && identity) || p.k_jet.len() <= n {
        return None;
    }
    let kn = p.k_values(ctx, n);
    let mut worst = 0.0f64;
    for q in 0..ctx.nq() {
        let tr = (0..d).map(|a| kn[a][a][q]).sum::<f64>() / d as f64;
        for a in 0..d {
            for b in 0..d {
                let tf = kn[a][b][q] - if a == b { tr } else { 0.0 };
                worst = worst.max((ob.values[a][b][q] + 0.5 * n as f64 * tf).abs());
            }
        }
    }
    Some(worst)
}

fn cmd_obstruction(cli: &Cli, k: &Knobs, args: &ProblemArgs) -> Result<Outcome> {
    let p = problem_from(&k.cfg, cli, args)?;
    let ctx = p.ctx()?;
    let ob = obstruction_tensor_on(&p, &ctx)?;
    let mut covariance = vec![];
    for w in &k.cfg.conformal_w {
        let q = conformal_rescale(&p, &ctx, &w.values(&ctx.torus, &[]))?;
        let other = obstruction_tensor_on(&q, &ctx)?;
        let diff = ob
            .values
            .iter()
            .flatten()
            .zip(other.values.iter().flatten())
            .flat_map(|(x, y)| x.iter().zip(y).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        covariance.push(json!({ "max_deviation": diff, "relative": diff / ob.norm.max(1e-300) }));
    }
    let tol = k.tol.unwrap_or(1e-8);
    let obstructed = ob.norm > tol;
    let report = json!({
        "command": "obstruction",
        "n": p.n,
        "obstructed": obstructed,
        "norm": ob.norm,
        "trace_defect": ob.trace_defect,
        "modes": value(&ob.modes),
        "kappa_check": kappa_check(&p, &ctx, &ob),
        "covariance": covariance,
    });
    Ok(Outcome { report, code: if obstructed { EXIT_OBSTRUCTED } else { EXIT_OK }, csv: None })
}

fn cmd_verify(ids: &[usize]) -> Result<Outcome> {
    if let Some(bad) = ids.iter().find(|i| !verify::CRITERIA.contains(i)) {
        return Err(Error::Config(format!("no criterion {bad}")));
    }
    let reports = verify::run(ids)?;
    for r in &reports {
        eprintln!("{}", r.line());
    }
    let pass = reports.iter().all(|r| r.pass);
    let report = json!({ "command": "verify", "pass": pass, "criteria": value(&reports) });
    Ok(Outcome { report, code: if pass { EXIT_OK } else { EXIT_NUMERIC }, csv: None })
}
