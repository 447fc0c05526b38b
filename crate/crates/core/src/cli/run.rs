//! Subcommand implementations. Each returns the checks it ran and the files
//! it wrote; nothing here touches the process exit status.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use serde_json::json;

use super::config::{ExperimentConfig, Format, SCHEMA_VERSION};
use crate::bsde::{self, BsdeOptions, BsdeProblem, DriverKind};
use crate::error::{LabError, Result};
use crate::market::{
    mean_stderr, mean_variance_tradeoff, simulate_paths, MarketModel, PathEnsemble, StrategyRule, TimeGrid,
};
use crate::pde::{
    convergence_table, feynman_kac_mc, solve, ConvergenceRow, Coordinate, PdeKind, PdeSpec, ProbeEstimate,
};
use crate::utility::UtilitySpec;
use crate::valuation::{
    closed_form, constant_theta_sq, exponential_value, from_bsde, log_value, log_value_at, orthogonal_value,
    power_value_case1_pde, power_value_factor_pde, strategy_from_value, CaseCertificate, ExponentialInputs,
    LogSource, ValueProcess,
};
use crate::verify::{brute_force_value, forward_sde_crosscheck, proportion_grid, scaled_rule, supermartingale_test};

/// Relative tolerance for agreement between value routes.
pub const ROUTE_TOLERANCE: f64 = 0.02;
/// Max-abs tolerance between the PDE grid and the Feynman-Kac estimates.
pub const FK_TOLERANCE: f64 = 5e-3;
/// Central fraction of the domain used for PDE error measurements.
pub const PDE_INTERIOR: f64 = 0.8;
const CURVE_PATHS: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
    /// Serialized as a file name inside the output directory.
    #[serde(serialize_with = "file_name_only")]
    pub report: Option<PathBuf>,
}

fn file_name_only<S: serde::Serializer>(path: &Option<PathBuf>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match path.as_ref().and_then(|p| p.file_name()) {
        Some(name) => s.serialize_some(&name.to_string_lossy()),
        None => s.serialize_none(),
    }
}

#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub checks: Vec<Check>,
    pub artifacts: Vec<PathBuf>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.pass)
    }

    fn check(&mut self, name: impl Into<String>, pass: bool, detail: impl Into<String>, report: Option<&Path>) {
        self.checks.push(Check {
            name: name.into(),
            pass,
            detail: detail.into(),
            report: report.map(Path::to_path_buf),
        });
    }

    fn extend(&mut self, other: Outcome) {
        self.checks.extend(other.checks);
        self.artifacts.extend(other.artifacts);
    }
}

/// Parsed configuration plus the objects built from it.
pub struct Context {
    pub config: ExperimentConfig,
    pub model: MarketModel,
    pub utility: UtilitySpec,
    pub grid: TimeGrid,
    pub out_dir: PathBuf,
}

impl Context {
    pub fn new(config: ExperimentConfig, out_override: Option<PathBuf>) -> Result<Self> {
        let model = config.market()?;
        let utility = config.utility_spec()?;
        let grid = config.time_grid()?;
        let out_dir = out_override.unwrap_or_else(|| PathBuf::from(&config.output.dir));
        Ok(Self {
            config,
            model,
            utility,
            grid,
            out_dir,
        })
    }

    fn horizon(&self) -> f64 {
        self.grid.horizon()
    }

    fn x0(&self) -> f64 {
        self.config.verify.x0
    }

    fn ensemble(&self) -> Result<PathEnsemble> {
        simulate_paths(&self.model, self.grid, self.config.grid.n_paths, self.config.grid.seed)
    }

    fn wants(&self, f: Format) -> bool {
        self.config.output.formats.contains(&f)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn prepare(&self) -> Result<PathBuf> {
        fs::create_dir_all(&self.out_dir).map_err(|e| io_error(&self.out_dir, e))?;
        let echo = self.path("effective_config.toml");
        fs::write(&echo, self.config.to_toml()).map_err(|e| io_error(&echo, e))?;
        Ok(echo)
    }

    fn write_json<T: Serialize>(&self, out: &mut Outcome, name: &str, subcommand: &str, report: &T) -> Result<PathBuf> {
        let path = self.path(name);
        if self.wants(Format::Json) {
            let doc = json!({
                "schema_version": SCHEMA_VERSION,
                "subcommand": subcommand,
                "report": report,
            });
            let text = serde_json::to_string_pretty(&doc).map_err(|e| LabError::Io(std::io::Error::other(e.to_string())))?;
            fs::write(&path, text + "\n").map_err(|e| io_error(&path, e))?;
            out.artifacts.push(path.clone());
        }
        Ok(path)
    }

    fn write_csv(&self, out: &mut Outcome, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        if !self.wants(Format::Csv) {
            return Ok(());
        }
        let path = self.path(name);
        let mut w = csv::Writer::from_path(&path).map_err(|e| LabError::Io(std::io::Error::other(format!("{}: {e}", path.display()))))?;
        w.write_record(header).map_err(|e| LabError::Io(std::io::Error::other(e.to_string())))?;
        for row in rows {
            w.write_record(row).map_err(|e| LabError::Io(std::io::Error::other(e.to_string())))?;
        }
        w.flush().map_err(|e| io_error(&path, e))?;
        out.artifacts.push(path);
        Ok(())
    }

    fn write_txt(&self, out: &mut Outcome, name: &str, text: &str) -> Result<()> {
        if self.wants(Format::Txt) {
            let path = self.path(name);
            fs::write(&path, text).map_err(|e| io_error(&path, e))?;
            out.artifacts.push(path);
        }
        Ok(())
    }

    fn bsde_options(&self) -> BsdeOptions {
        BsdeOptions {
            basis_degree: self.config.solver.basis_degree,
            picard_iters: self.config.solver.picard_iters,
            ..BsdeOptions::default()
        }
    }

    /// Factor models whose price of risk ignores the price and whose factor
    /// is orthogonal to the assets, so the regression functional is exact.
    fn orthogonal_structure(&self) -> bool {
        match &self.config.model {
            super::config::ModelConfig::OuFactor { loading, .. } => *loading == 0.0,
            _ => false,
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> LabError {
    LabError::Io(std::io::Error::other(format!("{}: {e}", path.display())))
}

fn num(v: f64) -> String {
    format!("{v}")
}

pub fn simulate(ctx: &Context) -> Result<Outcome> {
    let mut out = Outcome::default();
    out.artifacts.push(ctx.prepare()?);
    let ens = ctx.ensemble()?;
    let tradeoff = mean_variance_tradeoff(&ens, &ctx.model)?;
    let (d, m) = (ens.asset_dim(), ens.factor_dim());
    let mut header = vec!["t".to_string()];
    for i in 0..d {
        header.push(format!("mean_s{i}"));
        header.push(format!("stderr_s{i}"));
    }
    for j in 0..m {
        header.push(format!("mean_r{j}"));
        header.push(format!("stderr_r{j}"));
    }
    header.push("mean_tradeoff".into());
    header.push("stderr_tradeoff".into());
    let mut rows = Vec::with_capacity(ens.n_knots());
    let mut min_price = f64::INFINITY;
    let mut finite = true;
    for k in 0..ens.n_knots() {
        let mut row = vec![num(ctx.grid.time(k))];
        for i in 0..d {
            let col: Vec<f64> = (0..ens.n_paths()).map(|p| ens.s(p, k)[i]).collect();
            min_price = col.iter().cloned().fold(min_price, f64::min);
            finite &= col.iter().all(|v| v.is_finite());
            let (mu, se) = mean_stderr(&col);
            row.extend([num(mu), num(se)]);
        }
        for j in 0..m {
            let col: Vec<f64> = (0..ens.n_paths()).map(|p| ens.r(p, k)[j]).collect();
            finite &= col.iter().all(|v| v.is_finite());
            let (mu, se) = mean_stderr(&col);
            row.extend([num(mu), num(se)]);
        }
        let (mu, se) = tradeoff.mean_stderr(k);
        row.extend([num(mu), num(se)]);
        rows.push(row);
    }
    let header_ref: Vec<&str> = header.iter().map(String::as_str).collect();
    ctx.write_csv(&mut out, "simulate.csv", &header_ref, &rows)?;
    let report = json!({
        "n_paths": ens.n_paths(),
        "n_steps": ctx.grid.n_steps(),
        "seed": ens.seed(),
        "min_price": min_price,
        "warnings": ens.warnings(),
        "model_conditions": ctx.model.check_conditions(ctx.horizon()),
    });
    let path = ctx.write_json(&mut out, "simulate.json", "simulate", &report)?;
    out.check(
        "simulate.prices_positive",
        finite && min_price > 0.0,
        format!("min price {min_price:.6e}"),
        Some(&path),
    );
    Ok(out)
}

/// A named way of computing the value process.
struct Route {
    name: &'static str,
    value: ValueProcess,
}

/// Every applicable route, best first: closed form, PDE, regression, BSDE.
/// Routes that do not apply to the configuration are skipped; failures of
/// applicable routes are returned as errors.
fn value_routes(ctx: &Context, ens: &PathEnsemble) -> Result<Vec<Route>> {
    let (model, utility, horizon) = (&ctx.model, &ctx.utility, ctx.horizon());
    let solver = &ctx.config.solver;
    let has_factor = model.factor_dim() > 0;
    let coordinate = if has_factor { Coordinate::Factor } else { Coordinate::LogPrice };
    let constant = constant_theta_sq(model, horizon)?.is_some();
    let mut routes = Vec::new();
    let mut push = |name: &'static str, r: Result<ValueProcess>| -> Result<()> {
        match r {
            Ok(value) => {
                routes.push(Route { name, value });
                Ok(())
            }
            Err(LabError::NotApplicable(_)) => Ok(()),
            Err(e) => Err(e),
        }
    };
    if constant {
        push("closed_form", closed_form(utility, model, horizon))?;
    }
    let (ns, nt) = (solver.pde_n_space, solver.pde_n_time);
    match utility {
        UtilitySpec::Log => {
            push("pde", log_value(model, horizon, LogSource::Pde { coordinate, n_space: ns, n_time: nt }))?;
            push(
                "regression",
                log_value(model, horizon, LogSource::Ensemble { ensemble: ens, degree: solver.basis_degree }),
            )?;
        }
        UtilitySpec::Power { .. } => {
            if has_factor {
                if ctx.orthogonal_structure() {
                    push("pde", power_value_factor_pde(utility, model, horizon, ns, nt))?;
                }
            } else {
                push("pde", power_value_case1_pde(utility, model, horizon, ns, nt))?;
            }
        }
        UtilitySpec::Exponential { .. } => {
            if !has_factor {
                push(
                    "pde",
                    exponential_value(
                        utility,
                        model,
                        horizon,
                        ExponentialInputs::Case1 { coordinate, n_space: ns, n_time: nt },
                        solver.claim_bound,
                    ),
                )?;
            }
        }
        UtilitySpec::Quadratic { .. } => {}
    }
    if !matches!(utility, UtilitySpec::Log) && (constant || ctx.orthogonal_structure()) {
        push("regression", orthogonal_value(utility, model, ens, solver.basis_degree))?;
    }
    if !matches!(utility, UtilitySpec::Log) {
        let problem = BsdeProblem::for_utility(utility, model, ens)?;
        let solution = bsde::solve(&problem, &ctx.bsde_options())?;
        push("bsde", from_bsde(utility, model, &solution))?;
    }
    Ok(routes)
}

#[derive(Debug, Serialize)]
struct RouteReport {
    route: &'static str,
    v0: f64,
    factor0: f64,
    holdings0: Vec<f64>,
    certificate: Option<CaseCertificate>,
    diagnostics: Vec<String>,
}

pub fn value(ctx: &Context) -> Result<Outcome> {
    let mut out = Outcome::default();
    out.artifacts.push(ctx.prepare()?);
    let ens = ctx.ensemble()?;
    let routes = value_routes(ctx, &ens)?;
    let x0 = ctx.x0();
    let (s0, r0) = (ctx.model.s0().to_vec(), ctx.model.r0().to_vec());
    let n_curve = ens.n_paths().min(CURVE_PATHS);
    let stride = (ctx.grid.n_steps() / 50).max(1);
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for route in &routes {
        let vp = &route.value;
        for k in (0..ens.n_knots()).step_by(stride) {
            let t = ctx.grid.time(k);
            let mut vs = Vec::with_capacity(n_curve);
            let mut hs = Vec::with_capacity(n_curve);
            for p in 0..n_curve {
                vs.push(vp.value(t, x0, ens.s(p, k), ens.r(p, k))?);
                hs.push(vp.optimal_holdings(t, x0, ens.s(p, k), ens.r(p, k))?[0]);
            }
            let (mv, sv) = mean_stderr(&vs);
            let (mh, sh) = mean_stderr(&hs);
            rows.push(vec![route.name.to_string(), num(t), num(mv), num(sv), num(mh), num(sh)]);
        }
        reports.push(RouteReport {
            route: route.name,
            v0: vp.value(0.0, x0, &s0, &r0)?,
            factor0: vp.factor(0.0, &s0, &r0)?,
            holdings0: vp.optimal_holdings(0.0, x0, &s0, &r0)?,
            certificate: vp.certificate.clone(),
            diagnostics: vp.diagnostics.clone(),
        });
    }
    ctx.write_csv(
        &mut out,
        "value_curve.csv",
        &["route", "t", "mean_v", "stderr_v", "mean_holding", "stderr_holding"],
        &rows,
    )?;
    let log_report = match (&ctx.utility, routes.first()) {
        (UtilitySpec::Log, Some(r)) => Some(log_value_at(&r.value, 0.0, x0, &s0, &r0)?),
        _ => None,
    };
    let path = ctx.write_json(
        &mut out,
        "value.json",
        "value",
        &json!({ "x0": x0, "routes": reports, "log_sign_readings": log_report }),
    )?;
    out.check("value.routes_available", !reports.is_empty(), format!("{} routes", reports.len()), Some(&path));
    for r in &reports {
        let ok = r.v0.is_finite() && (matches!(ctx.utility, UtilitySpec::Log) || r.factor0 > 0.0);
        out.check(format!("value.{}.finite_positive", r.route), ok, format!("V0 = {:.6}, factor {:.6}", r.v0, r.factor0), Some(&path));
    }
    if let Some(first) = reports.first() {
        for r in reports.iter().skip(1) {
            let rel = (r.v0 - first.v0).abs() / first.v0.abs().max(1e-12);
            out.check(
                format!("value.{}_vs_{}", r.route, first.route),
                rel <= ROUTE_TOLERANCE,
                format!("relative difference {rel:.3e} (tolerance {ROUTE_TOLERANCE})"),
                Some(&path),
            );
        }
    }
    Ok(out)
}

pub fn bsde(ctx: &Context) -> Result<Outcome> {
    let mut out = Outcome::default();
    out.artifacts.push(ctx.prepare()?);
    let kind = match DriverKind::for_utility(&ctx.utility) {
        Ok(k) => k,
        Err(LabError::NotApplicable(msg)) => {
            ctx.write_json(&mut out, "bsde.json", "bsde", &json!({ "status": "not_applicable", "reason": msg }))?;
            return Ok(out);
        }
        Err(e) => return Err(e),
    };
    let ens = ctx.ensemble()?;
    let problem = BsdeProblem::for_utility(&ctx.utility, &ctx.model, &ens)?;
    let solution = bsde::solve(&problem, &ctx.bsde_options())?;
    let rows: Vec<Vec<String>> = solution
        .value_curve
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let res = solution.residual_orthogonal.get(k).copied().unwrap_or(0.0);
            vec![num(c.t), num(c.mean), num(c.stderr), num(res)]
        })
        .collect();
    ctx.write_csv(&mut out, "bsde_curve.csv", &["t", "mean_v", "stderr_v", "residual_orthogonal"], &rows)?;
    let oracle = match closed_form(&ctx.utility, &ctx.model, ctx.horizon()) {
        Ok(vp) => Some(vp.factor(0.0, ctx.model.s0(), ctx.model.r0())?),
        Err(LabError::NotApplicable(_)) => None,
        Err(e) => return Err(e),
    };
    let v0 = solution.v0();
    let path = ctx.write_json(
        &mut out,
        "bsde.json",
        "bsde",
        &json!({
            "status": "solved",
            "kind": kind,
            "options": ctx.bsde_options(),
            "v0": v0,
            "closed_form": oracle,
            "integrand_rms": bsde::integrand_rms(&solution),
            "diagnostics": solution.diagnostics,
        }),
    )?;
    out.check(
        "bsde.positive",
        solution.diagnostics.min_v > 0.0,
        format!("min V {:.6e}", solution.diagnostics.min_v),
        Some(&path),
    );
    if let Some(exact) = oracle {
        let rel = (v0.mean - exact).abs() / exact;
        out.check("bsde.closed_form", rel <= 0.01, format!("V0 {:.6} vs {exact:.6}, relative {rel:.3e}", v0.mean), Some(&path));
    }
    Ok(out)
}

/// The one-dimensional equation matching the configured utility, or `None`
/// when the family has no linear reduction.
fn primary_pde(ctx: &Context, n_space: usize, n_time: usize) -> Result<Option<PdeSpec>> {
    let model = &ctx.model;
    let horizon = ctx.horizon();
    let coordinate = if model.factor_dim() > 0 { Coordinate::Factor } else { Coordinate::LogPrice };
    let spec = match &ctx.utility {
        UtilitySpec::Power { .. } => {
            let q = ctx.utility.conjugate_exponent().expect("power");
            let kind = match coordinate {
                Coordinate::LogPrice => PdeKind::AlmostCompletePower { q },
                Coordinate::Factor => PdeKind::FactorPower { q },
            };
            PdeSpec::from_model(kind, coordinate, model, horizon, n_space, n_time)?
        }
        UtilitySpec::Log => PdeSpec::from_model(PdeKind::LogLinear, coordinate, model, horizon, n_space, n_time)?,
        UtilitySpec::Exponential { gamma, claim } => {
            let (gamma, claim) = (*gamma, claim.clone());
            let (s0, r0) = (model.s0().to_vec(), model.r0().to_vec());
            let spec = PdeSpec::from_model(PdeKind::ExponentialMinimal { gamma }, coordinate, model, horizon, n_space, n_time)?;
            spec.with_terminal(Arc::new(move |x: f64| {
                let (mut s, mut r) = (s0.clone(), r0.clone());
                match coordinate {
                    Coordinate::LogPrice => s[0] = x.exp(),
                    Coordinate::Factor => r[0] = x,
                }
                gamma * claim.eval(&s, &r)
            }))
        }
        UtilitySpec::Quadratic { .. } => return Ok(None),
    };
    Ok(Some(spec))
}

#[derive(Debug, Serialize)]
struct FkRow {
    probe: ProbeEstimate,
    pde: f64,
    abs_error: f64,
}

pub fn pde(ctx: &Context) -> Result<Outcome> {
    let mut out = Outcome::default();
    out.artifacts.push(ctx.prepare()?);
    let solver = &ctx.config.solver;
    let Some(spec) = primary_pde(ctx, solver.pde_n_space, solver.pde_n_time)? else {
        ctx.write_json(
            &mut out,
            "pde.json",
            "pde",
            &json!({ "status": "not_applicable", "reason": "no linear reduction for this utility" }),
        )?;
        return Ok(out);
    };
    let grid = solve(&spec)?;
    let rows: Vec<Vec<String>> = grid.triples().map(|(t, x, v)| vec![num(t), num(x), num(v)]).collect();
    ctx.write_csv(&mut out, "pde_grid.csv", &["t", "x", "value"], &rows)?;

    // analytic solution for constant coefficients and constant unit terminal data
    let constant = constant_theta_sq(&ctx.model, ctx.horizon())?.is_some();
    let mut table: Option<Vec<ConvergenceRow>> = None;
    if constant && spec.kind.is_multiplicative() {
        let coarse = primary_pde(ctx, solver.convergence_n_space, solver.convergence_n_time)?.expect("same kind");
        let k = (coarse.local)(0.0, coarse.x0).potential;
        let horizon = coarse.horizon;
        let rows = convergence_table(&coarse, |t, _x| (k * (horizon - t)).exp(), 0.5, solver.convergence_levels)?;
        table = Some(rows);
    }
    if let Some(rows) = &table {
        let csv_rows: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                vec![
                    r.n_space.to_string(),
                    r.n_time.to_string(),
                    num(r.max_error),
                    r.ratio.map(num).unwrap_or_default(),
                ]
            })
            .collect();
        ctx.write_csv(&mut out, "pde_convergence.csv", &["n_space", "n_time", "max_error", "ratio"], &csv_rows)?;
    }

    let mut fk: Vec<FkRow> = Vec::new();
    if solver.fk_paths > 0 && spec.kind.is_linear() {
        let width = spec.hi - spec.lo;
        let (a, b) = (spec.lo + 0.5 * (1.0 - PDE_INTERIOR) * width, spec.hi - 0.5 * (1.0 - PDE_INTERIOR) * width);
        let n = solver.fk_probes;
        let probes: Vec<(f64, f64)> = (0..n)
            .map(|i| (0.0, if n == 1 { spec.x0 } else { a + (b - a) * i as f64 / (n - 1) as f64 }))
            .collect();
        for probe in feynman_kac_mc(&spec, &probes, solver.fk_paths, ctx.config.grid.seed)? {
            let v = grid.eval(probe.t, probe.x)?;
            fk.push(FkRow {
                probe,
                pde: v,
                abs_error: (v - probe.mean).abs(),
            });
        }
        let rows: Vec<Vec<String>> = fk
            .iter()
            .map(|r| vec![num(r.probe.t), num(r.probe.x), num(r.pde), num(r.probe.mean), num(r.probe.stderr)])
            .collect();
        ctx.write_csv(&mut out, "pde_feynman_kac.csv", &["t", "x", "pde", "mc_mean", "mc_stderr"], &rows)?;
    }

    let v0 = grid.eval(0.0, spec.x0)?;
    let path = ctx.write_json(
        &mut out,
        "pde.json",
        "pde",
        &json!({
            "status": "solved",
            "kind": spec.kind,
            "coordinate": spec.coordinate,
            "domain": [spec.lo, spec.hi],
            "n_space": spec.n_space,
            "n_time": spec.n_time,
            "x0": spec.x0,
            "value_at_x0": v0,
            "grid_min": grid.min(),
            "warnings": spec.warnings,
            "convergence": table,
            "feynman_kac": fk,
        }),
    )?;
    if spec.kind.is_multiplicative() {
        out.check("pde.positive", grid.min() > 0.0, format!("grid minimum {:.6e}", grid.min()), Some(&path));
    }
    if let Some(rows) = &table {
        for r in rows.iter().filter(|r| r.ratio.is_some()) {
            let ratio = r.ratio.expect("filtered");
            out.check(
                format!("pde.convergence_ratio_{}x{}", r.n_space, r.n_time),
                (3.0..=5.0).contains(&ratio),
                format!("ratio {ratio:.3}"),
                Some(&path),
            );
        }
    }
    if !fk.is_empty() {
        let worst = fk.iter().map(|r| r.abs_error).fold(0.0, f64::max);
        out.check(
            "pde.feynman_kac",
            worst <= FK_TOLERANCE,
            format!("max abs difference {worst:.3e} (tolerance {FK_TOLERANCE})"),
            Some(&path),
        );
    }
    Ok(out)
}

/// Proportion of wealth the optimal rule holds when it is a constant
/// proportion, which happens for power and log utility with constant
/// coefficients.
fn merton_fraction(ctx: &Context) -> Result<Option<f64>> {
    if ctx.model.asset_dim() != 1 || constant_theta_sq(&ctx.model, ctx.horizon())?.is_none() {
        return Ok(None);
    }
    let q = match &ctx.utility {
        UtilitySpec::Log => 0.0,
        UtilitySpec::Power { .. } => ctx.utility.conjugate_exponent().expect("power"),
        _ => return Ok(None),
    };
    let (s0, r0) = (ctx.model.s0(), ctx.model.r0());
    let c = ctx.model.coefficients();
    let mu = c.drift(0.0, s0, r0)[0];
    let sigma = c.asset_vol(0.0, s0, r0)[(0, 0)];
    if sigma != 0.0 && c.asset_vol(0.0, &[2.0 * s0[0]], r0)[(0, 0)] == sigma {
        Ok(Some((1.0 - q) * mu / (sigma * sigma)))
    } else {
        Ok(None)
    }
}

pub fn verify(ctx: &Context) -> Result<Outcome> {
    let mut out = Outcome::default();
    out.artifacts.push(ctx.prepare()?);
    let v = &ctx.config.verify;
    let x0 = ctx.x0();
    let ens = ctx.ensemble()?;
    let routes = value_routes(ctx, &ens)?;
    let Some(route) = routes.into_iter().next() else {
        return Err(LabError::NotApplicable("no value route applies to this configuration".into()));
    };
    let value = Arc::new(route.value);
    let mut optimal: StrategyRule = strategy_from_value(value.clone());
    if ctx.utility.positive_domain() {
        optimal = optimal.with_default_floor(x0);
    }
    let optimal_report = supermartingale_test(&value, &optimal, &ens, x0, &v.test_times)?;
    let mut perturbed = Vec::with_capacity(v.perturbations.len());
    for &scale in &v.perturbations {
        let report = supermartingale_test(&value, &scaled_rule(&optimal, scale), &ens, x0, &v.test_times)?;
        perturbed.push((scale, report));
    }
    let grid = proportion_grid(v.proportion_lo, v.proportion_hi, v.proportion_step)?;
    let brute = brute_force_value(&ctx.model, &ctx.utility, &grid, &v.rebalance_dates, &ens, x0)?;
    let cross = forward_sde_crosscheck(value.clone(), &ens, x0, v.allowance)?;
    let fraction = merton_fraction(ctx)?;
    let v0 = optimal_report.v0;
    let in_family = fraction.is_some_and(|f| f >= v.proportion_lo && f <= v.proportion_hi);

    let json_path = ctx.path("verify.json");
    let txt_path = ctx.path("verify.txt");
    let report_path = if ctx.wants(Format::Json) { &json_path } else { &txt_path };
    out.check(
        "verify.optimal_martingale",
        optimal_report.martingale_ok(),
        format!("route {}, z-scores {:?}", route.name, optimal_report.checks.iter().map(|c| c.z).collect::<Vec<_>>()),
        Some(report_path),
    );
    out.check(
        "verify.optimal_no_clipping",
        optimal_report.clip_count == 0,
        format!("{} clipping events", optimal_report.clip_count),
        Some(report_path),
    );
    for (scale, report) in &perturbed {
        out.check(
            format!("verify.perturbed_{scale}"),
            report.supermartingale_ok(),
            format!("z-scores {:?}", report.checks.iter().map(|c| c.z).collect::<Vec<_>>()),
            Some(report_path),
        );
    }
    let upper = v0 + 2.0 * brute.best_stderr;
    out.check(
        "verify.brute_force_upper",
        brute.best_value <= upper,
        format!("best {:.6} vs bound {upper:.6}", brute.best_value),
        Some(report_path),
    );
    if in_family {
        let lower = v0 - 2.0 * brute.best_stderr - 0.01 * v0.abs();
        out.check(
            "verify.brute_force_lower",
            brute.best_value >= lower,
            format!("best {:.6} vs bound {lower:.6}", brute.best_value),
            Some(report_path),
        );
    }
    out.check(
        "verify.forward_crosscheck",
        cross.pass,
        cross.reason.clone().unwrap_or_else(|| format!("|{:.6} - {:.6}| within {:.3e}", cross.mean, cross.v0, cross.tolerance)),
        Some(report_path),
    );

    let checks = out.checks.clone();
    let perturbed_json: Vec<_> = perturbed.iter().map(|(s, r)| json!({ "scale": s, "report": r })).collect();
    let best = brute.best();
    ctx.write_json(
        &mut out,
        "verify.json",
        "verify",
        &json!({
            "route": route.name,
            "x0": x0,
            "v0": v0,
            "optimal": optimal_report,
            "perturbed": perturbed_json,
            "merton_fraction": fraction,
            "brute_force": {
                "proportion_grid": brute.proportion_grid,
                "rebalance_dates": brute.rebalance_dates,
                "argmax": best.proportions,
                "best_value": brute.best_value,
                "best_stderr": brute.best_stderr,
                "boundary": brute.boundary,
                "candidates": brute.candidates,
            },
            "forward_crosscheck": cross,
            "checks": checks,
        }),
    )?;

    let mut txt = String::new();
    txt.push_str(&format!("route {}  x0 {x0}  V0 {v0:.6}\n\n", route.name));
    txt.push_str(&format!("{:<10} {:>6} {:>12} {:>10} {:>8}  {}\n", "rule", "t", "mean", "stderr", "z", "verdict"));
    let mut table = |label: String, r: &crate::verify::OptimalityReport| {
        for c in &r.checks {
            let verdict = if c.martingale_ok {
                "martingale_ok"
            } else if c.supermartingale_ok {
                "supermartingale_ok"
            } else {
                "violation"
            };
            txt.push_str(&format!(
                "{:<10} {:>6.3} {:>12.6} {:>10.3e} {:>8.3}  {}\n",
                label, c.t, c.mean, c.stderr, c.z, verdict
            ));
        }
    };
    table("optimal".into(), &optimal_report);
    for (s, r) in &perturbed {
        table(format!("x{s}"), r);
    }
    txt.push_str(&format!(
        "\nbrute force: argmax {:?}  best {:.6} +- {:.2e}{}\n",
        best.proportions,
        brute.best_value,
        brute.best_stderr,
        if brute.boundary { "  (boundary)" } else { "" }
    ));
    txt.push_str(&format!(
        "forward cross-check: mean {:.6} +- {:.2e} vs {:.6}  {}\n\n",
        cross.mean,
        cross.stderr,
        cross.v0,
        if cross.pass { "pass" } else { "FAIL" }
    ));
    for c in &out.checks {
        txt.push_str(&format!("{:<4} {:<32} {}\n", if c.pass { "ok" } else { "FAIL" }, c.name, c.detail));
    }
    ctx.write_txt(&mut out, "verify.txt", &txt)?;
    Ok(out)
}

pub fn all(ctx: &Context) -> Result<Outcome> {
    let mut out = Outcome::default();
    out.extend(simulate(ctx)?);
    out.extend(value(ctx)?);
    out.extend(bsde(ctx)?);
    out.extend(pde(ctx)?);
    out.extend(verify(ctx)?);
    out.artifacts.sort();
    out.artifacts.dedup();
    let checks = out.checks.clone();
    ctx.write_json(
        &mut out,
        "summary.json",
        "all",
        &json!({ "pass": checks.iter().all(|c| c.pass), "checks": checks }),
    )?;
    Ok(out)
}
