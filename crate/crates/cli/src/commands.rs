//! Subcommand implementations. Each returns the text for standard output.

use serde_json::json;
use twistmap_core::ac_ledger::{ac_certificate, check_condition, AcError, AcMode, Condition, MeasureBudget};
use twistmap_core::budget::{format_rational, parse_rational, rat, Budget};
use twistmap_core::constructions::{extend_finite_map, ConstructionError, ExtendOptions};
use twistmap_core::geom_core::{tw_finite, FiniteRelation};
use twistmap_core::map_algebra::verify::{check_f_theta, FThetaReport, VerifyBudget};
use twistmap_core::map_algebra::TwistMap;
use twistmap_core::poset_lab::{insertion_region, InsertionRegion, SearchBox};

use crate::documents::{parse_grid, parse_pairs, parse_point, read_input, ConditionDocument, GridAxis, MapDocument};
use crate::{demos, Cli, CliError, Command, ReportFormat};

pub fn dispatch(cli: &Cli) -> Result<String, CliError> {
    match &cli.command {
        Command::Extend { pairs, theta, nice, out } => {
            let rel = parse_pairs(&read_input(pairs)?)?;
            let doc = cmd_extend(&rel, *theta, *nice)?;
            emit(out.as_deref(), doc.to_json(), || {
                json!({"status": "certified", "certified_twist_deg": doc.certified_twist.map(f64::to_degrees)})
            })
        }
        Command::Verify { map, budget, report, theta } => {
            let doc = MapDocument::load(map)?;
            cmd_verify(&doc, *budget, *report, *theta, cli.seed)
        }
        Command::EvalGrid { map, grid, out } => {
            let doc = MapDocument::load(map)?;
            let f = doc.to_map()?;
            let axes = parse_grid(grid, f.dim)?;
            let csv = cmd_eval_grid(&f, &axes);
            emit(out.as_deref(), csv, || json!({"rows": axes.iter().map(|a| a.count).product::<usize>()}))
        }
        Command::AcCert { map, epsilon, budget, upsilon } => {
            let doc = MapDocument::load(map)?;
            let upsilon = upsilon.as_deref().map(parse_budget).transpose()?;
            let value = cmd_ac_cert(&doc.to_map()?, *epsilon, *budget, upsilon.as_ref(), cli.seed)?;
            Ok(pretty(&value))
        }
        Command::InsertFeas { condition, d, theta, search_box, res, out } => {
            let rel = ConditionDocument::from_json(&read_input(condition)?)?;
            let d = parse_point(d)?;
            let bx = parse_box(search_box)?;
            let region = cmd_insert_feas(&rel, &d, *theta, bx, *res)?;
            if let Some(path) = out {
                write_file(path, &raster_csv(&region))?;
            }
            Ok(pretty(&insertion_verdict(&region)))
        }
        Command::Demo { name, out } => demos::run_demo(name, out.as_deref()),
    }
}

fn pretty(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("JSON values serialise");
    s.push('\n');
    s
}

/// Write `body` to `path` and return a short JSON summary, or return the
/// body itself for standard output.
fn emit(path: Option<&str>, body: String, summary: impl FnOnce() -> serde_json::Value) -> Result<String, CliError> {
    match path {
        Some(p) => {
            write_file(p, &body)?;
            let mut s = summary();
            s["written"] = json!(p);
            Ok(pretty(&s))
        }
        None => Ok(body),
    }
}

pub fn write_file(path: &str, body: &str) -> Result<(), CliError> {
    std::fs::write(path, body).map_err(|e| CliError::Output { path: path.to_string(), message: e.to_string() })
}

fn infeasible(reason: &str, detail: String, report: serde_json::Value) -> CliError {
    CliError::Infeasible { reason: reason.to_string(), detail, report }
}

/// Extend a relation with twist bound `theta_deg`.
pub fn cmd_extend(rel: &FiniteRelation, theta_deg: f64, nice: bool) -> Result<MapDocument, CliError> {
    if !(theta_deg > 0.0 && theta_deg <= 180.0) {
        return Err(CliError::Usage(format!("theta must lie in (0, 180] degrees, got {theta_deg}")));
    }
    if rel.is_empty() {
        return Err(CliError::Schema("pairs file has no rows".into()));
    }
    if !rel.is_bijection() {
        return Err(CliError::Schema("pairs do not form a bijection".into()));
    }
    let theta = theta_deg.to_radians();
    let mut options = ExtendOptions::for_theta(theta);
    options.nice = nice;
    let tw = tw_finite(rel);
    if tw >= options.schedule.theta_hat {
        return Err(infeasible(
            "twist-infeasible",
            format!("tw(σ) = {:.6}° is not below θ̂ = {:.6}°", tw.to_degrees(), options.schedule.theta_hat.to_degrees()),
            json!({
                "status": "infeasible",
                "reason": "twist-infeasible",
                "measured_twist_deg": tw.to_degrees(),
                "theta_hat_deg": options.schedule.theta_hat.to_degrees(),
                "theta_deg": theta_deg,
            }),
        ));
    }
    let ext = match extend_finite_map(rel, theta, &options) {
        Ok(ext) => ext,
        Err(ConstructionError::Precondition(msg)) => return Err(CliError::Schema(msg)),
        Err(e) => {
            return Err(infeasible(
                "construction-infeasible",
                e.to_string(),
                json!({"status": "infeasible", "reason": "construction-infeasible", "detail": e.to_string(), "theta_deg": theta_deg}),
            ))
        }
    };
    if !(ext.certified_twist < theta && ext.max_residual <= 1e-9) {
        return Err(infeasible(
            "uncertified",
            format!("certificate {:.6}° with residual {:.3e}", ext.certified_twist.to_degrees(), ext.max_residual),
            json!({
                "status": "infeasible",
                "reason": "uncertified",
                "certified_twist_deg": ext.certified_twist.to_degrees(),
                "max_residual": ext.max_residual,
            }),
        ));
    }
    let map = ext.map.with_note(format!("plan {}", ext.plan));
    Ok(MapDocument::from_map(&map, Some(theta)))
}

/// Sample counts derived from the `--budget` base count.
pub fn verify_budget(base: usize, seed: u64) -> VerifyBudget {
    let base = base.max(10);
    VerifyBudget {
        seed,
        twist_pairs: 4 * base,
        refine_top: 8,
        refine_iters: 300,
        points: base,
        injectivity_points: 10 * base,
        inverse_points: (base / 4).max(10),
    }
}

pub fn cmd_verify(
    doc: &MapDocument,
    budget: usize,
    format: ReportFormat,
    theta_deg: Option<f64>,
    seed: u64,
) -> Result<String, CliError> {
    let f = doc.to_map()?;
    let theta = match (theta_deg, doc.theta) {
        (Some(t), _) => t.to_radians(),
        (None, Some(t)) => t,
        (None, None) => std::f64::consts::PI,
    };
    let report = check_f_theta(&f, theta, &verify_budget(budget, seed));
    let text = match format {
        ReportFormat::Json => pretty(&serde_json::to_value(&report).expect("reports serialise")),
        ReportFormat::Text => verify_text(&report),
    };
    if report.pass() {
        Ok(text)
    } else {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
        Err(CliError::ChecksFailed { summary: failed.join(", "), report: text })
    }
}

fn verify_text(report: &FThetaReport) -> String {
    let mut s = format!("theta {:.6}°\n", report.theta.to_degrees());
    for c in &report.checks {
        s.push_str(&format!("{:<26} {}  {}\n", c.name, if c.pass { "pass" } else { "FAIL" }, c.detail));
    }
    s.push_str(&format!("verdict {}\n", if report.pass() { "pass" } else { "fail" }));
    s
}

/// CSV rows `x…, f(x)…, det` over the grid, first axis varying fastest.
pub fn cmd_eval_grid(f: &TwistMap, axes: &[GridAxis]) -> String {
    let n = f.dim;
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<String> = (0..n)
        .map(|i| format!("x{i}"))
        .chain((0..n).map(|i| format!("f{i}")))
        .chain(std::iter::once("det".to_string()))
        .collect();
    w.write_record(&header).expect("in-memory write");
    let total: usize = axes.iter().map(|a| a.count).product();
    for mut idx in 0..total {
        let mut x = twistmap_core::geom_core::Vector::zeros(n);
        for (k, axis) in axes.iter().enumerate() {
            x[k] = axis.point(idx % axis.count);
            idx /= axis.count;
        }
        let (y, j) = f.eval_with_jacobian(&x);
        let row: Vec<String> = x
            .iter()
            .chain(y.iter())
            .map(|v| v.to_string())
            .chain(std::iter::once(j.determinant().to_string()))
            .collect();
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("CSV output is UTF-8")
}

pub fn parse_budget(text: &str) -> Result<Budget, CliError> {
    let values = text
        .split(',')
        .map(|v| parse_rational(v.trim()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Usage(format!("budget: {e}")))?;
    Ok(Budget::new(values))
}

/// `(k, δ)` for a map, measured or from a supplied level budget. A supplied
/// budget is first checked against the map's sampled level sets.
pub fn cmd_ac_cert(
    f: &TwistMap,
    epsilon: f64,
    samples: usize,
    upsilon: Option<&Budget>,
    seed: u64,
) -> Result<serde_json::Value, CliError> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(CliError::Usage(format!("epsilon must be positive, got {epsilon}")));
    }
    let mb = MeasureBudget { samples: samples.max(1000), seed, grid: None };
    let (cert, mode) = match upsilon {
        Some(b) => {
            let condition = Condition {
                sigma: FiniteRelation::new(Vec::new()),
                h: f.clone(),
                kappa: rat(1),
                upsilon: b.clone(),
            };
            // Item 3 concerns extending σ, which is empty here, and the twist
            // certificate, which the budget does not depend on.
            let report = check_condition(&condition, std::f64::consts::PI, &mb);
            let broken: Vec<_> =
                report.items.iter().filter(|i| !i.pass && !i.item.starts_with('3')).map(|i| i.item.clone()).collect();
            if !broken.is_empty() {
                return Err(infeasible(
                    "budget-inconsistent",
                    broken.join("; "),
                    json!({"status": "infeasible", "reason": "budget-inconsistent", "failed": broken, "items": report.items}),
                ));
            }
            (ac_certificate(f, epsilon, AcMode::Budget(b)), "budget")
        }
        None => (ac_certificate(f, epsilon, AcMode::Measured(mb)), "measured"),
    };
    match cert {
        Ok(c) => Ok(json!({
            "mode": mode,
            "epsilon": epsilon,
            "k": c.k,
            "delta": c.delta,
            "delta_exact": c.delta_exact.as_ref().map(format_rational),
            "tail_bound": c.tail_bound,
        })),
        Err(AcError::CertificateUnavailable { max_k, best, half_eps }) => Err(infeasible(
            "certificate-unavailable",
            format!("no k up to {max_k} brings the tail below ε/2"),
            json!({"status": "infeasible", "reason": "certificate-unavailable", "max_k": max_k, "best_tail": best, "half_epsilon": half_eps}),
        )),
        Err(e) => Err(CliError::Usage(e.to_string())),
    }
}

pub fn parse_box(text: &str) -> Result<SearchBox, CliError> {
    let v = parse_point(text)?;
    if v.len() != 4 || !(v[0] < v[1] && v[2] < v[3]) {
        return Err(CliError::Usage(format!("box {text:?} must be x_min,x_max,y_min,y_max with min < max")));
    }
    Ok(SearchBox { x_min: v[0], x_max: v[1], y_min: v[2], y_max: v[3] })
}

pub fn cmd_insert_feas(
    rel: &FiniteRelation,
    d: &twistmap_core::geom_core::Vector,
    theta_deg: f64,
    bx: SearchBox,
    res: usize,
) -> Result<InsertionRegion, CliError> {
    if d.len() != 2 {
        return Err(CliError::Usage("the inserted point must be planar".into()));
    }
    insertion_region(rel, d, bx, res.max(1), res.max(1), theta_deg.to_radians()).map_err(|e| CliError::Schema(e.to_string()))
}

pub fn insertion_verdict(r: &InsertionRegion) -> serde_json::Value {
    let constraints: Vec<_> = r
        .constraints
        .iter()
        .map(|c| {
            json!({
                "index": c.index,
                "blocking_angle_deg": c.blocking_angle.map(f64::to_degrees),
                "blocking_point": c.blocking_point,
                "max_angle_deg": c.max_angle.to_degrees(),
            })
        })
        .collect();
    json!({
        "verdict": if r.feasible() { "feasible" } else { "infeasible" },
        "theta_deg": r.theta.to_degrees(),
        "resolution": [r.nx, r.ny],
        "feasible_cells": r.feasible_count,
        "refined_feasible": r.refined_feasible.len(),
        "best_margin_deg": r.best_margin.to_degrees(),
        "constraints": constraints,
    })
}

/// Raster rows `x, y, feasible, worst_margin_deg, violated`.
pub fn raster_csv(r: &InsertionRegion) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["x", "y", "feasible", "worst_margin_deg", "violated"]).expect("in-memory write");
    for c in &r.cells {
        w.write_record([
            c.x.to_string(),
            c.y.to_string(),
            (c.feasible as u8).to_string(),
            c.worst_margin.to_degrees().to_string(),
            c.violated.map_or(String::new(), |v| v.to_string()),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("CSV output is UTF-8")
}
