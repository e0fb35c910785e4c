//! Worked demonstrations printed as tables, with optional file output.

use std::path::Path;

use serde_json::json;
use twistmap_core::budget::{format_rational, rat, ratio, Budget, Rational};
use twistmap_core::line_exact::{check_1d_condition, delta_n_witness, merge_1d, Knot, LineCondition};
use twistmap_core::poset_lab::{eighteen_degree_example, SearchBox};

use crate::commands::{cmd_insert_feas, insertion_verdict, raster_csv, write_file};
use crate::CliError;

pub fn run_demo(name: &str, out: Option<&str>) -> Result<String, CliError> {
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Output { path: dir.to_string(), message: e.to_string() })?;
    }
    let file = |name: &str| out.map(|d| Path::new(d).join(name).to_string_lossy().into_owned());
    match name {
        "noac" => noac(file("noac.csv")),
        "merge1d" => merge1d(file("merge1d.json")),
        "eighteen" => eighteen(file("eighteen_raster.csv"), file("eighteen.json")),
        other => Err(CliError::Usage(format!("unknown demo {other:?}; choose noac, merge1d or eighteen"))),
    }
}

/// One row of the absolute-continuity failure table.
#[derive(Debug, Clone, PartialEq)]
pub struct NoacRow {
    pub n: u32,
    pub steep_domain: Rational,
    pub steep_domain_bound: Rational,
    pub steep_image: Rational,
    pub steep_image_bound: Rational,
    pub holds: bool,
}

/// Witnesses for `n = 1..=8` with their exact measures.
pub fn noac_table() -> Vec<NoacRow> {
    (1..=8)
        .map(|n| {
            let w = delta_n_witness(n);
            let scale = ratio(1, 1i64 << n);
            NoacRow {
                n,
                steep_domain_bound: &scale * &w.range_span,
                steep_image_bound: &w.range_span - &scale * &w.domain_span,
                holds: w.steep_bound_holds && w.image_bound_holds && w.in_delta_n,
                steep_domain: w.steep_domain,
                steep_image: w.steep_image,
            }
        })
        .collect()
}

fn noac(csv_path: Option<String>) -> Result<String, CliError> {
    let rows = noac_table();
    let mut text = String::from("n  steep_domain  bound 2^-n(e1-e0)  steep_image  bound (e1-e0)-2^-n(d1-d0)  holds\n");
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["n", "steep_domain", "steep_domain_bound", "steep_image", "steep_image_bound", "holds"])
        .expect("in-memory write");
    for r in &rows {
        let cells = [
            r.n.to_string(),
            format_rational(&r.steep_domain),
            format_rational(&r.steep_domain_bound),
            format_rational(&r.steep_image),
            format_rational(&r.steep_image_bound),
            r.holds.to_string(),
        ];
        text.push_str(&format!(
            "{:<2} {:<13} {:<18} {:<12} {:<27} {}\n",
            cells[0], cells[1], cells[2], cells[3], cells[4], cells[5]
        ));
        w.write_record(&cells).expect("in-memory write");
    }
    if let Some(path) = csv_path {
        write_file(&path, &String::from_utf8(w.into_inner().expect("in-memory write")).expect("UTF-8"))?;
    }
    Ok(text)
}

/// The worked merge: two one-pair conditions whose crossing slope is 4.
pub fn merge1d_example() -> (LineCondition, LineCondition, Rational, usize) {
    let budget = Budget::new(vec![rat(1), rat(1), rat(1)]);
    let pa = LineCondition::new(vec![Knot::new(rat(0), rat(0))], budget.clone());
    let pb = LineCondition::new(vec![Knot::new(ratio(1, 100), ratio(4, 100))], budget);
    (pa, pb, ratio(1, 5), 1)
}

fn merge1d(json_path: Option<String>) -> Result<String, CliError> {
    let (pa, pb, eps, t) = merge1d_example();
    let outcome = merge_1d(&pa, &pb, &eps, t).map_err(|e| CliError::Usage(e.to_string()))?;
    let diagnostic = check_1d_condition(&outcome.merged);
    let mut text = format!(
        "merge of two one-pair conditions, ε = {}, t = {t}; m = {} → m̂ = {}\n",
        format_rational(&eps),
        pa.m(),
        outcome.m_hat
    );
    text.push_str("ℓ  c_ℓ  formula c_ℓε/(2tℓ)  Υ̂(ℓ)\n");
    let mut rows = Vec::new();
    for &(ell, c) in &outcome.counts {
        let formula = rat(c as i64) * &eps / rat(2 * (t * ell) as i64);
        let value = outcome.merged.budget.values[ell].clone();
        text.push_str(&format!("{ell:<2} {c:<4} {:<19} {}\n", format_rational(&formula), format_rational(&value)));
        rows.push(json!({"level": ell, "count": c, "formula": format_rational(&formula), "value": format_rational(&value)}));
    }
    text.push_str(&format!(
        "added mass {} <= ε: {}; merged condition valid: {}\n",
        format_rational(&outcome.added_mass),
        outcome.added_mass <= eps,
        diagnostic.pass()
    ));
    if let Some(path) = json_path {
        let doc = json!({
            "epsilon": format_rational(&eps),
            "t": t,
            "m_hat": outcome.m_hat,
            "levels": rows,
            "added_mass": format_rational(&outcome.added_mass),
            "merged": outcome.merged,
            "valid": diagnostic.pass(),
        });
        write_file(&path, &(serde_json::to_string_pretty(&doc).expect("JSON") + "\n"))?;
    }
    Ok(text)
}

fn eighteen(raster_path: Option<String>, json_path: Option<String>) -> Result<String, CliError> {
    let (p, d) = eighteen_degree_example();
    let bx = SearchBox { x_min: -20.0, x_max: 20.0, y_min: -20.0, y_max: 20.0 };
    let mut text = String::from("θ     verdict     blocking angles by constraint (degrees)\n");
    let mut verdicts = Vec::new();
    for theta in [18.0, 45.0] {
        let region = cmd_insert_feas(&p, &d, theta, bx, 512)?;
        let angles: Vec<String> = region
            .constraints
            .iter()
            .map(|c| c.blocking_angle.map_or("-".to_string(), |a| format!("{:.3}", a.to_degrees())))
            .collect();
        let verdict = if region.feasible() { "feasible" } else { "infeasible" };
        text.push_str(&format!("{theta:<5} {verdict:<11} {}\n", angles.join("  ")));
        if theta == 18.0 {
            if let Some(path) = &raster_path {
                write_file(path, &raster_csv(&region))?;
            }
        }
        verdicts.push(insertion_verdict(&region));
    }
    if let Some(path) = json_path {
        write_file(&path, &(serde_json::to_string_pretty(&verdicts).expect("JSON") + "\n"))?;
    }
    Ok(text)
}
