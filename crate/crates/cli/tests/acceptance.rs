//! Acceptance suite: one pass/fail line per criterion, with runtimes.
//! Exits non-zero when any criterion fails.

use std::f64::consts::{FRAC_PI_2, PI};
use std::time::Instant;

use num_traits::{One, Signed, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use twistmap_cli::commands::cmd_insert_feas;
use twistmap_core::ac_ledger::{ac_certificate, auto_condition, union_and_image_measure, AcMode, BallUnion, MeasureBudget};
use twistmap_core::budget::{rat, ratio, Budget, Rational};
use twistmap_core::constructions::{
    extend_finite_map, localize_translation, near_similarity_relation, radial_morph, straight_path, ExtendOptions,
};
use twistmap_core::geom_core::{angle, ball_angle_bound, plane_rotation, tw_finite, FiniteRelation, Matrix, Vector};
use twistmap_core::line_exact::{
    check_1d_condition, delta_n_witness, exact_sandwich, merge_1d, pl_extend, pl_measure_z, Knot, LineCondition, PLMap,
};
use twistmap_core::map_algebra::verify::{
    check_f_theta, distance_d, distance_delta, estimate_twist, finite_difference_jacobian, PointSampler, VerifyBudget,
};
use twistmap_core::map_algebra::{MatrixPath, RotateExpand, Stage, TwistMap};
use twistmap_core::poset_lab::{eighteen_degree_example, SearchBox};
use twistmap_core::sampling::{ball_volume, uniform_in_ball, unit_vector};
use twistmap_core::scalar_shapes::{ExpansionProfile, SlowRamp};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// A constructed interpolant with the relation it extends.
struct Built {
    sigma: FiniteRelation,
    map: TwistMap,
}

const THETA_DEG: f64 = 120.0;

/// An interpolant with its residual, check verdict, minimum det and sample count.
type Checked = (TwistMap, f64, bool, f64, usize);

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn c1_eighteen() -> Outcome {
    let (p, d) = eighteen_degree_example();
    let bx = SearchBox { x_min: -20.0, x_max: 20.0, y_min: -20.0, y_max: 20.0 };
    let start = Instant::now();
    let region = match cmd_insert_feas(&p, &d, 18.0, bx, 512) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("insertion query failed: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let blocking = region.constraints[2].blocking_angle.map(f64::to_degrees);
    let angle_ok = blocking.is_some_and(|b| (b - 39.4).abs() <= 0.2);
    outcome(
        !region.feasible() && angle_ok && secs < 5.0,
        format!(
            "verdict {}, third blocking angle {:.3}° (target 39.4 ± 0.2), {secs:.2} s at 512²",
            if region.feasible() { "feasible" } else { "infeasible" },
            blocking.unwrap_or(f64::NAN)
        ),
    )
}

fn c2_slow_ramp() -> Outcome {
    let start = Instant::now();
    let mut r = rng(2);
    let mut worst_excess = f64::NEG_INFINITY;
    let mut worst_endpoint: f64 = 0.0;
    for _ in 0..20 {
        let zeta = r.random_range(0.15..2.0);
        let p = 10f64.powf(r.random_range(-3.0..1.0));
        let q = p * SlowRamp::min_ratio(zeta) * r.random_range(1.01..20.0);
        let ramp = match SlowRamp::new(p, q, zeta) {
            Ok(x) => x,
            Err(e) => return outcome(false, format!("ramp ({p}, {q}, {zeta}) rejected: {e}")),
        };
        worst_endpoint = worst_endpoint.max(ramp.value(p).abs()).max((ramp.value(q) - 1.0).abs());
        let stream: u64 = r.random_range(0..1u64 << 40);
        let excess = (0..100_000u64)
            .into_par_iter()
            .map(|i| {
                let mut rr = ChaCha8Rng::seed_from_u64(i);
                rr.set_stream(stream);
                let x = (r_log_uniform(&mut rr, p / 4.0, q * 4.0)).max(0.0);
                let sigma = 10f64.powf(rr.random_range(-8.0..1.5));
                ramp.value((1.0 + sigma) * x) - ramp.value(x) - zeta * sigma
            })
            .reduce(|| f64::NEG_INFINITY, f64::max);
        worst_excess = worst_excess.max(excess);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_excess <= 1e-6 && worst_endpoint <= 1e-12 && secs < 30.0,
        format!("max φ((1+σ)x) − φ(x) − ζσ = {worst_excess:.3e}, endpoint error {worst_endpoint:.1e}, {secs:.1} s"),
    )
}

fn r_log_uniform<R: Rng>(r: &mut R, lo: f64, hi: f64) -> f64 {
    (r.random_range(lo.ln()..hi.ln())).exp()
}

fn c3_interpolation(built: &mut Vec<Built>) -> Outcome {
    let start = Instant::now();
    let theta = THETA_DEG.to_radians();
    let options = ExtendOptions::for_theta(theta);
    let mut r = rng(3);
    let mut sigmas = Vec::new();
    while sigmas.len() < 100 {
        let t = r.random_range(1..=5);
        let rot = r.random_range(0.0..1.2);
        let sigma = near_similarity_relation(&mut r, 2, t, rot);
        if tw_finite(&sigma) < options.schedule.theta_hat {
            sigmas.push(sigma);
        }
    }
    let results: Vec<(FiniteRelation, Result<Checked, String>)> = sigmas
        .into_par_iter()
        .enumerate()
        .map(|(i, sigma)| {
            let res = extend_finite_map(&sigma, theta, &options).map_err(|e| e.to_string()).map(|ext| {
                let report = check_f_theta(&ext.map, theta, &VerifyBudget::light().with_seed(i as u64));
                let sampler = PointSampler::for_domain(&[&ext.map]);
                let pts = if sampler.is_empty() { Vec::new() } else { sampler.batch(1000 + i as u64, 0, 10_000) };
                let det_min = pts.iter().map(|x| ext.map.jacobian(x).determinant()).fold(f64::INFINITY, f64::min);
                let residual = sigma.pairs.iter().map(|(d, e)| (ext.map.eval(d) - e).norm()).fold(0.0, f64::max);
                (ext.map, residual, report.pass() && report.twist.value < theta, det_min, pts.len())
            });
            (sigma, res)
        })
        .collect();
    let mut failures = Vec::new();
    let mut worst_residual: f64 = 0.0;
    let mut worst_det = f64::INFINITY;
    for (i, (sigma, res)) in results.into_iter().enumerate() {
        match res {
            Ok((map, residual, report_ok, det_min, _)) => {
                worst_residual = worst_residual.max(residual);
                worst_det = worst_det.min(det_min);
                if residual > 1e-9 || !report_ok || det_min <= 0.0 {
                    let diag = check_f_theta(&map, theta, &VerifyBudget::light().with_seed(i as u64));
                    failures.push(format!(
                        "#{i}: residual {residual:.1e}, checks {report_ok}, det {det_min:.2e}, twist {:.4}, failed {:?}",
                        diag.twist.value,
                        diag.failures().iter().map(|c| format!("{}: {}", c.name, c.detail)).collect::<Vec<_>>()
                    ));
                }
                built.push(Built { sigma, map });
            }
            Err(e) => failures.push(format!("#{i}: {e}")),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failures.is_empty() && secs < 600.0,
        format!(
            "{} of 100 extended and verified, max residual {worst_residual:.1e}, min det {worst_det:.3e}, {secs:.1} s{}",
            100 - failures.len(),
            if failures.is_empty() { String::new() } else { format!("; failures: {}", failures.join(" | ")) }
        ),
    )
}

/// Every radial morph stage inside a map, recursively.
fn morph_stages(map: &TwistMap, out: &mut Vec<Stage>) {
    for s in &map.stages {
        match s {
            Stage::RadialMorph { .. } => out.push(s.clone()),
            Stage::Average(a, b) => {
                morph_stages(a, out);
                morph_stages(b, out);
            }
            Stage::Conjugate { inner, .. } | Stage::Compose(inner) | Stage::Inverse(inner) => morph_stages(inner, out),
            _ => {}
        }
    }
}

/// Random `2 × 2` matrix `s R(φ) diag(1, a)` kept when the straight path
/// to it has twist below `θ` and positive determinants.
fn random_path_matrix<R: Rng>(r: &mut R, theta: f64) -> Option<MatrixPath> {
    let phi = r.random_range(-1.0..1.0) * theta.min(PI) * 0.6;
    let scale = r_log_uniform(r, 0.5, 2.0);
    let stretch = r_log_uniform(r, 0.7, 1.4);
    let e1 = Vector::from_vec(vec![1.0, 0.0]);
    let e2 = Vector::from_vec(vec![0.0, 1.0]);
    let a = plane_rotation(&e1, &e2, phi) * Matrix::from_diagonal(&Vector::from_vec(vec![1.0, stretch])) * scale;
    let path = straight_path(&a);
    (path.twist_sup < theta && path.det_min > 0.0).then_some(path)
}

fn c4_morph_floor(built: &[Built], nice_maps: &mut Vec<Built>) -> Outcome {
    let start = Instant::now();
    let theta = THETA_DEG.to_radians();
    let mut options = ExtendOptions::for_theta(theta);
    options.nice = true;
    let mut r = rng(4);
    let mut stages = Vec::new();
    let mut floor_hits = 0;
    // Source 1: nice extensions of random relations.
    for _ in 0..8 {
        let t = r.random_range(1..=4);
        let rot = r.random_range(0.0..1.0);
        let sigma = near_similarity_relation(&mut r, 2, t, rot);
        if tw_finite(&sigma) >= options.schedule.theta_hat {
            continue;
        }
        match extend_finite_map(&sigma, theta, &options) {
            Ok(ext) => {
                morph_stages(&ext.map, &mut stages);
                nice_maps.push(Built { sigma, map: ext.map });
            }
            Err(_) => floor_hits += 1,
        }
    }
    let from_nice = stages.len();
    // Source 2: one localisation step with the whole headroom at each
    // domain point of the interpolants.
    let localized: Vec<Vec<Stage>> = built
        .par_iter()
        .take(30)
        .map(|b| {
            let mut found = Vec::new();
            for (d, _) in &b.sigma.pairs {
                if let Ok(loc) = localize_translation(&b.map, d, 0.5, theta) {
                    morph_stages(&loc.map, &mut found);
                }
            }
            found
        })
        .collect();
    stages.extend(localized.into_iter().flatten());
    let from_localize = stages.len() - from_nice;
    // Source 3: direct morphs along straight paths to random matrices.
    let mut direct = 0;
    while direct < 40 {
        let Some(path) = random_path_matrix(&mut r, theta) else { continue };
        let epsilon = FRAC_PI_2 * 0.99;
        let zeta = 0.9 * epsilon / (PI * path.sup_inv_norm * path.lipschitz.max(1e-12));
        let zeta = zeta.min(2.0);
        let q = r_log_uniform(&mut r, 0.1, 10.0);
        let p = q * (-1.0 / zeta).exp() * 0.5;
        if p < 1e-9 * q {
            continue;
        }
        let Ok(ramp) = SlowRamp::new(p, q, zeta) else { continue };
        let center = Vector::from_fn(2, |_, _| r.random_range(-5.0..5.0));
        if let Ok(m) = radial_morph(center, path, ramp, theta, epsilon) {
            stages.push(m.stage());
            direct += 1;
        }
    }
    if stages.is_empty() {
        return outcome(false, "no morph stages were constructed".into());
    }
    let mut worst = f64::INFINITY;
    let mut pairs = 0usize;
    for (si, stage) in stages.iter().enumerate() {
        let Stage::RadialMorph { path, ramp, .. } = stage else { continue };
        let m = path.sup_inv_norm;
        let n = path.dimension();
        let h = |v: &Vector| path.at(ramp.value(v.norm())) * v;
        let (p, q) = (ramp.p, ramp.q);
        let margin = (0..10_000u64)
            .into_par_iter()
            .map(|i| {
                let mut rr = ChaCha8Rng::seed_from_u64(si as u64);
                rr.set_stream(i);
                let r0 = r_log_uniform(&mut rr, p / 4.0, q * 4.0);
                let v0 = Vector::from_vec(unit_vector(&mut rr, n)) * r0;
                let v1 = if rr.random_bool(0.5) {
                    let scale = r0 * 10f64.powf(rr.random_range(-4.0..0.5));
                    &v0 + Vector::from_vec(unit_vector(&mut rr, n)) * scale
                } else {
                    Vector::from_vec(unit_vector(&mut rr, n)) * r_log_uniform(&mut rr, p / 4.0, q * 4.0)
                };
                (h(&v1) - h(&v0)).norm() - (&v1 - &v0).norm() / (2.0 * m)
            })
            .reduce(|| f64::INFINITY, f64::min);
        worst = worst.min(margin);
        pairs += 10_000;
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst >= -1e-8,
        format!("{} morph stages ({from_nice} from nice maps, {floor_hits} nice builds below the numeric floor; {from_localize} from localisation; {direct} direct), {pairs} pairs, min ‖h(v₁)−h(v₀)‖ − ‖v₁−v₀‖/(2M) = {worst:.3e}, {secs:.1} s", stages.len()),
    )
}

fn c5_expansion_twist() -> Outcome {
    let start = Instant::now();
    let mut r = rng(5);
    let mut worst: f64 = 0.0;
    let budget = VerifyBudget::default().with_seed(5);
    for _ in 0..20 {
        let k = r.random_range(1.0..12.0);
        let s2 = r_log_uniform(&mut r, 0.05, 5.0);
        let r3 = k * s2 * r.random_range(1.05..6.0);
        let profile = match ExpansionProfile::new(k, s2, r3) {
            Ok(p) => p,
            Err(e) => return outcome(false, format!("profile ({k}, {s2}, {r3}) rejected: {e}")),
        };
        let n = r.random_range(2..=3);
        let mut e1 = Vector::zeros(n);
        e1[0] = 1.0;
        let mut e2 = Vector::zeros(n);
        e2[1] = 1.0;
        let stage = RotateExpand {
            center: Vector::from_fn(n, |_, _| r.random_range(-1.0..1.0)),
            plane_u: e1,
            plane_w: e2,
            angle: 0.0,
            rotation_ramp: None,
            expansion: Some(profile),
            inverted: false,
            radii: Vec::new(),
        };
        let map = TwistMap::from_stages(n, vec![Stage::RotateExpand(stage)]);
        worst = worst.max(estimate_twist(&map, &budget).value);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst <= FRAC_PI_2 + 1e-6, format!("max estimated twist {worst:.6} rad vs π/2 = {FRAC_PI_2:.6}, {secs:.1} s"))
}

fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}

fn c6_jacobians(maps: &[&TwistMap]) -> Outcome {
    let start = Instant::now();
    let mut worst_fd: f64 = 0.0;
    let mut worst_inv: f64 = 0.0;
    let mut points = 0;
    for (mi, f) in maps.iter().enumerate() {
        let sampler = PointSampler::for_domain(&[f]);
        if sampler.is_empty() {
            continue;
        }
        let pts = sampler.batch(600 + mi as u64, 0, 1000);
        points += pts.len();
        let inv = f.inverse();
        let (fd, id) = pts
            .par_iter()
            .map(|x| {
                let j = f.jacobian(x);
                let h = (sampler.local_scale(x) * 1e-2).clamp(1e-6, 1e-2);
                let fd = finite_difference_jacobian(f, x, h);
                let jinv = inv.jacobian(&f.eval(x));
                let expected = j.clone().try_inverse().unwrap_or_else(|| Matrix::from_element(j.nrows(), j.ncols(), f64::NAN));
                (rel_err(&fd, &j), rel_err(&jinv, &expected))
            })
            .reduce(|| (0.0, 0.0), |a, b| (a.0.max(b.0), a.1.max(b.1)));
        worst_fd = worst_fd.max(fd);
        worst_inv = worst_inv.max(id);
    }
    let secs = start.elapsed().as_secs_f64();
    let nan = worst_fd.is_nan() || worst_inv.is_nan();
    outcome(
        !nan && worst_fd <= 1e-5 && worst_inv <= 1e-5,
        format!(
            "{} maps, {points} points: max FD rel. error {worst_fd:.2e}, max inverse-Jacobian rel. error {worst_inv:.2e}, {secs:.1} s",
            maps.len()
        ),
    )
}

fn c7_change_of_variables(maps: &[&TwistMap]) -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut lines = Vec::new();
    let mut all_ok = true;
    for (mi, f) in maps.iter().enumerate() {
        let mut r = rng(700 + mi as u64);
        let n = f.dim;
        // A ball inside the support, near the centre of a feature.
        let strata = f.strata();
        let (center, radius) = {
            let s = &strata[r.random_range(0..strata.len().max(1)).min(strata.len().saturating_sub(1))];
            let rad = (s.outer.min(f.support.radius) * r.random_range(0.2..0.6)).max(1e-3);
            let c = Vector::from_vec(uniform_in_ball(&mut r, s.center.as_slice(), 0.3 * rad));
            (c, rad)
        };
        let vol = ball_volume(n, radius);
        const N: usize = 200_000;
        let samples: Vec<(f64, f64)> = (0..N as u64)
            .into_par_iter()
            .map(|i| {
                let mut rr = ChaCha8Rng::seed_from_u64(7 + mi as u64);
                rr.set_stream(i);
                let x = Vector::from_vec(uniform_in_ball(&mut rr, center.as_slice(), radius));
                let j = f.jacobian(&x);
                (j.determinant(), twistmap_core::geom_core::op_norm(&j))
            })
            .collect();
        let mean = samples.iter().map(|s| s.0).sum::<f64>() / N as f64;
        let var = samples.iter().map(|s| (s.0 - mean).powi(2)).sum::<f64>() / N as f64;
        let integral = vol * mean;
        let integral_hw = vol * 2.576 * (var / N as f64).sqrt();
        let lip = samples.iter().map(|s| s.1).fold(0.0, f64::max) * 1.05;
        let fc = f.eval(&center);
        let outer = radius * lip;
        let outer_vol = ball_volume(n, outer);
        let hits: usize = (0..N as u64)
            .into_par_iter()
            .filter(|i| {
                let mut rr = ChaCha8Rng::seed_from_u64(77 + mi as u64);
                rr.set_stream(*i);
                let y = Vector::from_vec(uniform_in_ball(&mut rr, fc.as_slice(), outer));
                f.inverse_eval(&y).is_ok_and(|x| (x - &center).norm() < radius)
            })
            .count();
        let frac = hits as f64 / N as f64;
        let image = outer_vol * frac;
        let image_hw = outer_vol * 2.576 * (frac * (1.0 - frac) / N as f64).sqrt();
        let rel = (image - integral).abs() / integral;
        let ci = (image_hw + integral_hw) / integral;
        // The observed difference plus the 99% radius must stay within 2%.
        let ok = rel + ci <= 0.02;
        all_ok &= ok;
        worst = worst.max(rel + ci);
        lines.push(format!("{:.2}%", 100.0 * rel));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        all_ok,
        format!(
            "{} maps, worst |μ(f(B)) − ∫det|/∫det + CI = {:.2}%, differences [{}], {secs:.1} s",
            maps.len(),
            100.0 * worst,
            lines.join(", ")
        ),
    )
}

/// Random increasing knots with slopes in `(lo, hi)`, denominators 1000.
fn random_knots<R: Rng>(r: &mut R, t: usize, slope_lo: f64, slope_hi: f64) -> Vec<Knot> {
    let mut d = ratio(r.random_range(-5000..0), 1000);
    let mut e = ratio(r.random_range(-5000..0), 1000);
    let mut out = Vec::new();
    for _ in 0..t {
        out.push(Knot::new(d.clone(), e.clone()));
        let dx = ratio(r.random_range(1000..4000), 1000);
        let slope = r.random_range(slope_lo..slope_hi);
        let dy = ratio(((slope * 1000.0) as i64).max(1), 1000) * &dx;
        d += dx;
        e += dy;
    }
    out
}

/// Independent check of the merge hypotheses, used only to steer the
/// generator towards valid inputs.
fn merge_hypotheses(a: &[Knot], b: &[Knot], budget: &Budget, eps: &Rational) -> bool {
    let t = a.len();
    let tight = eps / rat(4 * t as i64);
    for i in 0..t {
        if (&a[i].d - &b[i].d).abs() >= tight || (&a[i].e - &b[i].e).abs() >= tight {
            return false;
        }
        let (dd, de) = (&b[i].d - &a[i].d, &b[i].e - &a[i].e);
        if dd.signum() != de.signum() {
            return false;
        }
        for j in (i + 1)..t {
            if !(a[i].d < b[j].d && b[i].d < a[j].d && a[i].e < b[j].e && b[i].e < a[j].e) {
                return false;
            }
        }
    }
    if budget.weighted_sum() >= Rational::one() - eps {
        return false;
    }
    for map in [pl_extend(a), pl_extend(b)] {
        let Ok(map) = map else { return false };
        let inv = map.inverse();
        for ell in 3..budget.m() {
            let room = &budget.values[ell] - eps;
            if !(pl_measure_z(&map, ell).unwrap() < room && pl_measure_z(&inv, ell).unwrap() < room) {
                return false;
            }
        }
    }
    let level = |s: &Rational| -> Vec<i64> {
        let mut v = Vec::new();
        let top = (s.ceil().to_integer()).to_string().parse::<i64>().unwrap_or(i64::MAX) + 1;
        for ell in 1..=top.min(10_000) {
            if s >= &rat(ell - 1) && s <= &rat(ell) {
                v.push(ell);
            }
        }
        v
    };
    for i in 0..t.saturating_sub(1) {
        let pairs = [(&a[i], &a[i + 1]), (&a[i], &b[i + 1]), (&b[i], &a[i + 1]), (&b[i], &b[i + 1])];
        let slopes: Vec<Rational> = pairs.iter().map(|(x, y)| (&y.e - &x.e) / (&y.d - &x.d)).collect();
        for s in [slopes.clone(), slopes.iter().map(|s| s.recip()).collect()] {
            let first = level(&s[0]);
            if s.iter().any(|x| level(x) != first) {
                return false;
            }
        }
    }
    true
}

/// Budget with `m` entries covering both maps' level sets plus `ε` and slack.
fn covering_budget(a: &PLMap, b: &PLMap, m: usize, eps: &Rational) -> Budget {
    let mut values = vec![rat(1); 3.min(m)];
    for ell in 3..m {
        let mut need = Rational::zero();
        for map in [a, b] {
            for h in [map.clone(), map.inverse()] {
                let z = pl_measure_z(&h, ell).unwrap();
                if z > need {
                    need = z;
                }
            }
        }
        values.push(need + eps + ratio(1, 1000));
    }
    Budget::new(values)
}

fn c8_exact_line() -> Outcome {
    let start = Instant::now();
    let mut r = rng(8);
    let mut done = 0;
    let mut attempts = 0;
    let mut failures = Vec::new();
    let mut sandwich_checked = 0;
    let mut levels_added = 0;
    while done < 1000 && attempts < 200_000 {
        attempts += 1;
        let t = r.random_range(1..=5);
        let eps = ratio(1, r.random_range(10..40));
        let (lo, hi) = if r.random_bool(0.5) { (0.6, 1.9) } else { (0.3, 3.5) };
        let a = random_knots(&mut r, t, lo, hi);
        let tight = &eps / rat(4 * t as i64);
        let b: Vec<Knot> = a
            .iter()
            .map(|k| {
                if r.random_bool(0.2) {
                    return k.clone();
                }
                let sign = if r.random_bool(0.5) { rat(1) } else { rat(-1) };
                let u = &tight * ratio(r.random_range(1..999), 1000);
                let v = &tight * ratio(r.random_range(1..999), 1000);
                Knot::new(&k.d + &sign * u, &k.e + sign * v)
            })
            .collect();
        let (Ok(ma), Ok(mb)) = (pl_extend(&a), pl_extend(&b)) else { continue };
        let worst = ma.slopes().into_iter().chain(mb.slopes()).map(|s| if s < Rational::one() { s.recip() } else { s }).max().unwrap_or_else(|| rat(1));
        let m = (worst.floor().to_integer().to_string().parse::<usize>().unwrap() + 2).max(3);
        let budget = covering_budget(&ma, &mb, m, &eps);
        if !merge_hypotheses(&a, &b, &budget, &eps) {
            continue;
        }
        let pa = LineCondition::new(a, budget.clone());
        let pb = LineCondition::new(b, budget);
        if !(check_1d_condition(&pa).pass() && check_1d_condition(&pb).pass()) {
            continue;
        }
        done += 1;
        match merge_1d(&pa, &pb, &eps, t) {
            Ok(out) => {
                levels_added += out.counts.len();
                let diag = check_1d_condition(&out.merged);
                if !diag.pass() {
                    failures.push(format!("merged condition invalid: {:?}", diag.items.iter().filter(|i| !i.pass).collect::<Vec<_>>()));
                }
                if out.added_mass > eps {
                    failures.push(format!("added mass {} exceeds ε {}", out.added_mass, eps));
                }
                for h in [ma.clone(), mb.clone(), out.merged.pl_map().unwrap()] {
                    let top = h.slopes().into_iter().max().unwrap_or_else(|| rat(1)).ceil().to_integer().to_string().parse::<usize>().unwrap();
                    for k in 2..=top.max(2) + 1 {
                        sandwich_checked += 1;
                        let s = exact_sandwich(&h, k);
                        let lower = &s.level_sum / rat(3);
                        if !(lower <= s.image_measure && s.image_measure <= s.level_sum) {
                            failures.push(format!("sandwich fails at k = {k}"));
                        }
                    }
                }
            }
            Err(e) => failures.push(format!("merge failed: {e}")),
        }
        if failures.len() > 5 {
            break;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        done == 1000 && failures.is_empty(),
        format!(
            "{done} merges ({attempts} candidates drawn), {levels_added} new levels, {sandwich_checked} exact sandwiches, {secs:.1} s{}",
            if failures.is_empty() { String::new() } else { format!("; {}", failures.join(" | ")) }
        ),
    )
}

fn c9_ac_soundness(candidates: &[&Built]) -> Outcome {
    let start = Instant::now();
    let mb = MeasureBudget { samples: 60_000, seed: 9, grid: None };
    let mut budgeted = Vec::new();
    let mut tried = 0;
    for b in candidates {
        if budgeted.len() == 10 {
            break;
        }
        tried += 1;
        if let Ok(c) = auto_condition(&b.sigma, &b.map, rat(1), &mb) {
            budgeted.push((b.map.clone(), c.upsilon));
        }
    }
    if budgeted.len() < 10 {
        return outcome(false, format!("only {} of {tried} maps admitted a budget", budgeted.len()));
    }
    let mut violations = 0;
    let mut worst_ratio: f64 = 0.0;
    let mut sets = 0;
    let mut ks = Vec::new();
    for (mi, (f, upsilon)) in budgeted.iter().enumerate() {
        let n = f.dim;
        // Steepest sampled points attract some of the balls.
        let sampler = PointSampler::for_domain(&[f]);
        let mut pts = sampler.batch(900 + mi as u64, 0, 4000);
        pts.sort_by(|a, b| f.jacobian(b).determinant().total_cmp(&f.jacobian(a).determinant()));
        pts.truncate(50);
        for &eps in &[0.5, 0.1] {
            let cert = match ac_certificate(f, eps, AcMode::Budget(upsilon)) {
                Ok(c) => c,
                Err(e) => return outcome(false, format!("certificate failed: {e}")),
            };
            ks.push(cert.k);
            let delta = cert.delta;
            let results: Vec<(bool, f64)> = (0..1000u64)
                .into_par_iter()
                .map(|u| {
                    let mut r = ChaCha8Rng::seed_from_u64(9_000 + mi as u64);
                    r.set_stream(u + if eps == 0.5 { 0 } else { 1 << 20 });
                    let count = r.random_range(1..=8);
                    let total = delta * r.random_range(0.5..0.999);
                    let mut weights: Vec<f64> = (0..count).map(|_| r.random_range(0.1..1.0)).collect();
                    let sum: f64 = weights.iter().sum();
                    weights.iter_mut().for_each(|w| *w *= total / sum);
                    let balls = weights
                        .iter()
                        .map(|v| {
                            let radius = (v / ball_volume(n, 1.0)).powf(1.0 / n as f64);
                            let center = if r.random_bool(0.5) {
                                pts[r.random_range(0..pts.len())].clone()
                            } else {
                                Vector::from_vec(uniform_in_ball(&mut r, f.support.center.as_slice(), f.support.radius))
                            };
                            (center, radius)
                        })
                        .collect();
                    let set = BallUnion { balls };
                    let (mu, image) = union_and_image_measure(f, &set, 2000, u);
                    let bad = mu.value < delta && image.lower() >= eps;
                    (bad, image.value / eps)
                })
                .collect();
            sets += results.len();
            violations += results.iter().filter(|x| x.0).count();
            worst_ratio = results.iter().map(|x| x.1).fold(worst_ratio, f64::max);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ks.sort_unstable();
    outcome(
        violations == 0,
        format!(
            "{} budgeted maps ({tried} tried), {sets} sets, {violations} violations, max μ(f(U))/ε = {worst_ratio:.3}, k in [{}, {}], {secs:.1} s",
            budgeted.len(),
            ks.first().unwrap(),
            ks.last().unwrap()
        ),
    )
}

fn c10_delta_witnesses() -> Outcome {
    let start = Instant::now();
    let mut bad = Vec::new();
    for n in 1..=8u32 {
        let w = delta_n_witness(n);
        let hi = rat(1i64 << n);
        let lo = ratio(1, 1i64 << n);
        let mut steep_domain = Rational::zero();
        let mut steep_image = Rational::zero();
        for s in w.map.segments() {
            if s.slope() > hi {
                steep_domain += s.length();
                steep_image += s.image_length();
            }
        }
        let first = &w.map.knots[0];
        let last = &w.map.knots[w.map.knots.len() - 1];
        let range = &last.e - &first.e;
        let domain = &last.d - &first.d;
        let ok = steep_domain <= &lo * &range && steep_image >= &range - &lo * &domain;
        if !ok || steep_domain != w.steep_domain || steep_image != w.steep_image {
            bad.push(n);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(bad.is_empty(), format!("n = 1..8 exact bounds hold{}, {secs:.3} s", if bad.is_empty() { String::new() } else { format!(" except {bad:?}") }))
}

fn c11_metric_symmetry(maps: &[&TwistMap]) -> Outcome {
    let start = Instant::now();
    let budget = VerifyBudget::light().with_seed(11);
    let pairs: Vec<(usize, usize)> = (0..50).map(|i| (i % maps.len(), (i * 7 + 3) % maps.len())).collect();
    let results: Vec<(f64, f64, bool)> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let (f, g) = (maps[i], maps[j]);
            let (fi, gi) = (f.inverse(), g.inverse());
            let d = distance_d(f, g, &budget).value;
            let d_inv = distance_d(&fi, &gi, &budget).value;
            let big = distance_delta(f, g, &budget).value;
            let big_inv = distance_delta(&fi, &gi, &budget).value;
            ((d - d_inv).abs(), (big - big_inv).abs(), big >= d && big_inv >= d_inv)
        })
        .collect();
    let worst_d = results.iter().map(|r| r.0).fold(0.0, f64::max);
    let worst_big = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let dominated = results.iter().all(|r| r.2);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_d <= 1e-6 && worst_big <= 1e-6 && dominated,
        format!("50 pairs: max |d − d⁻¹| = {worst_d:.1e}, max |Δ − Δ⁻¹| = {worst_big:.1e}, Δ ≥ d: {dominated}, {secs:.1} s"),
    )
}

fn c12_ball_bound() -> Outcome {
    let start = Instant::now();
    let results: Vec<Option<f64>> = (0..100_000u64)
        .into_par_iter()
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(12);
            r.set_stream(i);
            let n = r.random_range(1..=6);
            let rad_r = r_log_uniform(&mut r, 1e-3, 10.0);
            let rad_s = if r.random_bool(0.1) { 0.0 } else { r_log_uniform(&mut r, 1e-3, 10.0) };
            let t = (rad_r + rad_s) * if r.random_bool(0.2) { 1.0 } else { r_log_uniform(&mut r, 1.0, 100.0) };
            let x = Vector::from_fn(n, |_, _| r.random_range(-10.0..10.0));
            let y = &x + Vector::from_vec(unit_vector(&mut r, n)) * t;
            let on_sphere = r.random_bool(0.3);
            let pick = |r: &mut ChaCha8Rng, c: &Vector, rad: f64| -> Vector {
                if on_sphere {
                    c + Vector::from_vec(unit_vector(r, n)) * rad
                } else {
                    Vector::from_vec(uniform_in_ball(r, c.as_slice(), rad))
                }
            };
            let v = pick(&mut r, &x, rad_r);
            let w = pick(&mut r, &y, rad_s);
            // The bound applies to the configuration as rounded: measured
            // distances, with radii covering the chosen points.
            let distance = (&y - &x).norm();
            let r_eff = rad_r.max((&v - &x).norm());
            let s_eff = rad_s.max((&w - &y).norm());
            let bound = ball_angle_bound(distance, r_eff, s_eff).ok()?;
            // Below round-off the chord w − v has no defined direction.
            let chord = &w - &v;
            if chord.norm() <= 1e-12 * x.norm().max(y.norm()).max(1.0) {
                return Some(0.0);
            }
            Some(angle(&chord, &(&y - &x)).map_or(0.0, |beta| beta - bound))
        })
        .collect();
    let skipped = results.iter().filter(|x| x.is_none()).count();
    let worst = results.iter().flatten().fold(f64::NEG_INFINITY, |a, b| a.max(*b));
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-12,
        format!(
            "10⁵ configurations ({skipped} touching ones lost T ≥ r+s to rounding), max angle − π(r+s)/(2T) = {worst:.3e}, {secs:.2} s"
        ),
    )
}

fn main() {
    let mut results = Vec::new();
    let mut report = |id: usize, name: &str, run: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = run();
        let secs = start.elapsed().as_secs_f64();
        println!(
            "criterion {id:>2} {:<4} {name}: {} [{secs:.1} s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push(o.pass);
    };
    let mut built = Vec::new();
    let mut nice = Vec::new();
    report(1, "insertion infeasibility at 18°", &mut c1_eighteen);
    report(2, "slow-ramp increment bound", &mut c2_slow_ramp);
    report(3, "interpolation end to end", &mut || c3_interpolation(&mut built));
    report(4, "radial morph floor", &mut || c4_morph_floor(&built, &mut nice));
    report(5, "expansion twist cap", &mut c5_expansion_twist);
    let mut sample: Vec<&TwistMap> = built.iter().take(10).map(|b| &b.map).collect();
    sample.extend(nice.iter().take(5).map(|b| &b.map));
    report(6, "Jacobian consistency", &mut || c6_jacobians(&sample));
    let nontrivial: Vec<&TwistMap> = built.iter().map(|b| &b.map).filter(|m| m.support.radius > 0.0).take(10).collect();
    report(7, "change of variables", &mut || c7_change_of_variables(&nontrivial));
    report(8, "exact one-dimensional merges", &mut c8_exact_line);
    let candidates: Vec<&Built> = built.iter().filter(|b| b.map.support.radius > 0.0).collect();
    report(9, "absolute-continuity certificate soundness", &mut || c9_ac_soundness(&candidates));
    report(10, "Δ_n witnesses", &mut c10_delta_witnesses);
    let all: Vec<&TwistMap> = built.iter().map(|b| &b.map).filter(|m| m.support.radius > 0.0).take(25).collect();
    report(11, "metric symmetries", &mut || c11_metric_symmetry(&all));
    report(12, "ball angle bound", &mut c12_ball_bound);
    let passed = results.iter().filter(|p| **p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
