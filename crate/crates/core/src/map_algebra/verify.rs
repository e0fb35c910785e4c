//! Sampling-based estimators: twist, sup-distances, membership diagnostics
//! and Lipschitz checks. Every value here is an estimate from below of a
//! true supremum.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Stratum, SupportBall, TwistMap};
use crate::geom_core::{angle_or_zero, op_norm, Matrix, Vector};
use crate::optim::maximize;
use crate::sampling::{unit_vector, uniform_in_ball};

/// Sample counts and seed for the estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyBudget {
    pub seed: u64,
    /// Pairs drawn for the twist estimate.
    pub twist_pairs: usize,
    /// Best pairs refined by local ascent.
    pub refine_top: usize,
    pub refine_iters: u64,
    /// Points for sup-distances, Jacobian and determinant checks.
    pub points: usize,
    /// Points for the collision test.
    pub injectivity_points: usize,
    /// Points for round trips and surjectivity.
    pub inverse_points: usize,
}

impl Default for VerifyBudget {
    fn default() -> Self {
        Self {
            seed: 0x5eed,
            twist_pairs: 40_000,
            refine_top: 12,
            refine_iters: 400,
            points: 10_000,
            injectivity_points: 100_000,
            inverse_points: 2_000,
        }
    }
}

impl VerifyBudget {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// A smaller budget for quick checks.
    pub fn light() -> Self {
        Self {
            twist_pairs: 8_000,
            refine_top: 6,
            refine_iters: 200,
            points: 2_000,
            injectivity_points: 20_000,
            inverse_points: 500,
            ..Self::default()
        }
    }
}

const BATCH: usize = 512;

fn batch_rng(seed: u64, stream: u64, batch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(batch as u128 * (1 << 20));
    rng
}

/// Draw sample points concentrated around the strata and in the ball.
pub struct PointSampler {
    strata: Vec<Stratum>,
    balls: Vec<SupportBall>,
    dim: usize,
}

impl PointSampler {
    pub fn new(dim: usize, strata: Vec<Stratum>, balls: Vec<SupportBall>) -> Self {
        let balls = balls.into_iter().filter(|b| b.radius > 0.0).collect();
        Self { strata, balls, dim }
    }

    pub fn for_domain(maps: &[&TwistMap]) -> Self {
        let dim = maps[0].dim;
        let strata = maps.iter().flat_map(|m| m.strata()).collect();
        let balls = maps.iter().map(|m| m.support.clone()).collect();
        Self::new(dim, strata, balls)
    }

    pub fn for_image(maps: &[&TwistMap]) -> Self {
        let dim = maps[0].dim;
        let strata = maps.iter().flat_map(|m| m.image_strata()).collect();
        let balls = maps.iter().map(|m| m.image_support()).collect();
        Self::new(dim, strata, balls)
    }

    pub fn is_empty(&self) -> bool {
        self.strata.is_empty() && self.balls.is_empty()
    }

    /// Point near a stratum at a log-uniform radius, or uniform in a ball.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vector {
        let use_ball = self.strata.is_empty() || (!self.balls.is_empty() && rng.random::<f64>() < 0.25);
        if use_ball {
            let b = &self.balls[rng.random_range(0..self.balls.len())];
            let scale = if rng.random::<f64>() < 0.9 { 1.0 } else { 1.3 };
            return Vector::from_vec(uniform_in_ball(rng, b.center.as_slice(), b.radius * scale));
        }
        let s = &self.strata[rng.random_range(0..self.strata.len())];
        let outer = if s.outer.is_finite() { s.outer * 1.2 } else { s.inner.max(1.0) * 10.0 };
        let lo = (s.inner * 0.25).max(outer * 1e-4).min(outer * 0.5);
        let r = if rng.random::<f64>() < 0.05 {
            lo * rng.random::<f64>()
        } else {
            (lo.ln() + (outer / lo).ln() * rng.random::<f64>()).exp()
        };
        let dir = Vector::from_vec(unit_vector(rng, self.dim));
        &s.center + dir * r
    }

    /// Typical length scale for a point, used to size local steps.
    pub fn local_scale(&self, x: &Vector) -> f64 {
        let mut best = f64::INFINITY;
        for s in &self.strata {
            let d = (x - &s.center).norm();
            best = best.min(d.max(s.inner * 0.1).max(1e-6));
        }
        if best.is_finite() {
            best
        } else {
            1.0
        }
    }

    /// Deterministic batch of `count` points for a seed and stream.
    pub fn batch(&self, seed: u64, stream: u64, count: usize) -> Vec<Vector> {
        let batches = count.div_ceil(BATCH);
        (0..batches)
            .into_par_iter()
            .flat_map_iter(|b| {
                let mut rng = batch_rng(seed, stream, b);
                let n = BATCH.min(count - b * BATCH);
                (0..n).map(move |_| self.sample(&mut rng)).collect::<Vec<_>>()
            })
            .collect()
    }
}

/// Separations below this fraction of the coordinate scale are measured
/// through the Jacobian, since `f(x2) − f(x1)` would cancel to round-off.
const PAIR_RESOLUTION: f64 = 1e-7;

/// Angle between `x2 − x1` and `f(x2) − f(x1)`.
pub fn pair_angle(f: &TwistMap, x1: &Vector, x2: &Vector) -> f64 {
    let dx = x2 - x1;
    let y1 = f.eval(x1);
    let scale = x1.norm().max(y1.norm()).max(1.0);
    let dy = if dx.norm() < PAIR_RESOLUTION * scale {
        f.jacobian(&((x1 + x2) * 0.5)) * &dx
    } else {
        f.eval(x2) - y1
    };
    angle_or_zero(dx.as_slice(), dy.as_slice())
}

/// Largest pair angle found and the pair achieving it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwistEstimate {
    pub value: f64,
    pub witness: Option<(Vec<f64>, Vec<f64>)>,
    pub pairs: usize,
}

fn split(z: &[f64], n: usize) -> (Vector, Vector) {
    (Vector::from_column_slice(&z[..n]), Vector::from_column_slice(&z[n..]))
}

/// Lower estimate of `tw(f)` by stratified pair sampling and local ascent.
pub fn estimate_twist(f: &TwistMap, budget: &VerifyBudget) -> TwistEstimate {
    let n = f.dim;
    let sampler = PointSampler::for_domain(&[f]);
    if sampler.is_empty() {
        return TwistEstimate { value: 0.0, witness: None, pairs: 0 };
    }
    let support = f.support.clone();
    let batches = budget.twist_pairs.div_ceil(BATCH);
    let mut candidates: Vec<(f64, Vector, Vector)> = (0..batches)
        .into_par_iter()
        .flat_map_iter(|b| {
            let mut rng = batch_rng(budget.seed, 1, b);
            let count = BATCH.min(budget.twist_pairs - b * BATCH);
            let mut local_best: Vec<(f64, Vector, Vector)> = Vec::with_capacity(count);
            for _ in 0..count {
                let x1 = sampler.sample(&mut rng);
                let kind = rng.random_range(0..5u8);
                let x2 = match kind {
                    // Nearby pair: approximates the Jacobian twist.
                    0 => {
                        let h = sampler.local_scale(&x1) * 1e-4;
                        &x1 + Vector::from_vec(unit_vector(&mut rng, n)) * h
                    }
                    // Same neighbourhood at a comparable scale.
                    1 => {
                        let h = sampler.local_scale(&x1) * rng.random_range(0.05..2.0);
                        &x1 + Vector::from_vec(unit_vector(&mut rng, n)) * h
                    }
                    // One point inside the support and one outside.
                    2 => {
                        let dir = Vector::from_vec(unit_vector(&mut rng, n));
                        &support.center + dir * support.radius * rng.random_range(1.0..4.0)
                    }
                    // Independent points, usually across stages or scales.
                    _ => sampler.sample(&mut rng),
                };
                let a = pair_angle(f, &x1, &x2);
                local_best.push((a, x1, x2));
            }
            local_best
        })
        .collect();
    let pairs = candidates.len();
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0));
    candidates.truncate(budget.refine_top.max(1));
    let refined: Vec<(f64, Vector, Vector)> = candidates
        .par_iter()
        .map(|(a, x1, x2)| {
            let mut start = x1.as_slice().to_vec();
            start.extend_from_slice(x2.as_slice());
            let step = ((x2 - x1).norm() * 0.25).max(1e-9);
            let (z, v) = maximize(
                |z| {
                    let (p, q) = split(z, n);
                    pair_angle(f, &p, &q)
                },
                &start,
                step,
                budget.refine_iters,
            );
            if v > *a {
                let (p, q) = split(&z, n);
                (v, p, q)
            } else {
                (*a, x1.clone(), x2.clone())
            }
        })
        .collect();
    let best = refined.into_iter().max_by(|a, b| a.0.total_cmp(&b.0));
    match best {
        Some((v, p, q)) => TwistEstimate {
            value: v,
            witness: Some((p.as_slice().to_vec(), q.as_slice().to_vec())),
            pairs,
        },
        None => TwistEstimate { value: 0.0, witness: None, pairs },
    }
}

/// A sup-distance estimate with its sample count and inversion failures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceEstimate {
    pub value: f64,
    pub samples: usize,
    pub inverse_failures: usize,
}

/// Sup of `term` over a point set, refined by ascent on the best points.
fn sup_term<F>(points: &[Vector], term: F, budget: &VerifyBudget) -> (f64, usize)
where
    F: Fn(&Vector) -> Option<f64> + Sync,
{
    let values: Vec<Option<f64>> = points.par_iter().map(&term).collect();
    let failures = values.iter().filter(|v| v.is_none()).count();
    let mut scored: Vec<(f64, &Vector)> = values.iter().zip(points).filter_map(|(v, p)| v.map(|v| (v, p))).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let top: Vec<(f64, &Vector)> = scored.into_iter().take(budget.refine_top.clamp(1, 4)).collect();
    let best = top
        .par_iter()
        .map(|(v, p)| {
            if *v <= 0.0 {
                return *v;
            }
            let step = (p.norm() * 1e-3).max(1e-4);
            let (_, refined) = maximize(
                |z| term(&Vector::from_column_slice(z)).unwrap_or(f64::NEG_INFINITY),
                p.as_slice(),
                step,
                budget.refine_iters / 2,
            );
            refined.max(*v)
        })
        .reduce(|| 0.0, f64::max);
    (best, failures)
}

fn difference_samplers(f: &TwistMap, g: &TwistMap, budget: &VerifyBudget) -> (Vec<Vector>, Vec<Vector>) {
    let domain = PointSampler::for_domain(&[f, g]);
    let image = PointSampler::for_image(&[f, g]);
    // The same stream is used on both sides so that swapping to the inverse
    // maps swaps the two sample sets exactly.
    let xs = if domain.is_empty() { Vec::new() } else { domain.batch(budget.seed, 3, budget.points) };
    let ys = if image.is_empty() { Vec::new() } else { image.batch(budget.seed, 3, budget.points) };
    (xs, ys)
}

fn check_same_dim(f: &TwistMap, g: &TwistMap) {
    assert_eq!(f.dim, g.dim, "maps must share a dimension");
}

/// Estimate of `max(‖f − g‖, ‖f⁻¹ − g⁻¹‖)`.
pub fn distance_d(f: &TwistMap, g: &TwistMap, budget: &VerifyBudget) -> DistanceEstimate {
    check_same_dim(f, g);
    let far = (&f.offset - &g.offset).norm();
    let (xs, ys) = difference_samplers(f, g, budget);
    let (fwd, _) = sup_term(&xs, |x| Some((f.eval(x) - g.eval(x)).norm()), budget);
    let (bwd, failures) = sup_term(
        &ys,
        |y| match (f.inverse_eval(y), g.inverse_eval(y)) {
            (Ok(a), Ok(b)) => Some((a - b).norm()),
            _ => None,
        },
        budget,
    );
    DistanceEstimate { value: far.max(fwd).max(bwd), samples: xs.len() + ys.len(), inverse_failures: failures }
}

/// Estimate of `Δ(f, g)`: `d(f, g)` together with the Jacobian differences
/// of the maps and of their inverses.
pub fn distance_delta(f: &TwistMap, g: &TwistMap, budget: &VerifyBudget) -> DistanceEstimate {
    check_same_dim(f, g);
    let far = (&f.offset - &g.offset).norm();
    let (xs, ys) = difference_samplers(f, g, budget);
    let (fwd, _) = sup_term(
        &xs,
        |x| {
            let (fy, fj) = f.eval_with_jacobian(x);
            let (gy, gj) = g.eval_with_jacobian(x);
            Some((fy - gy).norm().max(op_norm(&(fj - gj))))
        },
        budget,
    );
    let (bwd, failures) = sup_term(
        &ys,
        |y| {
            let a = f.inverse_eval(y).ok()?;
            let b = g.inverse_eval(y).ok()?;
            let ja = f.inverse_jacobian(y).ok()?;
            let jb = g.inverse_jacobian(y).ok()?;
            Some((a - b).norm().max(op_norm(&(ja - jb))))
        },
        budget,
    );
    DistanceEstimate { value: far.max(fwd).max(bwd), samples: xs.len() + ys.len(), inverse_failures: failures }
}

/// One named check with a pass flag and a human-readable detail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckItem {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl CheckItem {
    fn new(name: &str, pass: bool, detail: String) -> Self {
        Self { name: name.to_string(), pass, detail }
    }
}

/// Itemised membership diagnostics for the class of maps with twist `< θ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FThetaReport {
    pub theta: f64,
    pub checks: Vec<CheckItem>,
    pub twist: TwistEstimate,
    pub det_min: f64,
    pub jacobian_rel_error: f64,
    pub collisions: usize,
}

impl FThetaReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn check(&self, name: &str) -> Option<&CheckItem> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failures(&self) -> Vec<&CheckItem> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }
}

/// Ridders' extrapolated central differences: the step shrinks
/// geometrically from `h` over the whole tableau, so features narrower than
/// `h` are still resolved, and the entry with the smallest error estimate is
/// kept for each column.
pub fn finite_difference_jacobian(f: &TwistMap, x: &Vector, h: f64) -> Matrix {
    const SHRINK: f64 = 1.4;
    const LEVELS: usize = 16;
    let n = x.len();
    let mut j = Matrix::zeros(n, n);
    for k in 0..n {
        let central = |step: f64| -> Vector {
            let mut e = Vector::zeros(n);
            e[k] = step;
            (f.eval(&(x + &e)) - f.eval(&(x - &e))) / (2.0 * step)
        };
        let mut step = h;
        let mut table: Vec<Vec<Vector>> = vec![vec![central(step)]];
        let mut best = table[0][0].clone();
        let mut best_err = f64::INFINITY;
        for i in 1..LEVELS {
            step /= SHRINK;
            let mut row = vec![central(step)];
            let mut factor = SHRINK * SHRINK;
            for m in 1..=i {
                let next = (&row[m - 1] * factor - &table[i - 1][m - 1]) / (factor - 1.0);
                factor *= SHRINK * SHRINK;
                let err = (&next - &row[m - 1]).norm().max((&next - &table[i - 1][m - 1]).norm());
                if err <= best_err {
                    best_err = err;
                    best = next.clone();
                }
                row.push(next);
            }
            table.push(row);
        }
        j.set_column(k, &best);
    }
    j
}

fn collision_count(xs: &[Vector], ys: &[Vector], tol: f64) -> usize {
    let n = ys.first().map_or(0, |y| y.len());
    let key = |y: &Vector| -> Vec<i64> { y.iter().map(|v| (v / tol).floor() as i64).collect() };
    let mut cells: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
    for (i, y) in ys.iter().enumerate() {
        cells.entry(key(y)).or_default().push(i);
    }
    let mut collisions = 0;
    let offsets: Vec<Vec<i64>> = (0..3usize.pow(n as u32))
        .map(|mut code| {
            (0..n)
                .map(|_| {
                    let d = (code % 3) as i64 - 1;
                    code /= 3;
                    d
                })
                .collect()
        })
        .collect();
    for (i, y) in ys.iter().enumerate() {
        let base = key(y);
        for off in &offsets {
            let cell: Vec<i64> = base.iter().zip(off).map(|(a, b)| a + b).collect();
            if let Some(list) = cells.get(&cell) {
                for &j in list {
                    if j > i && (&ys[j] - y).norm() <= tol && (&xs[j] - &xs[i]).norm() > tol {
                        collisions += 1;
                    }
                }
            }
        }
    }
    collisions
}

/// Diagnostics for membership in the class of maps with twist `< θ`.
pub fn check_f_theta(f: &TwistMap, theta: f64, budget: &VerifyBudget) -> FThetaReport {
    let n = f.dim;
    let mut checks = Vec::new();
    let domain = PointSampler::for_domain(&[f]);
    let image = PointSampler::for_image(&[f]);
    let empty = domain.is_empty();

    // Sampled injectivity: collisions of images, and round trips that land
    // on a different preimage.
    let xs = if empty { Vec::new() } else { domain.batch(budget.seed, 10, budget.injectivity_points) };
    let ys: Vec<Vector> = xs.par_iter().map(|x| f.eval(x)).collect();
    let hashed = collision_count(&xs, &ys, 1e-9);
    let round_trip: Vec<(bool, bool)> = xs
        .par_iter()
        .take(budget.inverse_points)
        .zip(ys.par_iter())
        .map(|(x, y)| match f.inverse_eval(y) {
            Ok(back) => ((back - x).norm() > 1e-9 * x.norm().max(1.0), false),
            Err(_) => (false, true),
        })
        .collect();
    let mismatches = round_trip.iter().filter(|r| r.0).count();
    let inverse_failures = round_trip.iter().filter(|r| r.1).count();
    let collisions = hashed + mismatches;
    checks.push(CheckItem::new(
        "injectivity",
        collisions == 0,
        format!("{hashed} image collisions among {} samples, {mismatches} round-trip mismatches", xs.len()),
    ));
    checks.push(CheckItem::new(
        "round_trip",
        inverse_failures == 0 && mismatches == 0,
        format!("{inverse_failures} inversion failures over {} samples", round_trip.len()),
    ));

    // Translation outside the support ball, through every stage.
    let mut rng = batch_rng(budget.seed, 11, 0);
    let mut outside_err: f64 = 0.0;
    let radius = f.support.radius.max(1.0);
    for _ in 0..1000 {
        let dir = Vector::from_vec(unit_vector(&mut rng, n));
        let x = &f.support.center + dir * radius * rng.random_range(1.0..3.0);
        let (y, j) = f.eval_stages(&x);
        let err = (&y - (&x + &f.offset)).norm() / x.norm().max(1.0) + (j - Matrix::identity(n, n)).norm();
        outside_err = outside_err.max(err);
    }
    checks.push(CheckItem::new(
        "translation_outside",
        outside_err <= 1e-12,
        format!("max deviation {outside_err:e} beyond radius {:.6}", f.support_radius),
    ));

    // Jacobian against finite differences, and determinant sign.
    let pts = if empty { Vec::new() } else { domain.batch(budget.seed, 12, budget.points) };
    let fd_count = pts.len().min(1000);
    let fd_errors: Vec<f64> = pts[..fd_count]
        .par_iter()
        .map(|x| {
            let j = f.jacobian(x);
            let h = (domain.local_scale(x) * 1e-2).clamp(1e-6, 1e-2);
            let fd = finite_difference_jacobian(f, x, h);
            (&j - fd).norm() / j.norm().max(1.0)
        })
        .collect();
    let jacobian_rel_error = fd_errors.iter().copied().fold(0.0, f64::max);
    checks.push(CheckItem::new(
        "jacobian_fd",
        jacobian_rel_error < 1e-5,
        format!("max relative error {jacobian_rel_error:e} at {fd_count} points"),
    ));
    let det_min = pts.par_iter().map(|x| f.jacobian(x).determinant()).reduce(|| f64::INFINITY, f64::min);
    let det_min = if pts.is_empty() { 1.0 } else { det_min };
    checks.push(CheckItem::new("det_positive", det_min > 0.0, format!("min det {det_min:e} over {} points", pts.len())));

    // Twist.
    let twist = estimate_twist(f, budget);
    checks.push(CheckItem::new(
        "twist_below_theta",
        twist.value < theta,
        format!("sampled twist {:.6} rad vs θ = {:.6} rad", twist.value, theta),
    ));
    if let Some(c) = f.certified_twist {
        checks.push(CheckItem::new(
            "twist_within_certificate",
            twist.value <= c + 1e-6,
            format!("sampled {:.6} vs certified {:.6}", twist.value, c),
        ));
    }

    // Sampled surjectivity: random targets in and near the image ball invert.
    let targets = if image.is_empty() { Vec::new() } else { image.batch(budget.seed, 13, budget.inverse_points) };
    let unreachable = targets
        .par_iter()
        .filter(|y| match f.inverse_eval(y) {
            Ok(x) => (f.eval(&x) - *y).norm() > 1e-9 * y.norm().max(1.0),
            Err(_) => true,
        })
        .count();
    checks.push(CheckItem::new(
        "surjectivity",
        unreachable == 0,
        format!("{unreachable} of {} targets failed to invert", targets.len()),
    ));

    FThetaReport { theta, checks, twist, det_min, jacobian_rel_error, collisions }
}

/// Result of comparing displacements with the Jacobian bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    /// Sampled `sup ‖J_f‖`.
    pub jacobian_sup: f64,
    /// Largest `‖f(c) − f(a)‖/‖c − a‖` seen.
    pub max_ratio: f64,
    pub pairs: usize,
    pub violations: usize,
}

impl LipschitzReport {
    pub fn pass(&self) -> bool {
        self.violations == 0
    }
}

/// Check `‖f(c) − f(a)‖ <= sup‖J_f‖·‖c − a‖` on random pairs.
pub fn lipschitz_check(f: &TwistMap, budget: &VerifyBudget) -> LipschitzReport {
    let domain = PointSampler::for_domain(&[f]);
    if domain.is_empty() {
        return LipschitzReport { jacobian_sup: 1.0, max_ratio: 1.0, pairs: 0, violations: 0 };
    }
    let pts = domain.batch(budget.seed, 20, budget.points);
    let jacobian_sup = pts.par_iter().map(|x| op_norm(&f.jacobian(x))).reduce(|| 1.0, f64::max);
    let others = domain.batch(budget.seed, 21, budget.points);
    let ratios: Vec<f64> = pts
        .par_iter()
        .zip(others.par_iter())
        .map(|(a, c)| {
            let d = (c - a).norm();
            if d == 0.0 {
                0.0
            } else {
                (f.eval(c) - f.eval(a)).norm() / d
            }
        })
        .collect();
    let max_ratio = ratios.iter().copied().fold(0.0, f64::max);
    let violations = ratios.iter().filter(|&&r| r > jacobian_sup * (1.0 + 1e-6) + 1e-6).count();
    LipschitzReport { jacobian_sup, max_ratio, pairs: ratios.len(), violations }
}
