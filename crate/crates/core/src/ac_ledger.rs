//! Jacobian-determinant level sets, absolute-continuity certificates and the
//! side conditions `(σ, h, ϰ, Υ)` that carry measure budgets.

use num_traits::{One, Signed, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::budget::{det_cap, rat, rational_ceil, rational_floor, rational_from_f64, rational_to_f64, Budget, BudgetError, Rational};
use crate::geom_core::{FiniteRelation, Vector};
use crate::map_algebra::verify::{distance_d, PointSampler, VerifyBudget};
use crate::map_algebra::TwistMap;
use crate::sampling::{ball_volume, uniform_in_ball};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AcError {
    #[error("level set {0} meets (−∞, 1]; its measure is infinite")]
    Domain(String),
    #[error("no admissible k up to {max_k}: ∫ over W_k of det J stays at {best:.4e} >= ε/2 = {half_eps:.4e}")]
    CertificateUnavailable { max_k: usize, best: f64, half_eps: f64 },
    #[error("condition is invalid: {0}")]
    InvalidCondition(String),
    #[error("extension impossible: {0}")]
    ExtensionImpossible(String),
    #[error(transparent)]
    Budget(#[from] BudgetError),
}

/// 99% two-sided normal quantile.
const Z99: f64 = 2.576;
/// Denominator exponent used when rounding measured values to rationals.
const RATIONAL_BITS: u32 = 40;

/// Finite union of closed intervals of determinant values, upper ends
/// possibly infinite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSet {
    pub intervals: Vec<(f64, f64)>,
}

impl LevelSet {
    pub fn interval(lo: f64, hi: f64) -> Self {
        Self { intervals: vec![(lo, hi)] }
    }

    /// `[ℓ − 1, ℓ]`, the values defining `Z_ℓ`.
    pub fn z(ell: usize) -> Self {
        Self::interval(ell as f64 - 1.0, ell as f64)
    }

    /// `[ℓ, ∞)`, the values defining `W_ℓ`.
    pub fn w(ell: usize) -> Self {
        Self::interval(ell as f64, f64::INFINITY)
    }

    pub fn union(mut self, other: &LevelSet) -> Self {
        self.intervals.extend(other.intervals.iter().copied());
        self
    }

    pub fn contains(&self, v: f64) -> bool {
        self.intervals.iter().any(|&(lo, hi)| lo <= v && v <= hi)
    }

    /// Reject sets reaching down to 1 or below, which contain the value of
    /// `det J` on the unbounded region where the map is a translation.
    pub fn validate(&self) -> Result<(), AcError> {
        match self.intervals.iter().find(|&&(lo, hi)| lo <= 1.0 || hi < lo) {
            Some(&(lo, hi)) => Err(AcError::Domain(format!("[{lo}, {hi}]"))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MeasureMethod {
    Grid,
    MonteCarlo,
}

/// A measure or integral estimate with its 99% confidence radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasureEstimate {
    pub value: f64,
    pub half_width: f64,
    pub method: MeasureMethod,
    pub samples: usize,
}

impl MeasureEstimate {
    pub fn upper(&self) -> f64 {
        self.value + self.half_width
    }

    pub fn lower(&self) -> f64 {
        (self.value - self.half_width).max(0.0)
    }

    fn zero(method: MeasureMethod) -> Self {
        Self { value: 0.0, half_width: 0.0, method, samples: 0 }
    }
}

/// Sampling controls for measure estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasureBudget {
    pub samples: usize,
    pub seed: u64,
    /// Regular grid with this many cells per axis instead of Monte Carlo.
    pub grid: Option<usize>,
}

impl Default for MeasureBudget {
    fn default() -> Self {
        Self { samples: 200_000, seed: 0x5eed, grid: None }
    }
}

impl MeasureBudget {
    pub fn light() -> Self {
        Self { samples: 40_000, ..Self::default() }
    }
}

/// Weighted balls forming the importance density for integrals over the
/// support: one uniform component on the support ball plus a geometric
/// ladder of balls about each stratum centre, so thin features are hit.
struct ImportanceMixture {
    dim: usize,
    balls: Vec<(Vector, f64)>,
    weights: Vec<f64>,
    cumulative: Vec<f64>,
}

impl ImportanceMixture {
    fn for_map(f: &TwistMap) -> Option<Self> {
        if f.support.radius <= 0.0 {
            return None;
        }
        let dim = f.dim;
        let big = f.support.radius;
        let mut balls = vec![(f.support.center.clone(), big)];
        let mut weights = vec![0.3];
        let strata = f.strata();
        let share = 0.7 / strata.len().max(1) as f64;
        for s in &strata {
            let outer = if s.outer.is_finite() { s.outer.min(2.0 * big) } else { 2.0 * big };
            let inner = s.inner.max(outer * 1e-12);
            let levels = ((outer / inner).log2().ceil() as usize + 1).clamp(1, 48);
            for j in 0..levels {
                balls.push((s.center.clone(), outer * 0.5f64.powi(j as i32)));
                weights.push(share / levels as f64);
            }
        }
        let total: f64 = weights.iter().sum();
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect();
        let weights = weights.iter().map(|w| w / total).collect();
        Some(Self { dim, balls, weights, cumulative })
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Vector {
        let u = rng.random::<f64>();
        let i = self.cumulative.partition_point(|&c| c < u).min(self.balls.len() - 1);
        let (c, r) = &self.balls[i];
        Vector::from_vec(uniform_in_ball(rng, c.as_slice(), *r))
    }

    fn density(&self, x: &Vector) -> f64 {
        self.balls
            .iter()
            .zip(&self.weights)
            .filter(|((c, r), _)| (x - c).norm() <= *r)
            .map(|((_, r), w)| w / ball_volume(self.dim, *r))
            .sum()
    }
}

/// Importance-sampled integrals `∫ g_i(det J_f(x)) dx` over the support
/// ball for several integrands at once, sharing one set of samples.
fn integrate_det_functions(f: &TwistMap, integrands: &[&(dyn Fn(f64) -> f64 + Sync)], budget: &MeasureBudget) -> Vec<MeasureEstimate> {
    let Some(mixture) = ImportanceMixture::for_map(f) else {
        return vec![MeasureEstimate::zero(MeasureMethod::MonteCarlo); integrands.len()];
    };
    if let Some(cells) = budget.grid {
        return grid_integrals(f, integrands, cells);
    }
    let n = budget.samples.max(1);
    let chunk = 4096;
    let chunks = n.div_ceil(chunk);
    let support_volume = ball_volume(f.dim, f.support.radius);
    let sums: Vec<(Vec<f64>, Vec<f64>)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(budget.seed);
            rng.set_stream(c as u64 + 1);
            let count = chunk.min(n - c * chunk);
            let mut s1 = vec![0.0; integrands.len()];
            let mut s2 = vec![0.0; integrands.len()];
            for _ in 0..count {
                let x = mixture.sample(&mut rng);
                if (&x - &f.support.center).norm() > f.support.radius {
                    continue;
                }
                let det = f.jacobian(&x).determinant().abs();
                let q = mixture.density(&x);
                for (i, g) in integrands.iter().enumerate() {
                    let v = g(det) / q;
                    s1[i] += v;
                    s2[i] += v * v;
                }
            }
            (s1, s2)
        })
        .collect();
    (0..integrands.len())
        .map(|i| {
            let s1: f64 = sums.iter().map(|s| s.0[i]).sum();
            let s2: f64 = sums.iter().map(|s| s.1[i]).sum();
            let mean = s1 / n as f64;
            let var = (s2 / n as f64 - mean * mean).max(0.0);
            // With no hits the sample variance is zero; fall back to the
            // 99% one-sided bound for a zero count on the support volume.
            let floor = 4.6 * support_volume / n as f64;
            let half_width = (Z99 * (var / n as f64).sqrt()).max(if s1 == 0.0 { floor } else { 0.0 });
            MeasureEstimate { value: mean, half_width, method: MeasureMethod::MonteCarlo, samples: n }
        })
        .collect()
}

/// Midpoint rule on a regular grid over the support's bounding box.
fn grid_integrals(f: &TwistMap, integrands: &[&(dyn Fn(f64) -> f64 + Sync)], cells: usize) -> Vec<MeasureEstimate> {
    let n = f.dim;
    let r = f.support.radius;
    let h = 2.0 * r / cells as f64;
    let total = cells.pow(n as u32);
    let sums = (0..total)
        .into_par_iter()
        .map(|mut idx| {
            let mut x = f.support.center.clone();
            for k in 0..n {
                x[k] += -r + h * ((idx % cells) as f64 + 0.5);
                idx /= cells;
            }
            let mut out = vec![0.0; integrands.len()];
            if (&x - &f.support.center).norm() <= r {
                let det = f.jacobian(&x).determinant().abs();
                for (i, g) in integrands.iter().enumerate() {
                    out[i] = g(det);
                }
            }
            out
        })
        .reduce(|| vec![0.0; integrands.len()], |a, b| a.iter().zip(&b).map(|(x, y)| x + y).collect());
    let cell = h.powi(n as i32);
    sums.into_iter()
        .map(|s| MeasureEstimate { value: s * cell, half_width: 0.0, method: MeasureMethod::Grid, samples: total })
        .collect()
}

/// `μ{x : det J_f(x) ∈ K}`.
pub fn measure_z(f: &TwistMap, set: &LevelSet, budget: &MeasureBudget) -> Result<MeasureEstimate, AcError> {
    set.validate()?;
    let indicator = |d: f64| if set.contains(d) { 1.0 } else { 0.0 };
    Ok(integrate_det_functions(f, &[&indicator], budget)[0])
}

/// `μ(Z^f_ℓ)` for `ℓ = lo..hi`, from shared samples.
pub fn measure_z_range(f: &TwistMap, lo: usize, hi: usize, budget: &MeasureBudget) -> Vec<MeasureEstimate> {
    let sets: Vec<LevelSet> = (lo..hi).map(LevelSet::z).collect();
    let closures: Vec<Box<dyn Fn(f64) -> f64 + Sync>> = sets
        .iter()
        .map(|s| {
            let s = s.clone();
            Box::new(move |d: f64| if s.contains(d) { 1.0 } else { 0.0 }) as Box<dyn Fn(f64) -> f64 + Sync>
        })
        .collect();
    let refs: Vec<&(dyn Fn(f64) -> f64 + Sync)> = closures.iter().map(|b| b.as_ref()).collect();
    if refs.is_empty() {
        return Vec::new();
    }
    integrate_det_functions(f, &refs, budget)
}

/// `μ(f(W_k)) = ∫_{W_k} |det J_f|`.
pub fn image_of_w(f: &TwistMap, k: usize, budget: &MeasureBudget) -> MeasureEstimate {
    let g = move |d: f64| if d >= k as f64 { d } else { 0.0 };
    integrate_det_functions(f, &[&g], budget)[0]
}

/// Sampled range of `det J_f` over the support and its features.
pub fn det_range(f: &TwistMap, seed: u64, count: usize) -> (f64, f64) {
    let sampler = PointSampler::for_domain(&[f]);
    if sampler.is_empty() {
        return (1.0, 1.0);
    }
    sampler
        .batch(seed, 60, count)
        .par_iter()
        .map(|x| {
            let d = f.jacobian(x).determinant();
            (d, d)
        })
        .reduce(|| (1.0, 1.0), |a, b| (a.0.min(b.0), a.1.max(b.1)))
}

/// Source of the bound on `∫_{W_k} |det J|`.
#[derive(Debug, Clone, PartialEq)]
pub enum AcMode<'a> {
    /// The map satisfies a side condition with this budget, so the tail
    /// `Σ_{ℓ>k} ℓΥ(ℓ)` bounds the integral and `det J < max(2, m − 1)`.
    Budget(&'a Budget),
    /// Estimate the integral directly, using the upper confidence bound.
    Measured(MeasureBudget),
}

/// `k` and `δ = ε/(2k)`: sets of measure below `δ` have images of measure
/// below `ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcCertificate {
    pub k: usize,
    pub delta: f64,
    /// Exact `δ` in budget mode.
    #[serde(with = "crate::budget::option_rational_string")]
    pub delta_exact: Option<Rational>,
    /// Bound used for `∫_{W_k} |det J|`.
    pub tail_bound: f64,
}

/// Is `k` admissible for a budget: `Σ_{ℓ>k} ℓΥ(ℓ) < ε/2`?
pub fn budget_admits(budget: &Budget, k: usize, epsilon: &Rational) -> bool {
    k >= 2 && budget.weighted_tail(k) * rat(2) < *epsilon
}

/// Smallest admissible `k >= 2` and `δ = ε/(2k)`.
pub fn ac_certificate(f: &TwistMap, epsilon: f64, mode: AcMode<'_>) -> Result<AcCertificate, AcError> {
    match mode {
        AcMode::Budget(budget) => {
            let eps = rational_from_f64(epsilon)?;
            // Beyond the determinant cap every W_k is empty, so k = cap
            // always qualifies.
            let cap = budget.det_cap().max(2);
            let k = (2..=cap).find(|&k| budget_admits(budget, k, &eps)).unwrap_or(cap);
            let delta = &eps / rat(2 * k as i64);
            Ok(AcCertificate {
                k,
                delta: rational_to_f64(&delta),
                delta_exact: Some(delta),
                tail_bound: rational_to_f64(&budget.weighted_tail(k)),
            })
        }
        AcMode::Measured(mb) => {
            let (_, det_max) = det_range(f, mb.seed, 4000);
            let max_k = (det_max.ceil() as usize + 1).clamp(2, 100_000);
            let integrals: Vec<Box<dyn Fn(f64) -> f64 + Sync>> = (2..=max_k)
                .map(|k| Box::new(move |d: f64| if d >= k as f64 { d } else { 0.0 }) as Box<dyn Fn(f64) -> f64 + Sync>)
                .collect();
            let refs: Vec<&(dyn Fn(f64) -> f64 + Sync)> = integrals.iter().map(|b| b.as_ref()).collect();
            let estimates = integrate_det_functions(f, &refs, &mb);
            let half_eps = epsilon / 2.0;
            for (i, e) in estimates.iter().enumerate() {
                if e.upper() < half_eps {
                    let k = i + 2;
                    return Ok(AcCertificate { k, delta: epsilon / (2 * k) as f64, delta_exact: None, tail_bound: e.upper() });
                }
            }
            let best = estimates.iter().map(|e| e.upper()).fold(f64::INFINITY, f64::min);
            Err(AcError::CertificateUnavailable { max_k, best, half_eps })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SandwichStatus {
    Pass,
    Fail,
    Inconclusive,
}

/// Estimates of `(1/3)Σ_{ℓ>k} ℓμ(Z_ℓ)`, `μ(f(W_k))` and `Σ_{ℓ>k} ℓμ(Z_ℓ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsiBoundReport {
    pub k: usize,
    pub lower: MeasureEstimate,
    pub image: MeasureEstimate,
    pub upper: MeasureEstimate,
    pub status: SandwichStatus,
}

/// Check the sandwich between the image of `W_k` and the weighted `Z`
/// measures, with sums truncated at the sampled determinant supremum.
pub fn check_psi_bound(f: &TwistMap, k: usize, budget: &MeasureBudget) -> PsiBoundReport {
    let k = k.max(2);
    let (_, det_max) = det_range(f, budget.seed, 4000);
    let top = (det_max.ceil() as usize + 1).max(k + 1);
    let weighted = move |d: f64| -> f64 {
        ((k + 1)..=top).filter(|&l| (l as f64 - 1.0) <= d && d <= l as f64).map(|l| l as f64).sum()
    };
    let third = move |d: f64| weighted(d) / 3.0;
    let image = move |d: f64| if d >= k as f64 { d } else { 0.0 };
    let est = integrate_det_functions(f, &[&third, &image, &weighted], budget);
    let (lower, image, upper) = (est[0], est[1], est[2]);
    let gap_low = lower.value - image.value;
    let gap_high = image.value - upper.value;
    let tol_low = lower.half_width + image.half_width;
    let tol_high = image.half_width + upper.half_width;
    let status = if gap_low <= 1e-12 && gap_high <= 1e-12 {
        SandwichStatus::Pass
    } else if gap_low > tol_low || gap_high > tol_high {
        SandwichStatus::Fail
    } else {
        SandwichStatus::Inconclusive
    };
    PsiBoundReport { k, lower, image, upper, status }
}

/// A side condition `(σ, h, ϰ, Υ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub sigma: FiniteRelation,
    pub h: TwistMap,
    pub kappa: Rational,
    pub upsilon: Budget,
}

/// One itemised check with its margin (positive when satisfied).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionItem {
    pub item: String,
    pub pass: bool,
    pub margin: f64,
    pub detail: String,
}

/// Diagnostic of the six side-condition items, with the measures found.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub items: Vec<ConditionItem>,
    /// `(ℓ, μ(Z^h_ℓ), μ(Z^{h⁻¹}_ℓ))` for `3 <= ℓ < m`.
    pub measures: Vec<(usize, MeasureEstimate, MeasureEstimate)>,
    pub det_range: (f64, f64),
}

impl ConditionReport {
    pub fn pass(&self) -> bool {
        self.items.iter().all(|i| i.pass)
    }

    pub fn failures(&self) -> Vec<&ConditionItem> {
        self.items.iter().filter(|i| !i.pass).collect()
    }
}

fn item(name: &str, margin: f64, detail: String) -> ConditionItem {
    ConditionItem { item: name.to_string(), pass: margin > 0.0, margin, detail }
}

/// Check items (1) to (6) for twist bound `θ`.
pub fn check_condition(c: &Condition, theta: f64, budget: &MeasureBudget) -> ConditionReport {
    let m = c.upsilon.m();
    let mut items = Vec::new();
    let bij = c.sigma.is_bijection();
    let positive = c.upsilon.all_positive();
    items.push(item(
        "1: bijection and positive budget",
        if bij && positive { 1.0 } else { -1.0 },
        format!("bijection {bij}, all Υ positive {positive}, m = {m}"),
    ));
    let sum = c.upsilon.weighted_sum();
    let margin2 = rational_to_f64(&(Rational::one() - &sum));
    items.push(item("2: weighted budget sum below 1", margin2, format!("Σ ℓΥ(ℓ) = {}", rational_to_f64(&sum))));
    let residual = c.sigma.pairs.iter().map(|(d, e)| (c.h.eval(d) - e).norm()).fold(0.0, f64::max);
    let twist_margin = c.h.certified_twist.map_or(-1.0, |t| theta - t);
    let margin3 = if residual <= 1e-9 { twist_margin } else { -residual };
    items.push(item(
        "3: h extends σ with certified twist below θ",
        margin3,
        match c.h.certified_twist {
            Some(t) => format!("max residual {residual:.3e}, certified twist {t:.6}"),
            None => format!("max residual {residual:.3e}, no twist certificate"),
        },
    ));
    items.push(item("4: ϰ positive", if c.kappa.is_positive() { 1.0 } else { -1.0 }, format!("ϰ = {}", c.kappa)));
    let mut measures = Vec::new();
    let mut margin5 = f64::INFINITY;
    if m > 3 {
        let forward = measure_z_range(&c.h, 3, m, budget);
        let inverse = measure_z_range(&c.h.inverse(), 3, m, budget);
        for (i, (a, b)) in forward.into_iter().zip(inverse).enumerate() {
            let ell = i + 3;
            let cap = rational_to_f64(&c.upsilon.values[ell]);
            margin5 = margin5.min(cap - a.upper()).min(cap - b.upper());
            measures.push((ell, a, b));
        }
    }
    items.push(item(
        "5: level-set measures below budget",
        if margin5.is_finite() { margin5 } else { 1.0 },
        format!("{} levels checked at the upper 99% bound", measures.len()),
    ));
    let cap = det_cap(m) as f64;
    let range = det_range(&c.h, budget.seed, 20_000);
    let margin6 = (range.0 - 1.0 / cap).min(cap - range.1);
    items.push(item(
        "6: determinant within (1/max(2, m−1), max(2, m−1))",
        margin6,
        format!("sampled det in [{:.6}, {:.6}], cap {cap}", range.0, range.1),
    ));
    ConditionReport { items, measures, det_range: range }
}

/// The rational small-change radius `ζ`: the smallest margin of the
/// level-set budgets and a quarter of the slack in the budget sum.
pub fn small_change_zeta(c: &Condition, theta: f64, budget: &MeasureBudget) -> Result<Rational, AcError> {
    let report = check_condition(c, theta, budget);
    if !report.pass() {
        let failed: Vec<String> = report.failures().iter().map(|i| i.item.clone()).collect();
        return Err(AcError::InvalidCondition(failed.join("; ")));
    }
    zeta_from_report(c, &report)
}

fn zeta_from_report(c: &Condition, report: &ConditionReport) -> Result<Rational, AcError> {
    let slack = Rational::one() - c.upsilon.weighted_sum();
    let mut zeta = slack / rat(4);
    for (ell, a, b) in &report.measures {
        let cap = &c.upsilon.values[*ell];
        let worst = a.upper().max(b.upper());
        let margin = rational_floor(rational_to_f64(cap) - worst, RATIONAL_BITS)?;
        if !margin.is_positive() {
            return Err(AcError::InvalidCondition(format!("no margin left at ℓ = {ell}")));
        }
        if margin < zeta {
            zeta = margin;
        }
    }
    if !zeta.is_positive() {
        return Err(AcError::InvalidCondition("budget sum leaves no slack".into()));
    }
    Ok(zeta)
}

/// Result of extending a condition to a nearby map.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetExtension {
    pub condition: Condition,
    pub zeta: Rational,
    /// `Σ ℓΥ′(ℓ)` over the newly added levels.
    pub added_mass: Rational,
    pub distance: f64,
}

/// Smallest `m >= floor` with `1/max(2, m−1) < det < max(2, m−1)` on the
/// sampled range, or an error when the determinant is not positive.
pub fn level_count_for(range: (f64, f64), floor: usize) -> Result<usize, AcError> {
    let (lo, hi) = range;
    if !(lo > 0.0 && hi.is_finite()) {
        return Err(AcError::InvalidCondition(format!("sampled det J range [{lo:.4e}, {hi:.4e}] is not positive and finite")));
    }
    let bound = hi.max(1.0 / lo) * (1.0 + 1e-12);
    // det_cap(m) = max(2, m − 1) must exceed `bound`.
    let needed = (bound.floor() as usize + 2).max(2);
    let mut m = floor.max(if det_cap(floor) as f64 > bound { floor } else { needed });
    while det_cap(m) as f64 <= bound {
        m += 1;
    }
    Ok(m)
}

/// New `(ϰ′, Υ′)` making `(σ, g, ϰ′, Υ′)` extend `c`. `s_bar` and `t_bar`
/// bound the measures of the closures of `{g ≠ h}` and `{g⁻¹ ≠ h⁻¹}`.
pub fn extend_budget(
    c: &Condition,
    g: &TwistMap,
    theta: f64,
    s_bar: f64,
    t_bar: f64,
    budget: &MeasureBudget,
) -> Result<BudgetExtension, AcError> {
    let report = check_condition(c, theta, budget);
    if !report.pass() {
        let failed: Vec<String> = report.failures().iter().map(|i| i.item.clone()).collect();
        return Err(AcError::InvalidCondition(failed.join("; ")));
    }
    let zeta = zeta_from_report(c, &report)?;
    let zeta_f = rational_to_f64(&zeta);
    let kappa = rational_to_f64(&c.kappa);
    let distance = if g == &c.h { 0.0 } else { distance_d(&c.h, g, &VerifyBudget::light().with_seed(budget.seed)).value };
    if distance >= kappa {
        return Err(AcError::ExtensionImpossible(format!("d(g, h) ≈ {distance:.4e} is not below ϰ = {kappa:.4e}")));
    }
    if s_bar > zeta_f || t_bar > zeta_f {
        return Err(AcError::ExtensionImpossible(format!(
            "changed regions measure {s_bar:.4e} and {t_bar:.4e}, above ζ = {zeta_f:.4e}"
        )));
    }
    let residual = c.sigma.pairs.iter().map(|(d, e)| (g.eval(d) - e).norm()).fold(0.0, f64::max);
    if residual > 1e-9 {
        return Err(AcError::ExtensionImpossible(format!("g misses σ by {residual:.3e}")));
    }
    let kappa_new = rational_floor((kappa - distance) / 2.0, RATIONAL_BITS)?;
    if !kappa_new.is_positive() {
        return Err(AcError::ExtensionImpossible("no room for a smaller ϰ".into()));
    }
    let m = c.upsilon.m();
    let range = if g == &c.h { report.det_range } else { det_range(g, budget.seed, 20_000) };
    let m_new = level_count_for(range, m)?;
    let mut values = c.upsilon.values.clone();
    let mut added = Rational::zero();
    if m_new > m {
        let start = m.max(3);
        let fwd = measure_z_range(g, start, m_new, budget);
        let inv = measure_z_range(&g.inverse(), start, m_new, budget);
        while values.len() < start.min(m_new) {
            values.push(rat(1));
        }
        for (i, (a, b)) in fwd.iter().zip(&inv).enumerate() {
            let ell = start + i;
            let base = a.upper() + b.upper();
            let target = base + zeta_f / (2 * m_new) as f64;
            let value = rational_ceil(target, RATIONAL_BITS)?;
            if rational_to_f64(&value) >= base + zeta_f / m_new as f64 {
                return Err(AcError::ExtensionImpossible(format!("cannot fit Υ′({ell}) in its window")));
            }
            added += &value * rat(ell as i64);
            values.push(value);
        }
    }
    let upsilon = Budget::new(values);
    let condition = Condition { sigma: c.sigma.clone(), h: g.clone(), kappa: kappa_new, upsilon };
    if condition.upsilon.weighted_sum() >= Rational::one() {
        return Err(AcError::ExtensionImpossible("budget sum reaches 1".into()));
    }
    if added > &zeta * rat(4) {
        return Err(AcError::ExtensionImpossible(format!("added mass {} exceeds 4ζ", rational_to_f64(&added))));
    }
    // Old levels need no new sampling: Z^g_ℓ lies in Z^h_ℓ together with
    // the changed region, and the margin of every old level is at least ζ.
    Ok(BudgetExtension { condition, zeta, added_mass: added, distance })
}

/// Build a condition around `h` with the recipe `Υ(ℓ) = measured + CI +
/// slack`, choosing `m` from the sampled determinant range.
pub fn auto_condition(sigma: &FiniteRelation, h: &TwistMap, kappa: Rational, budget: &MeasureBudget) -> Result<Condition, AcError> {
    let range = det_range(h, budget.seed, 20_000);
    let m = level_count_for(range, 2)?;
    let mut values: Vec<Rational> = (0..m.min(3)).map(|_| rat(1)).collect();
    if m > 3 {
        let fwd = measure_z_range(h, 3, m, budget);
        let inv = measure_z_range(&h.inverse(), 3, m, budget);
        let slack = 1.0 / (16.0 * (m * m) as f64);
        for (a, b) in fwd.iter().zip(&inv) {
            values.push(rational_ceil(a.upper().max(b.upper()) + slack, RATIONAL_BITS)?);
        }
    }
    let upsilon = Budget::new(values);
    if upsilon.weighted_sum() >= Rational::one() {
        return Err(AcError::InvalidCondition(format!(
            "measured level sets need Σ ℓΥ(ℓ) = {:.4} >= 1",
            upsilon.weighted_sum().to_f64().unwrap_or(f64::NAN)
        )));
    }
    Ok(Condition { sigma: sigma.clone(), h: h.clone(), kappa, upsilon })
}

/// Union of balls, an open set used to probe absolute continuity.
#[derive(Debug, Clone, PartialEq)]
pub struct BallUnion {
    pub balls: Vec<(Vector, f64)>,
}

/// `(μ(U), μ(f(U)))` for a union of balls, the latter by change of
/// variables. Points covered by several balls are down-weighted by their
/// multiplicity, so overlaps are counted once.
pub fn union_and_image_measure(f: &TwistMap, set: &BallUnion, samples: usize, seed: u64) -> (MeasureEstimate, MeasureEstimate) {
    let n = f.dim;
    let vols: Vec<f64> = set.balls.iter().map(|(_, r)| ball_volume(n, *r)).collect();
    let total: f64 = vols.iter().sum();
    if total == 0.0 {
        return (MeasureEstimate::zero(MeasureMethod::MonteCarlo), MeasureEstimate::zero(MeasureMethod::MonteCarlo));
    }
    let mut cumulative = Vec::with_capacity(vols.len());
    let mut acc = 0.0;
    for v in &vols {
        acc += v / total;
        cumulative.push(acc);
    }
    let chunk = 2048;
    let chunks = samples.div_ceil(chunk);
    let parts: Vec<[f64; 4]> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64 + 1);
            let mut s = [0.0; 4];
            for _ in 0..chunk.min(samples - c * chunk) {
                let u = rng.random::<f64>();
                let i = cumulative.partition_point(|&x| x < u).min(vols.len() - 1);
                let (center, r) = &set.balls[i];
                let x = Vector::from_vec(uniform_in_ball(&mut rng, center.as_slice(), *r));
                let mult = set.balls.iter().filter(|(c2, r2)| (&x - c2).norm() <= *r2).count().max(1) as f64;
                let a = 1.0 / mult;
                let b = f.jacobian(&x).determinant().abs() / mult;
                s[0] += a;
                s[1] += a * a;
                s[2] += b;
                s[3] += b * b;
            }
            s
        })
        .collect();
    let sum = |i: usize| parts.iter().map(|p| p[i]).sum::<f64>();
    let est = |s1: f64, s2: f64| {
        let mean = s1 / samples as f64;
        let var = (s2 / samples as f64 - mean * mean).max(0.0);
        MeasureEstimate {
            value: total * mean,
            half_width: total * Z99 * (var / samples as f64).sqrt(),
            method: MeasureMethod::MonteCarlo,
            samples,
        }
    };
    (est(sum(0), sum(1)), est(sum(2), sum(3)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::budget::ratio;
    use crate::map_algebra::{vector, AnalyticMap, RadialWeight, Stage};

    fn dilation(scale: f64, p: f64, q: f64) -> TwistMap {
        TwistMap::from_stages(
            2,
            vec![Stage::GlobalC1(AnalyticMap::RadialScale {
                center: vector(&[0.0, 0.0]),
                scale,
                weight: RadialWeight::plateau(p, q).unwrap(),
            })],
        )
        .with_certificate(Some(std::f64::consts::FRAC_PI_2))
    }

    #[test]
    fn identity_measures_vanish() {
        let id = TwistMap::identity(2);
        let m = measure_z(&id, &LevelSet::z(3), &MeasureBudget::light()).unwrap();
        assert_eq!(m.value, 0.0);
        assert!(measure_z(&id, &LevelSet::interval(0.5, 2.0), &MeasureBudget::light()).is_err());
        let report = check_psi_bound(&id, 2, &MeasureBudget::light());
        assert_eq!(report.status, SandwichStatus::Pass);
        assert_eq!(report.image.value, 0.0);
    }

    #[test]
    fn dilation_plateau_area() {
        let f = dilation(2.0, 0.5, 2.0);
        let est = measure_z(&f, &LevelSet::interval(3.0, 4.0), &MeasureBudget::default()).unwrap();
        // det = 4 on the plateau; in the shell det = ν(ν + rν′) moves from 4
        // down to 1, so part of the shell adds to [3, 4].
        let plateau = std::f64::consts::PI * 0.25;
        assert!(est.value >= plateau - est.half_width);
        let grid = measure_z(&f, &LevelSet::interval(3.0, 4.0), &MeasureBudget { grid: Some(600), ..MeasureBudget::default() })
            .unwrap();
        assert!((grid.value - est.value).abs() <= est.half_width + 0.01, "{grid:?} {est:?}");
        // Z_ℓ is the same set as the interval [ℓ − 1, ℓ].
        for ell in 3..=5 {
            let a = measure_z(&f, &LevelSet::z(ell), &MeasureBudget::light()).unwrap();
            let b = measure_z(&f, &LevelSet::interval(ell as f64 - 1.0, ell as f64), &MeasureBudget::light()).unwrap();
            assert_eq!(a, b);
        }
        let report = check_psi_bound(&f, 3, &MeasureBudget::default());
        assert_eq!(report.status, SandwichStatus::Pass);
        assert!(report.image.value >= 4.0 * plateau - report.image.half_width);
    }

    #[test]
    fn certificates() {
        let id = TwistMap::identity(2);
        let c = ac_certificate(&id, 0.1, AcMode::Measured(MeasureBudget::light())).unwrap();
        assert_eq!(c.k, 2);
        assert!((c.delta - 0.025).abs() < 1e-15);
        let b = Budget::new(vec![rat(1), rat(1), rat(1), ratio(1, 100)]);
        let eps = rational_from_f64(0.5).unwrap();
        assert!(budget_admits(&b, 3, &eps));
        assert_eq!(&eps / rat(6), ratio(1, 12));
        let cert = ac_certificate(&id, 0.5, AcMode::Budget(&b)).unwrap();
        assert_eq!(cert.k, 2);
        assert_eq!(cert.delta_exact, Some(ratio(1, 8)));
        for e in [0.5, 0.1, 0.01] {
            let c = ac_certificate(&id, e, AcMode::Budget(&b)).unwrap();
            assert_eq!(c.delta, e / (2 * c.k) as f64);
        }
        let tight = ac_certificate(&id, 0.01, AcMode::Budget(&b)).unwrap();
        assert_eq!(tight.k, 3);
    }

    #[test]
    fn condition_checks() {
        let id = TwistMap::identity(2).with_certificate(Some(0.0));
        let c = Condition { sigma: FiniteRelation::new(vec![]), h: id.clone(), kappa: rat(1), upsilon: Budget::empty() };
        let report = check_condition(&c, 1.0, &MeasureBudget::light());
        assert!(report.pass(), "{:?}", report.failures());
        assert_eq!(small_change_zeta(&c, 1.0, &MeasureBudget::light()).unwrap(), ratio(1, 4));
        let bad = Condition { upsilon: Budget::new(vec![rat(1), rat(1), rat(1), ratio(1, 3)]), ..c.clone() };
        let report = check_condition(&bad, 1.0, &MeasureBudget::light());
        let two = &report.items[1];
        assert!(!two.pass);
        assert_eq!(two.margin, 0.0);
        let ext = extend_budget(&c, &id, 1.0, 0.0, 0.0, &MeasureBudget::light()).unwrap();
        assert_eq!(ext.condition.upsilon, c.upsilon);
        assert!(ext.condition.kappa < c.kappa);
    }

    #[test]
    fn dilation_condition_extends() {
        let f = dilation(1.6, 0.1, 0.6);
        let sigma = FiniteRelation::new(vec![(vector(&[0.0, 0.0]), vector(&[0.0, 0.0]))]);
        let c = auto_condition(&sigma, &f, rat(1), &MeasureBudget::light()).unwrap();
        let report = check_condition(&c, 2.0, &MeasureBudget::light());
        assert!(report.pass(), "{:?}", report.failures());
        let zeta = small_change_zeta(&c, 2.0, &MeasureBudget::light()).unwrap();
        assert!(zeta <= ratio(1, 4));
        // Changing the map on the whole ball is too large a change.
        let g = dilation(1.62, 0.1, 0.6);
        let area = std::f64::consts::PI * 0.36;
        match extend_budget(&c, &g, 2.0, area, area, &MeasureBudget::light()) {
            Err(AcError::ExtensionImpossible(msg)) => assert!(msg.contains("ζ")),
            other => panic!("unexpected {other:?}"),
        }
        // A strong dilation on a tiny disc away from the first one.
        let mut stages = f.stages.clone();
        stages.push(Stage::GlobalC1(AnalyticMap::RadialScale {
            center: vector(&[2.0, 0.0]),
            scale: 1.3,
            weight: RadialWeight::plateau(0.005, 0.02).unwrap(),
        }));
        let g = TwistMap::from_stages(2, stages).with_certificate(f.certified_twist);
        let small = std::f64::consts::PI * 0.02 * 0.02;
        let ext = extend_budget(&c, &g, 2.0, small, small, &MeasureBudget::light()).unwrap();
        assert!(ext.condition.upsilon.weighted_sum() < Rational::one());
        assert!(c.upsilon.is_prefix_of(&ext.condition.upsilon));
        assert!(ext.added_mass <= zeta * rat(4));
    }

    #[test]
    fn union_measure_counts_overlap_once() {
        let id = TwistMap::identity(2);
        let u = BallUnion { balls: vec![(vector(&[0.0, 0.0]), 1.0), (vector(&[0.0, 0.0]), 1.0)] };
        let (mu, image) = union_and_image_measure(&id, &u, 10_000, 1);
        assert!((mu.value - std::f64::consts::PI).abs() < 1e-12);
        assert!((image.value - std::f64::consts::PI).abs() < 1e-12);
        let f = dilation(2.0, 0.5, 2.0);
        let small = BallUnion { balls: vec![(vector(&[0.1, 0.0]), 0.1)] };
        let (mu, image) = union_and_image_measure(&f, &small, 10_000, 2);
        assert!((image.value - 4.0 * mu.value).abs() < 1e-9);
    }
}
