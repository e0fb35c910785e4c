//! Exact rational one-dimensional machinery: piecewise-linear extensions of
//! finite increasing bijections, level-set measures, budgeted line
//! conditions, their merge, and witnesses of the failure of absolute
//! continuity.

use num_bigint::BigInt;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::budget::{det_cap, rat, rational_string, Budget, Rational};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LineError {
    #[error("pairs are not strictly increasing in both coordinates at index {index}")]
    NotIncreasing { index: usize },
    #[error("level index {ell} is below 3, where the level set has infinite measure")]
    LevelTooSmall { ell: usize },
    #[error("merge hypothesis failed: {0}")]
    Incompatible(String),
}

/// A point `(d, e)` of the graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Knot {
    #[serde(with = "rational_string")]
    pub d: Rational,
    #[serde(with = "rational_string")]
    pub e: Rational,
}

impl Knot {
    pub fn new(d: Rational, e: Rational) -> Self {
        Self { d, e }
    }
}

/// One interior linear piece of a [`PLMap`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub d0: Rational,
    pub d1: Rational,
    pub e0: Rational,
    pub e1: Rational,
}

impl Segment {
    pub fn length(&self) -> Rational {
        &self.d1 - &self.d0
    }

    pub fn image_length(&self) -> Rational {
        &self.e1 - &self.e0
    }

    pub fn slope(&self) -> Rational {
        self.image_length() / self.length()
    }
}

/// Piecewise-linear interpolation of a finite increasing bijection, with
/// slope 1 outside the hull of its domain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PLMap {
    pub knots: Vec<Knot>,
}

/// Check that pairs sorted by `d` are strictly increasing in both entries.
fn validate_increasing(knots: &[Knot]) -> Result<(), LineError> {
    for (i, w) in knots.windows(2).enumerate() {
        if !(w[0].d < w[1].d && w[0].e < w[1].e) {
            return Err(LineError::NotIncreasing { index: i + 1 });
        }
    }
    Ok(())
}

/// Build the piecewise-linear extension of `sigma`.
pub fn pl_extend(sigma: &[Knot]) -> Result<PLMap, LineError> {
    let mut knots = sigma.to_vec();
    knots.sort_by(|a, b| a.d.cmp(&b.d));
    validate_increasing(&knots)?;
    Ok(PLMap { knots })
}

impl PLMap {
    pub fn identity() -> Self {
        Self { knots: Vec::new() }
    }

    /// Evaluate exactly.
    pub fn eval(&self, x: &Rational) -> Rational {
        let k = &self.knots;
        if k.is_empty() {
            return x.clone();
        }
        if x <= &k[0].d {
            return x + (&k[0].e - &k[0].d);
        }
        let last = &k[k.len() - 1];
        if x >= &last.d {
            return x + (&last.e - &last.d);
        }
        let idx = k.partition_point(|kn| &kn.d <= x);
        let (a, b) = (&k[idx - 1], &k[idx]);
        &a.e + (&b.e - &a.e) * (x - &a.d) / (&b.d - &a.d)
    }

    /// The extension of the transposed relation, which is the inverse map.
    pub fn inverse(&self) -> PLMap {
        PLMap { knots: self.knots.iter().map(|kn| Knot::new(kn.e.clone(), kn.d.clone())).collect() }
    }

    /// Interior segments between consecutive knots.
    pub fn segments(&self) -> Vec<Segment> {
        self.knots
            .windows(2)
            .map(|w| Segment { d0: w[0].d.clone(), d1: w[1].d.clone(), e0: w[0].e.clone(), e1: w[1].e.clone() })
            .collect()
    }

    pub fn slopes(&self) -> Vec<Rational> {
        self.segments().iter().map(Segment::slope).collect()
    }

    /// Total length of interior segments whose slope is at least `k`.
    pub fn measure_w(&self, k: &Rational) -> Rational {
        self.segments().iter().filter(|s| &s.slope() >= k).fold(Rational::zero(), |a, s| a + s.length())
    }

    /// `μ(h(W_k)) = ∫_{W_k} h′`: image length of the segments with slope `>= k`.
    pub fn image_measure_w(&self, k: &Rational) -> Rational {
        self.segments().iter().filter(|s| &s.slope() >= k).fold(Rational::zero(), |a, s| a + s.image_length())
    }
}

/// Exact measure of `Z_ℓ = {x : ℓ−1 <= h′(x) <= ℓ}` for `ℓ >= 3`.
pub fn pl_measure_z(h: &PLMap, ell: usize) -> Result<Rational, LineError> {
    if ell < 3 {
        return Err(LineError::LevelTooSmall { ell });
    }
    let lo = rat(ell as i64 - 1);
    let hi = rat(ell as i64);
    Ok(h
        .segments()
        .iter()
        .filter(|s| {
            let m = s.slope();
            m >= lo && m <= hi
        })
        .fold(Rational::zero(), |a, s| a + s.length()))
}

/// Exact parts of the sandwich `(1/3)Σ_{ℓ>k} ℓμ(Z_ℓ) <= μ(h(W_k)) <= Σ_{ℓ>k} ℓμ(Z_ℓ)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExactSandwich {
    pub k: usize,
    pub level_sum: Rational,
    pub image_measure: Rational,
    pub holds: bool,
}

/// Evaluate the sandwich exactly for `k >= 2`.
pub fn exact_sandwich(h: &PLMap, k: usize) -> ExactSandwich {
    let k = k.max(2);
    let max_slope = h.slopes().into_iter().max().unwrap_or_else(Rational::one);
    let top = ceil_to_usize(&max_slope) + 1;
    let mut level_sum = Rational::zero();
    for ell in (k + 1)..=top.max(k + 1) {
        level_sum += rat(ell as i64) * pl_measure_z(h, ell).unwrap_or_else(|_| Rational::zero());
    }
    let image_measure = h.image_measure_w(&rat(k as i64));
    let holds = &level_sum / rat(3) <= image_measure && image_measure <= level_sum;
    ExactSandwich { k, level_sum, image_measure, holds }
}

fn ceil_to_usize(r: &Rational) -> usize {
    let c = r.ceil().to_integer();
    c.to_usize().unwrap_or(usize::MAX / 2)
}

/// A budgeted one-dimensional condition `(σ, Υ)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineCondition {
    pub sigma: Vec<Knot>,
    pub budget: Budget,
}

/// Outcome of one numbered item of a condition check.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemCheck {
    pub item: u8,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineDiagnostic {
    pub items: Vec<ItemCheck>,
}

impl LineDiagnostic {
    pub fn pass(&self) -> bool {
        self.items.iter().all(|i| i.pass)
    }

    pub fn item(&self, n: u8) -> Option<&ItemCheck> {
        self.items.iter().find(|i| i.item == n)
    }
}

impl LineCondition {
    pub fn new(sigma: Vec<Knot>, budget: Budget) -> Self {
        let mut sigma = sigma;
        sigma.sort_by(|a, b| a.d.cmp(&b.d));
        Self { sigma, budget }
    }

    pub fn empty() -> Self {
        Self { sigma: Vec::new(), budget: Budget::empty() }
    }

    pub fn m(&self) -> usize {
        self.budget.m()
    }

    pub fn pl_map(&self) -> Result<PLMap, LineError> {
        pl_extend(&self.sigma)
    }
}

/// Exact check of items (1)–(4) of a budgeted line condition.
pub fn check_1d_condition(c: &LineCondition) -> LineDiagnostic {
    let mut items = Vec::new();
    let map = pl_extend(&c.sigma);
    let positive = c.budget.all_positive();
    items.push(ItemCheck {
        item: 1,
        pass: map.is_ok() && positive,
        detail: match (&map, positive) {
            (Err(e), _) => e.to_string(),
            (_, false) => "budget has a non-positive entry".into(),
            _ => "increasing bijection with positive rational budget".into(),
        },
    });
    let sum = c.budget.weighted_sum();
    items.push(ItemCheck {
        item: 2,
        pass: sum < Rational::one(),
        detail: format!("sum of l*U(l) = {}", crate::budget::format_rational(&sum)),
    });
    let Ok(h) = map else {
        items.push(ItemCheck { item: 3, pass: false, detail: "no map".into() });
        items.push(ItemCheck { item: 4, pass: false, detail: "no map".into() });
        return LineDiagnostic { items };
    };
    let hinv = h.inverse();
    let mut failures = Vec::new();
    for ell in 3..c.m() {
        let bound = &c.budget.values[ell];
        let z = pl_measure_z(&h, ell).expect("ell >= 3");
        let zi = pl_measure_z(&hinv, ell).expect("ell >= 3");
        if !(&z < bound && &zi < bound) {
            failures.push(format!("l = {ell}: mu(Z) = {z}, mu(Z inv) = {zi}, U = {bound}"));
        }
    }
    items.push(ItemCheck {
        item: 3,
        pass: failures.is_empty(),
        detail: if failures.is_empty() { "all level sets within budget".into() } else { failures.join("; ") },
    });
    let cap = rat(det_cap(c.m()) as i64);
    let bad: Vec<String> = h
        .slopes()
        .iter()
        .filter(|s| !(Rational::one() / &cap < **s && **s < cap))
        .map(|s| s.to_string())
        .collect();
    items.push(ItemCheck {
        item: 4,
        pass: bad.is_empty(),
        detail: if bad.is_empty() { format!("slopes inside (1/{cap}, {cap})") } else { format!("slopes out of range: {}", bad.join(", ")) },
    });
    LineDiagnostic { items }
}

/// Smallest `m̂ >= m` for which every slope lies in `(1/max(2,m̂−1), max(2,m̂−1))`.
pub fn minimal_cap_index(slopes: &[Rational], m: usize) -> usize {
    let mut worst = Rational::one();
    for s in slopes {
        let r = if s >= &Rational::one() { s.clone() } else { Rational::one() / s };
        if r > worst {
            worst = r;
        }
    }
    if worst < rat(2) {
        return m;
    }
    // max(2, m̂ − 1) must exceed worst, so m̂ − 1 >= floor(worst) + 1.
    let needed = (worst.floor().to_integer() + BigInt::from(2)).to_usize().unwrap_or(usize::MAX / 2);
    m.max(needed)
}

/// Result of merging two compatible line conditions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeOutcome {
    pub merged: LineCondition,
    pub m_hat: usize,
    /// `c_ℓ` for `m <= ℓ < m̂`.
    pub counts: Vec<(usize, usize)>,
    /// Mass `Σ_{m<=ℓ<m̂} ℓ·Υ̂(ℓ)` added to the budget sum.
    pub added_mass: Rational,
}

fn slope_of(d0: &Rational, e0: &Rational, d1: &Rational, e1: &Rational) -> Rational {
    (e1 - e0) / (d1 - d0)
}

fn in_level(s: &Rational, ell: i64) -> bool {
    s >= &rat(ell - 1) && s <= &rat(ell)
}

/// Merge `p_α` and `p_β` sharing the budget `Υ`, given the margin `ε` and
/// common size `t`, into a condition below both.
pub fn merge_1d(pa: &LineCondition, pb: &LineCondition, eps: &Rational, t: usize) -> Result<MergeOutcome, LineError> {
    let fail = |s: String| Err(LineError::Incompatible(s));
    if pa.budget != pb.budget {
        return fail("budgets differ".into());
    }
    if pa.sigma.len() != t || pb.sigma.len() != t {
        return fail(format!("sizes must both equal t = {t}"));
    }
    if !eps.is_positive() {
        return fail("epsilon must be positive".into());
    }
    let a = pl_extend(&pa.sigma)?;
    let b = pl_extend(&pb.sigma)?;
    let (ka, kb) = (&a.knots, &b.knots);
    let budget = &pa.budget;
    let m = budget.m();
    if t == 0 {
        return Ok(MergeOutcome { merged: pa.clone(), m_hat: m, counts: Vec::new(), added_mass: Rational::zero() });
    }
    let t_rat = rat(t as i64);
    let closeness = eps / (rat(4) * &t_rat);
    for i in 0..t {
        if (&ka[i].d - &kb[i].d).abs() >= closeness || (&ka[i].e - &kb[i].e).abs() >= closeness {
            return fail(format!("index {i} is not within eps/(4t)"));
        }
        for j in (i + 1)..t {
            let ok = ka[i].d < kb[j].d && kb[i].d < ka[j].d && ka[i].e < kb[j].e && kb[i].e < ka[j].e;
            if !ok {
                return fail(format!("indices {i} < {j} are not interleaved"));
            }
        }
        let dd = &kb[i].d - &ka[i].d;
        let de = &kb[i].e - &ka[i].e;
        if dd.signum() != de.signum() {
            return fail(format!("index {i} pairs are not order compatible"));
        }
    }
    if !(budget.weighted_sum() < Rational::one() - eps) {
        return fail("budget sum is not below 1 - eps".into());
    }
    for (name, map) in [("alpha", &a), ("beta", &b)] {
        let inv = map.inverse();
        for ell in 3..m {
            let room = &budget.values[ell] - eps;
            if !(pl_measure_z(map, ell)? < room && pl_measure_z(&inv, ell)? < room) {
                return fail(format!("{name} has no eps margin at level {ell}"));
            }
        }
    }
    // Consecutive-index slope exclusion, for the map and for its inverse.
    for i in 0..t.saturating_sub(1) {
        let sides = [(ka, ka), (ka, kb), (kb, ka), (kb, kb)];
        let forward: Vec<Rational> =
            sides.iter().map(|(x, y)| slope_of(&x[i].d, &x[i].e, &y[i + 1].d, &y[i + 1].e)).collect();
        let backward: Vec<Rational> = forward.iter().map(|s| Rational::one() / s).collect();
        for (label, slopes) in [("slope", &forward), ("inverse slope", &backward)] {
            let top = slopes.iter().map(ceil_to_usize).max().unwrap_or(1) as i64 + 1;
            for ell in 1..=top {
                let members = slopes.iter().filter(|s| in_level(s, ell)).count();
                if members != 0 && members != slopes.len() {
                    return fail(format!("{label} exclusion fails between indices {i} and {} at level {ell}", i + 1));
                }
            }
        }
    }
    let mut union: Vec<Knot> = ka.iter().chain(kb.iter()).cloned().collect();
    union.sort_by(|x, y| x.d.cmp(&y.d).then(x.e.cmp(&y.e)));
    union.dedup();
    let merged_map = pl_extend(&union).map_err(|e| LineError::Incompatible(format!("union is not increasing: {e}")))?;
    let m_hat = minimal_cap_index(&merged_map.slopes(), m);
    let mut counts = Vec::new();
    let mut extra: Vec<Rational> = Vec::new();
    for ell in m..m_hat {
        let mut c = 0usize;
        for i in 0..t {
            if ka[i] == kb[i] {
                continue;
            }
            let s = slope_of(&ka[i].d, &ka[i].e, &kb[i].d, &kb[i].e);
            if in_level(&s, ell as i64) {
                c += 1;
            }
            if in_level(&(Rational::one() / &s), ell as i64) {
                c += 1;
            }
        }
        counts.push((ell, c));
        extra.push(rat(c as i64) * eps / (rat(2) * &t_rat * rat(ell as i64)));
    }
    fill_empty_levels(&mut extra, m, eps, &merged_map)?;
    let added_mass = extra
        .iter()
        .enumerate()
        .filter(|(j, _)| m + j >= 3)
        .fold(Rational::zero(), |acc, (j, v)| acc + v * rat((m + j) as i64));
    let merged = LineCondition { sigma: union, budget: budget.extended(extra) };
    Ok(MergeOutcome { merged, m_hat, counts, added_mass })
}

/// Budgets must be positive, but levels with `c_ℓ = 0` receive `Υ̂(ℓ) = 0`
/// from the closed formula. Such levels have empty level sets, so they get a
/// share of the unused part of the `ε` allowance. When the allowance is used
/// up exactly, one positive entry is lowered by half its gap above the exact
/// level-set measure and the freed mass is shared out.
fn fill_empty_levels(extra: &mut [Rational], m: usize, eps: &Rational, merged: &PLMap) -> Result<(), LineError> {
    let zeros: Vec<usize> = (0..extra.len()).filter(|&j| extra[j].is_zero()).collect();
    if zeros.is_empty() {
        return Ok(());
    }
    let weight = |j: usize| rat((m + j).max(1) as i64);
    let used = (0..extra.len()).fold(Rational::zero(), |acc, j| acc + &extra[j] * weight(j));
    let mut spare = eps - used;
    if !spare.is_positive() {
        let inv = merged.inverse();
        let donor = (0..extra.len()).filter(|&j| extra[j].is_positive()).find_map(|j| {
            let ell = m + j;
            let z = pl_measure_z(merged, ell).ok()?.max(pl_measure_z(&inv, ell).ok()?);
            let gap = &extra[j] - z;
            gap.is_positive().then_some((j, gap))
        });
        let Some((j, gap)) = donor else {
            return Err(LineError::Incompatible("no budget slack for empty levels".into()));
        };
        let cut = gap / rat(2);
        extra[j] -= &cut;
        spare = cut * weight(j);
    }
    let share = spare / rat(2 * zeros.len() as i64);
    for &j in &zeros {
        extra[j] = &share / weight(j);
    }
    Ok(())
}

/// Witness of `Δ_n` together with its exact measure report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeltaWitness {
    pub n: u32,
    pub map: PLMap,
    /// Total domain length of segments with slope above `2^n`.
    pub steep_domain: Rational,
    /// Image length of the steep segments.
    pub steep_image: Rational,
    /// Domain length of segments with slope below `2^{−n}`.
    pub shallow_domain: Rational,
    /// Image length of the shallow segments.
    pub shallow_image: Rational,
    /// `e¹ − e⁰`.
    pub range_span: Rational,
    /// `d¹ − d⁰`.
    pub domain_span: Rational,
    /// `steep_domain <= 2^{−n}(e¹ − e⁰)`.
    pub steep_bound_holds: bool,
    /// `steep_image >= (e¹ − e⁰) − 2^{−n}(d¹ − d⁰)`.
    pub image_bound_holds: bool,
    /// Every gap slope avoids `[2^{−n}, 2^n]`, with `d⁰, e⁰ <= −n` and `d¹, e¹ >= n`.
    pub in_delta_n: bool,
    /// Whether any budget could admit it: the steep part alone forces
    /// `Σ ℓΥ(ℓ) >= 1`, so this is always false.
    pub budget_admissible: bool,
}

/// Three segments (steep, shallow, steep) of equal range mass `n`, with
/// slopes `2^{n+1}` and `2^{−(n+1)}`, centred at the origin.
pub fn delta_n_witness(n: u32) -> DeltaWitness {
    let n = n.max(1);
    let nn = rat(n as i64);
    let two_pow = Rational::from_integer(BigInt::from(2u32).pow(n + 1));
    let steep_len = &nn / &two_pow;
    let shallow_len = &nn * &two_pow;
    let half_shallow = &shallow_len / rat(2);
    let half_range = &nn / rat(2);
    let knots = vec![
        Knot::new(-(&half_shallow + &steep_len), -(&half_range + &nn)),
        Knot::new(-half_shallow.clone(), -half_range.clone()),
        Knot::new(half_shallow.clone(), half_range.clone()),
        Knot::new(&half_shallow + &steep_len, &half_range + &nn),
    ];
    let map = pl_extend(&knots).expect("witness is increasing");
    let lo = Rational::one() / Rational::from_integer(BigInt::from(2u32).pow(n));
    let hi = Rational::from_integer(BigInt::from(2u32).pow(n));
    let mut steep_domain = Rational::zero();
    let mut steep_image = Rational::zero();
    let mut shallow_domain = Rational::zero();
    let mut shallow_image = Rational::zero();
    let mut gaps_ok = true;
    for s in map.segments() {
        let slope = s.slope();
        if slope > hi {
            steep_domain += s.length();
            steep_image += s.image_length();
        } else if slope < lo && slope.is_positive() {
            shallow_domain += s.length();
            shallow_image += s.image_length();
        } else {
            gaps_ok = false;
        }
    }
    let first = &map.knots[0];
    let last = &map.knots[map.knots.len() - 1];
    let range_span = &last.e - &first.e;
    let domain_span = &last.d - &first.d;
    let ends_ok = first.d <= -nn.clone() && first.e <= -nn.clone() && last.d >= nn && last.e >= nn;
    let steep_bound_holds = steep_domain <= &lo * &range_span;
    let image_bound_holds = steep_image >= &range_span - &lo * &domain_span;
    // Any budget would need ℓ·Υ(ℓ) > ℓ·μ(Z_ℓ) at the steep level ℓ = 2^{n+1}.
    let steep_level_mass = &two_pow * &steep_domain;
    let budget_admissible = steep_level_mass < Rational::one();
    DeltaWitness {
        n,
        map,
        steep_domain,
        steep_image,
        shallow_domain,
        shallow_image,
        range_span,
        domain_span,
        steep_bound_holds,
        image_bound_holds,
        in_delta_n: gaps_ok && ends_ok,
        budget_admissible,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::budget::ratio;

    fn knots(v: &[(i64, i64)]) -> Vec<Knot> {
        v.iter().map(|&(d, e)| Knot::new(rat(d), rat(e))).collect()
    }

    #[test]
    fn extension_and_tails() {
        let h = pl_extend(&knots(&[(0, 0), (1, 2), (2, 3)])).unwrap();
        assert_eq!(h.eval(&ratio(1, 2)), rat(1));
        assert_eq!(h.eval(&rat(5)), rat(6));
        assert_eq!(h.eval(&rat(-3)), rat(-3));
        assert!(pl_extend(&knots(&[(0, 0), (1, -1)])).is_err());
    }

    #[test]
    fn inverse_round_trip() {
        let h = pl_extend(&knots(&[(-3, 1), (0, 2), (4, 9)])).unwrap();
        let hi = h.inverse();
        for x in [-7, -3, -1, 0, 2, 4, 11] {
            let x = ratio(x, 3);
            assert_eq!(hi.eval(&h.eval(&x)), x);
        }
    }

    #[test]
    fn level_measures() {
        let h = pl_extend(&knots(&[(0, 0), (1, 2), (2, 3)])).unwrap();
        assert_eq!(pl_measure_z(&h, 3).unwrap(), rat(1));
        assert_eq!(pl_measure_z(&h, 4).unwrap(), rat(0));
        assert!(pl_measure_z(&h, 2).is_err());
        let id = pl_extend(&knots(&[(0, 0), (1, 1), (5, 5)])).unwrap();
        for ell in 3..10 {
            assert_eq!(pl_measure_z(&id, ell).unwrap(), rat(0));
        }
    }

    #[test]
    fn sandwich_examples() {
        let h = pl_extend(&knots(&[(0, 0), (1, 7), (2, 8), (3, 11)])).unwrap();
        for k in 2..9 {
            let s = exact_sandwich(&h, k);
            assert!(s.holds, "{s:?}");
        }
        let s = exact_sandwich(&h, 2);
        assert_eq!(s.image_measure, rat(10));
    }

    #[test]
    fn condition_checks() {
        assert!(check_1d_condition(&LineCondition::empty()).pass());
        let mut vals = vec![rat(1); 3];
        vals.push(ratio(1, 3));
        let c = LineCondition::new(Vec::new(), Budget::new(vals));
        let d = check_1d_condition(&c);
        assert!(!d.item(2).unwrap().pass);
        assert!(d.item(1).unwrap().pass);
    }

    #[test]
    fn merge_identical_is_identity() {
        let sigma = knots(&[(0, 0), (4, 5), (8, 9)]);
        let budget = Budget::new(vec![rat(1), rat(1), rat(1)]);
        let p = LineCondition::new(sigma, budget);
        assert!(check_1d_condition(&p).pass());
        let out = merge_1d(&p, &p, &ratio(1, 10), 3).unwrap();
        assert_eq!(out.m_hat, 3);
        assert_eq!(out.merged, p);
    }

    #[test]
    fn merge_single_crossing() {
        let budget = Budget::new(vec![rat(1), rat(1), rat(1)]);
        let eps = ratio(1, 5);
        let pa = LineCondition::new(vec![Knot::new(rat(0), rat(0))], budget.clone());
        let pb = LineCondition::new(vec![Knot::new(ratio(1, 100), ratio(4, 100))], budget);
        let out = merge_1d(&pa, &pb, &eps, 1).unwrap();
        // Crossing slope 4 lies in [3,4] and [4,5]; inverse slope 1/4 in none.
        assert_eq!(out.m_hat, 6);
        let l4 = out.counts.iter().find(|(l, _)| *l == 4).unwrap().1;
        assert_eq!(l4, 1);
        // The formula value eps/(2·4) is lowered by half its gap above the
        // level measure 1/100 to fund the empty level 3.
        let formula = &eps / rat(2 * 4);
        assert!(out.merged.budget.values[4] < formula);
        assert!(out.merged.budget.values[4] > ratio(1, 100));
        assert_eq!(out.merged.budget.values[5], &eps / rat(2 * 5));
        assert!(out.added_mass <= eps);
        assert!(check_1d_condition(&out.merged).pass(), "{:?}", check_1d_condition(&out.merged));
    }

    #[test]
    fn delta_witness_n1() {
        let w = delta_n_witness(1);
        let expect = [(-9, 4, -3, 2), (-2, 1, -1, 2), (2, 1, 1, 2), (9, 4, 3, 2)];
        for (kn, &(dp, dq, ep, eq)) in w.map.knots.iter().zip(&expect) {
            assert_eq!(kn.d, ratio(dp, dq));
            assert_eq!(kn.e, ratio(ep, eq));
        }
        let slopes = w.map.slopes();
        assert_eq!(slopes, vec![rat(4), ratio(1, 4), rat(4)]);
        assert!(w.in_delta_n && w.steep_bound_holds && w.image_bound_holds && !w.budget_admissible);
        for n in 1..=8 {
            let w = delta_n_witness(n);
            assert!(w.in_delta_n && w.steep_bound_holds && w.image_bound_holds);
            assert_eq!(&w.steep_image + &w.shallow_image, w.range_span);
        }
    }
}
